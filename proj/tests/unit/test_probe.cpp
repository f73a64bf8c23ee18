#include "rlpo/probe.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace rlpo;
using namespace rlpo::probe;

namespace {

const world::World& default_world() {
  static const world::World w = world::build_world(world::WorldConfig::defaults());
  return w;
}

ProbeModel random_model(std::mt19937_64& rng, std::vector<Eigen::Index> dims, std::size_t l) {
  ProbeModel m;
  m.net = nn::make_mlp<Real>(dims, nn::Activation::relu, nn::Activation::identity, rng);
  std::normal_distribution<double> g(0.0, 0.1);
  for (auto& layer : m.net.layers) layer.bias = Vector::NullaryExpr(layer.out_dim(), [&] { return g(rng); });
  m.layer_index = l;
  m.height = 4;
  m.width = 4;
  for (Eigen::Index i = 0; i < m.net.output_dim(); ++i) m.class_names.push_back("c" + std::to_string(i));
  return m;
}

Image random_image(std::mt19937_64& rng, Eigen::Index h, Eigen::Index w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  return Image::NullaryExpr(h, w, [&] { return u(rng); });
}

}  // namespace

TEST(Train, DefaultWorldReachesHighTestAccuracy) {
  TrainConfig cfg;
  cfg.neutral_images = world::render_random(default_world().config, "neutral", 600);
  const auto t = train_classifier(default_world().dataset, cfg);
  EXPECT_GE(t.report.test_accuracy, 0.95);
  EXPECT_EQ(t.report.epoch_loss.size(), 30u);
}

TEST(Train, TwoHiddenLayersAlsoSeparateClasses) {
  TrainConfig cfg;
  cfg.hidden_dims = {64, 32};
  const auto t = train_classifier(default_world().dataset, cfg);
  EXPECT_GE(t.report.test_accuracy, 0.95);
}

TEST(Train, ZeroEpochsIsNearChance) {
  TrainConfig cfg;
  cfg.epochs = 0;
  const auto t = train_classifier(default_world().dataset, cfg);
  EXPECT_NEAR(t.report.test_accuracy, 1.0 / 3.0, 0.1);
  EXPECT_TRUE(t.report.epoch_loss.empty());
}

TEST(Train, DeterministicGivenSeed) {
  TrainConfig cfg;
  cfg.epochs = 3;
  const auto a = train_classifier(default_world().dataset, cfg);
  const auto b = train_classifier(default_world().dataset, cfg);
  for (std::size_t i = 0; i < a.model.net.depth(); ++i) {
    EXPECT_EQ(a.model.net.layers[i].weight, b.model.net.layers[i].weight);
    EXPECT_EQ(a.model.net.layers[i].bias, b.model.net.layers[i].bias);
  }
}

TEST(Train, DivergenceNamesLastFiniteEpoch) {
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.learning_rate = 1e300;
  try {
    train_classifier(default_world().dataset, cfg);
    FAIL() << "expected divergence";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch"), std::string::npos);
  }
}

TEST(Train, LayerIndexMustNameHiddenLayer) {
  TrainConfig cfg;
  cfg.layer_index = 0;
  EXPECT_THROW(train_classifier(default_world().dataset, cfg), ConfigError);
}

TEST(Activation, IdentityFirstLayerReturnsInput) {
  ProbeModel m;
  m.height = m.width = 2;
  nn::DenseLayer<Real> l0{Matrix::Identity(4, 4), Vector::Zero(4), nn::Activation::identity};
  nn::DenseLayer<Real> l1{Matrix::Ones(2, 4), Vector::Zero(2), nn::Activation::identity};
  m.net.layers = {l0, l1};
  m.class_names = {"a", "b"};
  Image x(2, 2);
  x << 0.1, -0.7, 0.3, 0.9;
  EXPECT_EQ(activation_at_l(m, x), Vector(flatten(x)));
}

TEST(Activation, NegativePreActivationsGiveZero) {
  ProbeModel m;
  m.height = m.width = 2;
  nn::DenseLayer<Real> l0{Matrix::Identity(4, 4), Vector::Constant(4, -5.0), nn::Activation::relu};
  nn::DenseLayer<Real> l1{Matrix::Ones(2, 4), Vector::Zero(2), nn::Activation::identity};
  m.net.layers = {l0, l1};
  m.class_names = {"a", "b"};
  EXPECT_EQ(activation_at_l(m, Image::Constant(2, 2, 0.5)), Vector::Zero(4));
}

TEST(Activation, MatchesStraightLineRecomputation) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 5; ++trial) {
    const auto m = random_model(rng, {16, 7, 5, 3}, 2);
    const Image x = random_image(rng, 4, 4);
    Vector h = flatten(x);
    for (std::size_t i = 0; i < 2; ++i) {
      const auto& l = m.net.layers[i];
      Vector next(l.out_dim());
      for (Eigen::Index r = 0; r < l.out_dim(); ++r) {
        double s = l.bias(r);
        for (Eigen::Index c = 0; c < l.in_dim(); ++c) s += l.weight(r, c) * h(c);
        next(r) = std::max(s, 0.0);
      }
      h = next;
    }
    EXPECT_LT((activation_at_l(m, x) - h).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Activation, HeadOfActivationEqualsFullLogitsExactly) {
  std::mt19937_64 rng(4);
  for (std::size_t l = 1; l <= 2; ++l) {
    const auto m = random_model(rng, {16, 8, 6, 3}, l);
    const Image x = random_image(rng, 4, 4);
    const Vector full = logits(m, Matrix(flatten(x))).col(0);
    EXPECT_EQ(head_logits(m, activation_at_l(m, x)), full);
  }
}

TEST(Activation, WrongInputSizeThrows) {
  std::mt19937_64 rng(5);
  const auto m = random_model(rng, {16, 8, 3}, 1);
  EXPECT_THROW(activation_at_l(m, Image::Zero(3, 3)), ShapeError);
}

TEST(LogitGrad, LinearHeadGivesWeightRow) {
  std::mt19937_64 rng(6);
  const auto m = random_model(rng, {16, 8, 3}, 1);
  const Image x = random_image(rng, 4, 4);
  for (Eigen::Index c = 0; c < 3; ++c)
    EXPECT_EQ(logit_grad_wrt_activation(m, x, c), Vector(m.net.layers[1].weight.row(c).transpose()));
}

TEST(LogitGrad, MatchesFiniteDifferences) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 12; ++trial) {
    const std::size_t l = 1 + static_cast<std::size_t>(trial % 2);
    const auto m = random_model(rng, {16, 10, 8, 6, 3}, l);
    const Image x = random_image(rng, 4, 4);
    const Eigen::Index cls = trial % 3;
    Vector act = activation_at_l(m, x);
    const Vector g = logit_grad_wrt_activation(m, x, cls);
    const double err = fdcheck::gradcheck(act, g, [&] { return head_logits(m, act)(cls); });
    EXPECT_LE(err, 1e-4) << "trial " << trial;
  }
}

TEST(LogitGrad, UniformFinalBiasShiftLeavesGradientUnchanged) {
  std::mt19937_64 rng(8);
  const auto m = random_model(rng, {16, 8, 6, 3}, 1);
  auto shifted = m;
  shifted.net.layers.back().bias.array() += 2.5;
  const Image x = random_image(rng, 4, 4);
  EXPECT_EQ(logit_grad_wrt_activation(m, x, 1), logit_grad_wrt_activation(shifted, x, 1));
}

TEST(LogitGrad, InvalidClassThrows) {
  std::mt19937_64 rng(9);
  const auto m = random_model(rng, {16, 8, 3}, 1);
  EXPECT_THROW(logit_grad_wrt_activation(m, Image::Zero(4, 4), 3), ValidationError);
}

TEST(LogitGrad, BatchAgreesWithSingle) {
  std::mt19937_64 rng(10);
  const auto m = random_model(rng, {16, 8, 6, 3}, 1);
  ImageBatch xs;
  for (int i = 0; i < 4; ++i) xs.push_back(random_image(rng, 4, 4));
  const Matrix g = logit_grads_wrt_activation(m, xs, 2);
  for (int i = 0; i < 4; ++i) EXPECT_LT((g.col(i) - logit_grad_wrt_activation(m, xs[i], 2)).norm(), 1e-12);
}

TEST(Checkpoint, RoundTripPreservesModel) {
  std::mt19937_64 rng(11);
  auto m = random_model(rng, {16, 8, 6, 3}, 2);
  for (auto& l : m.net.layers) {
    l.weight = l.weight.cast<float>().cast<double>();
    l.bias = l.bias.cast<float>().cast<double>();
  }
  const auto path = std::filesystem::temp_directory_path() / "rlpo_probe_roundtrip.f32";
  save_probe(m, path);
  const auto back = load_probe(path);
  EXPECT_EQ(back.layer_index, 2u);
  EXPECT_EQ(back.class_names, m.class_names);
  for (std::size_t i = 0; i < m.net.depth(); ++i) EXPECT_EQ(back.net.layers[i].weight, m.net.layers[i].weight);
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}
