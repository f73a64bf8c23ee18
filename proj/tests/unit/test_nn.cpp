#include "rlpo/nn.hpp"
#include "rlpo/tensor_io.hpp"

#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace rlpo;
using nn::Activation;

namespace {

nn::Mlp<double> fixed_net() {
  nn::Mlp<double> net;
  nn::DenseLayer<double> l0;
  l0.weight.resize(3, 2);
  l0.weight << 1.0, -2.0, 0.5, 1.0, -1.0, 0.25;
  l0.bias = Eigen::Vector3d(0.1, -0.2, 0.3);
  nn::DenseLayer<double> l1;
  l1.weight.resize(2, 3);
  l1.weight << 1.0, 2.0, -1.0, 0.5, -0.5, 0.25;
  l1.bias = Eigen::Vector2d(0.05, -0.1);
  l1.activation = Activation::identity;
  net.layers = {l0, l1};
  return net;
}

double weighted_output(const nn::Mlp<double>& net, const Matrix& x, const Matrix& g,
                       const nn::AdapterMap<double>* adapters) {
  return nn::forward(net, x, adapters).output().cwiseProduct(g).sum();
}

}  // namespace

TEST(Forward, IdentityLayerPassesInputThrough) {
  nn::Mlp<double> net;
  net.layers.push_back({Matrix::Identity(2, 2), Vector::Zero(2), Activation::identity});
  const Vector y = nn::forward_vector(net, Vector(Eigen::Vector2d(1, 2)));
  EXPECT_EQ(y, Vector(Eigen::Vector2d(1, 2)));
}

TEST(Forward, MatchesStraightLineRecomputation) {
  const auto net = fixed_net();
  const Vector x = Eigen::Vector2d(0.3, -0.7);
  const auto trace = nn::forward(net, Matrix(x));
  EXPECT_NEAR(trace.post[0](0, 0), 1.8, 1e-12);
  EXPECT_EQ(trace.post[0](1, 0), 0.0);
  EXPECT_EQ(trace.post[0](2, 0), 0.0);
  EXPECT_NEAR(trace.output()(0, 0), 1.85, 1e-12);
  EXPECT_NEAR(trace.output()(1, 0), 0.8, 1e-12);

  nn::AdapterMap<double> adapters;
  nn::LoraAdapter<double> ad;
  ad.a = Eigen::Vector3d(0.1, -0.2, 0.3);
  ad.b = Eigen::RowVector2d(0.4, -0.5);
  ad.scale = 2.0;
  adapters[0] = ad;
  const Vector y = nn::forward_vector(net, x, &adapters);
  EXPECT_NEAR(y(0), 1.837, 1e-12);
  EXPECT_NEAR(y(1), 0.87375, 1e-12);
}

TEST(Forward, ZeroAdapterIsExactNoOp) {
  std::mt19937_64 rng(3);
  auto net = nn::make_mlp<double>({5, 7, 4}, Activation::relu, Activation::identity, rng);
  nn::AdapterMap<double> adapters;
  adapters[0] = nn::make_adapter<double>(7, 5, 2, 1.0, rng);
  adapters[1] = nn::make_adapter<double>(4, 7, 2, 1.0, rng);
  const Matrix x = Matrix::Random(5, 6);
  EXPECT_EQ(nn::forward(net, x, &adapters).output(), nn::forward(net, x).output());
}

TEST(Forward, ShapeErrorNamesLayer) {
  const auto net = fixed_net();
  try {
    nn::forward(net, Matrix::Zero(3, 1));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0"), std::string::npos);
  }
}

TEST(Backward, LinearLayerWeightGradientIsOuterProduct) {
  nn::Mlp<double> net;
  net.layers.push_back({Matrix::Random(3, 2), Vector::Zero(3), Activation::identity});
  const Vector x = Eigen::Vector2d(0.5, -1.5);
  const Vector g = Eigen::Vector3d(1.0, 2.0, -3.0);
  const auto trace = nn::forward(net, Matrix(x));
  const auto grads = nn::backward(net, nullptr, trace, Matrix(g), nn::GradRequest::of(nn::GradTarget::all_params));
  EXPECT_TRUE(grads.layers[0].weight.isApprox(g * x.transpose()));
}

TEST(Backward, DeadReluBlocksInputGradient) {
  nn::Mlp<double> net;
  net.layers.push_back({Matrix::Ones(3, 2), Vector::Constant(3, -10.0), Activation::relu});
  net.layers.push_back({Matrix::Ones(1, 3), Vector::Zero(1), Activation::identity});
  const auto trace = nn::forward(net, Matrix(Vector::Ones(2)));
  const auto grads = nn::backward(net, nullptr, trace, Matrix::Ones(1, 1), nn::GradRequest::of(nn::GradTarget::input_only));
  EXPECT_EQ(grads.input, Matrix::Zero(2, 1));
}

TEST(Backward, MissingTraceIsRejected) {
  const auto net = fixed_net();
  nn::ForwardTrace<double> empty;
  EXPECT_THROW(nn::backward(net, nullptr, empty, Matrix::Ones(2, 1), nn::GradRequest{true, false, false}), Error);
}

TEST(Backward, AgreesWithFiniteDifferencesOnRandomNets) {
  for (int trial = 0; trial < 10; ++trial) {
    std::mt19937_64 rng(100 + trial);
    auto net = nn::make_mlp<double>({4, 6, 5, 3}, Activation::relu, Activation::identity, rng);
    for (auto& l : net.layers) l.bias = Vector::Random(l.out_dim()) * 0.1;
    nn::AdapterMap<double> adapters;
    adapters[0] = nn::make_adapter<double>(6, 4, 2, 1.5, rng, 0.3);
    adapters[1] = nn::make_adapter<double>(5, 6, 3, 0.5, rng, 0.3);
    for (auto& [i, ad] : adapters) ad.b = Matrix::Random(ad.b.rows(), ad.b.cols()) * 0.3;
    Matrix x = Matrix::Random(4, 3);
    const Matrix g = Matrix::Random(3, 3);

    const auto trace = nn::forward(net, x, &adapters);
    nn::GradRequest all{true, true, true};
    const auto grads = nn::backward(net, &adapters, trace, g, all);
    auto loss = [&] { return weighted_output(net, x, g, &adapters); };

    for (std::size_t i = 0; i < net.depth(); ++i) {
      EXPECT_LE(fdcheck::gradcheck(net.layers[i].weight, nn::flat(grads.layers[i].weight), loss), 1e-4);
      EXPECT_LE(fdcheck::gradcheck(net.layers[i].bias, grads.layers[i].bias, loss), 1e-4);
    }
    for (auto& [i, ad] : adapters) {
      EXPECT_LE(fdcheck::gradcheck(ad.a, nn::flat(grads.adapters.at(i).a), loss), 1e-4);
      EXPECT_LE(fdcheck::gradcheck(ad.b, nn::flat(grads.adapters.at(i).b), loss), 1e-4);
    }
    EXPECT_LE(fdcheck::gradcheck(x, nn::flat(grads.input), loss), 1e-4);

    // Adapter-only sweep must give the same adapter gradients.
    const auto only = nn::backward(net, &adapters, trace, g, nn::GradRequest::of(nn::GradTarget::adapters_only));
    EXPECT_TRUE(only.layers.empty());
    EXPECT_EQ(only.input.size(), 0);
    for (const auto& [i, ag] : grads.adapters) {
      EXPECT_TRUE(only.adapters.at(i).a.isApprox(ag.a, 1e-14));
      EXPECT_TRUE(only.adapters.at(i).b.isApprox(ag.b, 1e-14));
    }
  }
}

TEST(Backward, PartialForwardFromHiddenLayer) {
  std::mt19937_64 rng(9);
  auto net = nn::make_mlp<double>({4, 6, 5, 3}, Activation::relu, Activation::identity, rng);
  const Matrix x = Matrix::Random(4, 2);
  const auto full = nn::forward(net, x);
  const auto tail = nn::forward(net, full.post[0], nullptr, 1);
  EXPECT_EQ(tail.output(), full.output());
}

TEST(Optimizer, SgdArithmetic) {
  Vector p = Vector::Constant(1, 1.0);
  const Vector g = Vector::Constant(1, 0.5);
  nn::OptimizerState<double> state;
  nn::OptimizerConfig cfg{nn::Algorithm::sgd, 0.1};
  nn::optimizer_step<double>({nn::flat(p)}, {nn::flat(g)}, state, cfg);
  EXPECT_DOUBLE_EQ(p(0), 0.95);
}

TEST(Optimizer, GlobalNormClipping) {
  Vector p = Vector::Zero(2);
  const Vector g = Eigen::Vector2d(12.0, 16.0);  // norm 20
  nn::OptimizerState<double> state;
  nn::OptimizerConfig cfg{nn::Algorithm::sgd, 1.0, 10.0};
  const auto rep = nn::optimizer_step<double>({nn::flat(p)}, {nn::flat(g)}, state, cfg);
  EXPECT_DOUBLE_EQ(rep.grad_norm, 20.0);
  EXPECT_DOUBLE_EQ(rep.applied_norm, 10.0);
  EXPECT_NEAR(p.norm(), 10.0, 1e-12);
}

TEST(Optimizer, ZeroGradientAdamLeavesParametersAndDecaysMoments) {
  Vector p = Eigen::Vector2d(0.3, -0.2);
  const Vector before = p;
  nn::OptimizerState<double> state;
  state.m = {Eigen::Vector2d(1.0, 2.0)};
  state.v = {Eigen::Vector2d(1.0, 1.0)};
  const Vector g = Vector::Zero(2);
  nn::OptimizerConfig cfg;
  cfg.learning_rate = 0.0;
  nn::optimizer_step<double>({nn::flat(p)}, {nn::flat(g)}, state, cfg);
  EXPECT_EQ(p, before);
  EXPECT_DOUBLE_EQ(state.m[0](0), 0.9);
  EXPECT_DOUBLE_EQ(state.v[0](1), 0.999);
}

TEST(Optimizer, NonFiniteGradientRefusedWithoutStateChange) {
  Vector p = Eigen::Vector2d(1.0, 2.0);
  const Vector g = Eigen::Vector2d(0.1, std::nan(""));
  nn::OptimizerState<double> state;
  nn::OptimizerConfig cfg;
  EXPECT_THROW(nn::optimizer_step<double>({nn::flat(p)}, {nn::flat(g)}, state, cfg), NumericError);
  EXPECT_EQ(p, Vector(Eigen::Vector2d(1.0, 2.0)));
  EXPECT_TRUE(state.m.empty());
  EXPECT_EQ(state.step, 0);
}

TEST(Optimizer, Deterministic) {
  std::mt19937_64 rng(5);
  auto net = nn::make_mlp<double>({3, 4, 2}, Activation::relu, Activation::identity, rng);
  auto twin = net;
  const Matrix x = Matrix::Random(3, 4);
  const auto grads = nn::backward(net, nullptr, nn::forward(net, x), Matrix::Ones(2, 4), {true, false, false});
  nn::OptimizerState<double> s1, s2;
  for (int i = 0; i < 3; ++i) {
    nn::optimizer_step(net, grads, s1, {});
    nn::optimizer_step(twin, grads, s2, {});
  }
  for (std::size_t i = 0; i < net.depth(); ++i) EXPECT_EQ(net.layers[i].weight, twin.layers[i].weight);
}

TEST(SoftUpdate, BlendRules) {
  nn::Mlp<double> online, target;
  online.layers.push_back({Matrix::Constant(1, 1, 2.0), Vector::Constant(1, 2.0), Activation::identity});
  target.layers.push_back({Matrix::Zero(1, 1), Vector::Zero(1), Activation::identity});
  auto t0 = target;
  nn::soft_update(t0, online, 0.0);
  EXPECT_EQ(t0.layers[0].weight(0, 0), 0.0);
  auto half = target;
  nn::soft_update(half, online, 0.5);
  EXPECT_EQ(half.layers[0].weight(0, 0), 1.0);
  std::mt19937_64 rng(1);
  auto a = nn::make_mlp<double>({3, 5, 2}, Activation::relu, Activation::identity, rng);
  auto b = nn::make_mlp<double>({3, 5, 2}, Activation::relu, Activation::identity, rng);
  nn::soft_update(b, a, 1.0);
  for (std::size_t i = 0; i < a.depth(); ++i) EXPECT_EQ(a.layers[i].weight, b.layers[i].weight);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  std::mt19937_64 rng(11);
  auto net = nn::make_mlp<double>({6, 4, 3}, Activation::relu, Activation::identity, rng);
  nn::AdapterMap<double> adapters;
  adapters[0] = nn::make_adapter<double>(4, 6, 2, 1.0, rng);
  io::quantize_f32(net);
  io::quantize_f32(adapters);
  const auto dir = std::filesystem::temp_directory_path() / "rlpo_test_nn_ckpt";
  std::filesystem::remove_all(dir);
  std::vector<io::Tensor> tensors;
  io::Json meta;
  io::append_mlp(tensors, meta, "net", net);
  io::append_adapters(tensors, meta, "lora", adapters);
  io::save_tensors(dir / "ckpt", tensors, meta);
  const auto file = io::load_tensors(dir / "ckpt");
  const auto net2 = io::read_mlp(file, "net");
  const auto ad2 = io::read_adapters(file, "lora");
  for (std::size_t i = 0; i < net.depth(); ++i) {
    EXPECT_EQ(net.layers[i].weight, net2.layers[i].weight);
    EXPECT_EQ(net.layers[i].bias, net2.layers[i].bias);
    EXPECT_EQ(net.layers[i].activation, net2.layers[i].activation);
  }
  EXPECT_EQ(adapters.at(0).a, ad2.at(0).a);
  EXPECT_EQ(adapters.at(0).b, ad2.at(0).b);

  // Truncated blob is refused.
  std::filesystem::resize_file(dir / "ckpt", 8);
  EXPECT_THROW(io::load_tensors(dir / "ckpt"), IoError);
  std::filesystem::remove_all(dir);
}
