#include "rlpo/agent.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

using namespace rlpo;
using namespace rlpo::agent;

namespace {

// Q-network whose output is `values` for every state.
QNets constant_qnets(const Vector& values, Eigen::Index state_dim = 2) {
  QNets q;
  q.online.layers = {{Matrix::Zero(values.size(), state_dim), values, nn::Activation::identity}};
  q.target = q.online;
  return q;
}

// One action, linear in the state: Q(s) = w.s + b.
nn::Mlp<Real> linear_net(const Vector& w, double b) {
  nn::Mlp<Real> net;
  net.layers = {{Matrix(w.transpose()), Vector::Constant(1, b), nn::Activation::identity}};
  return net;
}

Transition random_transition(std::mt19937_64& rng, Eigen::Index d, int actions) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_int_distribution<int> a(0, actions - 1);
  return {Vector::NullaryExpr(d, [&] { return g(rng); }), a(rng), std::abs(g(rng)),
          Vector::NullaryExpr(d, [&] { return g(rng); })};
}

probe::ProbeModel fixture_probe() {
  probe::ProbeModel m;
  m.height = m.width = 2;
  Matrix w(3, 4);
  w << 0.5, -0.2, 0.1, 0.3,
       -0.4, 0.6, 0.2, -0.1,
       0.3, 0.3, -0.5, 0.2;
  const Vector b = (Vector(3) << 0.05, -0.1, 0.0).finished();
  m.net.layers = {{w, b, nn::Activation::relu}, {Matrix::Ones(2, 3), Vector::Zero(2), nn::Activation::identity}};
  m.class_names = {"a", "b"};
  return m;
}

}  // namespace

TEST(SelectAction, GreedyPicksLargestQ) {
  const auto q = constant_qnets((Vector(3) << 0.1, 0.9, 0.3).finished());
  EXPECT_EQ(select_action(q, AgentState::zero(2), 0.0, 1), 1);
}

TEST(SelectAction, ExactTieGoesToLowestIndex) {
  const auto q = constant_qnets((Vector(3) << 0.7, 0.2, 0.7).finished());
  EXPECT_EQ(select_action(q, AgentState::zero(2), 0.0, 1), 0);
}

TEST(SelectAction, FullExplorationIsUniform) {
  const auto q = constant_qnets((Vector(3) << 0.0, 5.0, 0.0).finished());
  std::vector<int> counts(3, 0);
  for (std::uint64_t seed = 0; seed < 3000; ++seed) ++counts[select_action(q, AgentState::zero(2), 1.0, seed)];
  for (int c : counts) EXPECT_NEAR(c / 3000.0, 1.0 / 3.0, 0.05);
}

TEST(SelectAction, Errors) {
  EXPECT_THROW(greedy_action(Vector()), ValidationError);
  const auto q = constant_qnets(Vector::Zero(3));
  EXPECT_THROW(select_action(q, AgentState::zero(5), 0.0, 1), ShapeError);
  EXPECT_THROW(select_action(q, AgentState::zero(2), 1.5, 1), ValidationError);
}

TEST(Reward, Examples) {
  EXPECT_DOUBLE_EQ(compute_reward(0.6, 0.8, 0.5), 0.4);
  for (double x : {0.0, 0.3, 0.75, 1.0}) EXPECT_EQ(compute_reward(x, x, 1.0), x);
  const auto xi = make_xi_tracker({"stripes"}, 100);
  EXPECT_LE(compute_reward(1.0, 0.9, xi.at("stripes")), 0.1);
  EXPECT_THROW(compute_reward(1.2, 0.0, 1.0), ValidationError);
}

TEST(Xi, AdditiveStep) {
  auto t = make_xi_tracker({"a", "b"}, 10, XiRule::additive, 0.1, 0.1);
  update_xi(t, "a", false);
  EXPECT_DOUBLE_EQ(t.at("a"), 0.2);
  EXPECT_EQ(t.at("b"), 0.1);
  EXPECT_EQ(make_xi_tracker({"a"}, 50).increment, 1.0 / 50);
}

TEST(Xi, ReachedSetsOne) {
  for (double start : {0.1, 0.55, 1.0}) {
    auto t = make_xi_tracker({"k"}, 10, XiRule::ratio, start);
    update_xi(t, "k", true);
    EXPECT_EQ(t.at("k"), 1.0);
  }
}

TEST(Xi, RatioRule) {
  auto t = make_xi_tracker({"k"}, 10, XiRule::ratio, 0.1);
  update_xi(t, "k", false);
  EXPECT_DOUBLE_EQ(t.at("k"), 0.11);
  // The ratio rule settles at 1 / (T - 1), never at 1.
  for (int i = 0; i < 200; ++i) update_xi(t, "k", false);
  EXPECT_NEAR(t.at("k"), 1.0 / 9.0, 1e-12);
}

TEST(Xi, UnknownKeywordThrows) {
  auto t = make_xi_tracker({"k"}, 10);
  EXPECT_THROW(update_xi(t, "other", false), ValidationError);
  EXPECT_THROW(t.at("other"), ValidationError);
  EXPECT_THROW(parse_xi_rule("geometric"), ConfigError);
}

TEST(Xi, MonotoneAndBoundedUnderAnyEvents) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution reached(0.05);
  std::uniform_int_distribution<int> pick(0, 2);
  std::uniform_int_distribution<int> horizon(2, 40);
  const std::vector<std::string> kws{"a", "b", "c"};
  for (int trial = 0; trial < 200; ++trial) {
    const auto rule = trial % 2 ? XiRule::ratio : XiRule::additive;
    auto t = make_xi_tracker(kws, horizon(rng), rule);
    for (int step = 0; step < 60; ++step) {
      const auto before = t.xi;
      update_xi(t, kws[pick(rng)], reached(rng));
      for (const auto& k : kws) {
        ASSERT_GE(t.at(k), before.at(k));
        ASSERT_LE(t.at(k), 1.0);
      }
    }
  }
}

TEST(TheoremTwo, NonDecreasingScoresGiveNonDecreasingRewards) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> step(0.0, 0.05);
  std::uniform_int_distribution<int> len(2, 60);
  const double eta = 0.7;
  for (int trial = 0; trial < 1000; ++trial) {
    const int horizon = len(rng);
    auto xi = make_xi_tracker({"k"}, horizon);
    double ts1 = step(rng), ts2 = step(rng), prev = -1;
    for (int t = 0; t < horizon; ++t) {
      update_xi(xi, "k", false);
      const double r = compute_reward(ts1, ts2, xi.at("k"));
      ASSERT_GE(r - prev, 0.0) << "trial " << trial << " step " << t;
      prev = r;
      ts1 = std::min(eta, ts1 + step(rng));
      ts2 = std::min(eta, ts2 + step(rng));
    }
  }
}

TEST(TheoremTwo, ConstantScoresAfterExplainableGiveZeroDelta) {
  for (double ts : {0.71, 0.8, 0.95, 1.0}) {
    auto xi = make_xi_tracker({"k"}, 20);
    update_xi(xi, "k", true);
    const double first = compute_reward(ts, 0.3, xi.at("k"));
    for (int t = 0; t < 10; ++t) {
      update_xi(xi, "k", true);
      EXPECT_EQ(compute_reward(ts, 0.3, xi.at("k")) - first, 0.0);
    }
    EXPECT_EQ(first, ts);
  }
}

TEST(Replay, FifoDropsOldest) {
  ReplayBuffer b;
  b.capacity = 5;
  for (int i = 0; i < 8; ++i) b.push({Vector::Zero(1), i, 0.0, Vector::Zero(1)});
  ASSERT_EQ(b.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(b.items[i].a, static_cast<int>(i) + 3);
}

TEST(QLearn, SingleTransitionLossArithmetic) {
  QNets q;
  q.online = linear_net(Vector::Zero(2), 0.5);
  q.target = linear_net(Vector::Zero(2), 0.8);
  q.config.batch_size = 1;
  q.config.algorithm = nn::Algorithm::sgd;
  q.config.learning_rate = 0;
  ReplayBuffer b;
  b.push({Vector::Ones(2), 0, 1.0, Vector::Ones(2)});
  const auto loss = q_learn_step(q, b, 1);
  ASSERT_TRUE(loss.has_value());
  EXPECT_NEAR(*loss, 1.292 * 1.292, 1e-12);
  EXPECT_NEAR(*loss, 1.669, 5e-4);
}

TEST(QLearn, MatchesTabularUpdate) {
  // Q(s) = w.s + b with SGD at lr alpha / (2 (|s|^2 + 1)) moves Q by exactly
  // alpha (y - Q), the tabular rule.
  const Vector s = (Vector(2) << 0.6, 0.8).finished();
  const double alpha = 0.1;
  QNets q;
  q.online = linear_net((Vector(2) << 0.25, 0.0).finished(), 0.35);
  q.target = linear_net(Vector::Zero(2), 0.8);
  q.config.batch_size = 1;
  q.config.algorithm = nn::Algorithm::sgd;
  q.config.learning_rate = alpha / (2 * (s.squaredNorm() + 1));
  ASSERT_NEAR(nn::forward_vector(q.online, s)(0), 0.5, 1e-15);
  ReplayBuffer b;
  b.push({s, 0, 1.0, s});
  q_learn_step(q, b, 1);
  EXPECT_NEAR(nn::forward_vector(q.online, s)(0), 0.6292, 1e-12);
  // With the target held, k steps give y - (y - Q0) (1 - alpha)^k.
  for (int k = 2; k <= 30; ++k) {
    q_learn_step(q, b, static_cast<std::uint64_t>(k));
    EXPECT_NEAR(nn::forward_vector(q.online, s)(0), 1.792 - 1.292 * std::pow(0.9, k), 1e-12);
  }
  EXPECT_EQ(nn::forward_vector(q.target, s)(0), 0.8);
}

TEST(QLearn, WarmupIsNoOp) {
  auto q = make_qnets(4, 3, {}, 5);
  const auto before = q.online;
  ReplayBuffer b;
  std::mt19937_64 rng(6);
  for (int i = 0; i < 31; ++i) b.push(random_transition(rng, 4, 3));
  EXPECT_FALSE(q_learn_step(q, b, 1).has_value());
  for (std::size_t i = 0; i < q.online.depth(); ++i) EXPECT_EQ(q.online.layers[i].weight, before.layers[i].weight);
  b.push(random_transition(rng, 4, 3));
  EXPECT_TRUE(q_learn_step(q, b, 1).has_value());
  EXPECT_NE(q.online.layers[0].weight, before.layers[0].weight);
}

TEST(QLearn, DeterministicAndTargetUntouched) {
  auto q0 = make_qnets(4, 3, {}, 7);
  ReplayBuffer b;
  std::mt19937_64 rng(8);
  for (int i = 0; i < 60; ++i) b.push(random_transition(rng, 4, 3));
  auto q1 = q0, q2 = q0;
  for (std::uint64_t k = 0; k < 5; ++k) {
    EXPECT_EQ(*q_learn_step(q1, b, k), *q_learn_step(q2, b, k));
  }
  for (std::size_t i = 0; i < q0.online.depth(); ++i) {
    EXPECT_EQ(q1.online.layers[i].weight, q2.online.layers[i].weight);
    EXPECT_EQ(q1.target.layers[i].weight, q0.target.layers[i].weight);
  }
}

TEST(QLearn, StepIsClipped) {
  QNets q;
  q.online = linear_net(Vector::Zero(2), 0.0);
  q.target = linear_net(Vector::Zero(2), 0.0);
  q.config.batch_size = 1;
  q.config.algorithm = nn::Algorithm::sgd;
  q.config.learning_rate = 1.0;
  ReplayBuffer b;
  b.push({Vector::Ones(2), 0, 1000.0, Vector::Zero(2)});
  q_learn_step(q, b, 1);
  const double moved = std::sqrt(q.online.layers[0].weight.squaredNorm() + q.online.layers[0].bias.squaredNorm());
  EXPECT_NEAR(moved, q.config.clip_norm, 1e-9);
}

TEST(QLearn, NonFiniteLossThrows) {
  auto q = make_qnets(2, 2, {}, 1);
  q.config.batch_size = 1;
  ReplayBuffer b;
  b.push({Vector::Zero(2), 0, std::nan(""), Vector::Zero(2)});
  EXPECT_THROW(q_learn_step(q, b, 1), NumericError);
}

TEST(Sync, BlendRules) {
  auto q = make_qnets(3, 2, {}, 2);
  std::mt19937_64 rng(3);
  ReplayBuffer b;
  for (int i = 0; i < 40; ++i) b.push(random_transition(rng, 3, 2));
  q_learn_step(q, b, 4);
  auto copy = q;
  copy.config.tau = 0;
  const auto old_target = copy.target;
  sync_target(copy);
  EXPECT_EQ(copy.target.layers[0].weight, old_target.layers[0].weight);
  sync_target(q);
  for (std::size_t i = 0; i < q.online.depth(); ++i) {
    EXPECT_EQ(q.target.layers[i].weight, q.online.layers[i].weight);
    EXPECT_EQ(q.target.layers[i].bias, q.online.layers[i].bias);
  }

  QNets scalar;
  scalar.online = linear_net(Vector::Constant(1, 2.0), 2.0);
  scalar.target = linear_net(Vector::Constant(1, 0.0), 0.0);
  scalar.config.tau = 0.5;
  sync_target(scalar);
  EXPECT_EQ(scalar.target.layers[0].weight(0, 0), 1.0);
  EXPECT_EQ(scalar.target.layers[0].bias(0), 1.0);
}

TEST(EncodeState, MatchesOracle) {
  // tests/oracles/encode_state.py
  ImageBatch group(3, Image(2, 2));
  group[0] << 0.1, 0.9, 0.4, 0.2;
  group[1] << 0.7, 0.3, 0.0, 0.5;
  group[2] << 0.2, 0.2, 0.8, 0.6;
  const auto st = encode_state(fixture_probe(), group);
  const Vector expected = (Vector(3) << 0.7671048481298472, 0.43585502734650433, 0.4707234295342246).finished();
  EXPECT_LT((st.s - expected).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_NEAR(st.s.norm(), 1.0, 1e-9);
}

TEST(EncodeState, IdenticalImagesAndDegenerateGroups) {
  const auto m = fixture_probe();
  Image x(2, 2);
  x << 0.3, 0.1, 0.9, 0.4;
  const auto st = encode_state(m, {x, x, x, x});
  EXPECT_LT((st.s - probe::activation_at_l(m, x).normalized()).norm(), 1e-12);
  auto dead = m;
  dead.net.layers[0].bias.setConstant(-10);
  EXPECT_EQ(encode_state(dead, {x}).s, Vector::Zero(3));
  EXPECT_THROW(encode_state(m, {}), ValidationError);
  EXPECT_THROW(encode_state(m, {Image::Zero(3, 3)}), ShapeError);
}

TEST(Persistence, QNetsRoundTrip) {
  auto q = make_qnets(4, 3, {}, 9);
  ReplayBuffer b;
  std::mt19937_64 rng(10);
  for (int i = 0; i < 40; ++i) b.push(random_transition(rng, 4, 3));
  q_learn_step(q, b, 1);
  quantize_f32(q);
  const auto path = std::filesystem::temp_directory_path() / "rlpo_qnets_roundtrip.f32";
  save_qnets(q, path);
  auto back = load_qnets(path);
  EXPECT_EQ(back.opt.step, 1);
  EXPECT_EQ(back.config.batch_size, 32);
  for (std::size_t i = 0; i < q.opt.m.size(); ++i) EXPECT_EQ(back.opt.m[i], q.opt.m[i]);
  for (std::size_t i = 0; i < q.online.depth(); ++i) EXPECT_EQ(back.online.layers[i].weight, q.online.layers[i].weight);
  EXPECT_EQ(*q_learn_step(back, b, 2), *q_learn_step(q, b, 2));
  std::filesystem::remove(path);
  std::filesystem::remove(path.string() + ".json");
}

TEST(Persistence, BufferAndXiJsonAreExact) {
  ReplayBuffer b;
  b.capacity = 7;
  std::mt19937_64 rng(12);
  for (int i = 0; i < 9; ++i) b.push(random_transition(rng, 3, 4));
  const auto back = buffer_from_json(nlohmann::json::parse(buffer_to_json(b).dump()));
  ASSERT_EQ(back.size(), b.size());
  for (std::size_t i = 0; i < b.size(); ++i) {
    EXPECT_EQ(back.items[i].s, b.items[i].s);
    EXPECT_EQ(back.items[i].r, b.items[i].r);
    EXPECT_EQ(back.items[i].s_next, b.items[i].s_next);
  }
  auto xi = make_xi_tracker({"a", "b"}, 37, XiRule::ratio);
  update_xi(xi, "a", false);
  const auto xi2 = xi_from_json(nlohmann::json::parse(xi_to_json(xi).dump()));
  EXPECT_EQ(xi2.xi, xi.xi);
  EXPECT_EQ(xi2.rule, XiRule::ratio);
  EXPECT_EQ(xi2.increment, xi.increment);
}
