#include "rlpo/agent.hpp"

#include "rlpo/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace rlpo::agent {

void QConfig::validate() const {
  for (auto h : hidden_dims)
    if (h < 1) throw ValidationError("hidden_dims", "entries must be positive");
  if (!(learning_rate >= 0)) throw ValidationError("learning_rate", "must be non-negative");
  if (!(gamma >= 0 && gamma < 1)) throw ValidationError("gamma", "must lie in [0, 1)");
  if (!(epsilon >= 0 && epsilon <= 1)) throw ValidationError("epsilon", "must lie in [0, 1]");
  if (batch_size < 1) throw ValidationError("batch_size", "must be at least 1");
  if (buffer_capacity < 1) throw ValidationError("buffer_capacity", "must be at least 1");
  if (update_every < 1) throw ValidationError("update_every", "must be at least 1");
  if (!(tau >= 0 && tau <= 1)) throw ValidationError("tau", "must lie in [0, 1]");
  if (!(clip_norm > 0)) throw ValidationError("clip_norm", "must be positive");
}

QNets make_qnets(Eigen::Index state_dim, int num_actions, const QConfig& config, std::uint64_t seed) {
  config.validate();
  if (num_actions < 1) throw ValidationError("actions", "action space is empty");
  if (state_dim < 1) throw ValidationError("state_dim", "must be positive");
  std::vector<Eigen::Index> dims{state_dim};
  dims.insert(dims.end(), config.hidden_dims.begin(), config.hidden_dims.end());
  dims.push_back(num_actions);
  std::mt19937_64 rng(seed);
  QNets q;
  q.online = nn::make_mlp<Real>(dims, nn::Activation::relu, nn::Activation::identity, rng);
  q.target = q.online;
  q.config = config;
  return q;
}

Vector q_values(const QNets& q, const Vector& s) {
  if (s.size() != q.state_dim())
    throw ShapeError("q_values: state has dimension " + std::to_string(s.size()) + ", expected " +
                     std::to_string(q.state_dim()));
  return nn::forward_vector(q.online, s);
}

int greedy_action(const Vector& values) {
  if (values.size() == 0) throw ValidationError("actions", "action space is empty");
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < values.size(); ++i)
    if (values(i) > values(best)) best = i;
  return static_cast<int>(best);
}

int select_action(const QNets& q, const AgentState& state, double epsilon, std::uint64_t seed) {
  const int n = q.num_actions();
  if (n < 1) throw ValidationError("actions", "action space is empty");
  if (!(epsilon >= 0 && epsilon <= 1)) throw ValidationError("epsilon", "must lie in [0, 1]");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  if (coin(rng) < epsilon) return std::uniform_int_distribution<int>(0, n - 1)(rng);
  return greedy_action(q_values(q, state.s));
}

double compute_reward(double ts1, double ts2, double xi) {
  for (double v : {ts1, ts2, xi})
    if (!(v >= 0 && v <= 1)) throw ValidationError("reward", "inputs must lie in [0, 1]");
  return xi * std::max(ts1, ts2);
}

double XiTracker::at(const std::string& keyword) const {
  const auto it = xi.find(keyword);
  if (it == xi.end()) throw ValidationError("keyword", "'" + keyword + "' is not tracked");
  return it->second;
}

XiTracker make_xi_tracker(const std::vector<std::string>& keywords, int horizon, XiRule rule, double xi_init,
                          double increment) {
  if (horizon < 1) throw ValidationError("horizon", "must be at least 1");
  if (!(xi_init > 0 && xi_init <= 1)) throw ValidationError("xi_init", "must lie in (0, 1]");
  XiTracker t;
  t.horizon = horizon;
  t.rule = rule;
  t.increment = increment > 0 ? increment : 1.0 / horizon;
  for (const auto& k : keywords) t.xi[k] = xi_init;
  return t;
}

void update_xi(XiTracker& tracker, const std::string& keyword, bool reached_explainable) {
  const auto it = tracker.xi.find(keyword);
  if (it == tracker.xi.end()) throw ValidationError("keyword", "'" + keyword + "' is not tracked");
  double& xi = it->second;
  if (reached_explainable) {
    xi = 1.0;
  } else if (tracker.rule == XiRule::additive) {
    xi = std::min(1.0, xi + tracker.increment);
  } else {
    // (xi + 1) / T alone can fall below xi, so the value is held instead.
    xi = std::max(xi, std::min(1.0, (xi + 1.0) / tracker.horizon));
  }
}

const char* to_string(XiRule rule) { return rule == XiRule::additive ? "additive" : "ratio"; }

XiRule parse_xi_rule(const std::string& name) {
  if (name == "additive") return XiRule::additive;
  if (name == "ratio") return XiRule::ratio;
  throw ConfigError("unknown xi rule '" + name + "'");
}

void ReplayBuffer::push(Transition t) {
  if (capacity == 0) throw ValidationError("buffer_capacity", "must be at least 1");
  items.push_back(std::move(t));
  while (items.size() > capacity) items.pop_front();
}

std::optional<double> q_learn_step(QNets& q, const ReplayBuffer& buffer, std::uint64_t seed) {
  const auto n = static_cast<std::size_t>(q.config.batch_size);
  if (buffer.size() < n) return std::nullopt;
  const auto idx = sample_indices(buffer.size(), n, seed);
  const auto d = q.state_dim();
  Matrix s(d, static_cast<Eigen::Index>(n)), s_next(d, static_cast<Eigen::Index>(n));
  for (std::size_t j = 0; j < n; ++j) {
    const auto& t = buffer.items[idx[j]];
    if (t.s.size() != d || t.s_next.size() != d) throw ShapeError("q_learn_step: transition state dimension");
    if (t.a < 0 || t.a >= q.num_actions()) throw ValidationError("action", "out of range in transition");
    s.col(static_cast<Eigen::Index>(j)) = t.s;
    s_next.col(static_cast<Eigen::Index>(j)) = t.s_next;
  }
  const auto trace = nn::forward(q.online, s);
  const Matrix next_q = nn::forward(q.target, s_next).output();

  const double inv_n = 1.0 / static_cast<double>(n);
  Matrix upstream = Matrix::Zero(q.num_actions(), static_cast<Eigen::Index>(n));
  double loss = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto& t = buffer.items[idx[j]];
    const auto c = static_cast<Eigen::Index>(j);
    const double y = t.r + q.config.gamma * next_q.col(c).maxCoeff();
    const double diff = trace.output()(t.a, c) - y;
    loss += diff * diff * inv_n;
    upstream(t.a, c) = 2.0 * diff * inv_n;
  }
  if (!std::isfinite(loss)) throw NumericError("q_learn_step: non-finite loss");

  const auto grads = nn::backward(q.online, nullptr, trace, upstream, nn::GradRequest{true, false, false});
  nn::OptimizerConfig oc;
  oc.algorithm = q.config.algorithm;
  oc.learning_rate = q.config.learning_rate;
  oc.clip_norm = q.config.clip_norm;
  nn::optimizer_step(q.online, grads, q.opt, oc);
  return loss;
}

void sync_target(QNets& q) { nn::soft_update(q.target, q.online, q.config.tau); }

AgentState encode_state(const probe::ProbeModel& probe, const ImageBatch& preferred_group) {
  if (preferred_group.empty()) throw ValidationError("preferred_group", "empty group");
  const Matrix acts = probe::activations_at_l(probe, preferred_group);
  AgentState st;
  st.s = acts.rowwise().mean();
  const double norm = st.s.norm();
  if (norm > 0) st.s /= norm;
  return st;
}

namespace {

io::Json config_to_json(const QConfig& c) {
  return {{"hidden_dims", c.hidden_dims},
          {"algorithm", c.algorithm == nn::Algorithm::adam ? "adam" : "sgd"},
          {"learning_rate", c.learning_rate},
          {"gamma", c.gamma},
          {"epsilon", c.epsilon},
          {"batch_size", c.batch_size},
          {"buffer_capacity", c.buffer_capacity},
          {"update_every", c.update_every},
          {"tau", c.tau},
          {"clip_norm", c.clip_norm}};
}

QConfig config_from_json(const io::Json& j) {
  QConfig c;
  c.hidden_dims = j.at("hidden_dims").get<std::vector<Eigen::Index>>();
  c.algorithm = j.at("algorithm").get<std::string>() == "adam" ? nn::Algorithm::adam : nn::Algorithm::sgd;
  c.learning_rate = j.at("learning_rate").get<double>();
  c.gamma = j.at("gamma").get<double>();
  c.epsilon = j.at("epsilon").get<double>();
  c.batch_size = j.at("batch_size").get<int>();
  c.buffer_capacity = j.at("buffer_capacity").get<int>();
  c.update_every = j.at("update_every").get<int>();
  c.tau = j.at("tau").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  return c;
}

io::Json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const io::Json& j) {
  const auto xs = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(xs.data(), static_cast<Eigen::Index>(xs.size()));
}

}  // namespace

void save_qnets(const QNets& q, const std::filesystem::path& path) {
  std::vector<io::Tensor> tensors;
  io::Json meta = {{"kind", "qnets"}, {"config", config_to_json(q.config)}, {"opt_step", q.opt.step},
                   {"opt_blocks", q.opt.m.size()}};
  io::append_mlp(tensors, meta, "online", q.online);
  io::append_mlp(tensors, meta, "target", q.target);
  for (std::size_t i = 0; i < q.opt.m.size(); ++i) {
    tensors.push_back(io::from_vector("adam_m" + std::to_string(i), q.opt.m[i]));
    tensors.push_back(io::from_vector("adam_v" + std::to_string(i), q.opt.v[i]));
  }
  io::save_tensors(path, tensors, meta);
}

QNets load_qnets(const std::filesystem::path& path) {
  const auto file = io::load_tensors(path);
  if (file.meta.value("kind", "") != "qnets") throw IoError(path.string() + ": not a Q-network checkpoint");
  QNets q;
  q.config = config_from_json(file.meta.at("config"));
  q.online = io::read_mlp(file, "online");
  q.target = io::read_mlp(file, "target");
  q.opt.step = file.meta.at("opt_step").get<std::int64_t>();
  const auto blocks = file.meta.at("opt_blocks").get<std::size_t>();
  for (std::size_t i = 0; i < blocks; ++i) {
    q.opt.m.push_back(io::to_vector(file.get("adam_m" + std::to_string(i))));
    q.opt.v.push_back(io::to_vector(file.get("adam_v" + std::to_string(i))));
  }
  return q;
}

void quantize_f32(QNets& q) {
  io::quantize_f32(q.online);
  io::quantize_f32(q.target);
  for (auto& m : q.opt.m) io::quantize_f32(m);
  for (auto& v : q.opt.v) io::quantize_f32(v);
}

nlohmann::json buffer_to_json(const ReplayBuffer& buffer) {
  io::Json items = io::Json::array();
  for (const auto& t : buffer.items)
    items.push_back({{"s", vector_to_json(t.s)}, {"a", t.a}, {"r", t.r}, {"s_next", vector_to_json(t.s_next)}});
  return {{"capacity", buffer.capacity}, {"items", items}};
}

ReplayBuffer buffer_from_json(const nlohmann::json& doc) {
  ReplayBuffer b;
  b.capacity = doc.at("capacity").get<std::size_t>();
  for (const auto& j : doc.at("items"))
    b.items.push_back({vector_from_json(j.at("s")), j.at("a").get<int>(), j.at("r").get<double>(),
                       vector_from_json(j.at("s_next"))});
  if (b.items.size() > b.capacity) throw IoError("replay buffer holds more items than its capacity");
  return b;
}

nlohmann::json xi_to_json(const XiTracker& tracker) {
  return {{"xi", tracker.xi},
          {"increment", tracker.increment},
          {"rule", to_string(tracker.rule)},
          {"horizon", tracker.horizon}};
}

XiTracker xi_from_json(const nlohmann::json& doc) {
  XiTracker t;
  t.xi = doc.at("xi").get<std::map<std::string, double>>();
  t.increment = doc.at("increment").get<double>();
  t.rule = parse_xi_rule(doc.at("rule").get<std::string>());
  t.horizon = doc.at("horizon").get<int>();
  return t;
}

}  // namespace rlpo::agent
