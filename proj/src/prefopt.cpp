#include "rlpo/prefopt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rlpo::prefopt {

void PreferencePair::validate() const {
  if (winner.empty()) throw ValidationError("winner", "empty group");
  if (loser.empty()) throw ValidationError("loser", "empty group");
  if (ts_winner < ts_loser) throw ValidationError("ts_winner", "below ts_loser");
  const auto rows = winner.front().rows();
  const auto cols = winner.front().cols();
  for (const auto* group : {&winner, &loser})
    for (const auto& img : *group)
      if (img.rows() != rows || img.cols() != cols) throw ShapeError("preference pair: image shapes differ");
}

void DpoConfig::validate() const {
  if (!(kappa > 0)) throw ValidationError("kappa", "must be positive");
  if (inner_steps < 1) throw ValidationError("inner_steps", "must be at least 1");
  if (!(learning_rate >= 0)) throw ValidationError("learning_rate", "must be non-negative");
  if (noise_draws_per_image < 1) throw ValidationError("noise_draws_per_image", "must be at least 1");
}

Split split_indices(std::size_t n, std::uint64_t seed) {
  if (n < 2 || n % 2 != 0) throw ValidationError("batch", "needs an even size of at least 2");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(idx.begin(), idx.end(), rng);
  Split s;
  s.group1.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n / 2));
  s.group2.assign(idx.begin() + static_cast<std::ptrdiff_t>(n / 2), idx.end());
  return s;
}

std::pair<ImageBatch, ImageBatch> split_groups(const ImageBatch& batch, std::uint64_t seed) {
  const auto s = split_indices(batch.size(), seed);
  std::pair<ImageBatch, ImageBatch> out;
  for (auto i : s.group1) out.first.push_back(batch[i]);
  for (auto i : s.group2) out.second.push_back(batch[i]);
  return out;
}

Decision decide_preference(double ts1, double ts2, double eta, bool inclusive) {
  const double top = std::max(ts1, ts2);
  if (top > eta || (inclusive && top == eta)) return {DecisionKind::reached_explainable, 0, 0};
  if (ts1 == ts2) return {DecisionKind::no_signal, 0, 0};
  return ts1 > ts2 ? Decision{DecisionKind::apply_dpo, 1, 2} : Decision{DecisionKind::apply_dpo, 2, 1};
}

const char* to_string(DecisionKind kind) {
  switch (kind) {
    case DecisionKind::apply_dpo: return "apply_dpo";
    case DecisionKind::reached_explainable: return "reached_explainable";
    case DecisionKind::no_signal: return "no_signal";
  }
  return "unknown";
}

namespace {

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }
double sigmoid(double z) { return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)); }

double bracket(const DrawErrors& e) { return (e.winner_theta - e.winner_ref) - (e.loser_theta - e.loser_ref); }

}  // namespace

double draw_loss(const DrawErrors& e, double kappa) {
  // -log sigmoid(-z) == softplus(z)
  return softplus(kappa * bracket(e));
}

DpoLoss dpo_loss(const gen::GeneratorState& state, const PreferencePair& pair, const DpoConfig& config,
                 std::uint64_t seed) {
  pair.validate();
  config.validate();
  if (state.adapters.empty()) throw ValidationError("adapters", "dpo needs adapters attached");
  const std::size_t pairs = std::min(pair.winner.size(), pair.loser.size());
  const auto draws_per = static_cast<std::size_t>(config.noise_draws_per_image);
  const std::size_t n = pairs * draws_per;
  const Eigen::Index d = state.image_dim();
  const int steps = state.schedule.steps();

  // Winner draws in columns [0, n), loser draws in [n, 2n); both share t and eps.
  Matrix xt(d, static_cast<Eigen::Index>(2 * n));
  Matrix eps(d, static_cast<Eigen::Index>(n));
  std::vector<int> ts(2 * n);
  for (std::size_t j = 0; j < n; ++j) {
    std::mt19937_64 rng(derive_seed(seed, static_cast<std::uint64_t>(j)));
    std::uniform_int_distribution<int> tdist(1, steps);
    std::normal_distribution<double> gauss(0.0, 1.0);
    const int t = tdist(rng);
    const auto col = static_cast<Eigen::Index>(j);
    eps.col(col) = Vector::NullaryExpr(d, [&] { return gauss(rng); });
    const std::size_t i = j / draws_per;
    const Vector w0 = (2.0 * flatten(pair.winner[i]).array() - 1.0).matrix();
    const Vector l0 = (2.0 * flatten(pair.loser[i]).array() - 1.0).matrix();
    xt.col(col) = gen::q_sample(w0, t, Vector(eps.col(col)), state.schedule);
    xt.col(col + static_cast<Eigen::Index>(n)) = gen::q_sample(l0, t, Vector(eps.col(col)), state.schedule);
    ts[j] = ts[j + n] = t;
  }
  if (static_cast<Eigen::Index>(pair.winner.front().size()) != d)
    throw ShapeError("dpo_loss: image size does not match the generator");

  nn::ForwardTrace<Real> trace;
  const Matrix pred = gen::eps_predict_batch(state, xt, ts, pair.keyword, true, &trace);
  const Matrix ref = gen::eps_predict_batch(state, xt, ts, pair.keyword, false);

  DpoLoss out;
  out.draws.resize(n);
  Matrix upstream(d, static_cast<Eigen::Index>(2 * n));
  const double per_pixel = 1.0 / static_cast<double>(d);
  double total = 0;
  for (std::size_t j = 0; j < n; ++j) {
    const auto w = static_cast<Eigen::Index>(j);
    const auto l = static_cast<Eigen::Index>(j + n);
    DrawErrors e;
    e.winner_theta = (pred.col(w) - eps.col(w)).squaredNorm() * per_pixel;
    e.winner_ref = (ref.col(w) - eps.col(w)).squaredNorm() * per_pixel;
    e.loser_theta = (pred.col(l) - eps.col(w)).squaredNorm() * per_pixel;
    e.loser_ref = (ref.col(l) - eps.col(w)).squaredNorm() * per_pixel;
    const double z = config.kappa * bracket(e);
    const double loss = softplus(z);
    if (!std::isfinite(loss)) throw NumericError("dpo_loss: non-finite value at draw " + std::to_string(j));
    total += loss;
    // d loss / d bracket = kappa * sigmoid(z), then through the squared errors.
    const double g = config.kappa * sigmoid(z) / static_cast<double>(n);
    upstream.col(w) = (2.0 * g * per_pixel) * (pred.col(w) - eps.col(w));
    upstream.col(l) = (-2.0 * g * per_pixel) * (pred.col(l) - eps.col(w));
    out.draws[j] = e;
  }
  out.loss = total / static_cast<double>(n);
  out.gradients = nn::backward(state.base, &state.adapters, trace, upstream, nn::GradRequest::of(nn::GradTarget::adapters_only));
  return out;
}

DpoRecord apply_dpo_update(gen::GeneratorState& state, const PreferencePair& pair, const DpoConfig& config,
                           std::uint64_t seed) {
  config.validate();
  nn::OptimizerConfig opt_config;
  opt_config.algorithm = config.algorithm;
  opt_config.learning_rate = config.learning_rate;
  opt_config.clip_norm = config.clip_norm;
  nn::OptimizerState<Real> opt;
  DpoRecord record;
  record.inner_steps = config.inner_steps;
  for (int k = 0; k < config.inner_steps; ++k) {
    const auto draw_seed = derive_seed(seed, static_cast<std::uint64_t>(k));
    const DpoLoss l = dpo_loss(state, pair, config, draw_seed);
    if (k == 0) record.loss_before = l.loss;
    record.grad_norm = nn::optimizer_step(state.adapters, l.gradients, opt, opt_config).grad_norm;
  }
  // Same draws as the first inner step, so before and after are comparable.
  record.loss_after = dpo_loss(state, pair, config, derive_seed(seed, std::uint64_t{0})).loss;
  return record;
}

}  // namespace rlpo::prefopt
