#include "rlpo/tcav.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rlpo::tcav {

Cav fit_cav(const Matrix& concept_acts, const Matrix& random_acts, const CavConfig& config) {
  if (concept_acts.cols() < 2 || random_acts.cols() < 2) throw ValidationError("samples", "need at least 2 per side");
  if (concept_acts.rows() != random_acts.rows()) throw ShapeError("fit_cav: activation dimensions differ");
  const Eigen::Index d = concept_acts.rows();
  const Eigen::Index nc = concept_acts.cols();
  const Eigen::Index nr = random_acts.cols();

  Matrix x(d, nc + nr);
  x << concept_acts, random_acts;
  if ((x.colwise() - x.col(0)).cwiseAbs().maxCoeff() == 0.0)
    throw ValidationError("samples", "all inputs identical; no direction to separate");
  const double scale = std::sqrt(x.colwise().squaredNorm().mean());
  x /= scale;

  Eigen::ArrayXd y(nc + nr);
  Eigen::ArrayXd weight(nc + nr);
  y.head(nc).setOnes();
  y.tail(nr).setZero();
  weight.head(nc).setConstant(0.5 / static_cast<double>(nc));
  weight.tail(nr).setConstant(0.5 / static_cast<double>(nr));

  Vector w = Vector::Zero(d);
  double b = 0;
  for (int it = 0; it < config.max_iterations; ++it) {
    const Eigen::ArrayXd z = (x.transpose() * w).array() + b;
    const Eigen::ArrayXd p = 1.0 / (1.0 + (-z).exp());
    const Eigen::ArrayXd r = weight * (p - y);
    const Vector gw = x * r.matrix() + config.l2 * w;
    const double gb = r.sum();
    if (std::sqrt(gw.squaredNorm() + gb * gb) < config.tolerance) break;
    w -= config.learning_rate * gw;
    b -= config.learning_rate * gb;
  }
  if (!w.allFinite()) throw NumericError("fit_cav: non-finite weights");
  const double norm = w.norm();
  if (norm == 0.0) throw NumericError("fit_cav: zero weight vector");

  Cav cav;
  cav.v = w / norm;
  const Eigen::ArrayXd z = (x.transpose() * w).array() + b;
  int correct = 0;
  for (Eigen::Index i = 0; i < z.size(); ++i) correct += (z(i) > 0) == (y(i) > 0.5);
  cav.fit_accuracy = static_cast<double>(correct) / static_cast<double>(z.size());
  return cav;
}

ConceptScore score_from_gradients(const Matrix& grads, const Vector& v) {
  if (grads.cols() == 0) throw ValidationError("test_images", "must be non-empty");
  if (grads.rows() != v.size()) throw ShapeError("tcav: CAV dimension does not match activation dimension");
  ConceptScore s;
  s.n_test = static_cast<int>(grads.cols());
  const Vector dots = grads.transpose() * v;
  for (Eigen::Index i = 0; i < dots.size(); ++i)
    if (dots(i) > 0.0) ++s.positive;
  s.value = static_cast<double>(s.positive) / static_cast<double>(s.n_test);
  return s;
}

ConceptScore tcav_score(const probe::ProbeModel& model, const Cav& cav, const ImageBatch& test_images, Eigen::Index m) {
  if (test_images.empty()) throw ValidationError("test_images", "must be non-empty");
  if (cav.v.size() != model.activation_dim()) throw ShapeError("tcav: CAV dimension does not match probe layer");
  return score_from_gradients(probe::logit_grads_wrt_activation(model, test_images, m), cav.v);
}

GroupScores score_groups(const probe::ProbeModel& model, const ImageBatch& test_images, Eigen::Index m,
                         const ImageBatch& g1, const ImageBatch& g2, const ImageBatch& random_pool,
                         const GroupConfig& config, std::uint64_t seed) {
  if (g1.empty() || g2.empty()) throw ValidationError("groups", "both groups must be non-empty");
  if (config.random_set_size < 2) throw ConfigError("tcav: random_set_size must be >= 2");
  GroupScores out;
  out.random_indices = sample_indices(random_pool.size(), static_cast<std::size_t>(config.random_set_size), seed);
  ImageBatch randoms;
  for (auto i : out.random_indices) randoms.push_back(random_pool[i]);
  const Matrix random_acts = probe::activations_at_l(model, randoms);
  const Matrix grads = probe::logit_grads_wrt_activation(model, test_images, m);

  out.cav1 = fit_cav(probe::activations_at_l(model, g1), random_acts, config.cav);
  out.cav2 = fit_cav(probe::activations_at_l(model, g2), random_acts, config.cav);
  out.cav1.concept_id = "G1";
  out.cav2.concept_id = "G2";
  out.cav1.random_set_id = out.cav2.random_set_id = "seed:" + std::to_string(seed);
  out.ts1 = score_from_gradients(grads, out.cav1.v);
  out.ts2 = score_from_gradients(grads, out.cav2.v);
  return out;
}

}  // namespace rlpo::tcav
