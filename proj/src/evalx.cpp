#include "rlpo/evalx.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rlpo::evalx {

namespace {

// Centres each column and scales it to unit norm; flat columns become zero.
void normalize_columns(Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    m.col(j).array() -= m.col(j).mean();
    const double n = m.col(j).norm();
    if (n > 1e-12) m.col(j) /= n;
    else m.col(j).setZero();
  }
}

Matrix grid_patches(const Image& img, int p, int stride) {
  std::vector<Eigen::Index> rows, cols;
  for (Eigen::Index r = 0; r + p <= img.rows(); r += stride) rows.push_back(r);
  for (Eigen::Index c = 0; c + p <= img.cols(); c += stride) cols.push_back(c);
  Matrix out(p * p, static_cast<Eigen::Index>(rows.size() * cols.size()));
  Eigen::Index k = 0;
  for (auto r : rows)
    for (auto c : cols) {
      const Image block = img.block(r, c, p, p);
      out.col(k++) = flatten(block);
    }
  return out;
}

Matrix centred_windows(const Image& img, int p) {
  const auto h = img.rows(), w = img.cols();
  const Eigen::Index half = p / 2;
  Matrix out(p * p, h * w);
  for (Eigen::Index i = 0; i < h; ++i)
    for (Eigen::Index j = 0; j < w; ++j) {
      Eigen::Index k = 0;
      for (Eigen::Index a = 0; a < p; ++a)
        for (Eigen::Index b = 0; b < p; ++b) {
          const auto r = std::clamp<Eigen::Index>(i - half + a, 0, h - 1);
          const auto c = std::clamp<Eigen::Index>(j - half + b, 0, w - 1);
          out(k++, i * w + j) = img(r, c);
        }
    }
  return out;
}

}  // namespace

Image localize(const ImageBatch& concept_images, const Image& test_image, const LocalizeConfig& config) {
  if (concept_images.empty()) throw ValidationError("concept_images", "empty batch");
  if (config.patch < 1 || config.stride < 1) throw ValidationError("patch", "patch and stride must be positive");
  const int p = config.patch;
  if (p > test_image.rows() || p > test_image.cols())
    throw ShapeError("localize: concept patch larger than test image");
  Matrix windows = centred_windows(test_image, p);
  normalize_columns(windows);

  Vector heat = Vector::Zero(test_image.size());
  for (const auto& c : concept_images) {
    if (p > c.rows() || p > c.cols()) throw ShapeError("localize: concept patch larger than concept image");
    Matrix patches = grid_patches(c, p, config.stride);
    normalize_columns(patches);
    heat += (patches.transpose() * windows).colwise().maxCoeff().transpose();
  }
  heat /= static_cast<double>(concept_images.size());
  heat = heat.cwiseMax(0.0);
  const double top = heat.maxCoeff();
  if (top > 0) heat /= top;
  return unflatten(heat, test_image.rows(), test_image.cols());
}

double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ShapeError("trapezoid_auc: need matching curves of length >= 2");
  double area = 0;
  for (std::size_t i = 1; i < x.size(); ++i) area += 0.5 * (x[i] - x[i - 1]) * (y[i] + y[i - 1]);
  return area;
}

Image delete_hottest(const Image& image, const Image& heatmap, double fraction, double fill_value) {
  if (heatmap.rows() != image.rows() || heatmap.cols() != image.cols())
    throw ShapeError("delete_hottest: heatmap shape differs from image");
  const auto n = image.size();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return heatmap.data()[a] > heatmap.data()[b]; });
  const auto k = static_cast<std::size_t>(std::llround(std::clamp(fraction, 0.0, 1.0) * static_cast<double>(n)));
  Image out = image;
  for (std::size_t i = 0; i < k; ++i) out.data()[order[i]] = fill_value;
  return out;
}

DeletionCurve c_deletion_curve(const probe::ProbeModel& probe, const ImageBatch& test_images, Eigen::Index m,
                               const ImageBatch& heatmaps, const DeletionConfig& config) {
  if (test_images.empty()) throw ValidationError("test_images", "empty batch");
  if (heatmaps.size() != test_images.size())
    throw ShapeError("c_deletion_curve: " + std::to_string(heatmaps.size()) + " heatmaps for " +
                     std::to_string(test_images.size()) + " images");
  if (config.steps < 2) throw ValidationError("steps", "must be at least 2");
  if (m < 0 || m >= probe.class_count()) throw ValidationError("class", "index out of range");
  const double fill = config.fill == Fill::mean ? config.mean_pixel : 0.0;

  DeletionCurve curve;
  for (int k = 0; k <= config.steps; ++k) {
    const double q = static_cast<double>(k) / config.steps;
    ImageBatch batch;
    for (std::size_t i = 0; i < test_images.size(); ++i)
      batch.push_back(delete_hottest(test_images[i], heatmaps[i], q, fill));
    curve.fractions.push_back(q);
    curve.probabilities.push_back(probe::probabilities(probe, batch).row(m).mean());
  }
  curve.auc = trapezoid_auc(curve.fractions, curve.probabilities);
  return curve;
}

ActionMetrics action_metrics(const std::vector<long long>& counts) {
  if (counts.empty()) throw ValidationError("counts", "empty");
  long long total = 0, top = 0;
  for (auto c : counts) {
    if (c < 0) throw ValidationError("counts", "must be non-negative");
    total += c;
    top = std::max(top, c);
  }
  if (total == 0) throw ValidationError("counts", "all zero");
  ActionMetrics out;
  for (auto c : counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    out.entropy -= p * std::log(p);
  }
  out.anc = static_cast<double>(total) / (static_cast<double>(counts.size()) * static_cast<double>(top));
  try {
    out.icv = icv(counts);
  } catch (const NumericError&) {
  }
  return out;
}

double icv(const std::vector<long long>& counts) {
  if (counts.empty()) throw ValidationError("counts", "empty");
  const double n = static_cast<double>(counts.size());
  double mean = 0;
  for (auto c : counts) mean += static_cast<double>(c);
  mean /= n;
  double var = 0;
  for (auto c : counts) var += (static_cast<double>(c) - mean) * (static_cast<double>(c) - mean);
  var /= n;
  if (var == 0) throw NumericError("icv: undefined for counts with zero spread");
  return mean / std::sqrt(var);
}

SurveyMetrics survey_metrics_from_accuracy(double accuracy) {
  if (!(accuracy >= 0 && accuracy <= 1)) throw ValidationError("accuracy", "must lie in [0, 1]");
  if (accuracy == 1) throw NumericError("survey_metrics: odds undefined at accuracy 1");
  return {accuracy, 1 - accuracy, accuracy / (1 - accuracy)};
}

SurveyMetrics survey_metrics(long long correct, long long total) {
  if (total <= 0) throw ValidationError("total", "must be positive");
  if (correct < 0 || correct > total) throw ValidationError("correct", "must lie in [0, total]");
  return survey_metrics_from_accuracy(static_cast<double>(correct) / static_cast<double>(total));
}

double wasserstein_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw ValidationError("samples", "empty");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  // Integrate |Qa(u) - Qb(u)| over the merged quantile breakpoints.
  std::vector<double> cuts;
  for (std::size_t i = 1; i < a.size(); ++i) cuts.push_back(static_cast<double>(i) / static_cast<double>(a.size()));
  for (std::size_t j = 1; j < b.size(); ++j) cuts.push_back(static_cast<double>(j) / static_cast<double>(b.size()));
  cuts.push_back(1.0);
  std::sort(cuts.begin(), cuts.end());
  double total = 0, prev = 0;
  for (double u : cuts) {
    if (u <= prev) continue;
    const double mid = 0.5 * (prev + u);
    const auto ia = std::min(a.size() - 1, static_cast<std::size_t>(mid * static_cast<double>(a.size())));
    const auto ib = std::min(b.size() - 1, static_cast<std::size_t>(mid * static_cast<double>(b.size())));
    total += (u - prev) * std::abs(a[ia] - b[ib]);
    prev = u;
  }
  return total;
}

double chi2_quantile_99(int dof) {
  if (dof < 1) throw ValidationError("dof", "must be positive");
  const double z = 2.326348;
  const double k = dof;
  const double c = 2.0 / (9.0 * k);
  return k * std::pow(1 - c + z * std::sqrt(c), 3);
}

SetStats set_statistics(const Matrix& a, const Matrix& b, const SetStatsConfig& config) {
  if (a.rows() != b.rows()) throw ShapeError("set_statistics: dimension mismatch");
  if (a.cols() < 2 || b.cols() < 2) throw ValidationError("sets", "need at least 2 vectors per set");
  if (config.n_projections < 1) throw ValidationError("n_projections", "must be positive");
  const auto d = a.rows();
  SetStats out;

  const Vector ma = a.rowwise().mean(), mb = b.rowwise().mean();
  const double nm = ma.norm() * mb.norm();
  out.mean_cosine = nm > 0 ? ma.dot(mb) / nm : 0.0;

  std::mt19937_64 rng(config.seed);
  std::normal_distribution<double> g(0.0, 1.0);
  double sw = 0;
  for (int k = 0; k < config.n_projections; ++k) {
    Vector dir = Vector::NullaryExpr(d, [&] { return g(rng); });
    dir /= dir.norm();
    const Vector pa = a.transpose() * dir, pb = b.transpose() * dir;
    sw += wasserstein_1d({pa.data(), pa.data() + pa.size()}, {pb.data(), pb.data() + pb.size()});
  }
  out.sliced_wasserstein = sw / config.n_projections;

  const double na = static_cast<double>(a.cols()), nb = static_cast<double>(b.cols());
  const Matrix ca = a.colwise() - ma, cb = b.colwise() - mb;
  Matrix pooled = (ca * ca.transpose() + cb * cb.transpose()) / (na + nb - 2);
  pooled.diagonal().array() += config.ridge;
  const Eigen::LDLT<Matrix> ldlt(pooled);
  const Vector diff = ma - mb;
  const Vector solved = ldlt.solve(diff);
  if (ldlt.info() != Eigen::Success || !solved.allFinite() || !(ldlt.vectorD().minCoeff() > 0))
    throw NumericError("set_statistics: pooled covariance is singular even with the ridge");
  out.hotelling_t2 = na * nb / (na + nb) * diff.dot(solved);
  out.chi2_threshold = chi2_quantile_99(static_cast<int>(d));
  out.same_distribution = out.hotelling_t2 < out.chi2_threshold;
  return out;
}

double concept_tcav(const probe::ProbeModel& probe, const world::World& world, const ConceptSet& concept_set,
                    const tcav::GroupConfig& config, std::uint64_t seed) {
  if (concept_set.images.empty()) throw ValidationError("concept_images", "empty batch");
  const auto idx = sample_indices(world.random_pool.size(), static_cast<std::size_t>(config.random_set_size), seed);
  ImageBatch random;
  for (auto i : idx) random.push_back(world.random_pool[i]);
  const auto cav = tcav::fit_cav(probe::activations_at_l(probe, concept_set.images),
                                 probe::activations_at_l(probe, random), config.cav);
  const auto tests = world.dataset.select(concept_set.label, world::Split::test);
  return tcav::tcav_score(probe, cav, tests, concept_set.label).value;
}

FineTuned fine_tune_on_concepts(const probe::ProbeModel& probe, const world::World& world,
                                const std::vector<ConceptSet>& train_sets, const std::vector<ConceptSet>& score_sets,
                                const FineTuneConfig& config) {
  for (const auto* sets : {&train_sets, &score_sets})
    for (const auto& s : *sets)
      if (s.label < 0 || s.label >= probe.class_count())
        throw ValidationError("label", "'" + s.keyword + "' targets an unknown class");

  FineTuned out;
  out.model = probe;
  out.report.accuracy_before = probe::split_accuracy(probe, world.dataset, world::Split::test);
  for (std::size_t i = 0; i < score_sets.size(); ++i)
    out.report.concepts.push_back(
        {score_sets[i].keyword, concept_tcav(probe, world, score_sets[i], config.tcav, derive_seed(config.seed, i)), 0});

  ImageBatch images;
  std::vector<int> labels;
  for (const auto& s : train_sets)
    for (const auto& img : s.images) {
      images.push_back(img);
      labels.push_back(s.label);
    }
  const auto train_idx = world.dataset.indices(world::Split::train);
  for (auto k : sample_indices(train_idx.size(), images.size(), derive_seed(config.seed, "mix"))) {
    const auto i = train_idx[k];
    images.push_back(world.dataset.images[i]);
    labels.push_back(world.dataset.labels[i]);
  }
  probe::continue_training(out.model, images, labels, config.epochs, config.learning_rate, config.batch_size,
                           derive_seed(config.seed, "train"));

  out.report.accuracy_after = probe::split_accuracy(out.model, world.dataset, world::Split::test);
  for (std::size_t i = 0; i < score_sets.size(); ++i)
    out.report.concepts[i].after =
        concept_tcav(out.model, world, score_sets[i], config.tcav, derive_seed(config.seed, i));
  return out;
}

namespace {

Vector average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> order(v.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  Vector r(static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + j) + 1;
    for (std::size_t k = i; k <= j; ++k) r(static_cast<Eigen::Index>(order[k])) = rank;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ShapeError("spearman: inputs differ in length");
  if (x.size() < 2) throw ValidationError("x", "needs at least two points");
  Vector rx = average_ranks(x), ry = average_ranks(y);
  rx.array() -= rx.mean();
  ry.array() -= ry.mean();
  const double den = rx.norm() * ry.norm();
  if (den == 0) throw NumericError("spearman: constant input");
  return rx.dot(ry) / den;
}

}  // namespace rlpo::evalx
