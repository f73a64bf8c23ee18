#pragma once

// Evaluation: localization heatmaps, c-deletion, action and survey metrics,
// concept-set statistics and the fine-tune-on-concepts use case.

#include "rlpo/probe.hpp"
#include "rlpo/synthworld.hpp"
#include "rlpo/tcav.hpp"
#include "rlpo/types.hpp"

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace rlpo::evalx {

struct LocalizeConfig {
  int patch = 5;   // side of the square concept patches
  int stride = 2;  // patch grid inside each concept image
};

// Normalized cross-correlation of concept patches against the window centred
// on each test pixel (edges replicated). Per concept image the best patch
// counts; the mean over concept images is rectified and scaled to max 1.
Image localize(const ImageBatch& concept_images, const Image& test_image, const LocalizeConfig& config = {});

enum class Fill { mean, zero };

struct DeletionConfig {
  int steps = 10;
  Fill fill = Fill::mean;
  double mean_pixel = 0.5;  // used by Fill::mean, normally the dataset mean
};

struct DeletionCurve {
  std::vector<double> fractions;
  std::vector<double> probabilities;
  double auc = 0;
};

double trapezoid_auc(const std::vector<double>& x, const std::vector<double>& y);

// Hottest pixels go first; equal heat falls back to row-major order.
Image delete_hottest(const Image& image, const Image& heatmap, double fraction, double fill_value);

DeletionCurve c_deletion_curve(const probe::ProbeModel& probe, const ImageBatch& test_images, Eigen::Index m,
                               const ImageBatch& heatmaps, const DeletionConfig& config = {});

struct ActionMetrics {
  double entropy = 0;  // nats
  double anc = 0;
  std::optional<double> icv;  // absent when the counts have zero spread
};

ActionMetrics action_metrics(const std::vector<long long>& counts);
// Throws NumericError when the population standard deviation is zero.
double icv(const std::vector<long long>& counts);

struct SurveyMetrics {
  double accuracy = 0;
  double eg = 0;
  double odds = 0;
};

SurveyMetrics survey_metrics(long long correct, long long total);
SurveyMetrics survey_metrics_from_accuracy(double accuracy);

// Rank correlation with average ranks for ties. Throws NumericError when
// either input is constant.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

struct SetStatsConfig {
  int n_projections = 64;
  std::uint64_t seed = 0;
  double ridge = 1e-6;
};

struct SetStats {
  double mean_cosine = 0;
  double sliced_wasserstein = 0;
  double hotelling_t2 = 0;
  double chi2_threshold = 0;
  bool same_distribution = false;
};

// 1-D Wasserstein-1 between two empirical samples of any sizes.
double wasserstein_1d(std::vector<double> a, std::vector<double> b);
// Wilson-Hilferty approximation of the chi-square 0.99 quantile.
double chi2_quantile_99(int dof);

// Columns are samples.
SetStats set_statistics(const Matrix& set_a, const Matrix& set_b, const SetStatsConfig& config = {});

struct ConceptSet {
  std::string keyword;
  ImageBatch images;
  int label = 0;  // class the concept is meant to explain
};

struct FineTuneConfig {
  int epochs = 3;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::uint64_t seed = 1;
  tcav::GroupConfig tcav;
};

struct ConceptDelta {
  std::string keyword;
  double before = 0;
  double after = 0;
};

struct FineTuneReport {
  double accuracy_before = 0;
  double accuracy_after = 0;
  std::vector<ConceptDelta> concepts;
};

struct FineTuned {
  probe::ProbeModel model;
  FineTuneReport report;
};

// TCAV of a concept set for its label, against a seeded random sample.
double concept_tcav(const probe::ProbeModel& probe, const world::World& world, const ConceptSet& concept_set,
                    const tcav::GroupConfig& config, std::uint64_t seed);

// Continues training on the concept images mixed 1:1 with a seeded draw of
// the training split, then re-scores `score_sets` with the same random draws.
FineTuned fine_tune_on_concepts(const probe::ProbeModel& probe, const world::World& world,
                                const std::vector<ConceptSet>& train_sets, const std::vector<ConceptSet>& score_sets,
                                const FineTuneConfig& config = {});

}  // namespace rlpo::evalx
