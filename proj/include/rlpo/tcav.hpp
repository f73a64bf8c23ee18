#pragma once

// Concept activation vectors and TCAV scores.

#include "rlpo/probe.hpp"
#include "rlpo/types.hpp"

#include <cstdint>
#include <string>

namespace rlpo::tcav {

struct Cav {
  Vector v;  // unit normal, concept side positive
  double fit_accuracy = 0;
  std::string concept_id;
  std::string random_set_id;
};

struct CavConfig {
  int max_iterations = 1000;
  double learning_rate = 1.0;
  double l2 = 1e-3;
  double tolerance = 1e-7;  // stop once the gradient norm falls below this
};

struct ConceptScore {
  double value = 0;
  int positive = 0;
  int n_test = 0;
};

// Columns of the two matrices are activation vectors. Class-balanced
// L2-regularized logistic regression trained by full-batch gradient descent
// from zero on globally rescaled inputs.
Cav fit_cav(const Matrix& concept_acts, const Matrix& random_acts, const CavConfig& config = {});

// Fraction of directional derivatives that are strictly positive.
ConceptScore score_from_gradients(const Matrix& grads, const Vector& v);
ConceptScore tcav_score(const probe::ProbeModel& model, const Cav& cav, const ImageBatch& test_images, Eigen::Index m);

struct GroupConfig {
  int random_set_size = 50;
  CavConfig cav;
};

struct GroupScores {
  ConceptScore ts1;
  ConceptScore ts2;
  Cav cav1;
  Cav cav2;
  std::vector<std::size_t> random_indices;
};

// Draws one random sample from the pool with `seed` and fits both groups'
// CAVs against it.
GroupScores score_groups(const probe::ProbeModel& model, const ImageBatch& test_images, Eigen::Index m,
                         const ImageBatch& g1, const ImageBatch& g2, const ImageBatch& random_pool,
                         const GroupConfig& config, std::uint64_t seed);

using rlpo::sample_indices;

}  // namespace rlpo::tcav
