#pragma once

#include "rlpo/gen.hpp"
#include "rlpo/nn.hpp"
#include "rlpo/types.hpp"

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace rlpo::prefopt {

struct PreferencePair {
  ImageBatch winner;
  ImageBatch loser;
  std::string keyword;
  double ts_winner = 0;
  double ts_loser = 0;
  int step = 0;

  void validate() const;
};

struct DpoConfig {
  // Collapses beta * T * omega(lambda_t) into one coefficient.
  double kappa = 50.0;
  int inner_steps = 1;
  double learning_rate = 1e-3;
  nn::Algorithm algorithm = nn::Algorithm::adam;
  int noise_draws_per_image = 4;
  double clip_norm = 10.0;

  void validate() const;
};

struct Split {
  std::vector<std::size_t> group1;
  std::vector<std::size_t> group2;
};

// Random partition of `n` indices into two halves; order within each half is
// shuffled too, which fixes the winner[i] <-> loser[i] pairing.
Split split_indices(std::size_t n, std::uint64_t seed);
std::pair<ImageBatch, ImageBatch> split_groups(const ImageBatch& batch, std::uint64_t seed);

enum class DecisionKind { apply_dpo, reached_explainable, no_signal };

struct Decision {
  DecisionKind kind = DecisionKind::no_signal;
  int winner = 0;  // 1 or 2 for apply_dpo, else 0
  int loser = 0;
};

// max(ts1, ts2) > eta is explainable; with `inclusive` the boundary counts too.
Decision decide_preference(double ts1, double ts2, double eta, bool inclusive = false);
const char* to_string(DecisionKind kind);

struct DrawErrors {
  double winner_theta = 0;
  double winner_ref = 0;
  double loser_theta = 0;
  double loser_ref = 0;
};

// -log sigmoid(-kappa [(e_w - e_wref) - (e_l - e_lref)])
double draw_loss(const DrawErrors& e, double kappa);

struct DpoLoss {
  double loss = 0;
  nn::Gradients<Real> gradients;  // adapter entries only
  std::vector<DrawErrors> draws;
};

DpoLoss dpo_loss(const gen::GeneratorState& state, const PreferencePair& pair, const DpoConfig& config,
                 std::uint64_t seed);

struct DpoRecord {
  double loss_before = 0;
  double loss_after = 0;
  double grad_norm = 0;
  int inner_steps = 0;
};

DpoRecord apply_dpo_update(gen::GeneratorState& state, const PreferencePair& pair, const DpoConfig& config,
                           std::uint64_t seed);

}  // namespace rlpo::prefopt
