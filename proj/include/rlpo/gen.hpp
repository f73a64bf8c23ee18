#pragma once

// Tiny prompt-conditioned DDPM: noise schedule, epsilon-prediction MLP with
// adapter slots, pretraining and ancestral sampling.
//
// Images live in [0,1]; the diffusion operates on x0 = 2*img - 1.

#include "rlpo/nn.hpp"
#include "rlpo/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rlpo::gen {

struct DiffusionSchedule {
  std::vector<double> betas;      // beta_1..beta_T at index t-1
  std::vector<double> alpha_bar;  // alpha_bar_1..alpha_bar_T at index t-1

  int steps() const { return static_cast<int>(betas.size()); }
  double beta(int t) const { return betas.at(static_cast<std::size_t>(t - 1)); }
  double abar(int t) const { return t == 0 ? 1.0 : alpha_bar.at(static_cast<std::size_t>(t - 1)); }
  double alpha(int t) const;  // sqrt(alpha_bar_t)
  double sigma(int t) const;  // sqrt(1 - alpha_bar_t)
  double snr(int t) const;
  double posterior_variance(int t) const;

  void validate() const;
  static DiffusionSchedule from_betas(std::vector<double> betas);
};

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end);

// x_t = alpha_t x0 + sigma_t eps, elementwise.
template <typename Derived>
auto q_sample(const Eigen::MatrixBase<Derived>& x0, int t, const Eigen::MatrixBase<Derived>& eps,
              const DiffusionSchedule& schedule) {
  if (t < 1 || t > schedule.steps()) throw ValidationError("t", "out of range");
  if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) throw ShapeError("q_sample: noise shape differs");
  return (schedule.alpha(t) * x0 + schedule.sigma(t) * eps).eval();
}
Image q_sample_image(const Image& x0, int t, const Image& eps, const DiffusionSchedule& schedule);

struct GeneratorState {
  nn::Mlp<Real> base;
  nn::AdapterMap<Real> adapters;
  std::map<std::string, Vector> prompt_table;
  DiffusionSchedule schedule;
  Eigen::Index height = 16;
  Eigen::Index width = 16;
  Eigen::Index time_dim = 16;
  Eigen::Index prompt_dim = 8;
  // Mean and covariance eigenpairs of model-space training images. The network
  // predicts the residual over the best linear (Gaussian) estimate of the noise,
  // which removes noise in directions the data never varies along.
  Vector data_mean;
  Matrix data_basis;
  Vector data_spectrum;

  void set_data_statistics(const Matrix& x0);
  void reset_data_statistics(double variance = 0.5);
  Eigen::Index image_dim() const { return height * width; }
  Eigen::Index input_dim() const { return image_dim() + time_dim + prompt_dim; }
  const Vector& prompt(const std::string& keyword) const;
  std::vector<std::string> vocabulary() const;
  void validate() const;
};

struct GeneratorConfig {
  std::vector<Eigen::Index> hidden_dims{256, 256};
  Eigen::Index time_dim = 16;
  Eigen::Index prompt_dim = 8;
  int diffusion_steps = 100;
  double beta_start = 1e-4;
  double beta_end = 0.2;
  Eigen::Index height = 16;
  Eigen::Index width = 16;
};

GeneratorState make_generator(const GeneratorConfig& config, const std::vector<std::string>& vocabulary,
                              std::uint64_t seed);

struct AdapterConfig {
  std::vector<std::size_t> layers{0, 1};
  Eigen::Index rank = 8;
  double scale = 1.0;  // lambda
  double init_std = 0.02;
};

// Replaces state.adapters with fresh no-op adapters (b = 0).
void attach_adapters(GeneratorState& state, const AdapterConfig& config, std::uint64_t seed);

Vector time_embedding(int t, Eigen::Index dim);

// Columns of xt are flattened model-space images. Returns the network input.
Matrix build_input(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts, const std::string& keyword);
Matrix build_input(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts, const Vector& prompt);

// eps_hat = skip_term(x_t, t) + net(input); `trace` receives the network pass.
Matrix eps_predict_batch(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts,
                         const std::string& keyword, bool use_adapters, nn::ForwardTrace<Real>* trace);
Matrix eps_predict_batch(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts,
                         const std::string& keyword, bool use_adapters);
Matrix skip_term(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts);
Image eps_predict(const GeneratorState& state, const Image& xt, int t, const std::string& keyword, bool use_adapters);

struct PretrainConfig {
  int steps = 3000;
  int batch = 64;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  int eval_draws = 512;       // fixed evaluation set for initial/final loss
  int smoothing_window = 100;
  double loss_threshold = 0.6;  // final/initial ratio required for `converged`
};

struct PretrainReport {
  std::vector<double> loss_curve;  // per step, per-pixel MSE
  double initial_loss = 0;         // on the fixed evaluation draws
  double final_loss = 0;
  double smoothed_final = 0;       // mean of the last window of the curve
  bool converged = false;
};

// Trains base weights and the prompt table on (image, keyword) pairs. Images in
// [0,1]. Adapters are not touched.
PretrainReport pretrain(GeneratorState& state, const ImageBatch& images, const std::vector<std::string>& keywords,
                        const PretrainConfig& config);

// Mean per-pixel epsilon MSE on a seeded set of (image, t, eps) draws.
double eval_loss(const GeneratorState& state, const ImageBatch& images, const std::vector<std::string>& keywords,
                 int draws, std::uint64_t seed);

// Ancestral sampling from x_T ~ N(0, I); output mapped back to [0,1] and clamped.
ImageBatch sample(const GeneratorState& state, const std::string& keyword, int n, std::uint64_t seed, bool use_adapters);

void save_generator(const GeneratorState& state, const std::filesystem::path& path);
GeneratorState load_generator(const std::filesystem::path& path);

}  // namespace rlpo::gen
