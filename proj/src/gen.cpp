#include "rlpo/gen.hpp"

#include "rlpo/tensor_io.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rlpo::gen {

double DiffusionSchedule::alpha(int t) const { return std::sqrt(abar(t)); }
double DiffusionSchedule::sigma(int t) const { return std::sqrt(1.0 - abar(t)); }
double DiffusionSchedule::snr(int t) const { return abar(t) / (1.0 - abar(t)); }

double DiffusionSchedule::posterior_variance(int t) const {
  return beta(t) * (1.0 - abar(t - 1)) / (1.0 - abar(t));
}

void DiffusionSchedule::validate() const {
  if (betas.empty() || betas.size() != alpha_bar.size()) throw ValidationError("schedule", "empty or inconsistent");
  for (std::size_t i = 0; i < alpha_bar.size(); ++i) {
    if (!(alpha_bar[i] > 0.0 && alpha_bar[i] < 1.0)) throw ValidationError("alpha_bar", "must lie in (0,1)");
    if (i > 0 && !(alpha_bar[i] < alpha_bar[i - 1])) throw ValidationError("alpha_bar", "must strictly decrease");
  }
}

DiffusionSchedule DiffusionSchedule::from_betas(std::vector<double> betas) {
  DiffusionSchedule s;
  double prod = 1.0;
  for (double b : betas) {
    if (!(b > 0.0 && b < 1.0)) throw ValidationError("beta", "must lie in (0,1)");
    prod *= 1.0 - b;
    s.alpha_bar.push_back(prod);
  }
  s.betas = std::move(betas);
  s.validate();
  return s;
}

DiffusionSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 2) throw ValidationError("T_diff", "must be >= 2");
  if (!(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0))
    throw ValidationError("beta", "need 0 < beta_start < beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(steps));
  for (int i = 0; i < steps; ++i) betas[static_cast<std::size_t>(i)] = beta_start + (beta_end - beta_start) * i / (steps - 1);
  return DiffusionSchedule::from_betas(std::move(betas));
}

Image q_sample_image(const Image& x0, int t, const Image& eps, const DiffusionSchedule& schedule) {
  return q_sample(x0, t, eps, schedule);
}

const Vector& GeneratorState::prompt(const std::string& keyword) const {
  const auto it = prompt_table.find(keyword);
  if (it == prompt_table.end()) throw ValidationError("keyword", "unknown keyword '" + keyword + "'");
  return it->second;
}

void GeneratorState::set_data_statistics(const Matrix& x0) {
  if (x0.rows() != image_dim() || x0.cols() < 2) throw ShapeError("data statistics need image columns");
  data_mean = x0.rowwise().mean();
  const Matrix centered = x0.colwise() - data_mean;
  const Matrix cov = centered * centered.transpose() / static_cast<double>(x0.cols() - 1);
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  data_basis = eig.eigenvectors();
  data_spectrum = eig.eigenvalues().cwiseMax(0.0);
}

void GeneratorState::reset_data_statistics(double variance) {
  data_mean = Vector::Zero(image_dim());
  data_basis = Matrix::Identity(image_dim(), image_dim());
  data_spectrum = Vector::Constant(image_dim(), variance);
}

std::vector<std::string> GeneratorState::vocabulary() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : prompt_table) out.push_back(k);
  return out;
}

void GeneratorState::validate() const {
  base.validate();
  schedule.validate();
  if (base.input_dim() != input_dim()) throw ShapeError("generator: base input dimension mismatch");
  if (base.output_dim() != image_dim()) throw ShapeError("generator: base output dimension mismatch");
  for (const auto& [k, v] : prompt_table)
    if (v.size() != prompt_dim) throw ShapeError("generator: prompt '" + k + "' has wrong dimension");
  nn::validate_adapters(base, adapters);
  if (data_mean.size() != image_dim() || data_spectrum.size() != image_dim() || data_basis.rows() != image_dim() ||
      data_basis.cols() != image_dim())
    throw ShapeError("generator: data statistics have wrong dimension");
}

GeneratorState make_generator(const GeneratorConfig& config, const std::vector<std::string>& vocabulary,
                              std::uint64_t seed) {
  if (vocabulary.empty()) throw ConfigError("generator: empty vocabulary");
  GeneratorState s;
  s.height = config.height;
  s.width = config.width;
  s.time_dim = config.time_dim;
  s.prompt_dim = config.prompt_dim;
  s.schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end);
  std::vector<Eigen::Index> dims{s.input_dim()};
  dims.insert(dims.end(), config.hidden_dims.begin(), config.hidden_dims.end());
  dims.push_back(s.image_dim());
  std::mt19937_64 rng(derive_seed(seed, "base"));
  s.base = nn::make_mlp<Real>(dims, nn::Activation::relu, nn::Activation::identity, rng);
  // Start from the skip-only predictor.
  s.base.layers.back().weight.setZero();
  s.reset_data_statistics();
  std::mt19937_64 prng(derive_seed(seed, "prompts"));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (const auto& kw : vocabulary) s.prompt_table[kw] = Vector::NullaryExpr(s.prompt_dim, [&] { return gauss(prng); });
  return s;
}

void attach_adapters(GeneratorState& state, const AdapterConfig& config, std::uint64_t seed) {
  std::mt19937_64 rng(derive_seed(seed, "adapters"));
  state.adapters.clear();
  for (auto layer : config.layers) {
    if (layer >= state.base.depth()) throw ConfigError("adapter targets missing layer " + std::to_string(layer));
    const auto& l = state.base.layers[layer];
    state.adapters[layer] = nn::make_adapter<Real>(l.out_dim(), l.in_dim(), config.rank, config.scale, rng, config.init_std);
  }
}

Vector time_embedding(int t, Eigen::Index dim) {
  const Eigen::Index half = dim / 2;
  Vector e = Vector::Zero(dim);
  for (Eigen::Index i = 0; i < half; ++i) {
    const double freq = std::pow(1000.0, -static_cast<double>(i) / static_cast<double>(half));
    e(i) = std::sin(t * freq);
    e(half + i) = std::cos(t * freq);
  }
  return e;
}

namespace {

Matrix assemble(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts,
                const std::vector<const Vector*>& prompts) {
  if (xt.rows() != state.image_dim()) throw ShapeError("generator: image dimension mismatch");
  if (static_cast<Eigen::Index>(ts.size()) != xt.cols()) throw ShapeError("generator: one timestep per column");
  Matrix in(state.input_dim(), xt.cols());
  in.topRows(state.image_dim()) = xt;
  for (Eigen::Index j = 0; j < xt.cols(); ++j) {
    const int t = ts[static_cast<std::size_t>(j)];
    if (t < 1 || t > state.schedule.steps()) throw ValidationError("t", "out of range");
    in.block(state.image_dim(), j, state.time_dim, 1) = time_embedding(t, state.time_dim);
    in.block(state.image_dim() + state.time_dim, j, state.prompt_dim, 1) = *prompts[static_cast<std::size_t>(j)];
  }
  return in;
}

}  // namespace

Matrix build_input(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts, const Vector& prompt) {
  if (prompt.size() != state.prompt_dim) throw ShapeError("generator: prompt dimension mismatch");
  return assemble(state, xt, ts, std::vector<const Vector*>(ts.size(), &prompt));
}

Matrix build_input(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts, const std::string& keyword) {
  return build_input(state, xt, ts, state.prompt(keyword));
}

Matrix skip_term(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts) {
  if (static_cast<Eigen::Index>(ts.size()) != xt.cols()) throw ShapeError("skip_term: one timestep per column");
  const auto& sch = state.schedule;
  const Matrix& u = state.data_basis;
  Matrix proj(xt.rows(), xt.cols());
  for (Eigen::Index j = 0; j < xt.cols(); ++j) {
    const int t = ts[static_cast<std::size_t>(j)];
    proj.col(j) = xt.col(j) - sch.alpha(t) * state.data_mean;
  }
  proj = u.transpose() * proj;
  for (Eigen::Index j = 0; j < xt.cols(); ++j) {
    const int t = ts[static_cast<std::size_t>(j)];
    const double a2 = sch.abar(t);
    const double s2 = 1.0 - a2;
    proj.col(j).array() *= std::sqrt(s2) / (a2 * state.data_spectrum.array() + s2);
  }
  return u * proj;
}

Matrix eps_predict_batch(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts,
                         const std::string& keyword, bool use_adapters, nn::ForwardTrace<Real>* trace) {
  const Matrix in = build_input(state, xt, ts, keyword);
  auto tr = nn::forward(state.base, in, use_adapters ? &state.adapters : nullptr);
  Matrix out = skip_term(state, xt, ts) + tr.output();
  if (trace) *trace = std::move(tr);
  return out;
}

Matrix eps_predict_batch(const GeneratorState& state, const Matrix& xt, const std::vector<int>& ts,
                         const std::string& keyword, bool use_adapters) {
  return eps_predict_batch(state, xt, ts, keyword, use_adapters, nullptr);
}

Image eps_predict(const GeneratorState& state, const Image& xt, int t, const std::string& keyword, bool use_adapters) {
  const Matrix out = eps_predict_batch(state, Matrix(flatten(xt)), {t}, keyword, use_adapters);
  return unflatten(out.col(0), xt.rows(), xt.cols());
}

double eval_loss(const GeneratorState& state, const ImageBatch& images, const std::vector<std::string>& keywords,
                 int draws, std::uint64_t seed) {
  if (images.empty() || images.size() != keywords.size()) throw ShapeError("eval_loss: images and keywords differ");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::uniform_int_distribution<int> tdist(1, state.schedule.steps());
  std::normal_distribution<double> gauss(0.0, 1.0);
  double total = 0;
  for (int i = 0; i < draws; ++i) {
    const auto k = pick(rng);
    const int t = tdist(rng);
    const Vector x0 = (2.0 * flatten(images[k]).array() - 1.0).matrix();
    const Vector eps = Vector::NullaryExpr(state.image_dim(), [&] { return gauss(rng); });
    const Vector xt = q_sample(x0, t, eps, state.schedule);
    const Matrix pred = eps_predict_batch(state, Matrix(xt), {t}, keywords[k], false);
    total += (pred.col(0) - eps).squaredNorm() / static_cast<double>(state.image_dim());
  }
  return total / draws;
}

PretrainReport pretrain(GeneratorState& state, const ImageBatch& images, const std::vector<std::string>& keywords,
                        const PretrainConfig& config) {
  if (images.empty() || images.size() != keywords.size())
    throw ValidationError("keywords", "every training image needs a keyword");
  for (const auto& kw : keywords) state.prompt(kw);
  const std::uint64_t eval_seed = derive_seed(config.seed, "eval");
  PretrainReport report;
  report.initial_loss = eval_loss(state, images, keywords, config.eval_draws, eval_seed);
  // The data statistics are fitted here, so they count as part of training.
  if (config.steps > 0) {
    const Matrix x0 = (2.0 * stack_columns(images).array() - 1.0).matrix();
    state.set_data_statistics(x0);
  }

  std::mt19937_64 rng(derive_seed(config.seed, "train"));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::uniform_int_distribution<int> tdist(1, state.schedule.steps());
  std::normal_distribution<double> gauss(0.0, 1.0);
  nn::OptimizerState<Real> opt;
  nn::OptimizerConfig ocfg;
  ocfg.learning_rate = config.learning_rate;

  // Fixed order of prompt parameters for the optimizer.
  std::vector<std::string> vocab = state.vocabulary();
  const Eigen::Index d = state.image_dim();
  const Eigen::Index prompt_row = d + state.time_dim;

  for (int step = 0; step < config.steps; ++step) {
    const int b = config.batch;
    Matrix xt(d, b);
    Matrix eps(d, b);
    std::vector<int> ts(static_cast<std::size_t>(b));
    std::vector<const Vector*> prompts(static_cast<std::size_t>(b));
    std::vector<std::size_t> which(static_cast<std::size_t>(b));
    for (int j = 0; j < b; ++j) {
      const auto k = pick(rng);
      which[static_cast<std::size_t>(j)] = k;
      ts[static_cast<std::size_t>(j)] = tdist(rng);
      eps.col(j) = Vector::NullaryExpr(d, [&] { return gauss(rng); });
      const Vector x0 = (2.0 * flatten(images[k]).array() - 1.0).matrix();
      xt.col(j) = q_sample(x0, ts[static_cast<std::size_t>(j)], Vector(eps.col(j)), state.schedule);
      prompts[static_cast<std::size_t>(j)] = &state.prompt_table.at(keywords[k]);
    }
    const Matrix in = assemble(state, xt, ts, prompts);
    const auto trace = nn::forward(state.base, in);
    const Matrix diff = skip_term(state, xt, ts) + trace.output() - eps;
    const double loss = diff.squaredNorm() / static_cast<double>(d * b);
    if (!std::isfinite(loss)) throw NumericError("generator pretraining diverged at step " + std::to_string(step));
    report.loss_curve.push_back(loss);
    const Matrix upstream = diff * (2.0 / static_cast<double>(d * b));
    const auto grads = nn::backward(state.base, nullptr, trace, upstream, nn::GradRequest{true, false, true});

    std::map<std::string, Vector> prompt_grads;
    for (const auto& kw : vocab) prompt_grads[kw] = Vector::Zero(state.prompt_dim);
    for (int j = 0; j < b; ++j)
      prompt_grads[keywords[which[static_cast<std::size_t>(j)]]] += grads.input.block(prompt_row, j, state.prompt_dim, 1);

    auto params = nn::parameter_views(state.base);
    auto gviews = nn::param_gradient_views(grads);
    for (const auto& kw : vocab) {
      params.push_back(nn::flat(state.prompt_table.at(kw)));
      gviews.push_back(nn::flat(std::as_const(prompt_grads.at(kw))));
    }
    nn::optimizer_step(std::move(params), gviews, opt, ocfg);
  }

  report.final_loss = eval_loss(state, images, keywords, config.eval_draws, eval_seed);
  if (report.loss_curve.empty()) {
    report.smoothed_final = report.initial_loss;
  } else {
    const std::size_t w = std::min(report.loss_curve.size(), static_cast<std::size_t>(std::max(1, config.smoothing_window)));
    report.smoothed_final =
        std::accumulate(report.loss_curve.end() - static_cast<std::ptrdiff_t>(w), report.loss_curve.end(), 0.0) / w;
  }
  report.converged = report.final_loss <= config.loss_threshold * report.initial_loss;
  return report;
}

ImageBatch sample(const GeneratorState& state, const std::string& keyword, int n, std::uint64_t seed, bool use_adapters) {
  if (n < 2 || n % 2 != 0) throw ValidationError("n", "must be even and >= 2");
  const Vector& prompt = state.prompt(keyword);
  const auto& sch = state.schedule;
  const Eigen::Index d = state.image_dim();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Matrix x = Matrix::NullaryExpr(d, n, [&] { return gauss(rng); });
  for (int t = sch.steps(); t >= 1; --t) {
    const std::vector<int> ts(static_cast<std::size_t>(n), t);
    const Matrix in = build_input(state, x, ts, prompt);
    const Matrix eps = skip_term(state, x, ts) + nn::forward(state.base, in, use_adapters ? &state.adapters : nullptr).output();
    const double beta = sch.beta(t);
    const double alpha_t = 1.0 - beta;
    x = (x - (beta / sch.sigma(t)) * eps) / std::sqrt(alpha_t);
    if (t > 1) {
      const double sd = std::sqrt(sch.posterior_variance(t));
      x += sd * Matrix::NullaryExpr(d, n, [&] { return gauss(rng); });
    }
    if (!x.allFinite()) throw NumericError("sampling produced non-finite values at t=" + std::to_string(t));
  }
  ImageBatch out;
  for (Eigen::Index j = 0; j < n; ++j) {
    const Vector img = ((x.col(j).array() + 1.0) / 2.0).cwiseMax(0.0).cwiseMin(1.0).matrix();
    out.push_back(unflatten(img, state.height, state.width));
  }
  return out;
}

void save_generator(const GeneratorState& state, const std::filesystem::path& path) {
  std::vector<io::Tensor> tensors;
  const auto vocab = state.vocabulary();
  io::Json meta = {{"kind", "generator"},
                   {"height", state.height},
                   {"width", state.width},
                   {"time_dim", state.time_dim},
                   {"prompt_dim", state.prompt_dim},
                   {"betas", state.schedule.betas},
                   {"vocabulary", vocab}};
  io::append_mlp(tensors, meta, "base", state.base);
  Matrix prompts(static_cast<Eigen::Index>(vocab.size()), state.prompt_dim);
  for (std::size_t i = 0; i < vocab.size(); ++i)
    prompts.row(static_cast<Eigen::Index>(i)) = state.prompt_table.at(vocab[i]).transpose();
  tensors.push_back(io::from_matrix("prompts", prompts));
  tensors.push_back(io::from_matrix("data_mean", state.data_mean));
  tensors.push_back(io::from_matrix("data_basis", state.data_basis));
  tensors.push_back(io::from_matrix("data_spectrum", state.data_spectrum));
  if (!state.adapters.empty()) io::append_adapters(tensors, meta, "lora", state.adapters);
  io::save_tensors(path, tensors, meta);
}

GeneratorState load_generator(const std::filesystem::path& path) {
  const auto file = io::load_tensors(path);
  if (file.meta.value("kind", "") != "generator") throw IoError(path.string() + ": not a generator checkpoint");
  GeneratorState s;
  s.height = file.meta.at("height").get<Eigen::Index>();
  s.width = file.meta.at("width").get<Eigen::Index>();
  s.time_dim = file.meta.at("time_dim").get<Eigen::Index>();
  s.prompt_dim = file.meta.at("prompt_dim").get<Eigen::Index>();
  s.schedule = DiffusionSchedule::from_betas(file.meta.at("betas").get<std::vector<double>>());
  s.base = io::read_mlp(file, "base");
  const auto vocab = file.meta.at("vocabulary").get<std::vector<std::string>>();
  const Matrix prompts = io::to_matrix(file.get("prompts"));
  for (std::size_t i = 0; i < vocab.size(); ++i) s.prompt_table[vocab[i]] = prompts.row(static_cast<Eigen::Index>(i)).transpose();
  s.data_mean = io::to_matrix(file.get("data_mean")).col(0);
  s.data_basis = io::to_matrix(file.get("data_basis"));
  s.data_spectrum = io::to_matrix(file.get("data_spectrum")).col(0);
  if (file.meta.contains("adapters")) s.adapters = io::read_adapters(file, "lora");
  s.validate();
  return s;
}

}  // namespace rlpo::gen
