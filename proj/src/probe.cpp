#include "rlpo/probe.hpp"

#include "rlpo/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rlpo::probe {

void ProbeModel::validate() const {
  net.validate();
  if (layer_index < 1 || layer_index >= net.depth())
    throw ValidationError("layer_index", "must satisfy 1 <= l < number of layers");
  if (!class_names.empty() && static_cast<Eigen::Index>(class_names.size()) != class_count())
    throw ValidationError("class_names", "count does not match the output dimension");
  if (height * width != input_dim()) throw ValidationError("input_dim", "does not match image size");
}

Matrix softmax(const Matrix& logits) {
  Matrix out = logits;
  for (Eigen::Index j = 0; j < out.cols(); ++j) {
    out.col(j).array() -= out.col(j).maxCoeff();
    out.col(j) = out.col(j).array().exp().matrix();
    out.col(j) /= out.col(j).sum();
  }
  return out;
}

namespace {

void check_image(const ProbeModel& model, const Image& x) {
  if (x.size() != model.input_dim())
    throw ShapeError("probe: image has " + std::to_string(x.size()) + " pixels, expected " +
                     std::to_string(model.input_dim()));
}

Matrix stack_checked(const ProbeModel& model, const ImageBatch& images) {
  for (const auto& x : images) check_image(model, x);
  return stack_columns(images);
}

// Mean softmax cross-entropy against target distributions (columns of
// `targets`) and its gradient w.r.t. the logits.
double cross_entropy(const Matrix& logits, const Matrix& targets, Matrix& dlogits) {
  const Matrix p = softmax(logits);
  const double n = static_cast<double>(logits.cols());
  const double loss = -(targets.array() * p.array().max(1e-300).log()).sum() / n;
  dlogits = (p - targets) / n;
  return loss;
}

Matrix one_hot(const std::vector<int>& labels, Eigen::Index classes) {
  Matrix t = Matrix::Zero(classes, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t j = 0; j < labels.size(); ++j) t(labels[j], static_cast<Eigen::Index>(j)) = 1.0;
  return t;
}

double run_epochs(ProbeModel& model, const Matrix& inputs, const Matrix& targets, int epochs,
                  double learning_rate, int batch_size, std::uint64_t seed, std::vector<double>& epoch_loss) {
  if (batch_size < 1) throw ConfigError("probe: batch_size must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, "shuffle"));
  nn::OptimizerState<Real> opt;
  nn::OptimizerConfig cfg;
  cfg.learning_rate = learning_rate;
  std::vector<std::size_t> order(static_cast<std::size_t>(inputs.cols()));
  std::iota(order.begin(), order.end(), 0);
  double last = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                   order.begin() + static_cast<std::ptrdiff_t>(stop));
      Matrix x(inputs.rows(), static_cast<Eigen::Index>(idx.size()));
      Matrix t(targets.rows(), static_cast<Eigen::Index>(idx.size()));
      for (std::size_t j = 0; j < idx.size(); ++j) {
        x.col(static_cast<Eigen::Index>(j)) = inputs.col(static_cast<Eigen::Index>(idx[j]));
        t.col(static_cast<Eigen::Index>(j)) = targets.col(static_cast<Eigen::Index>(idx[j]));
      }
      const auto trace = nn::forward(model.net, x);
      Matrix dlogits;
      const double loss = cross_entropy(trace.output(), t, dlogits);
      if (!std::isfinite(loss))
        throw NumericError("probe training diverged in epoch " + std::to_string(epoch) +
                           "; last finite epoch " + std::to_string(epoch - 1));
      total += loss * static_cast<double>(idx.size());
      const auto grads = nn::backward(model.net, nullptr, trace, dlogits, nn::GradRequest{true, false, false});
      nn::optimizer_step(model.net, grads, opt, cfg);
    }
    last = total / static_cast<double>(order.size());
    epoch_loss.push_back(last);
  }
  return last;
}

}  // namespace

Trained train_classifier(const world::LabeledDataset& data, const TrainConfig& config) {
  data.validate();
  if (config.hidden_dims.empty()) throw ConfigError("probe: hidden_dims must be non-empty");
  if (config.layer_index < 1 || config.layer_index > config.hidden_dims.size())
    throw ConfigError("probe: layer_index must name a hidden layer");
  const auto train_idx = data.indices(world::Split::train);
  ImageBatch train_images;
  std::vector<int> train_labels;
  for (auto i : train_idx) {
    train_images.push_back(data.images[i]);
    train_labels.push_back(data.labels[i]);
  }

  Trained out;
  auto& model = out.model;
  model.height = train_images.front().rows();
  model.width = train_images.front().cols();
  model.class_names = data.class_names;
  model.layer_index = config.layer_index;
  std::vector<Eigen::Index> dims{model.height * model.width};
  dims.insert(dims.end(), config.hidden_dims.begin(), config.hidden_dims.end());
  dims.push_back(static_cast<Eigen::Index>(data.class_names.size()));
  std::mt19937_64 rng(derive_seed(config.seed, "init"));
  model.net = nn::make_mlp<Real>(dims, nn::Activation::relu, nn::Activation::identity, rng);

  const auto classes = static_cast<Eigen::Index>(data.class_names.size());
  Matrix inputs = stack_columns(train_images);
  Matrix targets = one_hot(train_labels, classes);
  if (!config.neutral_images.empty()) {
    // Images that belong to no class are trained toward the uniform distribution.
    const Matrix extra = stack_checked(model, config.neutral_images);
    Matrix x(inputs.rows(), inputs.cols() + extra.cols());
    x << inputs, extra;
    Matrix t(classes, x.cols());
    t << targets, Matrix::Constant(classes, extra.cols(), 1.0 / static_cast<double>(classes));
    inputs = std::move(x);
    targets = std::move(t);
  }
  run_epochs(model, inputs, targets, config.epochs, config.learning_rate, config.batch_size, config.seed,
             out.report.epoch_loss);
  // Checkpoints are float32; keep the in-memory model identical to a reloaded one.
  io::quantize_f32(model.net);
  model.validate();
  out.report.train_accuracy = split_accuracy(model, data, world::Split::train);
  out.report.test_accuracy = split_accuracy(model, data, world::Split::test);
  return out;
}

std::vector<double> continue_training(ProbeModel& model, const ImageBatch& images, const std::vector<int>& labels,
                                      int epochs, double learning_rate, int batch_size, std::uint64_t seed) {
  if (images.size() != labels.size()) throw ShapeError("continue_training: images and labels differ in length");
  for (int y : labels)
    if (y < 0 || y >= model.class_count()) throw ValidationError("labels", "class index out of range");
  std::vector<double> losses;
  if (epochs <= 0 || images.empty()) return losses;
  run_epochs(model, stack_checked(model, images), one_hot(labels, model.class_count()), epochs, learning_rate, batch_size, seed, losses);
  return losses;
}

Matrix logits(const ProbeModel& model, const Matrix& inputs) { return nn::forward(model.net, inputs).output(); }

Matrix probabilities(const ProbeModel& model, const ImageBatch& images) {
  return softmax(logits(model, stack_checked(model, images)));
}

double accuracy(const ProbeModel& model, const ImageBatch& images, const std::vector<int>& labels) {
  if (images.empty()) return 0.0;
  const Matrix z = logits(model, stack_checked(model, images));
  int correct = 0;
  for (Eigen::Index j = 0; j < z.cols(); ++j) {
    Eigen::Index best;
    z.col(j).maxCoeff(&best);
    if (best == labels[static_cast<std::size_t>(j)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(images.size());
}

double split_accuracy(const ProbeModel& model, const world::LabeledDataset& data, world::Split split) {
  ImageBatch images;
  std::vector<int> labels;
  for (auto i : data.indices(split)) {
    images.push_back(data.images[i]);
    labels.push_back(data.labels[i]);
  }
  return accuracy(model, images, labels);
}

Vector activation_at_l(const ProbeModel& model, const Image& x) {
  check_image(model, x);
  return activations_at_l(model, ImageBatch{x}).col(0);
}

Matrix activations_at_l(const ProbeModel& model, const ImageBatch& images) {
  Matrix h = stack_checked(model, images);
  for (std::size_t i = 0; i < model.layer_index; ++i) {
    const auto& layer = model.net.layers[i];
    Matrix z = layer.weight * h;
    z.colwise() += layer.bias;
    h = layer.activation == nn::Activation::relu ? Matrix(z.cwiseMax(0.0)) : z;
  }
  return h;
}

Vector head_logits(const ProbeModel& model, const Vector& activation) {
  if (activation.size() != model.activation_dim()) throw ShapeError("head_logits: activation dimension mismatch");
  return nn::forward(model.net, Matrix(activation), nullptr, model.layer_index).output().col(0);
}

Vector logit_grad_wrt_activation(const ProbeModel& model, const Image& x, Eigen::Index m) {
  check_image(model, x);
  return logit_grads_wrt_activation(model, ImageBatch{x}, m).col(0);
}

Matrix logit_grads_wrt_activation(const ProbeModel& model, const ImageBatch& images, Eigen::Index m) {
  if (m < 0 || m >= model.class_count()) throw ValidationError("class", "index out of range");
  const Matrix acts = activations_at_l(model, images);
  const auto trace = nn::forward(model.net, acts, nullptr, model.layer_index);
  Matrix upstream = Matrix::Zero(model.class_count(), acts.cols());
  upstream.row(m).setOnes();
  return nn::backward(model.net, nullptr, trace, upstream, nn::GradRequest::of(nn::GradTarget::input_only)).input;
}

void save_probe(const ProbeModel& model, const std::filesystem::path& path) {
  std::vector<io::Tensor> tensors;
  io::Json meta = {{"kind", "probe"},
                   {"layer_index", model.layer_index},
                   {"class_names", model.class_names},
                   {"height", model.height},
                   {"width", model.width}};
  io::append_mlp(tensors, meta, "probe", model.net);
  io::save_tensors(path, tensors, meta);
}

ProbeModel load_probe(const std::filesystem::path& path) {
  const auto file = io::load_tensors(path);
  if (file.meta.value("kind", "") != "probe") throw IoError(path.string() + ": not a probe checkpoint");
  ProbeModel model;
  model.net = io::read_mlp(file, "probe");
  model.layer_index = file.meta.at("layer_index").get<std::size_t>();
  model.class_names = file.meta.at("class_names").get<std::vector<std::string>>();
  model.height = file.meta.at("height").get<Eigen::Index>();
  model.width = file.meta.at("width").get<Eigen::Index>();
  model.validate();
  return model;
}

}  // namespace rlpo::probe
