#pragma once

// The classifier under test f = f2 o f1, split after layer l.

#include "rlpo/nn.hpp"
#include "rlpo/synthworld.hpp"
#include "rlpo/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace rlpo::probe {

struct ProbeModel {
  nn::Mlp<Real> net;
  std::size_t layer_index = 1;  // f1 = layers [0, l), f2 = layers [l, depth)
  std::vector<std::string> class_names;
  Eigen::Index height = 16;
  Eigen::Index width = 16;

  Eigen::Index class_count() const { return net.output_dim(); }
  Eigen::Index input_dim() const { return net.input_dim(); }
  Eigen::Index activation_dim() const { return net.layers[layer_index - 1].out_dim(); }
  void validate() const;
};

struct TrainConfig {
  std::vector<Eigen::Index> hidden_dims{64, 64, 32};
  int epochs = 30;
  double learning_rate = 1e-3;
  int batch_size = 32;
  std::size_t layer_index = 1;
  std::uint64_t seed = 1;
  ImageBatch neutral_images;  // trained toward the uniform class distribution
};

struct TrainReport {
  std::vector<double> epoch_loss;
  double train_accuracy = 0;
  double test_accuracy = 0;
};

struct Trained {
  ProbeModel model;
  TrainReport report;
};

// Softmax cross-entropy with Adam on the train split.
Trained train_classifier(const world::LabeledDataset& data, const TrainConfig& config);

// Continues training an existing model on (images, labels). Used by the
// fine-tune use case. Returns per-epoch loss.
std::vector<double> continue_training(ProbeModel& model, const ImageBatch& images, const std::vector<int>& labels,
                                      int epochs, double learning_rate, int batch_size, std::uint64_t seed);

Matrix logits(const ProbeModel& model, const Matrix& inputs);  // classes x n
Matrix probabilities(const ProbeModel& model, const ImageBatch& images);
Matrix softmax(const Matrix& logits);
double accuracy(const ProbeModel& model, const ImageBatch& images, const std::vector<int>& labels);
double split_accuracy(const ProbeModel& model, const world::LabeledDataset& data, world::Split split);

Vector activation_at_l(const ProbeModel& model, const Image& x);
Matrix activations_at_l(const ProbeModel& model, const ImageBatch& images);  // dim x n

// f2 applied to a layer-l activation.
Vector head_logits(const ProbeModel& model, const Vector& activation);

// d logit_m / d f1(x), on pre-softmax logits.
Vector logit_grad_wrt_activation(const ProbeModel& model, const Image& x, Eigen::Index m);
Matrix logit_grads_wrt_activation(const ProbeModel& model, const ImageBatch& images, Eigen::Index m);  // dim x n

void save_probe(const ProbeModel& model, const std::filesystem::path& path);
ProbeModel load_probe(const std::filesystem::path& path);

}  // namespace rlpo::probe
