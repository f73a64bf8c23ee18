#pragma once

// Checkpoint format: one raw little-endian float32 blob holding the tensors
// back to back in row-major order, plus a JSON sidecar (`<path>.json`) with
// names, shapes, element offsets and free-form metadata.

#include "rlpo/nn.hpp"
#include "rlpo/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace rlpo::io {

using Json = nlohmann::json;

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<double> values;  // row-major, float32-representable after a round trip
};

struct TensorFile {
  std::vector<Tensor> tensors;
  Json meta = Json::object();

  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

std::filesystem::path sidecar_path(const std::filesystem::path& blob);

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors, const Json& meta = Json::object());
TensorFile load_tensors(const std::filesystem::path& path);

inline double round_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

template <typename Derived>
void quantize_f32(Eigen::PlainObjectBase<Derived>& m) {
  m = m.unaryExpr([](double v) { return round_f32(v); });
}

Tensor from_matrix(const std::string& name, const Matrix& m);
Tensor from_vector(const std::string& name, const Vector& v);
Tensor from_images(const std::string& name, const ImageBatch& images);
Matrix to_matrix(const Tensor& t);
Vector to_vector(const Tensor& t);
ImageBatch to_images(const Tensor& t);

// MLPs are stored as "<prefix>.layer<i>.weight|bias"; activations go to meta.
void append_mlp(std::vector<Tensor>& out, Json& meta, const std::string& prefix, const nn::Mlp<Real>& net);
nn::Mlp<Real> read_mlp(const TensorFile& file, const std::string& prefix);

void append_adapters(std::vector<Tensor>& out, Json& meta, const std::string& prefix, const nn::AdapterMap<Real>& adapters);
nn::AdapterMap<Real> read_adapters(const TensorFile& file, const std::string& prefix);

void quantize_f32(nn::Mlp<Real>& net);
void quantize_f32(nn::AdapterMap<Real>& adapters);

Json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const Json& doc);

}  // namespace rlpo::io
