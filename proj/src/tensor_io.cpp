#include "rlpo/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>

namespace rlpo::io {

namespace {

std::int64_t element_count(const std::vector<std::int64_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

std::uint32_t to_little(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

const char* activation_name(nn::Activation a) { return a == nn::Activation::relu ? "relu" : "identity"; }

nn::Activation parse_activation(const std::string& s) {
  if (s == "relu") return nn::Activation::relu;
  if (s == "identity") return nn::Activation::identity;
  throw IoError("unknown activation '" + s + "'");
}

}  // namespace

const Tensor& TensorFile::get(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw IoError("checkpoint has no tensor named '" + name + "'");
}

bool TensorFile::contains(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return true;
  return false;
}

std::filesystem::path sidecar_path(const std::filesystem::path& blob) {
  auto p = blob;
  p += ".json";
  return p;
}

void save_tensors(const std::filesystem::path& path, const std::vector<Tensor>& tensors, const Json& meta) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  Json index = Json::array();
  std::ofstream blob(path, std::ios::binary | std::ios::trunc);
  if (!blob) throw IoError("cannot open " + path.string() + " for writing");
  std::int64_t offset = 0;
  for (const auto& t : tensors) {
    const auto count = element_count(t.shape);
    if (count != static_cast<std::int64_t>(t.values.size()))
      throw ShapeError("tensor '" + t.name + "': shape does not match value count");
    std::vector<std::uint32_t> raw(t.values.size());
    for (std::size_t i = 0; i < t.values.size(); ++i)
      raw[i] = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(t.values[i])));
    blob.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
    index.push_back({{"name", t.name}, {"shape", t.shape}, {"offset", offset}, {"count", count}});
    offset += count;
  }
  if (!blob) throw IoError("write failed for " + path.string());
  Json doc = {{"format", "rlpo-tensors"},
              {"version", 1},
              {"dtype", "float32"},
              {"byte_order", "little"},
              {"ordering", "row-major"},
              {"blob", path.filename().string()},
              {"elements", offset},
              {"tensors", index},
              {"meta", meta}};
  write_json(sidecar_path(path), doc);
}

TensorFile load_tensors(const std::filesystem::path& path) {
  const auto side = sidecar_path(path);
  if (!std::filesystem::exists(path)) throw IoError("missing tensor file " + path.string());
  if (!std::filesystem::exists(side)) throw IoError("missing tensor manifest " + side.string());
  const Json doc = read_json(side);
  if (doc.value("dtype", "") != "float32" || doc.value("byte_order", "") != "little")
    throw IoError(side.string() + ": unsupported dtype or byte order");
  const auto total = doc.at("elements").get<std::int64_t>();
  if (static_cast<std::int64_t>(std::filesystem::file_size(path)) != total * 4)
    throw IoError(path.string() + ": size does not match manifest (truncated or corrupt)");
  std::ifstream blob(path, std::ios::binary);
  std::vector<std::uint32_t> raw(static_cast<std::size_t>(total));
  blob.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
  if (!blob) throw IoError("read failed for " + path.string());

  TensorFile file;
  file.meta = doc.value("meta", Json::object());
  for (const auto& entry : doc.at("tensors")) {
    Tensor t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::int64_t>();
    const auto count = entry.at("count").get<std::int64_t>();
    if (count != element_count(t.shape) || offset < 0 || offset + count > total)
      throw IoError(side.string() + ": inconsistent entry for '" + t.name + "'");
    t.values.resize(static_cast<std::size_t>(count));
    for (std::int64_t i = 0; i < count; ++i)
      t.values[static_cast<std::size_t>(i)] =
          static_cast<double>(std::bit_cast<float>(to_little(raw[static_cast<std::size_t>(offset + i)])));
    file.tensors.push_back(std::move(t));
  }
  return file;
}

Tensor from_matrix(const std::string& name, const Matrix& m) {
  Tensor t{name, {m.rows(), m.cols()}, {}};
  t.values.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
  return t;
}

Tensor from_vector(const std::string& name, const Vector& v) {
  return Tensor{name, {v.size()}, std::vector<double>(v.data(), v.data() + v.size())};
}

Tensor from_images(const std::string& name, const ImageBatch& images) {
  Tensor t{name, {static_cast<std::int64_t>(images.size()), 0, 0}, {}};
  if (!images.empty()) {
    t.shape[1] = images.front().rows();
    t.shape[2] = images.front().cols();
  }
  for (const auto& img : images) {
    if (img.rows() != t.shape[1] || img.cols() != t.shape[2]) throw ShapeError("from_images: ragged batch");
    t.values.insert(t.values.end(), img.data(), img.data() + img.size());
  }
  return t;
}

Matrix to_matrix(const Tensor& t) {
  if (t.shape.size() != 2) throw IoError("tensor '" + t.name + "' is not a matrix");
  Matrix m(t.shape[0], t.shape[1]);
  std::size_t k = 0;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.values[k++];
  return m;
}

Vector to_vector(const Tensor& t) {
  if (t.shape.size() != 1) throw IoError("tensor '" + t.name + "' is not a vector");
  return Eigen::Map<const Vector>(t.values.data(), static_cast<Eigen::Index>(t.values.size()));
}

ImageBatch to_images(const Tensor& t) {
  if (t.shape.size() != 3) throw IoError("tensor '" + t.name + "' is not an image stack");
  ImageBatch out;
  const auto per = t.shape[1] * t.shape[2];
  for (std::int64_t i = 0; i < t.shape[0]; ++i) {
    Image img(t.shape[1], t.shape[2]);
    std::memcpy(img.data(), t.values.data() + i * per, static_cast<std::size_t>(per) * sizeof(double));
    out.push_back(std::move(img));
  }
  return out;
}

void append_mlp(std::vector<Tensor>& out, Json& meta, const std::string& prefix, const nn::Mlp<Real>& net) {
  Json acts = Json::array();
  for (std::size_t i = 0; i < net.depth(); ++i) {
    const auto base = prefix + ".layer" + std::to_string(i);
    out.push_back(from_matrix(base + ".weight", net.layers[i].weight));
    out.push_back(from_vector(base + ".bias", net.layers[i].bias));
    acts.push_back(activation_name(net.layers[i].activation));
  }
  meta["networks"][prefix] = {{"layers", net.depth()}, {"activations", acts}};
}

nn::Mlp<Real> read_mlp(const TensorFile& file, const std::string& prefix) {
  if (!file.meta.contains("networks") || !file.meta["networks"].contains(prefix))
    throw IoError("checkpoint has no network '" + prefix + "'");
  const auto& info = file.meta["networks"][prefix];
  nn::Mlp<Real> net;
  const auto depth = info.at("layers").get<std::size_t>();
  for (std::size_t i = 0; i < depth; ++i) {
    const auto base = prefix + ".layer" + std::to_string(i);
    nn::DenseLayer<Real> layer;
    layer.weight = to_matrix(file.get(base + ".weight"));
    layer.bias = to_vector(file.get(base + ".bias"));
    layer.activation = parse_activation(info.at("activations").at(i).get<std::string>());
    net.layers.push_back(std::move(layer));
  }
  net.validate();
  return net;
}

void append_adapters(std::vector<Tensor>& out, Json& meta, const std::string& prefix,
                     const nn::AdapterMap<Real>& adapters) {
  Json entries = Json::array();
  for (const auto& [idx, ad] : adapters) {
    const auto base = prefix + ".layer" + std::to_string(idx);
    out.push_back(from_matrix(base + ".a", ad.a));
    out.push_back(from_matrix(base + ".b", ad.b));
    entries.push_back({{"layer", idx}, {"rank", ad.rank()}, {"scale", ad.scale}});
  }
  meta["adapters"][prefix] = entries;
}

nn::AdapterMap<Real> read_adapters(const TensorFile& file, const std::string& prefix) {
  if (!file.meta.contains("adapters") || !file.meta["adapters"].contains(prefix))
    throw IoError("checkpoint has no adapter set '" + prefix + "'");
  nn::AdapterMap<Real> adapters;
  for (const auto& e : file.meta["adapters"][prefix]) {
    const auto idx = e.at("layer").get<std::size_t>();
    const auto base = prefix + ".layer" + std::to_string(idx);
    nn::LoraAdapter<Real> ad;
    ad.a = to_matrix(file.get(base + ".a"));
    ad.b = to_matrix(file.get(base + ".b"));
    ad.scale = e.at("scale").get<double>();
    adapters.emplace(idx, std::move(ad));
  }
  return adapters;
}

void quantize_f32(nn::Mlp<Real>& net) {
  for (auto& l : net.layers) {
    quantize_f32(l.weight);
    quantize_f32(l.bias);
  }
}

void quantize_f32(nn::AdapterMap<Real>& adapters) {
  for (auto& [idx, ad] : adapters) {
    quantize_f32(ad.a);
    quantize_f32(ad.b);
  }
}

Json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw IoError(path.string() + ": malformed JSON (" + e.what() + ")");
  }
}

void write_json(const std::filesystem::path& path, const Json& doc) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << doc.dump(2) << '\n';
}

}  // namespace rlpo::io
