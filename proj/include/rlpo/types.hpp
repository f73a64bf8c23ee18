#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace rlpo {

using Real = double;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixX<Real>;
using Vector = VectorX<Real>;

// Row-major so that the flat pixel order matches the on-disk tensor layout.
using Image = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ImageBatch = std::vector<Image>;

inline Eigen::Map<const Vector> flatten(const Image& img) {
  return {img.data(), img.size()};
}

inline Image unflatten(const Eigen::Ref<const Vector>& v, Eigen::Index rows, Eigen::Index cols) {
  Image img(rows, cols);
  Eigen::Map<Vector>(img.data(), img.size()) = v;
  return img;
}

// Stacks flattened images as columns.
inline Matrix stack_columns(const ImageBatch& batch) {
  if (batch.empty()) return {};
  Matrix out(batch.front().size(), static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = flatten(batch[i]);
  return out;
}

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what)
      : Error(field + ": " + what), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// SplitMix64 finalizer; used to derive independent child seeds from a parent.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t parent, std::uint64_t tag) {
  return mix_seed(parent ^ mix_seed(tag));
}

inline std::uint64_t derive_seed(std::uint64_t parent, const std::string& tag) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : tag) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return derive_seed(parent, h);
}

// `count` distinct indices from [0, population) by partial Fisher-Yates.
inline std::vector<std::size_t> sample_indices(std::size_t population, std::size_t count, std::uint64_t seed) {
  std::vector<std::size_t> idx(population);
  for (std::size_t i = 0; i < population; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  count = std::min(count, population);
  for (std::size_t i = 0; i < count; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, population - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }
  idx.resize(count);
  return idx;
}

}  // namespace rlpo
