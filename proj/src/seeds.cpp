#include "rlpo/seeds.hpp"

#include "rlpo/tensor_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <complex>
#include <numbers>
#include <set>

namespace rlpo::seeds {

namespace {

constexpr int kOrientationBins = 6;
constexpr int kFrequencyBins = 6;
constexpr int kIntensityBins = 4;

Eigen::MatrixXcd dft_matrix(Eigen::Index n) {
  Eigen::MatrixXcd m(n, n);
  for (Eigen::Index u = 0; u < n; ++u)
    for (Eigen::Index k = 0; k < n; ++k)
      m(u, k) = std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(u * k) / static_cast<double>(n));
  return m;
}

double signed_frequency(Eigen::Index u, Eigen::Index n) {
  const auto k = u <= n / 2 ? u : u - n;
  return static_cast<double>(k) / static_cast<double>(n);
}

void normalize_block(Vector& v, Eigen::Index start, Eigen::Index len) {
  const double s = v.segment(start, len).sum();
  if (s > 0) v.segment(start, len) /= s;
}

double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0;
  return a.dot(b) / (na * nb);
}

Vector mean_descriptor(const ImageBatch& images) {
  Vector m = Vector::Zero(kDescriptorDim);
  for (const auto& img : images) m += texture_descriptor(img);
  return images.empty() ? m : Vector(m / static_cast<double>(images.size()));
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::tolower(c); });
  return s;
}

}  // namespace

Vector texture_descriptor(const Image& img) {
  const auto h = img.rows(), w = img.cols();
  if (h < 3 || w < 3) throw ShapeError("texture_descriptor: image smaller than 3x3");
  Vector d = Vector::Zero(kDescriptorDim);

  for (Eigen::Index i = 1; i + 1 < h; ++i)
    for (Eigen::Index j = 1; j + 1 < w; ++j) {
      const double gx = 0.5 * (img(i, j + 1) - img(i, j - 1));
      const double gy = 0.5 * (img(i + 1, j) - img(i - 1, j));
      const double mag = std::hypot(gx, gy);
      if (mag == 0) continue;
      double theta = std::atan2(gy, gx);
      if (theta < 0) theta += std::numbers::pi;
      if (theta >= std::numbers::pi) theta = 0;  // unsigned orientation
      const int bin = std::min(kOrientationBins - 1, static_cast<int>(theta / std::numbers::pi * kOrientationBins));
      d(bin) += mag;
    }

  const Matrix centred = img.array() - img.mean();
  const Eigen::MatrixXcd spectrum =
      dft_matrix(h) * centred.cast<std::complex<double>>() * dft_matrix(w).transpose();
  const double max_radius = std::sqrt(0.5);
  for (Eigen::Index u = 0; u < h; ++u)
    for (Eigen::Index v = 0; v < w; ++v) {
      if (u == 0 && v == 0) continue;
      const double r = std::hypot(signed_frequency(u, h), signed_frequency(v, w));
      const int bin = std::min(kFrequencyBins - 1, static_cast<int>(r / max_radius * kFrequencyBins));
      d(kOrientationBins + bin) += std::norm(spectrum(u, v));
    }
  // Round-off from a flat image is not structure.
  if (d.segment(kOrientationBins, kFrequencyBins).sum() <= 1e-20 * static_cast<double>(img.size()))
    d.segment(kOrientationBins, kFrequencyBins).setZero();

  // Soft histogram with bin centres at 1/8, 3/8, 5/8, 7/8.
  const Eigen::Index base = kOrientationBins + kFrequencyBins;
  for (Eigen::Index i = 0; i < img.size(); ++i) {
    const double pos = std::clamp(img.data()[i] * kIntensityBins - 0.5, 0.0, kIntensityBins - 1.0);
    const auto lo = static_cast<Eigen::Index>(std::floor(pos));
    const double frac = pos - static_cast<double>(lo);
    d(base + lo) += 1 - frac;
    if (frac > 0) d(base + lo + 1) += frac;
  }

  normalize_block(d, 0, kOrientationBins);
  normalize_block(d, kOrientationBins, kFrequencyBins);
  normalize_block(d, base, kIntensityBins);
  return d;
}

ImageBatch quadrants(const Image& img) {
  const auto h = img.rows() / 2, w = img.cols() / 2;
  return {img.block(0, 0, h, w), img.block(0, w, h, w), img.block(h, 0, h, w), img.block(h, w, h, w)};
}

const std::vector<std::string>& default_questions() {
  static const std::vector<std::string> q{
      "What is the pattern in the image?",
      "What are the colors in the image?",
      "What is the background color of the image?",
      "What is in the background of the image?",
      "What is the primary texture in the image?",
      "What is the secondary texture in the image?",
      "What is the shape of the image?",
  };
  return q;
}

TemplateDescriber::TemplateDescriber(const std::map<std::string, ImageBatch>& templates) {
  for (const auto& [kw, bank] : templates) {
    if (bank.empty()) throw ValidationError("templates", "keyword '" + kw + "' has an empty bank");
    keywords_.push_back(kw);
    full_[kw] = mean_descriptor(bank);
    ImageBatch parts;
    for (const auto& img : bank)
      for (auto& q : quadrants(img)) parts.push_back(std::move(q));
    patch_[kw] = mean_descriptor(parts);
  }
}

std::vector<std::string> TemplateDescriber::answer(const Image& patch, const std::string& question) const {
  const std::string q = lowercase(question);
  Eigen::Index start = 0, len = kDescriptorDim;
  if (q.find("color") != std::string::npos || q.find("colour") != std::string::npos) {
    start = kOrientationBins + kFrequencyBins;
    len = kIntensityBins;
  } else if (q.find("pattern") != std::string::npos || q.find("shape") != std::string::npos) {
    len = kOrientationBins + kFrequencyBins;
  }
  const Vector d = texture_descriptor(patch).segment(start, len);
  std::vector<std::pair<double, std::size_t>> sims;
  for (std::size_t i = 0; i < keywords_.size(); ++i)
    sims.emplace_back(cosine(d, patch_.at(keywords_[i]).segment(start, len)), i);
  // Highest similarity first, earlier keyword on ties.
  std::stable_sort(sims.begin(), sims.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  const std::size_t rank = q.find("secondary") != std::string::npos ? 1 : 0;
  if (rank >= sims.size() || sims[rank].first <= 0) return {};
  return {keywords_[sims[rank].second]};
}

Vector TemplateDescriber::embed(const std::string& keyword) const {
  const auto it = full_.find(keyword);
  if (it == full_.end()) throw ValidationError("keyword", "'" + keyword + "' has no template bank");
  return it->second;
}

double TemplateDescriber::relevance(const Image& image, const std::string& keyword) const {
  return std::clamp(cosine(texture_descriptor(image), embed(keyword)), 0.0, 1.0);
}

double KeywordCandidate::mean_relevance() const {
  if (relevance.empty()) return 0;
  double s = 0;
  for (double r : relevance) s += r;
  return s / static_cast<double>(relevance.size());
}

DescribeResult describe_images(const ImageBatch& class_images, const Describer& describer,
                               const KeywordScorer& scorer, const std::vector<std::string>& questions) {
  DescribeResult out;
  std::set<std::string> texts;
  for (std::size_t i = 0; i < class_images.size(); ++i) {
    const auto parts = quadrants(class_images[i]);
    for (std::size_t p = 0; p < parts.size(); ++p)
      for (const auto& q : questions) {
        try {
          for (const auto& a : describer.answer(parts[p], q))
            if (!a.empty()) texts.insert(lowercase(a));
        } catch (const std::exception& e) {
          out.errors.push_back("image " + std::to_string(i) + " patch " + std::to_string(p) + " \"" + q +
                               "\": " + e.what());
        }
      }
  }
  for (const auto& t : texts) {
    try {
      KeywordCandidate c;
      c.text = t;
      c.embedding = scorer.embed(t);
      for (const auto& img : class_images) c.relevance.push_back(scorer.relevance(img, t));
      out.candidates.push_back(std::move(c));
    } catch (const std::exception& e) {
      out.errors.push_back("keyword '" + t + "': " + e.what());
    }
  }
  return out;
}

DedupResult dedup_keywords(const std::vector<KeywordCandidate>& candidates, double similarity_threshold) {
  DedupResult out;
  for (const auto& c : candidates) {
    if (c.embedding.size() == 0 || c.embedding.norm() == 0) {
      out.errors.push_back("keyword '" + c.text + "': zero-norm embedding");
      continue;
    }
    bool duplicate = false;
    for (const auto& k : out.kept) {
      if (k.embedding.size() != c.embedding.size())
        throw ShapeError("dedup_keywords: embedding dimension differs for '" + c.text + "'");
      if (cosine(k.embedding, c.embedding) > similarity_threshold) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) out.kept.push_back(c);
  }
  return out;
}

std::vector<ActionEntry> rank_and_select(const std::vector<KeywordCandidate>& candidates, int k) {
  if (candidates.empty()) throw ValidationError("candidates", "nothing to rank");
  if (k < 1) throw ValidationError("k", "must be at least 1");
  std::vector<ActionEntry> all;
  for (const auto& c : candidates) all.push_back({c.text, c.mean_relevance()});
  std::sort(all.begin(), all.end(), [](const ActionEntry& a, const ActionEntry& b) {
    if (a.mean_relevance != b.mean_relevance) return a.mean_relevance > b.mean_relevance;
    return a.keyword < b.keyword;
  });
  if (all.size() > static_cast<std::size_t>(k)) all.resize(static_cast<std::size_t>(k));
  return all;
}

std::vector<ActionEntry> build_action_space(const ImageBatch& class_images, const TemplateDescriber& describer,
                                            int k, std::vector<std::string>* errors) {
  auto described = describe_images(class_images, describer, describer);
  auto deduped = dedup_keywords(described.candidates);
  if (errors) {
    errors->insert(errors->end(), described.errors.begin(), described.errors.end());
    errors->insert(errors->end(), deduped.errors.begin(), deduped.errors.end());
  }
  return rank_and_select(deduped.kept, k);
}

void save_action_space(const std::vector<ActionEntry>& actions, const std::filesystem::path& path) {
  io::Json list = io::Json::array();
  for (const auto& a : actions) list.push_back({{"keyword", a.keyword}, {"mean_relevance", a.mean_relevance}});
  io::write_json(path, {{"actions", list}});
}

std::vector<ActionEntry> load_action_space(const std::filesystem::path& path) {
  const auto doc = io::read_json(path);
  std::vector<ActionEntry> out;
  std::set<std::string> seen;
  for (const auto& j : doc.at("actions")) {
    ActionEntry a{j.at("keyword").get<std::string>(), j.value("mean_relevance", 0.0)};
    if (a.keyword.empty()) throw IoError(path.string() + ": empty keyword");
    if (!seen.insert(a.keyword).second) throw IoError(path.string() + ": duplicate keyword '" + a.keyword + "'");
    out.push_back(a);
  }
  if (out.empty()) throw IoError(path.string() + ": action space is empty");
  return out;
}

}  // namespace rlpo::seeds
