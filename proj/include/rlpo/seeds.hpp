#pragma once

// Action-space construction: candidate keywords from a describer, embedding
// dedup, relevance ranking and top-K selection.

#include "rlpo/types.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rlpo::seeds {

// 6 orientation bins, 6 radial frequency bins, 4 intensity bins; each group
// sums to 1 unless the image has no structure at all.
constexpr Eigen::Index kDescriptorDim = 16;
Vector texture_descriptor(const Image& img);

// Four non-overlapping quadrants, row-major order.
ImageBatch quadrants(const Image& img);

const std::vector<std::string>& default_questions();

struct Describer {
  virtual ~Describer() = default;
  virtual std::vector<std::string> answer(const Image& patch, const std::string& question) const = 0;
};

struct KeywordScorer {
  virtual ~KeywordScorer() = default;
  virtual Vector embed(const std::string& keyword) const = 0;
  // In [0, 1].
  virtual double relevance(const Image& image, const std::string& keyword) const = 0;
};

// Answers by descriptor similarity against each keyword's template bank.
// Colour questions look at the intensity bins, pattern and shape questions at
// the structure bins, the rest at the whole descriptor.
class TemplateDescriber : public Describer, public KeywordScorer {
 public:
  explicit TemplateDescriber(const std::map<std::string, ImageBatch>& templates);

  std::vector<std::string> answer(const Image& patch, const std::string& question) const override;
  Vector embed(const std::string& keyword) const override;
  double relevance(const Image& image, const std::string& keyword) const override;

 private:
  std::vector<std::string> keywords_;
  std::map<std::string, Vector> full_;   // mean descriptor of the whole templates
  std::map<std::string, Vector> patch_;  // mean descriptor of template quadrants
};

struct KeywordCandidate {
  std::string text;
  Vector embedding;
  std::vector<double> relevance;  // one per class image

  double mean_relevance() const;
};

struct DescribeResult {
  std::vector<KeywordCandidate> candidates;  // sorted by text
  std::vector<std::string> errors;
};

DescribeResult describe_images(const ImageBatch& class_images, const Describer& describer,
                               const KeywordScorer& scorer,
                               const std::vector<std::string>& questions = default_questions());

struct DedupResult {
  std::vector<KeywordCandidate> kept;
  std::vector<std::string> errors;
};

DedupResult dedup_keywords(const std::vector<KeywordCandidate>& candidates, double similarity_threshold = 0.95);

struct ActionEntry {
  std::string keyword;
  double mean_relevance = 0;
};

std::vector<ActionEntry> rank_and_select(const std::vector<KeywordCandidate>& candidates, int k = 20);

std::vector<ActionEntry> build_action_space(const ImageBatch& class_images, const TemplateDescriber& describer,
                                            int k = 20, std::vector<std::string>* errors = nullptr);

void save_action_space(const std::vector<ActionEntry>& actions, const std::filesystem::path& path);
std::vector<ActionEntry> load_action_space(const std::filesystem::path& path);

}  // namespace rlpo::seeds
