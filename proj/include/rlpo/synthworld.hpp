#pragma once

// Procedural texture world: labeled class images, a random-image pool and
// per-keyword concept template banks.

#include "rlpo/types.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace rlpo::world {

enum class TextureKind { stripes, dots, plain, noise, gradient };

std::string to_string(TextureKind kind);
TextureKind parse_texture_kind(const std::string& name);

struct TextureSpec {
  TextureKind kind = TextureKind::plain;
  double frequency = 4.0;  // stripes: cycles per image width; noise: coarse grid cells
  double angle = 0.0;      // radians
  double dot_radius = 1.5;
  double dot_spacing = 5.0;
  double foreground_level = 1.0;
  double background_level = 0.0;
  double jitter = 0.0;  // per-instance randomization amplitude
  int height = 16;
  int width = 16;

  // Throws ValidationError naming the offending field.
  void validate() const;
};

// Deterministic for (spec, seed). Pixels lie in [0,1] and are float32-representable.
Image render_texture(const TextureSpec& spec, std::uint64_t seed);

struct ClassSpec {
  std::string name;
  std::string keyword;  // ground-truth concept keyword
  TextureSpec texture;
  TextureSpec concept_texture;  // used for the keyword's template bank
};

struct KeywordSpec {
  std::string keyword;
  TextureSpec texture;
};

struct WorldConfig {
  std::vector<ClassSpec> classes;
  std::vector<KeywordSpec> distractors;
  std::vector<TextureSpec> random_specs;
  int train_per_class = 200;
  int test_per_class = 50;
  int random_pool_size = 200;
  int templates_per_keyword = 32;
  int height = 16;
  int width = 16;
  std::uint64_t seed = 20240607;

  void validate() const;
  static WorldConfig defaults();
};

nlohmann::json to_json(const TextureSpec& spec);
TextureSpec texture_from_json(const nlohmann::json& j);
nlohmann::json to_json(const WorldConfig& config);
WorldConfig world_config_from_json(const nlohmann::json& j);

enum class Split { train, test };

struct LabeledDataset {
  ImageBatch images;
  std::vector<int> labels;
  std::vector<Split> splits;
  std::vector<std::string> class_names;

  void validate() const;
  std::size_t size() const { return images.size(); }
  ImageBatch select(int label, Split split) const;
  std::vector<std::size_t> indices(Split split) const;
  int class_index(const std::string& name) const;
  double mean_pixel(Split split = Split::train) const;
};

struct World {
  WorldConfig config;
  LabeledDataset dataset;
  ImageBatch random_pool;
  std::vector<std::string> keywords;  // class keywords first, then distractors
  std::map<std::string, ImageBatch> keyword_templates;
  // class name -> keyword. Written to the manifest for evaluation only.
  std::map<std::string, std::string> ground_truth;
};

World build_world(const WorldConfig& config);

// Texture behind a keyword: the concept variant for class keywords, the
// distractor texture otherwise.
TextureSpec keyword_spec(const WorldConfig& config, const std::string& keyword);
ImageBatch render_keyword(const WorldConfig& config, const std::string& keyword, const std::string& tag, int count);

// Keyword-tagged images for generator pretraining, keyword-major.
struct KeywordCorpus {
  ImageBatch images;
  std::vector<std::string> keywords;
};
KeywordCorpus keyword_corpus(const WorldConfig& config, const std::vector<std::string>& keywords, int per_keyword);

// `count` images cycling through config.random_specs, seeded by tag and index.
// The world's random pool uses tag "random".
ImageBatch render_random(const WorldConfig& config, const std::string& tag, int count);

void save_world(const World& world, const std::filesystem::path& dir, bool write_pngs = true);
World load_world(const std::filesystem::path& dir);

}  // namespace rlpo::world
