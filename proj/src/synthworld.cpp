#include "rlpo/synthworld.hpp"

#include "rlpo/image_io.hpp"
#include "rlpo/tensor_io.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <set>
#include <utility>

namespace rlpo::world {

using nlohmann::json;

namespace {

constexpr double kPi = std::numbers::pi;

void check_level(const char* field, double v) {
  if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(field, "must lie in [0,1]");
}

double smoothstep(double edge0, double edge1, double x) {
  const double t = std::clamp((x - edge0) / (edge1 - edge0), 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

Image render_stripes(const TextureSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const double j = s.jitter;
  const double phase = 0.5 * kPi * std::min(j, 1.0) * unit(rng);
  const double freq = s.frequency * (1.0 + 0.15 * j * unit(rng));
  const double angle = s.angle + 0.15 * j * gauss(rng);
  const double shift = 0.05 * j * unit(rng);
  const double fg = s.foreground_level + shift;
  const double bg = s.background_level + shift;
  Image img(s.height, s.width);
  const double c = std::cos(angle);
  const double sn = std::sin(angle);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const double u = x * c + y * sn;
      img(y, x) = bg + (fg - bg) * 0.5 * (1.0 + std::sin(2.0 * kPi * freq * u / s.width + phase));
    }
  return img;
}

Image render_dots(const TextureSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double j = s.jitter;
  const double spacing = s.dot_spacing;
  const double radius = std::min(s.dot_radius * (1.0 + 0.2 * j * unit(rng)), 0.49 * spacing);
  const double oy = spacing / 2.0 + 0.5 * spacing * std::min(j, 1.0) * unit(rng);
  const double ox = spacing / 2.0 + 0.5 * spacing * std::min(j, 1.0) * unit(rng);
  const double shift = 0.05 * j * unit(rng);
  const double fg = s.foreground_level + shift;
  const double bg = s.background_level + shift;
  Image img(s.height, s.width);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      // Distance to the nearest lattice center.
      const double dy = std::remainder(y - oy, spacing);
      const double dx = std::remainder(x - ox, spacing);
      const double d = std::hypot(dy, dx);
      const double inside = 1.0 - smoothstep(radius - 0.5, radius + 0.5, d);
      img(y, x) = bg + (fg - bg) * inside;
    }
  return img;
}

Image render_plain(const TextureSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double level = s.background_level + 0.05 * s.jitter * unit(rng);
  return Image::Constant(s.height, s.width, level);
}

Image render_noise(const TextureSpec& s, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  const int cells = std::max(2, static_cast<int>(std::lround(s.frequency)));
  Matrix grid = Matrix::NullaryExpr(cells + 1, cells + 1, [&] { return gauss(rng); });
  Image img(s.height, s.width);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const double gy = (y + 0.5) / s.height * cells;
      const double gx = (x + 0.5) / s.width * cells;
      const int iy = std::min(static_cast<int>(gy), cells - 1);
      const int ix = std::min(static_cast<int>(gx), cells - 1);
      const double fy = gy - iy;
      const double fx = gx - ix;
      img(y, x) = (1 - fy) * ((1 - fx) * grid(iy, ix) + fx * grid(iy, ix + 1)) +
                  fy * ((1 - fx) * grid(iy + 1, ix) + fx * grid(iy + 1, ix + 1));
    }
  const double mean = img.mean();
  const double sd = std::sqrt((img.array() - mean).square().mean());
  const double mid = 0.5 * (s.foreground_level + s.background_level);
  const double half = 0.5 * std::abs(s.foreground_level - s.background_level);
  if (sd > 0) img = ((img.array() - mean) / sd * 0.5).cwiseMax(-1.0).cwiseMin(1.0).matrix();
  else img.setZero();
  return (mid + half * img.array()).matrix();
}

Image render_gradient(const TextureSpec& s, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double angle = s.angle + kPi * std::min(s.jitter, 1.0) * unit(rng);
  const double c = std::cos(angle);
  const double sn = std::sin(angle);
  const double cy = (s.height - 1) / 2.0;
  const double cx = (s.width - 1) / 2.0;
  const double span = std::max(s.height, s.width) / 2.0;
  Image img(s.height, s.width);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const double t = std::clamp(((x - cx) * c + (y - cy) * sn) / span, -1.0, 1.0);
      img(y, x) = s.background_level + (s.foreground_level - s.background_level) * (t + 1.0) / 2.0;
    }
  return img;
}

}  // namespace

std::string to_string(TextureKind kind) {
  switch (kind) {
    case TextureKind::stripes: return "stripes";
    case TextureKind::dots: return "dots";
    case TextureKind::plain: return "plain";
    case TextureKind::noise: return "noise";
    case TextureKind::gradient: return "gradient";
  }
  return "plain";
}

TextureKind parse_texture_kind(const std::string& name) {
  for (auto k : {TextureKind::stripes, TextureKind::dots, TextureKind::plain, TextureKind::noise,
                 TextureKind::gradient})
    if (to_string(k) == name) return k;
  throw ValidationError("kind", "unknown texture kind '" + name + "'");
}

void TextureSpec::validate() const {
  check_level("foreground_level", foreground_level);
  check_level("background_level", background_level);
  if (!(jitter >= 0.0) || !std::isfinite(jitter)) throw ValidationError("jitter", "must be finite and >= 0");
  if (height < 1) throw ValidationError("height", "must be >= 1");
  if (width < 1) throw ValidationError("width", "must be >= 1");
  if ((kind == TextureKind::stripes || kind == TextureKind::noise) && !(frequency > 0.0 && std::isfinite(frequency)))
    throw ValidationError("frequency", "must be > 0");
  if (!std::isfinite(angle)) throw ValidationError("angle", "must be finite");
  if (kind == TextureKind::dots) {
    if (!(dot_spacing > 0.0)) throw ValidationError("dot_spacing", "must be > 0");
    if (!(dot_radius > 0.0)) throw ValidationError("dot_radius", "must be > 0");
    if (!(dot_radius < dot_spacing / 2.0)) throw ValidationError("dot_radius", "must be < dot_spacing / 2");
  }
}

Image render_texture(const TextureSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  Image img;
  switch (spec.kind) {
    case TextureKind::stripes: img = render_stripes(spec, rng); break;
    case TextureKind::dots: img = render_dots(spec, rng); break;
    case TextureKind::plain: img = render_plain(spec, rng); break;
    case TextureKind::noise: img = render_noise(spec, rng); break;
    case TextureKind::gradient: img = render_gradient(spec, rng); break;
  }
  if (spec.jitter > 0.0 && spec.kind != TextureKind::noise) {
    std::normal_distribution<double> gauss(0.0, 0.03 * spec.jitter);
    img = img.unaryExpr([&](double v) { return v + gauss(rng); });
  }
  return img.unaryExpr([](double v) { return io::round_f32(std::clamp(v, 0.0, 1.0)); });
}

// ---------------------------------------------------------------------------

void WorldConfig::validate() const {
  if (classes.size() < 2) throw ConfigError("world config needs at least 2 classes");
  std::set<std::string> names;
  std::set<std::string> kws;
  for (const auto& c : classes) {
    if (c.name.empty() || !names.insert(c.name).second) throw ConfigError("class names must be unique and non-empty");
    if (c.keyword.empty()) throw ConfigError("class '" + c.name + "' has an empty keyword list");
    if (!kws.insert(c.keyword).second) throw ConfigError("duplicate keyword '" + c.keyword + "'");
    c.texture.validate();
    c.concept_texture.validate();
  }
  for (const auto& d : distractors) {
    if (d.keyword.empty() || !kws.insert(d.keyword).second)
      throw ConfigError("distractor keywords must be unique and non-empty");
    d.texture.validate();
  }
  if (random_specs.empty()) throw ConfigError("world config needs at least one random-pool spec");
  for (const auto& r : random_specs) r.validate();
  if (train_per_class < 1 || test_per_class < 1) throw ConfigError("both splits need at least one image per class");
  if (random_pool_size < 2) throw ConfigError("random pool needs at least 2 images");
  if (templates_per_keyword < 8) throw ConfigError("every keyword needs at least 8 templates");
}

WorldConfig WorldConfig::defaults() {
  auto spec = [](TextureKind kind, double fg, double bg, double jitter) {
    TextureSpec s;
    s.kind = kind;
    s.foreground_level = fg;
    s.background_level = bg;
    s.jitter = jitter;
    return s;
  };
  WorldConfig cfg;

  TextureSpec zeb = spec(TextureKind::stripes, 0.9, 0.1, 1.0);
  zeb.frequency = 4.0;
  TextureSpec zeb_concept = zeb;
  zeb_concept.foreground_level = 1.0;
  zeb_concept.background_level = 0.0;
  zeb_concept.jitter = 1.5;

  TextureSpec jag = spec(TextureKind::dots, 0.85, 0.25, 1.0);
  jag.dot_radius = 1.5;
  jag.dot_spacing = 5.0;
  TextureSpec jag_concept = jag;
  jag_concept.foreground_level = 1.0;
  jag_concept.background_level = 0.2;
  jag_concept.jitter = 1.5;

  TextureSpec ele = spec(TextureKind::plain, 0.55, 0.55, 1.0);
  TextureSpec ele_concept = ele;
  ele_concept.jitter = 1.5;

  cfg.classes = {{"zeb", "stripes", zeb, zeb_concept},
                 {"jag", "dots", jag, jag_concept},
                 {"ele", "plain", ele, ele_concept}};

  TextureSpec fine_noise = spec(TextureKind::noise, 0.85, 0.15, 1.0);
  fine_noise.frequency = 8.0;
  TextureSpec ramp = spec(TextureKind::gradient, 0.9, 0.1, 1.0);
  TextureSpec bright = spec(TextureKind::plain, 0.9, 0.9, 1.0);
  TextureSpec dark = spec(TextureKind::plain, 0.1, 0.1, 1.0);
  TextureSpec blotch = spec(TextureKind::noise, 0.75, 0.25, 1.0);
  blotch.frequency = 2.0;
  cfg.distractors = {{"noise", fine_noise}, {"gradient", ramp}, {"bright", bright}, {"dark", dark}, {"blotches", blotch}};

  // Structured noise over a spread of scales and contrasts, plus ramps.
  for (double f : {2.0, 3.0, 4.0, 5.0, 6.0, 8.0})
    for (auto [hi, lo] : {std::pair{0.9, 0.1}, {0.7, 0.3}, {0.6, 0.2}, {0.8, 0.4}}) {
      TextureSpec r = spec(TextureKind::noise, hi, lo, 1.0);
      r.frequency = f;
      cfg.random_specs.push_back(r);
    }
  cfg.random_specs.push_back(spec(TextureKind::gradient, 0.9, 0.1, 1.0));
  cfg.random_specs.push_back(spec(TextureKind::gradient, 0.7, 0.3, 1.0));
  return cfg;
}

json to_json(const TextureSpec& s) {
  return {{"kind", to_string(s.kind)},
          {"frequency", s.frequency},
          {"angle", s.angle},
          {"dot_radius", s.dot_radius},
          {"dot_spacing", s.dot_spacing},
          {"foreground_level", s.foreground_level},
          {"background_level", s.background_level},
          {"jitter", s.jitter},
          {"height", s.height},
          {"width", s.width}};
}

TextureSpec texture_from_json(const json& j) {
  TextureSpec s;
  s.kind = parse_texture_kind(j.value("kind", std::string("plain")));
  s.frequency = j.value("frequency", s.frequency);
  s.angle = j.value("angle", s.angle);
  s.dot_radius = j.value("dot_radius", s.dot_radius);
  s.dot_spacing = j.value("dot_spacing", s.dot_spacing);
  s.foreground_level = j.value("foreground_level", s.foreground_level);
  s.background_level = j.value("background_level", s.background_level);
  s.jitter = j.value("jitter", s.jitter);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  return s;
}

json to_json(const WorldConfig& c) {
  json classes = json::array();
  for (const auto& cl : c.classes)
    classes.push_back({{"name", cl.name},
                       {"keyword", cl.keyword},
                       {"texture", to_json(cl.texture)},
                       {"concept_texture", to_json(cl.concept_texture)}});
  json distractors = json::array();
  for (const auto& d : c.distractors) distractors.push_back({{"keyword", d.keyword}, {"texture", to_json(d.texture)}});
  json randoms = json::array();
  for (const auto& r : c.random_specs) randoms.push_back(to_json(r));
  return {{"classes", classes},
          {"distractors", distractors},
          {"random_specs", randoms},
          {"train_per_class", c.train_per_class},
          {"test_per_class", c.test_per_class},
          {"random_pool_size", c.random_pool_size},
          {"templates_per_keyword", c.templates_per_keyword},
          {"height", c.height},
          {"width", c.width},
          {"seed", c.seed}};
}

WorldConfig world_config_from_json(const json& j) {
  WorldConfig c = WorldConfig::defaults();
  auto sized = [&](TextureSpec s) {
    s.height = c.height;
    s.width = c.width;
    return s;
  };
  c.height = j.value("height", c.height);
  c.width = j.value("width", c.width);
  if (j.contains("classes")) {
    c.classes.clear();
    for (const auto& cl : j["classes"]) {
      ClassSpec spec;
      spec.name = cl.at("name").get<std::string>();
      spec.keyword = cl.value("keyword", std::string());
      spec.texture = texture_from_json(cl.at("texture"));
      spec.concept_texture = cl.contains("concept_texture") ? texture_from_json(cl["concept_texture"]) : spec.texture;
      c.classes.push_back(spec);
    }
  }
  if (j.contains("distractors")) {
    c.distractors.clear();
    for (const auto& d : j["distractors"])
      c.distractors.push_back({d.at("keyword").get<std::string>(), texture_from_json(d.at("texture"))});
  }
  if (j.contains("random_specs")) {
    c.random_specs.clear();
    for (const auto& r : j["random_specs"]) c.random_specs.push_back(texture_from_json(r));
  }
  c.train_per_class = j.value("train_per_class", c.train_per_class);
  c.test_per_class = j.value("test_per_class", c.test_per_class);
  c.random_pool_size = j.value("random_pool_size", c.random_pool_size);
  c.templates_per_keyword = j.value("templates_per_keyword", c.templates_per_keyword);
  c.seed = j.value("seed", c.seed);
  for (auto& cl : c.classes) {
    cl.texture = sized(cl.texture);
    cl.concept_texture = sized(cl.concept_texture);
  }
  for (auto& d : c.distractors) d.texture = sized(d.texture);
  for (auto& r : c.random_specs) r = sized(r);
  return c;
}

// ---------------------------------------------------------------------------

void LabeledDataset::validate() const {
  if (images.size() != labels.size() || images.size() != splits.size())
    throw ValidationError("dataset", "images, labels and splits differ in length");
  bool has_train = false;
  bool has_test = false;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= static_cast<int>(class_names.size()))
      throw ValidationError("labels", "label out of range at index " + std::to_string(i));
    if (images[i].size() > 0 && (images[i].minCoeff() < 0.0 || images[i].maxCoeff() > 1.0))
      throw ValidationError("images", "pixel outside [0,1] at index " + std::to_string(i));
    (splits[i] == Split::train ? has_train : has_test) = true;
  }
  if (!has_train || !has_test) throw ValidationError("splits", "both splits must be non-empty");
}

ImageBatch LabeledDataset::select(int label, Split split) const {
  ImageBatch out;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (labels[i] == label && splits[i] == split) out.push_back(images[i]);
  return out;
}

std::vector<std::size_t> LabeledDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (splits[i] == split) out.push_back(i);
  return out;
}

int LabeledDataset::class_index(const std::string& name) const {
  const auto it = std::find(class_names.begin(), class_names.end(), name);
  if (it == class_names.end()) throw ValidationError("class", "unknown class '" + name + "'");
  return static_cast<int>(it - class_names.begin());
}

double LabeledDataset::mean_pixel(Split split) const {
  double sum = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < images.size(); ++i)
    if (splits[i] == split) {
      sum += images[i].sum();
      count += static_cast<std::size_t>(images[i].size());
    }
  return count ? sum / static_cast<double>(count) : 0.0;
}

ImageBatch render_random(const WorldConfig& config, const std::string& tag, int count) {
  ImageBatch out;
  for (int i = 0; i < count; ++i) {
    auto spec = config.random_specs[static_cast<std::size_t>(i) % config.random_specs.size()];
    spec.height = config.height;
    spec.width = config.width;
    out.push_back(render_texture(spec, derive_seed(config.seed, tag + "/" + std::to_string(i))));
  }
  return out;
}

TextureSpec keyword_spec(const WorldConfig& config, const std::string& keyword) {
  TextureSpec spec;
  bool found = false;
  for (const auto& c : config.classes)
    if (c.keyword == keyword) {
      spec = c.concept_texture;
      found = true;
    }
  for (const auto& d : config.distractors)
    if (d.keyword == keyword) {
      spec = d.texture;
      found = true;
    }
  if (!found) throw ValidationError("keyword", "unknown keyword '" + keyword + "'");
  spec.height = config.height;
  spec.width = config.width;
  return spec;
}

ImageBatch render_keyword(const WorldConfig& config, const std::string& keyword, const std::string& tag, int count) {
  const auto spec = keyword_spec(config, keyword);
  ImageBatch out;
  for (int i = 0; i < count; ++i)
    out.push_back(render_texture(spec, derive_seed(config.seed, tag + "/" + keyword + "/" + std::to_string(i))));
  return out;
}

KeywordCorpus keyword_corpus(const WorldConfig& config, const std::vector<std::string>& keywords, int per_keyword) {
  if (per_keyword < 1) throw ValidationError("per_keyword", "must be >= 1");
  KeywordCorpus out;
  for (const auto& kw : keywords) {
    for (auto& img : render_keyword(config, kw, "pretrain", per_keyword)) {
      out.images.push_back(std::move(img));
      out.keywords.push_back(kw);
    }
  }
  return out;
}

World build_world(const WorldConfig& config) {
  config.validate();
  World w;
  w.config = config;
  auto sized = [&](TextureSpec s) {
    s.height = config.height;
    s.width = config.width;
    return s;
  };
  for (const auto& c : config.classes) w.dataset.class_names.push_back(c.name);
  for (auto split : {Split::train, Split::test}) {
    const int per = split == Split::train ? config.train_per_class : config.test_per_class;
    const std::string tag = split == Split::train ? "train/" : "test/";
    for (std::size_t ci = 0; ci < config.classes.size(); ++ci) {
      const auto spec = sized(config.classes[ci].texture);
      for (int i = 0; i < per; ++i) {
        const auto seed = derive_seed(config.seed, tag + config.classes[ci].name + "/" + std::to_string(i));
        w.dataset.images.push_back(render_texture(spec, seed));
        w.dataset.labels.push_back(static_cast<int>(ci));
        w.dataset.splits.push_back(split);
      }
    }
  }
  w.random_pool = render_random(config, "random", config.random_pool_size);
  for (const auto& c : config.classes) {
    w.keywords.push_back(c.keyword);
    w.ground_truth[c.name] = c.keyword;
  }
  for (const auto& d : config.distractors) w.keywords.push_back(d.keyword);
  for (const auto& kw : w.keywords) w.keyword_templates[kw] = render_keyword(config, kw, "template", config.templates_per_keyword);
  w.dataset.validate();
  return w;
}

void save_world(const World& world, const std::filesystem::path& dir, bool write_pngs) {
  std::filesystem::create_directories(dir);
  json labels = json::array();
  json splits = json::array();
  for (std::size_t i = 0; i < world.dataset.size(); ++i) {
    labels.push_back(world.dataset.labels[i]);
    splits.push_back(world.dataset.splits[i] == Split::train ? "train" : "test");
  }
  io::save_tensors(dir / "dataset.f32", {io::from_images("images", world.dataset.images)},
                   {{"labels", labels}, {"splits", splits}, {"class_names", world.dataset.class_names}});
  io::save_tensors(dir / "random_pool.f32", {io::from_images("images", world.random_pool)});
  std::vector<io::Tensor> banks;
  for (const auto& kw : world.keywords) banks.push_back(io::from_images(kw, world.keyword_templates.at(kw)));
  io::save_tensors(dir / "templates.f32", banks, {{"keywords", world.keywords}});

  json manifest = {{"format", "rlpo-world"},
                   {"version", 1},
                   {"config", to_json(world.config)},
                   {"class_names", world.dataset.class_names},
                   {"keywords", world.keywords},
                   {"ground_truth", world.ground_truth},
                   {"master_seed", world.config.seed},
                   {"files", {{"dataset", "dataset.f32"}, {"random_pool", "random_pool.f32"}, {"templates", "templates.f32"}}}};
  io::write_json(dir / "manifest.json", manifest);

  if (!write_pngs) return;
  std::vector<int> counter(world.dataset.class_names.size() * 2, 0);
  for (std::size_t i = 0; i < world.dataset.size(); ++i) {
    const int label = world.dataset.labels[i];
    const bool train = world.dataset.splits[i] == Split::train;
    const int n = counter[static_cast<std::size_t>(label) * 2 + (train ? 0 : 1)]++;
    io::write_png(dir / "png" / (train ? "train" : "test") / world.dataset.class_names[static_cast<std::size_t>(label)] /
                      (std::to_string(n) + ".png"),
                  world.dataset.images[i]);
  }
  for (std::size_t i = 0; i < world.random_pool.size(); ++i)
    io::write_png(dir / "png" / "random" / (std::to_string(i) + ".png"), world.random_pool[i]);
  for (const auto& kw : world.keywords) {
    const auto& bank = world.keyword_templates.at(kw);
    for (std::size_t i = 0; i < bank.size(); ++i)
      io::write_png(dir / "png" / "templates" / kw / (std::to_string(i) + ".png"), bank[i]);
  }
}

World load_world(const std::filesystem::path& dir) {
  const json manifest = io::read_json(dir / "manifest.json");
  if (manifest.value("format", "") != "rlpo-world") throw IoError(dir.string() + ": not a world directory");
  World w;
  w.config = world_config_from_json(manifest.at("config"));
  const auto data = io::load_tensors(dir / "dataset.f32");
  w.dataset.images = io::to_images(data.get("images"));
  w.dataset.labels = data.meta.at("labels").get<std::vector<int>>();
  for (const auto& s : data.meta.at("splits")) w.dataset.splits.push_back(s == "train" ? Split::train : Split::test);
  w.dataset.class_names = data.meta.at("class_names").get<std::vector<std::string>>();
  w.random_pool = io::to_images(io::load_tensors(dir / "random_pool.f32").get("images"));
  const auto banks = io::load_tensors(dir / "templates.f32");
  w.keywords = manifest.at("keywords").get<std::vector<std::string>>();
  for (const auto& kw : w.keywords) w.keyword_templates[kw] = io::to_images(banks.get(kw));
  w.ground_truth = manifest.at("ground_truth").get<std::map<std::string, std::string>>();
  w.dataset.validate();
  return w;
}

}  // namespace rlpo::world
