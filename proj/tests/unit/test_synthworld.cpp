#include "rlpo/image_io.hpp"
#include "rlpo/synthworld.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace rlpo;
using namespace rlpo::world;

namespace {

// Pixel correlation of two images, both centered.
double correlation(const Image& a, const Image& b) {
  const Eigen::ArrayXd x = flatten(a).array() - flatten(a).mean();
  const Eigen::ArrayXd y = flatten(b).array() - flatten(b).mean();
  const double den = std::sqrt((x * x).sum() * (y * y).sum());
  return den > 0 ? (x * y).sum() / den : 0.0;
}

WorldConfig small_config() {
  auto cfg = WorldConfig::defaults();
  cfg.train_per_class = 20;
  cfg.test_per_class = 10;
  cfg.random_pool_size = 12;
  cfg.templates_per_keyword = 8;
  return cfg;
}

}  // namespace

TEST(Render, PlainUnjitteredIsConstant) {
  TextureSpec s;
  s.kind = TextureKind::plain;
  s.background_level = 0.5;
  const Image img = render_texture(s, 1);
  EXPECT_EQ(img, Image::Constant(16, 16, 0.5));
}

TEST(Render, UnjitteredStripesHaveFourColumnMaxima) {
  TextureSpec s;
  s.kind = TextureKind::stripes;
  s.frequency = 4;
  s.angle = 0;
  const Image img = render_texture(s, 7);
  const Eigen::RowVectorXd profile = img.colwise().mean();
  int maxima = 0;
  for (Eigen::Index i = 0; i < profile.size(); ++i) {
    const double left = i > 0 ? profile(i - 1) : -1.0;
    const double right = i + 1 < profile.size() ? profile(i + 1) : -1.0;
    if (profile(i) > left && profile(i) > right) ++maxima;
  }
  EXPECT_EQ(maxima, 4);
}

TEST(Render, DeterministicForSpecAndSeed) {
  for (auto kind : {TextureKind::stripes, TextureKind::dots, TextureKind::noise, TextureKind::gradient}) {
    TextureSpec s;
    s.kind = kind;
    s.jitter = 1.0;
    const Image a = render_texture(s, 42);
    const Image b = render_texture(s, 42);
    EXPECT_EQ(a, b);
    EXPECT_GE(a.minCoeff(), 0.0);
    EXPECT_LE(a.maxCoeff(), 1.0);
  }
}

TEST(Render, InvalidFieldsAreNamed) {
  TextureSpec s;
  s.foreground_level = 1.5;
  try {
    render_texture(s, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "foreground_level");
  }
  TextureSpec d;
  d.kind = TextureKind::dots;
  d.dot_radius = 3;
  d.dot_spacing = 5;
  try {
    render_texture(d, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "dot_radius");
  }
  TextureSpec st;
  st.kind = TextureKind::stripes;
  st.frequency = 0;
  try {
    render_texture(st, 0);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.field(), "frequency");
  }
}

TEST(World, DefaultSizes) {
  const auto w = build_world(WorldConfig::defaults());
  EXPECT_EQ(w.dataset.size(), 750u);
  EXPECT_EQ(w.random_pool.size(), 200u);
  EXPECT_EQ(w.keywords.size(), 8u);
  for (const auto& kw : w.keywords) EXPECT_GE(w.keyword_templates.at(kw).size(), 8u);
  for (int c = 0; c < 3; ++c) {
    EXPECT_EQ(w.dataset.select(c, Split::train).size(), 200u);
    EXPECT_EQ(w.dataset.select(c, Split::test).size(), 50u);
  }
  for (const auto& img : w.dataset.images) {
    EXPECT_GE(img.minCoeff(), 0.0);
    EXPECT_LE(img.maxCoeff(), 1.0);
  }
}

TEST(World, StripesTemplatesCorrelateWithStripedClass) {
  const auto w = build_world(WorldConfig::defaults());
  const auto& bank = w.keyword_templates.at("stripes");
  auto mean_abs_corr = [&](const ImageBatch& imgs) {
    double s = 0;
    for (const auto& t : bank)
      for (const auto& x : imgs) s += std::abs(correlation(t, x));
    return s / static_cast<double>(bank.size() * imgs.size());
  };
  const double zeb = mean_abs_corr(w.dataset.select(w.dataset.class_index("zeb"), Split::test));
  const double jag = mean_abs_corr(w.dataset.select(w.dataset.class_index("jag"), Split::test));
  EXPECT_GT(zeb, jag);
}

TEST(World, RejectsDegenerateConfigs) {
  auto cfg = WorldConfig::defaults();
  cfg.classes.resize(1);
  EXPECT_THROW(build_world(cfg), ConfigError);
  cfg = WorldConfig::defaults();
  cfg.classes[0].keyword.clear();
  EXPECT_THROW(build_world(cfg), ConfigError);
}

TEST(World, PureFunctionOfConfig) {
  const auto a = build_world(small_config());
  const auto b = build_world(small_config());
  for (std::size_t i = 0; i < a.dataset.size(); ++i) EXPECT_EQ(a.dataset.images[i], b.dataset.images[i]);
  auto other = small_config();
  other.seed += 1;
  const auto c = build_world(other);
  EXPECT_NE(a.dataset.images[0], c.dataset.images[0]);
}

TEST(World, SaveLoadRoundTrip) {
  const auto w = build_world(small_config());
  const auto dir = std::filesystem::temp_directory_path() / "rlpo_test_world";
  std::filesystem::remove_all(dir);
  save_world(w, dir, true);
  const auto back = load_world(dir);
  ASSERT_EQ(back.dataset.size(), w.dataset.size());
  for (std::size_t i = 0; i < w.dataset.size(); ++i) {
    EXPECT_EQ(back.dataset.images[i], w.dataset.images[i]);
    EXPECT_EQ(back.dataset.labels[i], w.dataset.labels[i]);
  }
  EXPECT_EQ(back.keywords, w.keywords);
  EXPECT_EQ(back.keyword_templates.at("dots")[3], w.keyword_templates.at("dots")[3]);
  EXPECT_EQ(back.ground_truth.at("zeb"), "stripes");
  const Image png = io::read_png(dir / "png" / "train" / "zeb" / "0.png");
  EXPECT_EQ(png.rows(), 16);
  EXPECT_LE((png - w.dataset.select(0, Split::train)[0]).cwiseAbs().maxCoeff(), 0.5 / 255 + 1e-12);
  std::filesystem::remove_all(dir);
}
