#include "rlpo/seeds.hpp"
#include "rlpo/synthworld.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

using namespace rlpo;
using namespace rlpo::seeds;

namespace {

const world::World& default_world() {
  static const world::World w = world::build_world(world::WorldConfig::defaults());
  return w;
}

const TemplateDescriber& default_describer() {
  static const TemplateDescriber d(default_world().keyword_templates);
  return d;
}

KeywordCandidate candidate(const std::string& text, Vector e, std::vector<double> rel = {0.5}) {
  return {text, std::move(e), std::move(rel)};
}

bool has_text(const std::vector<KeywordCandidate>& cs, const std::string& t) {
  return std::any_of(cs.begin(), cs.end(), [&](const auto& c) { return c.text == t; });
}

struct FlakyDescriber : Describer {
  std::vector<std::string> answer(const Image&, const std::string& question) const override {
    if (question.find("shape") != std::string::npos) throw Error("model offline");
    return {"Stripes"};
  }
};

struct FixedScorer : KeywordScorer {
  Vector embed(const std::string&) const override { return Vector::Ones(3); }
  double relevance(const Image&, const std::string&) const override { return 0.7; }
};

}  // namespace

TEST(Descriptor, GroupsAreNormalized) {
  const auto img = world::render_keyword(default_world().config, "dots", "desc", 1)[0];
  const Vector d = texture_descriptor(img);
  ASSERT_EQ(d.size(), kDescriptorDim);
  EXPECT_NEAR(d.segment(0, 6).sum(), 1.0, 1e-12);
  EXPECT_NEAR(d.segment(6, 6).sum(), 1.0, 1e-12);
  EXPECT_NEAR(d.segment(12, 4).sum(), 1.0, 1e-12);
  EXPECT_GE(d.minCoeff(), 0.0);
}

TEST(Descriptor, ConstantImageHasOnlyIntensity) {
  const Vector d = texture_descriptor(Image::Constant(8, 8, 0.625));
  EXPECT_EQ(d.head(12).norm(), 0.0);
  EXPECT_NEAR(d(14), 1.0, 1e-12);
}

TEST(Descriptor, VerticalStripesPointAlongFirstOrientationBin) {
  Image img(16, 16);
  for (Eigen::Index j = 0; j < 16; ++j) img.col(j).setConstant((j / 2) % 2 ? 1.0 : 0.0);
  const Vector d = texture_descriptor(img);
  EXPECT_NEAR(d(0), 1.0, 1e-12);
  // 4 cycles over 16 pixels is frequency 0.25, radius bin 2 of 6 over (0, 0.707].
  Eigen::Index peak;
  d.segment(6, 6).maxCoeff(&peak);
  EXPECT_EQ(peak, 2);
  EXPECT_THROW(texture_descriptor(Image::Zero(2, 5)), ShapeError);
}

TEST(Quadrants, RowMajorBlocks) {
  Image img(4, 4);
  for (Eigen::Index i = 0; i < 16; ++i) img.data()[i] = static_cast<double>(i);
  const auto q = quadrants(img);
  ASSERT_EQ(q.size(), 4u);
  EXPECT_EQ(q[0](0, 0), 0.0);
  EXPECT_EQ(q[1](0, 0), 2.0);
  EXPECT_EQ(q[2](0, 0), 8.0);
  EXPECT_EQ(q[3](1, 1), 15.0);
}

TEST(Questions, SevenFixedQuestions) {
  const auto& q = default_questions();
  ASSERT_EQ(q.size(), 7u);
  EXPECT_EQ(q.front(), "What is the pattern in the image?");
  EXPECT_EQ(q.back(), "What is the shape of the image?");
}

TEST(Describe, StripedClassYieldsStripes) {
  const auto& w = default_world();
  const auto imgs = w.dataset.select(w.dataset.class_index("zeb"), world::Split::test);
  const auto r = describe_images(imgs, default_describer(), default_describer());
  EXPECT_TRUE(r.errors.empty());
  EXPECT_TRUE(has_text(r.candidates, "stripes"));
  for (const auto& c : r.candidates) {
    EXPECT_EQ(c.relevance.size(), imgs.size());
    EXPECT_EQ(c.embedding.size(), kDescriptorDim);
  }
}

TEST(Describe, EmptyInputAndDeterminism) {
  EXPECT_TRUE(describe_images({}, default_describer(), default_describer()).candidates.empty());
  const auto imgs = default_world().dataset.select(1, world::Split::test);
  const ImageBatch few(imgs.begin(), imgs.begin() + 6);
  const auto a = describe_images(few, default_describer(), default_describer());
  const auto b = describe_images(few, default_describer(), default_describer());
  ASSERT_EQ(a.candidates.size(), b.candidates.size());
  for (std::size_t i = 0; i < a.candidates.size(); ++i) {
    EXPECT_EQ(a.candidates[i].text, b.candidates[i].text);
    EXPECT_EQ(a.candidates[i].relevance, b.candidates[i].relevance);
  }
}

TEST(Describe, FailuresAreReportedPerPairAndRunContinues) {
  const ImageBatch imgs(2, Image::Constant(4, 4, 0.5));
  const auto r = describe_images(imgs, FlakyDescriber{}, FixedScorer{});
  EXPECT_EQ(r.errors.size(), 8u);  // 2 images x 4 patches x 1 question
  ASSERT_EQ(r.candidates.size(), 1u);
  EXPECT_EQ(r.candidates[0].text, "stripes");
  EXPECT_NEAR(r.candidates[0].mean_relevance(), 0.7, 1e-15);
}

TEST(Dedup, IdenticalEmbeddingsDropSecond) {
  const Vector e = (Vector(2) << 0.3, 0.4).finished();
  const auto r = dedup_keywords({candidate("a", e), candidate("b", 2 * e)});
  ASSERT_EQ(r.kept.size(), 1u);
  EXPECT_EQ(r.kept[0].text, "a");
}

TEST(Dedup, BelowThresholdBothKept) {
  const Vector a = Vector::Unit(2, 0);
  const Vector b = (Vector(2) << 0.9, std::sqrt(1 - 0.81)).finished();
  EXPECT_EQ(dedup_keywords({candidate("a", a), candidate("b", b)}).kept.size(), 2u);
}

TEST(Dedup, ChainKeepsEnds) {
  // tests/oracles/dedup_chain.py
  const Vector a = (Vector(3) << 1, 0, 0).finished();
  const Vector b = (Vector(3) << 0.96, 0.28, 0).finished();
  const Vector c = (Vector(3) << 0.85, 0.5142857142857143, 0.11406228159050945).finished();
  const auto r = dedup_keywords({candidate("A", a), candidate("B", b), candidate("C", c)});
  ASSERT_EQ(r.kept.size(), 2u);
  EXPECT_EQ(r.kept[0].text, "A");
  EXPECT_EQ(r.kept[1].text, "C");
}

TEST(Dedup, ZeroNormIsRejectedByName) {
  const auto r = dedup_keywords({candidate("ok", Vector::Ones(2)), candidate("blank", Vector::Zero(2))});
  ASSERT_EQ(r.kept.size(), 1u);
  ASSERT_EQ(r.errors.size(), 1u);
  EXPECT_NE(r.errors[0].find("blank"), std::string::npos);
}

TEST(Dedup, NoRetainedPairExceedsThreshold) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<KeywordCandidate> cs;
  for (int i = 0; i < 60; ++i)
    cs.push_back(candidate("k" + std::to_string(i), Vector::NullaryExpr(3, [&] { return std::abs(g(rng)); })));
  const auto kept = dedup_keywords(cs).kept;
  for (std::size_t i = 0; i < kept.size(); ++i)
    for (std::size_t j = i + 1; j < kept.size(); ++j)
      EXPECT_LE(kept[i].embedding.normalized().dot(kept[j].embedding.normalized()), 0.95);
}

TEST(Rank, TopTwentyOfTwentyFive) {
  std::vector<KeywordCandidate> cs;
  for (int i = 0; i < 25; ++i) cs.push_back(candidate("k" + std::to_string(i), Vector::Ones(2), {i / 25.0}));
  const auto out = rank_and_select(cs);
  ASSERT_EQ(out.size(), 20u);
  EXPECT_EQ(out.front().keyword, "k24");
  for (std::size_t i = 1; i < out.size(); ++i) EXPECT_GE(out[i - 1].mean_relevance, out[i].mean_relevance);
}

TEST(Rank, ShortInputKeptWhole) {
  std::vector<KeywordCandidate> cs;
  for (int i = 0; i < 5; ++i) cs.push_back(candidate("k" + std::to_string(i), Vector::Ones(2)));
  EXPECT_EQ(rank_and_select(cs, 20).size(), 5u);
  EXPECT_THROW(rank_and_select({}, 20), ValidationError);
}

TEST(Rank, OrderAndTies) {
  const auto out = rank_and_select({candidate("low", Vector::Ones(2), {0.6}), candidate("high", Vector::Ones(2), {0.8}),
                                    candidate("b", Vector::Ones(2), {0.6, 0.6}), candidate("a", Vector::Ones(2), {0.6})});
  ASSERT_EQ(out.size(), 4u);
  EXPECT_EQ(out[0].keyword, "high");
  EXPECT_EQ(out[1].keyword, "a");
  EXPECT_EQ(out[2].keyword, "b");
  EXPECT_EQ(out[3].keyword, "low");
}

TEST(Pipeline, EveryClassKeywordReachesItsActionSpace) {
  const auto& w = default_world();
  for (const auto& [cls, kw] : w.ground_truth) {
    const auto imgs = w.dataset.select(w.dataset.class_index(cls), world::Split::test);
    std::vector<std::string> errors;
    const auto k = build_action_space(imgs, default_describer(), 20, &errors);
    EXPECT_TRUE(errors.empty());
    EXPECT_TRUE(std::any_of(k.begin(), k.end(), [&](const auto& a) { return a.keyword == kw; })) << cls;
  }
}

TEST(ActionFile, RoundTripAndValidation) {
  const auto path = std::filesystem::temp_directory_path() / "rlpo_actions.json";
  save_action_space({{"stripes", 0.875}, {"dots", 0.5}}, path);
  const auto back = load_action_space(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].keyword, "stripes");
  EXPECT_EQ(back[0].mean_relevance, 0.875);
  save_action_space({{"dots", 0.5}, {"dots", 0.4}}, path);
  EXPECT_THROW(load_action_space(path), IoError);
  std::filesystem::remove(path);
}
