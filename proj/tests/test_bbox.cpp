#include <gtest/gtest.h>

#include "idvlm/bbox.hpp"
#include "idvlm/rng.hpp"

using namespace idvlm;

namespace {

// Pixel (x, y) covers [x, x+1) x [y, y+1); count covered pixels.
double raster_iou(const BBox& a, const BBox& b) {
  long long inter = 0, uni = 0;
  const long long w = std::max(a.right, b.right), h = std::max(a.bottom, b.bottom);
  for (long long y = 0; y < h; ++y)
    for (long long x = 0; x < w; ++x) {
      const bool ia = x >= a.left && x < a.right && y >= a.top && y < a.bottom;
      const bool ib = x >= b.left && x < b.right && y >= b.top && y < b.bottom;
      inter += ia && ib;
      uni += ia || ib;
    }
  return uni ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

BBox random_box(Rng& rng, long long limit) {
  const long long l = static_cast<long long>(rng.below(static_cast<std::uint64_t>(limit - 1)));
  const long long t = static_cast<long long>(rng.below(static_cast<std::uint64_t>(limit - 1)));
  const long long r = l + 1 + static_cast<long long>(rng.below(static_cast<std::uint64_t>(limit - l - 1)));
  const long long b = t + 1 + static_cast<long long>(rng.below(static_cast<std::uint64_t>(limit - t - 1)));
  return {l, t, r, b};
}

}  // namespace

TEST(Iou, WorkedCase) {
  // 10x10 boxes offset by 5 in both directions: 25 / 175.
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 5, 15, 15}), 25.0 / 175.0, 1e-12);
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 5, 15, 15}), 0.142857, 1e-6);
}

TEST(Iou, IdenticalDisjointAndTouching) {
  EXPECT_EQ(iou({1, 2, 5, 9}, {1, 2, 5, 9}), 1.0);
  EXPECT_EQ(iou({0, 0, 4, 4}, {10, 10, 12, 12}), 0.0);
  EXPECT_EQ(iou({0, 0, 4, 4}, {4, 0, 8, 4}), 0.0);
}

TEST(Iou, MatchesRasterOracle) {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const BBox a = random_box(rng, 64), b = random_box(rng, 64);
    ASSERT_NEAR(iou(a, b), raster_iou(a, b), 1e-12) << a.str() << " " << b.str();
    ASSERT_EQ(iou(a, b), iou(b, a));
  }
}

TEST(BBox, Validity) {
  EXPECT_TRUE(BBox({0, 0, 1, 1}).valid());
  EXPECT_FALSE(BBox({5, 0, 5, 1}).valid());
  EXPECT_FALSE(BBox({0, 3, 1, 2}).valid());
  EXPECT_FALSE(BBox({-1, 0, 1, 1}).valid());
  EXPECT_TRUE(BBox({0, 0, 640, 480}).within(640, 480));
  EXPECT_FALSE(BBox({0, 0, 641, 480}).within(640, 480));
}

TEST(Grammar, RenderedForms) {
  const BBox b{12, 34, 56, 78};
  EXPECT_EQ(render_bracket(b), "bbox: [12, 34, 56, 78]");
  EXPECT_EQ(render_ref_box(b, "Julia"), "<ref>Julia</ref><box>(12,34),(56,78)</box>");
  EXPECT_EQ(parse_box_grammar("bracket_form"), BoxGrammar::kBracket);
  EXPECT_EQ(parse_box_grammar("ref_box_form"), BoxGrammar::kRefBox);
  EXPECT_THROW(parse_box_grammar("xywh"), ConfigError);
}

TEST(Grammar, RenderParseRoundTrip) {
  Rng rng(2);
  for (int i = 0; i < 500; ++i) {
    const BBox b = random_box(rng, 2000);
    ASSERT_EQ(parse_bbox(render_bracket(b), BoxGrammar::kBracket), b);
    ASSERT_EQ(parse_bbox(render_ref_box(b, "Tom"), BoxGrammar::kRefBox), b);
  }
}

TEST(Grammar, ToleratesSurroundingTextAndSpacing) {
  EXPECT_EQ(parse_bbox("Sure. BBOX:[ 1 ,2, 3 ,4 ] is where", BoxGrammar::kBracket), BBox({1, 2, 3, 4}));
  EXPECT_EQ(parse_bbox("<ref>A</ref><box>( 1, 2 ), (3,4)</box>", BoxGrammar::kRefBox), BBox({1, 2, 3, 4}));
  EXPECT_EQ(parse_bbox("bbox: [1, 2, 3, 4] then bbox: [5, 6, 7, 8]", BoxGrammar::kBracket), BBox({1, 2, 3, 4}));
}

TEST(Grammar, MalformedResponsesAreMisses) {
  const std::vector<std::string> bracket_bad = {
      "",
      "I cannot see Julia.",
      "bbox: [1, 2, 3]",
      "bbox: [1, 2, 3, 4, 5]",
      "bbox: (1, 2, 3, 4)",
      "bbox [1, 2, 3, 4]",
      "bbox: [a, b, c, d]",
      "bbox: [-1, 2, 3, 4]",
      "bbox: [5, 2, 3, 4]",
      "bbox: [1, 9, 3, 4]",
      "bbox: [1.5, 2, 3, 4]",
      "bbox: [99999999999999999999, 2, 3, 4]",
      "<box>(1,2),(3,4)</box>",
      "bbox: [1, 2, 3, 4",
  };
  const std::vector<std::string> refbox_bad = {
      "<ref>Julia</ref><box>(1,2),(3)</box>",
      "<ref>Julia</ref><box>(3,4),(1,2)</box>",
      "<ref>Julia</ref>",
      "bbox: [1, 2, 3, 4]",
      "<box>(1,2),(3,4)",
      "<box>[1,2],[3,4]</box>",
  };
  for (const auto& s : bracket_bad) EXPECT_FALSE(parse_bbox(s, BoxGrammar::kBracket)) << s;
  for (const auto& s : refbox_bad) EXPECT_FALSE(parse_bbox(s, BoxGrammar::kRefBox)) << s;
  EXPECT_EQ(bracket_bad.size() + refbox_bad.size(), 20u);
}
