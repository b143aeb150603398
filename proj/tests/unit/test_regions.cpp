#include <gtest/gtest.h>

#include <random>

#include "civiclens/corpus.hpp"
#include "civiclens/regions.hpp"
#include "test_support.hpp"

using namespace civiclens;
using namespace civiclens::regions;

namespace {

double iou_by_counting(const BoundingBox& a, const BoundingBox& b) {
  const int W = std::max(a.x + a.w, b.x + b.w), H = std::max(a.y + a.h, b.y + b.h);
  long long inter = 0, uni = 0;
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const bool in_a = x >= a.x && x < a.x + a.w && y >= a.y && y < a.y + a.h;
      const bool in_b = x >= b.x && x < b.x + b.w && y >= b.y && y < b.y + b.h;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  return static_cast<double>(inter) / static_cast<double>(uni);
}

BoundingBox random_box(std::mt19937_64& rng) {
  return {static_cast<int>(rng() % 40), static_cast<int>(rng() % 40), 1 + static_cast<int>(rng() % 25),
          1 + static_cast<int>(rng() % 25)};
}

std::vector<RegionProposal> random_proposals(std::mt19937_64& rng, int n) {
  std::vector<RegionProposal> out;
  for (int i = 0; i < n; ++i) out.push_back({random_box(rng), (rng() % 1000) / 1000.0});
  return out;
}

double best_iou(const std::vector<RegionProposal>& ps, const BoundingBox& truth) {
  double best = 0;
  for (const auto& p : ps) best = std::max(best, iou(p.bbox, truth));
  return best;
}

}  // namespace

TEST(Iou, Examples) {
  EXPECT_EQ(iou({3, 4, 5, 6}, {3, 4, 5, 6}), 1.0);
  EXPECT_EQ(iou({0, 0, 10, 10}, {20, 20, 5, 5}), 0.0);
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 5, 10, 10}), 25.0 / 175.0, 1e-15);
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 5, 10, 10}), iou_by_counting({0, 0, 10, 10}, {5, 5, 10, 10}), 1e-15);
  EXPECT_EQ(iou({0, 0, 10, 10}, {10, 0, 10, 10}), 0.0);  // touching edges share no pixel
}

TEST(Iou, PropertiesAgainstCountingOracle) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 2000; ++i) {
    const auto a = random_box(rng), b = random_box(rng);
    const double v = iou(a, b);
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_EQ(iou(a, a), 1.0);
    EXPECT_NEAR(v, iou_by_counting(a, b), 1e-12);
  }
}

TEST(Nms, Examples) {
  EXPECT_TRUE(non_max_suppress({}, 0.5).empty());
  const std::vector<RegionProposal> twins = {{{0, 0, 10, 10}, 0.8}, {{0, 0, 10, 10}, 0.9}};
  const auto kept = non_max_suppress(twins, 0.5);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].objectness, 0.9);
  const std::vector<RegionProposal> overlap = {{{0, 0, 10, 10}, 0.9}, {{5, 5, 10, 10}, 0.8}};
  EXPECT_EQ(non_max_suppress(overlap, 0.3).size(), 2u);
}

TEST(Nms, TiesPreferSmallerXThenY) {
  const std::vector<RegionProposal> tied = {{{4, 0, 10, 10}, 0.5}, {{2, 3, 10, 10}, 0.5}, {{2, 1, 10, 10}, 0.5}};
  const auto kept = non_max_suppress(tied, 0.1);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].bbox, (BoundingBox{2, 1, 10, 10}));
}

TEST(Nms, ConflictFreeIdempotentAndSorted) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    const auto ps = random_proposals(rng, 1 + static_cast<int>(rng() % 30));
    const double t = (rng() % 101) / 100.0;
    const auto once = non_max_suppress(ps, t);
    for (std::size_t i = 0; i < once.size(); ++i) {
      if (i > 0) {
        EXPECT_GE(once[i - 1].objectness, once[i].objectness);
      }
      for (std::size_t j = i + 1; j < once.size(); ++j) EXPECT_LE(iou(once[i].bbox, once[j].bbox), t);
    }
    EXPECT_EQ(non_max_suppress(once, t), once);
    // Highest-scoring input always survives.
    double top = 0;
    for (const auto& p : ps) top = std::max(top, p.objectness);
    EXPECT_EQ(once.front().objectness, top);
  }
}

TEST(Propose, ConstantImageHasNoProposals) {
  imaging::RasterImage gray(256, 256, 3, imaging::ValueDomain::Unit, 0.5);
  EXPECT_TRUE(propose_regions(gray).empty());
}

TEST(Propose, TwoBlobsGiveTwoProposals) {
  imaging::RasterImage img(256, 256, 3, imaging::ValueDomain::Unit, 0.45);
  for (int y = 0; y < 20; ++y)
    for (int x = 0; x < 20; ++x)
      for (int c = 0; c < 3; ++c) {
        img.at(20 + x, 20 + y, c) = 1.0;
        img.at(216 + x, 216 + y, c) = 0.0;
      }
  const auto ps = propose_regions(img);
  ASSERT_EQ(ps.size(), 2u);
  // Each blob sits inside its own box; the box carries a halo where the
  // 33x33 background mean is pulled toward the blob.
  auto contains = [](const BoundingBox& outer, const BoundingBox& inner) {
    return outer.x <= inner.x && outer.y <= inner.y && outer.x + outer.w >= inner.x + inner.w &&
           outer.y + outer.h >= inner.y + inner.h;
  };
  const BoundingBox white{20, 20, 20, 20}, black{216, 216, 20, 20};
  EXPECT_TRUE((contains(ps[0].bbox, white) && contains(ps[1].bbox, black)) ||
              (contains(ps[1].bbox, white) && contains(ps[0].bbox, black)));
  for (const auto& p : ps) EXPECT_LE(p.bbox.w, 32);
  for (const auto& p : ps) {
    EXPECT_GE(p.objectness, 0.0);
    EXPECT_LE(p.objectness, 1.0);
  }
}

TEST(Propose, RejectsNonStandardInput) {
  EXPECT_ERROR_CODE(propose_regions(imaging::RasterImage(100, 100, 3, imaging::ValueDomain::Unit)),
                    ErrorCode::Precondition);
  EXPECT_ERROR_CODE(propose_regions(imaging::RasterImage(256, 256, 3, imaging::ValueDomain::Byte)),
                    ErrorCode::Precondition);
}

TEST(Propose, FindsPotholeAndIsDeterministic) {
  int hits = 0, scenes = 0;
  for (std::uint64_t seed = 0; scenes < 40; ++seed) {
    auto [img, truth] = corpus::render_scene(IssueClass::InfrastructureDamage, corpus::SceneConditions::easy(), 256, seed);
    if (truth.size() != 1) continue;
    ++scenes;
    const auto ps = propose_regions(img);
    EXPECT_EQ(ps, propose_regions(img));
    EXPECT_LE(ps.size(), 16u);
    hits += best_iou(ps, truth[0].bbox) >= 0.5;
  }
  EXPECT_GE(hits, 36);
}

TEST(Propose, SettingsAreHonored) {
  auto [img, truth] = corpus::render_scene(IssueClass::WasteDisposal, corpus::SceneConditions::easy(), 256, 4);
  ProposerSettings s;
  s.max_proposals = 1;
  EXPECT_LE(propose_regions(img, s).size(), 1u);
  s = {};
  s.saliency_threshold = 2.0;  // saliency never exceeds 1
  EXPECT_TRUE(propose_regions(img, s).empty());
}
