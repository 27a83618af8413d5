#include "fb/masks.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <vector>

#include "fb/rng.hpp"

namespace {

using fb::BoxPrompt;
using fb::Mask2D;
using fb::MaskInstance;
using fb::PointPrompt;
using fb::PromptPolarity;
using fb::Rng;
using fb::SegMap;

Mask2D random_mask(int h, int w, double density, Rng& rng) {
  Mask2D m(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) {
      m.set(i, j, rng.uniform01() < density);
    }
  }
  return m;
}

// Brute-force flood fill labeling oracle (4-connectivity).
std::vector<int> flood_fill_labels(const Mask2D& m) {
  std::vector<int> labels(m.data.size(), -1);
  int next = 0;
  for (int r = 0; r < m.height; ++r) {
    for (int c = 0; c < m.width; ++c) {
      if (!m.at(r, c) || labels[static_cast<std::size_t>(r) * m.width + c] >= 0)
        continue;
      std::queue<std::pair<int, int>> q;
      q.emplace(r, c);
      labels[static_cast<std::size_t>(r) * m.width + c] = next;
      while (!q.empty()) {
        auto [i, j] = q.front();
        q.pop();
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          int ni = i + dr[k], nj = j + dc[k];
          if (ni < 0 || ni >= m.height || nj < 0 || nj >= m.width) continue;
          auto& l = labels[static_cast<std::size_t>(ni) * m.width + nj];
          if (m.at(ni, nj) && l < 0) {
            l = next;
            q.emplace(ni, nj);
          }
        }
      }
      ++next;
    }
  }
  return labels;
}

// O(N^2) nearest-false-pixel scan; the boundary counts as border.
double brute_force_min_sq_dist(const Mask2D& m, int r, int c) {
  double best = std::numeric_limits<double>::infinity();
  // Distance to the virtual false ring just outside the image.
  const double ring[] = {double(r + 1), double(m.height - r), double(c + 1),
                         double(m.width - c)};
  for (double d : ring) best = std::min(best, d * d);
  for (int i = 0; i < m.height; ++i) {
    for (int j = 0; j < m.width; ++j) {
      if (m.at(i, j)) continue;
      const double d2 = double(i - r) * (i - r) + double(j - c) * (j - c);
      best = std::min(best, d2);
    }
  }
  return best;
}

TEST(ConnectedComponents, EmptyMaskGivesEmptyList) {
  Mask2D m(4, 4);
  EXPECT_TRUE(fb::connected_components(m).empty());
}

TEST(ConnectedComponents, DiagonalPixelsAreSeparate) {
  Mask2D m(3, 3);
  m.set(0, 0, true);
  m.set(1, 1, true);
  auto comps = fb::connected_components(m);
  ASSERT_EQ(comps.size(), 2u);
  EXPECT_EQ(comps[0].area, 1);
  EXPECT_EQ(comps[1].area, 1);
}

TEST(ConnectedComponents, MatchesFloodFillOracle) {
  Rng rng(101);
  for (int trial = 0; trial < 20; ++trial) {
    Mask2D m = random_mask(32, 32, 0.45, rng);
    auto comps = fb::connected_components(m);
    auto labels = flood_fill_labels(m);
    const int n_oracle =
        labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    ASSERT_EQ(static_cast<int>(comps.size()), n_oracle);
    // Each returned component must be exactly one oracle label's pixel set.
    std::int64_t total_area = 0;
    for (const auto& comp : comps) {
      int label = -2;
      for (int i = 0; i < 32; ++i) {
        for (int j = 0; j < 32; ++j) {
          if (!comp.mask.at(i, j)) continue;
          const int l = labels[static_cast<std::size_t>(i) * 32 + j];
          if (label == -2) label = l;
          ASSERT_EQ(l, label);
        }
      }
      std::int64_t oracle_area = 0;
      for (auto l : labels) oracle_area += l == label;
      EXPECT_EQ(comp.area, oracle_area);
      EXPECT_EQ(comp.area, comp.mask.area());
      total_area += comp.area;
    }
    EXPECT_EQ(total_area, m.area());
    // Sorted by area descending.
    for (std::size_t k = 1; k < comps.size(); ++k) {
      EXPECT_GE(comps[k - 1].area, comps[k].area);
    }
  }
}

TEST(InteriorPoint, CenterOfFullSquare) {
  Mask2D m(5, 5, true);
  PointPrompt p = fb::interior_point(m);
  EXPECT_EQ(p.row, 2);
  EXPECT_EQ(p.col, 2);
  EXPECT_EQ(p.polarity, PromptPolarity::POSITIVE);
}

TEST(InteriorPoint, SingleTruePixel) {
  Mask2D m(6, 7);
  m.set(4, 2, true);
  PointPrompt p = fb::interior_point(m);
  EXPECT_EQ(p.row, 4);
  EXPECT_EQ(p.col, 2);
}

TEST(InteriorPoint, EmptyMaskRejected) {
  Mask2D m(3, 3);
  EXPECT_THROW(fb::interior_point(m), std::invalid_argument);
}

TEST(InteriorPoint, LShapeMatchesBruteForce) {
  Mask2D m(20, 20);
  for (int i = 2; i < 18; ++i) {
    for (int j = 2; j < 8; ++j) m.set(i, j, true);
  }
  for (int i = 12; i < 18; ++i) {
    for (int j = 2; j < 18; ++j) m.set(i, j, true);
  }
  PointPrompt p = fb::interior_point(m);
  const double got = brute_force_min_sq_dist(m, p.row, p.col);
  double best = -1.0;
  int br = -1, bc = -1;
  for (int i = 0; i < 20; ++i) {
    for (int j = 0; j < 20; ++j) {
      if (!m.at(i, j)) continue;
      const double d = brute_force_min_sq_dist(m, i, j);
      if (d > best) {
        best = d;
        br = i;
        bc = j;
      }
    }
  }
  EXPECT_EQ(got, best);
  EXPECT_EQ(p.row, br);
  EXPECT_EQ(p.col, bc);
}

TEST(DistanceTransform, MatchesBruteForceOnRandomMasks) {
  Rng rng(202);
  for (int trial = 0; trial < 10; ++trial) {
    Mask2D m = random_mask(16, 16, 0.7, rng);
    auto d2 = fb::distance_transform_squared(m);
    for (int i = 0; i < 16; ++i) {
      for (int j = 0; j < 16; ++j) {
        if (m.at(i, j)) {
          EXPECT_EQ(d2[static_cast<std::size_t>(i) * 16 + j],
                    brute_force_min_sq_dist(m, i, j));
        } else {
          EXPECT_EQ(d2[static_cast<std::size_t>(i) * 16 + j], 0.0);
        }
      }
    }
  }
}

TEST(InteriorPoint, MaximalityPropertyOverAllTruePixels) {
  Rng rng(203);
  Mask2D m = random_mask(24, 24, 0.8, rng);
  PointPrompt p = fb::interior_point(m);
  EXPECT_TRUE(m.at(p.row, p.col));
  const double chosen = brute_force_min_sq_dist(m, p.row, p.col);
  for (int i = 0; i < 24; ++i) {
    for (int j = 0; j < 24; ++j) {
      if (m.at(i, j)) {
        EXPECT_GE(chosen, brute_force_min_sq_dist(m, i, j));
      }
    }
  }
}

SegMap make_segmap(int h, int w, const std::string& id) {
  SegMap sm;
  sm.height = h;
  sm.width = w;
  sm.image_id = id;
  sm.labels.assign(static_cast<std::size_t>(h) * w, 0);
  return sm;
}

void paint(SegMap& sm, int top, int left, int hgt, int wdt, std::int32_t cls) {
  for (int i = top; i < top + hgt; ++i) {
    for (int j = left; j < left + wdt; ++j) {
      sm.labels[static_cast<std::size_t>(i) * sm.width + j] = cls;
    }
  }
}

TEST(BuildEvalSet, SmallAreaFilteredOut) {
  SegMap sm = make_segmap(64, 64, "img0");
  paint(sm, 0, 0, 10, 10, 1);  // area 100 < 900
  auto pairs = fb::build_eval_set({sm}, 900);
  EXPECT_TRUE(pairs.empty());
}

TEST(BuildEvalSet, SolidSquareGivesCenterPoint) {
  SegMap sm = make_segmap(64, 64, "img1");
  paint(sm, 10, 12, 40, 40, 3);
  auto pairs = fb::build_eval_set({sm}, 900);
  ASSERT_EQ(pairs.size(), 1u);
  EXPECT_EQ(pairs[0].instance.class_id, 3);
  EXPECT_EQ(pairs[0].instance.area, 1600);
  EXPECT_EQ(pairs[0].instance.source_image_id, "img1");
  // Centroid of an even-sized block under the smallest-row/col tie-break.
  EXPECT_EQ(pairs[0].point.row, 10 + 19);
  EXPECT_EQ(pairs[0].point.col, 12 + 19);
}

// Hand-enumerated oracle on a crafted three-class map: class 1 has two
// components (largest kept), class 2 is large enough, class 3 falls under
// the area filter.
TEST(BuildEvalSet, MatchesHandEnumeratedOracle) {
  SegMap sm = make_segmap(100, 100, "imgX");
  paint(sm, 0, 0, 35, 35, 1);    // class 1, area 1225 (largest)
  paint(sm, 60, 60, 31, 31, 1);  // class 1, area 961 (smaller, dropped)
  paint(sm, 0, 50, 40, 31, 2);   // class 2, area 1240
  paint(sm, 80, 0, 10, 10, 3);   // class 3, area 100 (filtered)
  auto pairs = fb::build_eval_set({sm}, 900);
  ASSERT_EQ(pairs.size(), 2u);
  EXPECT_EQ(pairs[0].instance.class_id, 1);
  EXPECT_EQ(pairs[0].instance.area, 35 * 35);
  EXPECT_EQ(pairs[0].point.row, 17);
  EXPECT_EQ(pairs[0].point.col, 17);
  EXPECT_EQ(pairs[1].instance.class_id, 2);
  EXPECT_EQ(pairs[1].instance.area, 40 * 31);
  EXPECT_EQ(pairs[1].point.row, 15);
  EXPECT_EQ(pairs[1].point.col, 50 + 15);
}

TEST(BuildEvalSet, InvariantToMapOrdering) {
  SegMap a = make_segmap(64, 64, "a");
  paint(a, 0, 0, 32, 32, 1);
  SegMap b = make_segmap(64, 64, "b");
  paint(b, 20, 20, 40, 40, 2);
  auto p1 = fb::build_eval_set({a, b}, 900);
  auto p2 = fb::build_eval_set({b, a}, 900);
  ASSERT_EQ(p1.size(), 2u);
  ASSERT_EQ(p2.size(), 2u);
  EXPECT_EQ(p1[0].point, p2[1].point);
  EXPECT_EQ(p1[1].point, p2[0].point);
  EXPECT_EQ(p1[0].instance.mask, p2[1].instance.mask);
}

TEST(SamplePointPrompts, ForcedDrawOnSinglePixel) {
  Mask2D m(4, 4);
  m.set(2, 3, true);
  Rng rng(5);
  auto prompts = fb::sample_point_prompts(m, 1, 0, rng);
  ASSERT_EQ(prompts.size(), 1u);
  EXPECT_EQ(prompts[0], (PointPrompt{2, 3, PromptPolarity::POSITIVE}));
}

TEST(SamplePointPrompts, DeterministicUnderSeed) {
  Rng rng_mask(7);
  Mask2D m = random_mask(16, 16, 0.5, rng_mask);
  Rng a(42), b(42);
  auto pa = fb::sample_point_prompts(m, 4, 4, a);
  auto pb = fb::sample_point_prompts(m, 4, 4, b);
  EXPECT_EQ(pa, pb);
}

TEST(SamplePointPrompts, PolarityMembershipHolds) {
  Rng rng_mask(8);
  Mask2D m = random_mask(16, 16, 0.5, rng_mask);
  Rng rng(9);
  for (auto [p, n] : {std::pair{1, 0}, {3, 0}, {2, 2}, {4, 4}}) {
    auto prompts = fb::sample_point_prompts(m, p, n, rng);
    ASSERT_EQ(prompts.size(), static_cast<std::size_t>(p + n));
    std::set<std::pair<int, int>> seen_pos, seen_neg;
    for (const auto& pr : prompts) {
      if (pr.polarity == PromptPolarity::POSITIVE) {
        EXPECT_TRUE(m.at(pr.row, pr.col));
        EXPECT_TRUE(seen_pos.emplace(pr.row, pr.col).second);
      } else {
        EXPECT_FALSE(m.at(pr.row, pr.col));
        EXPECT_TRUE(seen_neg.emplace(pr.row, pr.col).second);
      }
    }
  }
}

TEST(SamplePointPrompts, InsufficientPixelsRejected) {
  Mask2D m(2, 2);
  m.set(0, 0, true);
  Rng rng(1);
  EXPECT_THROW(fb::sample_point_prompts(m, 2, 0, rng), std::invalid_argument);
  EXPECT_THROW(fb::sample_point_prompts(m, 0, 4, rng), std::invalid_argument);
}

TEST(SamplePointPrompts, UniformOverTwoPixels) {
  Mask2D m(2, 2);
  m.set(0, 0, true);
  m.set(1, 1, true);
  Rng rng(777);
  int first = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto prompts = fb::sample_point_prompts(m, 1, 0, rng);
    if (prompts[0] == (PointPrompt{0, 0, PromptPolarity::POSITIVE})) ++first;
  }
  EXPECT_NEAR(first / static_cast<double>(n), 0.5, 0.02);
}

TEST(BoxFromMask, SinglePixelAndFullMask) {
  Mask2D m(5, 6);
  m.set(3, 4, true);
  EXPECT_EQ(fb::box_from_mask(m), (BoxPrompt{3, 4, 4, 5}));
  Mask2D full(5, 6, true);
  EXPECT_EQ(fb::box_from_mask(full), (BoxPrompt{0, 0, 5, 6}));
  Mask2D empty(3, 3);
  EXPECT_THROW(fb::box_from_mask(empty), std::invalid_argument);
}

TEST(BoxFromMask, MatchesScanOracle) {
  Rng rng(303);
  for (int trial = 0; trial < 20; ++trial) {
    Mask2D m = random_mask(12, 14, 0.2, rng);
    if (m.area() == 0) continue;
    BoxPrompt b = fb::box_from_mask(m);
    int top = 12, left = 14, bottom = -1, right = -1;
    for (int i = 0; i < 12; ++i) {
      for (int j = 0; j < 14; ++j) {
        if (!m.at(i, j)) continue;
        top = std::min(top, i);
        left = std::min(left, j);
        bottom = std::max(bottom, i + 1);
        right = std::max(right, j + 1);
      }
    }
    EXPECT_EQ(b, (BoxPrompt{top, left, bottom, right}));
  }
}

}  // namespace
