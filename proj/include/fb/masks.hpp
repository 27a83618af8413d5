#pragma once

#include <algorithm>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fb/rng.hpp"

namespace fb {

// Flat row-major boolean mask.
struct Mask2D {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  Mask2D() = default;
  Mask2D(int h, int w, bool fill = false)
      : height(h), width(w),
        data(static_cast<std::size_t>(h) * static_cast<std::size_t>(w),
             fill ? 1 : 0) {
    if (h <= 0 || w <= 0) {
      throw std::invalid_argument("Mask2D: dimensions must be positive");
    }
  }

  bool at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * width + j] != 0;
  }
  void set(int i, int j, bool v) {
    data[static_cast<std::size_t>(i) * width + j] = v ? 1 : 0;
  }
  std::int64_t area() const {
    std::int64_t n = 0;
    for (auto v : data) n += v != 0;
    return n;
  }
  bool operator==(const Mask2D& o) const = default;
};

// Ground-truth semantic map: integer class ids, 0 = background.
struct SegMap {
  std::vector<std::int32_t> labels;  // row-major
  int height = 0;
  int width = 0;
  std::string image_id;

  std::int32_t at(int i, int j) const {
    return labels[static_cast<std::size_t>(i) * width + j];
  }
};

struct MaskInstance {
  Mask2D mask;
  std::int32_t class_id = 0;
  std::int64_t area = 0;
  std::string source_image_id;
};

enum class PromptPolarity { POSITIVE, NEGATIVE };

struct PointPrompt {
  int row = 0;
  int col = 0;
  PromptPolarity polarity = PromptPolarity::POSITIVE;

  bool operator==(const PointPrompt& o) const = default;
};

// Half-open pixel box.
struct BoxPrompt {
  int top = 0;
  int left = 0;
  int bottom = 0;
  int right = 0;

  bool operator==(const BoxPrompt& o) const = default;
};

// 4-connectivity labeling. Components are sorted by area descending; ties
// break on the smallest (row, col) of the component's first pixel in
// row-major order.
inline std::vector<MaskInstance> connected_components(const Mask2D& mask) {
  struct Comp {
    Mask2D mask;
    std::int64_t area = 0;
    int first_row = 0;
    int first_col = 0;
  };
  std::vector<Comp> comps;
  std::vector<std::uint8_t> visited(mask.data.size(), 0);
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < mask.height; ++r) {
    for (int c = 0; c < mask.width; ++c) {
      const std::size_t idx = static_cast<std::size_t>(r) * mask.width + c;
      if (!mask.at(r, c) || visited[idx]) continue;
      Comp comp;
      comp.mask = Mask2D(mask.height, mask.width);
      comp.first_row = r;
      comp.first_col = c;
      stack.clear();
      stack.emplace_back(r, c);
      visited[idx] = 1;
      while (!stack.empty()) {
        auto [i, j] = stack.back();
        stack.pop_back();
        comp.mask.set(i, j, true);
        ++comp.area;
        constexpr int dr[4] = {-1, 1, 0, 0};
        constexpr int dc[4] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int ni = i + dr[k];
          const int nj = j + dc[k];
          if (ni < 0 || ni >= mask.height || nj < 0 || nj >= mask.width) {
            continue;
          }
          const std::size_t nidx =
              static_cast<std::size_t>(ni) * mask.width + nj;
          if (mask.at(ni, nj) && !visited[nidx]) {
            visited[nidx] = 1;
            stack.emplace_back(ni, nj);
          }
        }
      }
      comps.push_back(std::move(comp));
    }
  }
  std::sort(comps.begin(), comps.end(), [](const Comp& a, const Comp& b) {
    if (a.area != b.area) return a.area > b.area;
    if (a.first_row != b.first_row) return a.first_row < b.first_row;
    return a.first_col < b.first_col;
  });
  std::vector<MaskInstance> out;
  out.reserve(comps.size());
  for (Comp& c : comps) {
    MaskInstance m;
    m.mask = std::move(c.mask);
    m.area = c.area;
    out.push_back(std::move(m));
  }
  return out;
}

namespace detail {

// Felzenszwalb-Huttenlocher 1-D squared distance transform; exact on
// integer-valued inputs.
inline void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(static_cast<std::size_t>(n));
  std::vector<double> z(static_cast<std::size_t>(n) + 1);
  int k = 0;
  v[0] = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s;
    while (true) {
      const int p = v[static_cast<std::size_t>(k)];
      s = ((f[static_cast<std::size_t>(q)] + static_cast<double>(q) * q) -
           (f[static_cast<std::size_t>(p)] + static_cast<double>(p) * p)) /
          (2.0 * (q - p));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = s;
    z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  d.resize(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
    const double diff = q - v[static_cast<std::size_t>(k)];
    d[static_cast<std::size_t>(q)] =
        diff * diff + f[static_cast<std::size_t>(v[static_cast<std::size_t>(k)])];
  }
}

}  // namespace detail

// Exact squared Euclidean distance to the nearest false pixel; the image
// boundary counts as border (transform runs on a grid padded with one false
// ring). Squared distances are exact small integers in double.
inline std::vector<double> distance_transform_squared(const Mask2D& mask) {
  const int ph = mask.height + 2;
  const int pw = mask.width + 2;
  // Large finite stand-in for infinity: a true inf makes the parabola
  // intersection compute inf - inf = NaN inside edt_1d.
  const double inf = 1e20;
  std::vector<double> grid(static_cast<std::size_t>(ph) * pw, 0.0);
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      grid[static_cast<std::size_t>(i + 1) * pw + (j + 1)] =
          mask.at(i, j) ? inf : 0.0;
    }
  }
  // Columns then rows.
  std::vector<double> col(static_cast<std::size_t>(ph));
  std::vector<double> dcol;
  for (int j = 0; j < pw; ++j) {
    for (int i = 0; i < ph; ++i) col[static_cast<std::size_t>(i)] = grid[static_cast<std::size_t>(i) * pw + j];
    detail::edt_1d(col, dcol);
    for (int i = 0; i < ph; ++i) grid[static_cast<std::size_t>(i) * pw + j] = dcol[static_cast<std::size_t>(i)];
  }
  std::vector<double> row(static_cast<std::size_t>(pw));
  std::vector<double> drow;
  for (int i = 0; i < ph; ++i) {
    for (int j = 0; j < pw; ++j) row[static_cast<std::size_t>(j)] = grid[static_cast<std::size_t>(i) * pw + j];
    detail::edt_1d(row, drow);
    for (int j = 0; j < pw; ++j) grid[static_cast<std::size_t>(i) * pw + j] = drow[static_cast<std::size_t>(j)];
  }
  std::vector<double> out(static_cast<std::size_t>(mask.height) * mask.width);
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      out[static_cast<std::size_t>(i) * mask.width + j] =
          grid[static_cast<std::size_t>(i + 1) * pw + (j + 1)];
    }
  }
  return out;
}

// The true pixel farthest from the mask border; ties break on smallest row,
// then smallest col.
inline PointPrompt interior_point(const Mask2D& mask) {
  const std::vector<double> d2 = distance_transform_squared(mask);
  double best = -1.0;
  int br = -1, bc = -1;
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      if (!mask.at(i, j)) continue;
      const double v = d2[static_cast<std::size_t>(i) * mask.width + j];
      if (v > best) {
        best = v;
        br = i;
        bc = j;
      }
    }
  }
  if (br < 0) {
    throw std::invalid_argument("interior_point: empty mask");
  }
  return PointPrompt{br, bc, PromptPolarity::POSITIVE};
}

struct EvalPair {
  MaskInstance instance;
  PointPrompt point;
};

// The evaluation-set protocol: per map, per nonzero class in ascending id
// order, keep the largest connected component, drop it under min_area, and
// pair it with its most interior point.
inline std::vector<EvalPair> build_eval_set(const std::vector<SegMap>& segmaps,
                                            std::int64_t min_area = 900) {
  if (min_area < 0) {
    throw std::invalid_argument("build_eval_set: min_area must be >= 0");
  }
  std::vector<EvalPair> out;
  for (const SegMap& sm : segmaps) {
    std::vector<std::int32_t> classes(sm.labels.begin(), sm.labels.end());
    std::sort(classes.begin(), classes.end());
    classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
    for (std::int32_t cls : classes) {
      if (cls == 0) continue;
      Mask2D class_mask(sm.height, sm.width);
      for (int i = 0; i < sm.height; ++i) {
        for (int j = 0; j < sm.width; ++j) {
          if (sm.at(i, j) == cls) class_mask.set(i, j, true);
        }
      }
      std::vector<MaskInstance> comps = connected_components(class_mask);
      if (comps.empty()) continue;
      MaskInstance largest = std::move(comps.front());
      if (largest.area < min_area) continue;
      largest.class_id = cls;
      largest.source_image_id = sm.image_id;
      EvalPair pair;
      pair.point = interior_point(largest.mask);
      pair.instance = std::move(largest);
      out.push_back(std::move(pair));
    }
  }
  return out;
}

// Uniform draws without replacement: positives from true pixels, negatives
// from false pixels, in that order, pixels enumerated row-major.
inline std::vector<PointPrompt> sample_point_prompts(const Mask2D& mask,
                                                     int positives,
                                                     int negatives, Rng& rng) {
  if (positives < 0 || negatives < 0) {
    throw std::invalid_argument("sample_point_prompts: negative counts");
  }
  std::vector<std::pair<int, int>> true_px, false_px;
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      (mask.at(i, j) ? true_px : false_px).emplace_back(i, j);
    }
  }
  if (static_cast<std::size_t>(positives) > true_px.size() ||
      static_cast<std::size_t>(negatives) > false_px.size()) {
    throw std::invalid_argument(
        "sample_point_prompts: not enough pixels to sample without "
        "replacement");
  }
  std::vector<PointPrompt> out;
  out.reserve(static_cast<std::size_t>(positives + negatives));
  for (std::int64_t idx : rng.sample_without_replacement(
           static_cast<std::int64_t>(true_px.size()), positives)) {
    const auto [r, c] = true_px[static_cast<std::size_t>(idx)];
    out.push_back(PointPrompt{r, c, PromptPolarity::POSITIVE});
  }
  for (std::int64_t idx : rng.sample_without_replacement(
           static_cast<std::int64_t>(false_px.size()), negatives)) {
    const auto [r, c] = false_px[static_cast<std::size_t>(idx)];
    out.push_back(PointPrompt{r, c, PromptPolarity::NEGATIVE});
  }
  return out;
}

// Tight half-open bounding box of the true pixels.
inline BoxPrompt box_from_mask(const Mask2D& mask) {
  int top = mask.height, left = mask.width, bottom = -1, right = -1;
  for (int i = 0; i < mask.height; ++i) {
    for (int j = 0; j < mask.width; ++j) {
      if (!mask.at(i, j)) continue;
      top = std::min(top, i);
      left = std::min(left, j);
      bottom = std::max(bottom, i);
      right = std::max(right, j);
    }
  }
  if (bottom < 0) {
    throw std::invalid_argument("box_from_mask: empty mask");
  }
  return BoxPrompt{top, left, bottom + 1, right + 1};
}

}  // namespace fb
