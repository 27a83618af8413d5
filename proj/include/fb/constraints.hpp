#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "fb/rng.hpp"
#include "fb/tensor.hpp"

namespace fb {

inline constexpr double kNormSlack = 1e-12;

enum class NormKind { LINF };

inline std::string norm_kind_name(NormKind k) {
  switch (k) {
    case NormKind::LINF:
      return "linf";
  }
  return "unknown";
}

// Where a perturbation came from; carried through files and records.
struct Provenance {
  std::string attack_kind;
  int iterations = 0;
  std::uint64_t seed = 0;
  std::string encoder_id;
};

// Bounded additive delta plus its norm metadata.
struct Perturbation {
  Tensor3 delta;
  double epsilon = 0.0;
  NormKind norm_kind = NormKind::LINF;
  int native_height = 0;
  int native_width = 0;
  Provenance provenance;

  void validate() const {
    if (delta.height() != native_height || delta.width() != native_width) {
      throw std::invalid_argument(
          "Perturbation: delta shape does not match native_shape");
    }
    if (delta.max_abs() > epsilon + kNormSlack) {
      throw std::invalid_argument(
          "Perturbation: delta exceeds the epsilon ball");
    }
  }
};

// Rectangular subset of an image, pixel units.
struct CropRegion {
  int top = 0;
  int left = 0;
  int crop_height = 0;
  int crop_width = 0;

  bool operator==(const CropRegion& o) const = default;
};

namespace detail {

// Selection-only clamp: the result is bitwise one of {v, lo, hi}, so repeated
// application cannot drift.
template <typename Scalar>
Scalar clamp_select(Scalar v, Scalar lo, Scalar hi) {
  if (v < lo) return lo;
  if (v > hi) return hi;
  return v;
}

}  // namespace detail

// Projection onto the l-inf ball of radius epsilon: elementwise clamp to
// [-epsilon, epsilon]. Idempotent and elementwise-monotone.
template <typename Scalar>
std::vector<Scalar> project_linf(const std::vector<Scalar>& delta,
                                 Scalar epsilon) {
  if (!(epsilon >= Scalar(0))) {
    throw std::invalid_argument("project_linf: epsilon must be >= 0");
  }
  std::vector<Scalar> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    out[i] = detail::clamp_select(delta[i], -epsilon, epsilon);
  }
  return out;
}

inline Tensor3 project_linf(const Tensor3& delta, double epsilon) {
  return Tensor3(delta.shape(), project_linf(delta.data(), epsilon));
}

// Restrict delta so that x + delta stays in [0, 1]. Equivalent in exact
// arithmetic to clamp(x + delta, 0, 1) - x, realized as a clamp of delta to
// [-x, 1 - x] so the output is selected (never recomputed) and both the box
// and any enclosing l-inf bound hold exactly in floating point. Idempotent.
template <typename Scalar>
std::vector<Scalar> clip_to_image_box(const std::vector<Scalar>& x,
                                      const std::vector<Scalar>& delta) {
  if (x.size() != delta.size()) {
    throw std::invalid_argument("clip_to_image_box: shape mismatch");
  }
  std::vector<Scalar> out(delta.size());
  for (std::size_t i = 0; i < delta.size(); ++i) {
    const Scalar lo = -x[i];
    const Scalar hi = Scalar(1) - x[i];
    out[i] = detail::clamp_select(delta[i], lo, hi);
  }
  return out;
}

inline Tensor3 clip_to_image_box(const ImageTensor& x, const Tensor3& delta) {
  if (!(x.shape() == delta.shape())) {
    throw std::invalid_argument("clip_to_image_box: shape mismatch");
  }
  return Tensor3(delta.shape(),
                 clip_to_image_box(x.tensor().data(), delta.data()));
}

// Project onto both constraints at once. Box clipping after the ball
// projection can only shrink magnitudes, so the result satisfies both.
inline Tensor3 project_feasible(const ImageTensor& x, const Tensor3& delta,
                                double epsilon) {
  return clip_to_image_box(x, project_linf(delta, epsilon));
}

// Nearest-neighbor resize with source index floor(i * H_in / H_out); no
// half-pixel offset, no corner alignment. Never introduces new values, so
// the l-inf norm is preserved or reduced.
template <typename Scalar>
std::vector<Scalar> nearest_resize(const std::vector<Scalar>& in, int in_h,
                                   int in_w, int channels, int out_h,
                                   int out_w) {
  if (out_h <= 0 || out_w <= 0) {
    throw std::invalid_argument("nearest_resize: target dims must be positive");
  }
  std::vector<Scalar> out(static_cast<std::size_t>(out_h) * out_w * channels);
  for (int i = 0; i < out_h; ++i) {
    const int si = static_cast<int>(static_cast<std::int64_t>(i) * in_h / out_h);
    for (int j = 0; j < out_w; ++j) {
      const int sj =
          static_cast<int>(static_cast<std::int64_t>(j) * in_w / out_w);
      const std::size_t src =
          (static_cast<std::size_t>(si) * in_w + sj) * channels;
      const std::size_t dst =
          (static_cast<std::size_t>(i) * out_w + j) * channels;
      for (int c = 0; c < channels; ++c) out[dst + c] = in[src + c];
    }
  }
  return out;
}

inline Tensor3 nearest_resize(const Tensor3& delta, int target_height,
                              int target_width) {
  if (target_height == delta.height() && target_width == delta.width()) {
    return delta;
  }
  return Tensor3(
      Shape3{target_height, target_width, delta.channels()},
      nearest_resize(delta.data(), delta.height(), delta.width(),
                     delta.channels(), target_height, target_width));
}

// Exact adjoint of nearest_resize: each native cell accumulates the
// gradients of every output pixel it was replicated into, so
// <resize(d), y> == <d, adjoint(y)>.
inline Tensor3 nearest_resize_adjoint(const Tensor3& grad, int native_height,
                                      int native_width) {
  if (native_height <= 0 || native_width <= 0) {
    throw std::invalid_argument(
        "nearest_resize_adjoint: native dims must be positive");
  }
  Tensor3 out(native_height, native_width, grad.channels(), 0.0);
  const int out_h = grad.height();
  const int out_w = grad.width();
  for (int i = 0; i < out_h; ++i) {
    const int si =
        static_cast<int>(static_cast<std::int64_t>(i) * native_height / out_h);
    for (int j = 0; j < out_w; ++j) {
      const int sj =
          static_cast<int>(static_cast<std::int64_t>(j) * native_width / out_w);
      for (int c = 0; c < grad.channels(); ++c) {
        out(si, sj, c) += grad(i, j, c);
      }
    }
  }
  return out;
}

// Random crop geometry. Draw order is fixed (height, width, top, left) so a
// seed pins the region; side lengths are lround(frac * dim) bounded to at
// least one pixel.
inline CropRegion sample_crop_region(int height, int width, double min_frac,
                                     double max_frac, Rng& rng) {
  if (height < 2 || width < 2) {
    throw std::invalid_argument("sample_crop_region: image smaller than 2x2");
  }
  if (!(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0)) {
    throw std::invalid_argument(
        "sample_crop_region: need 0 < min_frac <= max_frac <= 1");
  }
  auto side_range = [](int dim, double lo_frac, double hi_frac) {
    std::int64_t lo = std::lround(lo_frac * dim);
    std::int64_t hi = std::lround(hi_frac * dim);
    lo = std::max<std::int64_t>(1, lo);
    hi = std::max(lo, std::min<std::int64_t>(hi, dim));
    return std::pair<std::int64_t, std::int64_t>{lo, hi};
  };
  const auto [h_lo, h_hi] = side_range(height, min_frac, max_frac);
  const auto [w_lo, w_hi] = side_range(width, min_frac, max_frac);
  CropRegion r;
  r.crop_height = static_cast<int>(rng.uniform_int(h_lo, h_hi));
  r.crop_width = static_cast<int>(rng.uniform_int(w_lo, w_hi));
  r.top = static_cast<int>(rng.uniform_int(0, height - r.crop_height));
  r.left = static_cast<int>(rng.uniform_int(0, width - r.crop_width));
  return r;
}

inline Tensor3 crop(const Tensor3& t, const CropRegion& r) {
  if (r.top < 0 || r.left < 0 || r.crop_height <= 0 || r.crop_width <= 0 ||
      r.top + r.crop_height > t.height() || r.left + r.crop_width > t.width()) {
    throw std::invalid_argument("crop: region out of bounds");
  }
  Tensor3 out(r.crop_height, r.crop_width, t.channels());
  for (int i = 0; i < r.crop_height; ++i) {
    for (int j = 0; j < r.crop_width; ++j) {
      for (int c = 0; c < t.channels(); ++c) {
        out(i, j, c) = t(r.top + i, r.left + j, c);
      }
    }
  }
  return out;
}

}  // namespace fb
