#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "fb/constraints.hpp"
#include "fb/encoder.hpp"
#include "fb/objectives.hpp"
#include "fb/rng.hpp"
#include "fb/tensor.hpp"

namespace fb {

enum class AttackInit { ZERO, RANDOM_UNIFORM };

// Image-specific attack settings. step_size empty means "auto": PGD resolves
// it to epsilon/4, multi-crop to epsilon/8, APGD manages its own schedule and
// rejects an explicit value.
//
// The default init is RANDOM_UNIFORM: the embedding-distortion objective has
// an exactly-zero gradient at delta = 0 (the residual phi(x+0) - phi(x)
// vanishes bitwise), so a zero-initialized sign ascent never leaves the
// origin. A uniform draw inside the ball is the standard escape.
struct AttackConfig {
  double epsilon = 0.0;
  int iterations = 100;
  std::optional<double> step_size;  // empty = auto
  std::uint64_t seed = 0;
  AttackInit init = AttackInit::RANDOM_UNIFORM;
  bool record_trace = true;

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("AttackConfig: iterations >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("AttackConfig: epsilon >= 0");
    if (step_size && !(*step_size > 0.0)) {
      throw std::invalid_argument("AttackConfig: step_size must be > 0");
    }
  }
};

struct UniversalConfig {
  double epsilon = 8.0 / 255.0;
  int iterations = 500;
  double step_size = 1.0 / 255.0;
  int native_height = 1024;
  int native_width = 1024;
  int train_pool_size = 0;  // 0 = size of the provided pool
  int batch_size = 10;
  std::uint64_t seed = 0;
  AttackInit init = AttackInit::RANDOM_UNIFORM;
  // Alternative gradient normalization point: at image resolution before the
  // pull-back through the resize, instead of at native resolution after it.
  bool normalize_pre_pullback = false;
  bool record_trace = true;

  void validate(std::size_t pool) const {
    if (pool == 0) throw std::invalid_argument("universal_train: empty pool");
    if (iterations < 1) throw std::invalid_argument("UniversalConfig: iterations >= 1");
    if (!(epsilon >= 0.0)) throw std::invalid_argument("UniversalConfig: epsilon >= 0");
    if (!(step_size > 0.0)) throw std::invalid_argument("UniversalConfig: step_size > 0");
    if (native_height <= 0 || native_width <= 0) {
      throw std::invalid_argument("UniversalConfig: native shape must be positive");
    }
    if (train_pool_size != 0 &&
        static_cast<std::size_t>(train_pool_size) != pool) {
      throw std::invalid_argument(
          "UniversalConfig: train_pool_size does not match the provided pool");
    }
    if (batch_size < 1 || static_cast<std::size_t>(batch_size) > pool) {
      throw std::invalid_argument("UniversalConfig: need 1 <= batch_size <= pool");
    }
  }
};

struct MultiCropConfig {
  AttackConfig base;
  double p_crop = 0.8;
  double min_frac = 0.3;
  double max_frac = 0.9;

  void validate() const {
    base.validate();
    if (!(p_crop >= 0.0 && p_crop <= 1.0)) {
      throw std::invalid_argument("MultiCropConfig: p_crop in [0, 1]");
    }
    if (!(min_frac > 0.0 && min_frac <= max_frac && max_frac <= 1.0)) {
      throw std::invalid_argument("MultiCropConfig: need 0 < min_frac <= max_frac <= 1");
    }
  }
};

struct CropEvent {
  int iteration = 0;  // update step index, 1-based
  CropRegion region;
};

// Observability of one attack run. objective_per_iter[0] is the objective of
// the initial iterate; entry t is the iterate after update step t, so its
// length is iterations + 1 while step_size_per_iter has one entry per step.
struct AttackTrace {
  std::vector<double> objective_per_iter;
  std::vector<double> step_size_per_iter;
  double best_objective = 0.0;
  int best_iter = 0;  // index into objective_per_iter
  std::vector<CropEvent> crop_regions;   // multi-crop only; needs record_trace
  std::vector<double> grad_norms;        // universal only; needs record_trace
  std::vector<std::string> warnings;
};

// Objective slot for the optimizer cores: value (and gradient when asked) at
// a given delta; maximization throughout. Prompt-specific losses (a
// segmenter-in-the-loop objective) plug in here the same way the embedding
// distortion does.
struct ObjectiveEval {
  double value = 0.0;
  Tensor3 gradient;
};
using ObjectiveFn = std::function<ObjectiveEval(const Tensor3&, bool)>;
using ProjectFn = std::function<Tensor3(const Tensor3&)>;

struct OptimResult {
  Tensor3 best_delta;
  AttackTrace trace;
};

namespace detail {

inline double sign(double v) {
  if (v > 0.0) return 1.0;
  if (v < 0.0) return -1.0;
  return 0.0;
}

inline void record_point(AttackTrace& trace, Tensor3* best_delta,
                         const Tensor3& delta, double value) {
  trace.objective_per_iter.push_back(value);
  const int idx = static_cast<int>(trace.objective_per_iter.size()) - 1;
  if (idx == 0 || value > trace.best_objective) {
    trace.best_objective = value;
    trace.best_iter = idx;
    if (best_delta) *best_delta = delta;
  }
}

}  // namespace detail

// Fixed-step sign ascent over an arbitrary objective; the iterate with the
// highest recorded objective wins, earliest iteration on ties.
inline OptimResult pgd_optimize(const ObjectiveFn& objective,
                                const ProjectFn& project, Tensor3 delta,
                                double step, int iterations) {
  OptimResult res;
  AttackTrace& trace = res.trace;
  ObjectiveEval cur = objective(delta, true);
  detail::record_point(trace, &res.best_delta, delta, cur.value);
  for (int t = 1; t <= iterations; ++t) {
    Tensor3 next = delta;
    for (std::size_t i = 0; i < next.data().size(); ++i) {
      next.data()[i] += step * detail::sign(cur.gradient.data()[i]);
    }
    next = project(next);
    cur = objective(next, t < iterations);
    trace.step_size_per_iter.push_back(step);
    detail::record_point(trace, &res.best_delta, next, cur.value);
    delta = std::move(next);
  }
  return res;
}

// Checkpoint iterations ceil(p_j * N) with p_1 = 0.22 and
// p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06). The p_j are exact
// hundredths, so the recursion runs in integer hundredths to keep ceil()
// away from floating-point drift.
inline std::vector<int> apgd_checkpoints(int iterations) {
  std::vector<int> cps;
  int p = 22;    // hundredths
  int gap = 22;  // p_j - p_{j-1}, hundredths
  while (true) {
    const int w = static_cast<int>(
        (static_cast<std::int64_t>(p) * iterations + 99) / 100);
    if (w > iterations) break;
    if (cps.empty() || w != cps.back()) cps.push_back(w);
    gap = std::max(gap - 3, 6);
    p += gap;
  }
  return cps;
}

// Momentum-accelerated projected ascent with checkpointed step halving:
//   z_{t+1} = P(d_t + a * sign(g))
//   d_{t+1} = P(d_t + 0.75 (z_{t+1} - d_t) + 0.25 (d_t - d_{t-1}))
// At each checkpoint the step halves and the run restarts from the best
// iterate when (a) fewer than 75% of the steps in the window improved the
// objective, or (b) neither the step nor the best objective moved since the
// previous checkpoint. Requires a fixed objective.
inline OptimResult apgd_optimize(const ObjectiveFn& objective,
                                 const ProjectFn& project, Tensor3 delta,
                                 double initial_step, int iterations) {
  OptimResult res;
  AttackTrace& trace = res.trace;
  const std::vector<int> checkpoints = apgd_checkpoints(iterations);
  std::size_t next_cp = 0;

  double alpha = initial_step;
  Tensor3 prev = delta;
  ObjectiveEval cur = objective(delta, true);
  detail::record_point(trace, &res.best_delta, delta, cur.value);
  Tensor3 best_grad = cur.gradient;
  double f_prev = cur.value;

  double alpha_at_ckpt = alpha;
  double best_at_ckpt = trace.best_objective;
  int improved = 0;
  int window = 0;

  for (int t = 1; t <= iterations; ++t) {
    Tensor3 z = delta;
    for (std::size_t i = 0; i < z.data().size(); ++i) {
      z.data()[i] += alpha * detail::sign(cur.gradient.data()[i]);
    }
    z = project(z);
    Tensor3 next;
    if (t == 1) {
      // Published first iteration: a plain projected step, momentum after.
      next = z;
    } else {
      next = delta;
      for (std::size_t i = 0; i < next.data().size(); ++i) {
        next.data()[i] += 0.75 * (z.data()[i] - delta.data()[i]) +
                          0.25 * (delta.data()[i] - prev.data()[i]);
      }
      next = project(next);
    }
    ObjectiveEval eval = objective(next, true);
    trace.step_size_per_iter.push_back(alpha);
    const double prev_best = trace.best_objective;
    detail::record_point(trace, &res.best_delta, next, eval.value);
    if (trace.best_objective > prev_best) best_grad = eval.gradient;
    ++window;
    if (eval.value > f_prev) ++improved;

    prev = std::move(delta);
    delta = std::move(next);
    f_prev = eval.value;
    cur = std::move(eval);

    if (next_cp < checkpoints.size() && t == checkpoints[next_cp]) {
      const bool cond_a = improved < 0.75 * window;
      const bool cond_b =
          alpha == alpha_at_ckpt && trace.best_objective == best_at_ckpt;
      if (cond_a || cond_b) {
        alpha *= 0.5;
        delta = res.best_delta;
        prev = res.best_delta;
        cur.value = trace.best_objective;
        cur.gradient = best_grad;
        f_prev = trace.best_objective;
      }
      alpha_at_ckpt = alpha;
      best_at_ckpt = trace.best_objective;
      improved = 0;
      window = 0;
      ++next_cp;
    }
  }
  return res;
}

namespace detail {

inline Tensor3 initial_delta(const Shape3& shape, double epsilon,
                             AttackInit init, Rng& rng) {
  Tensor3 delta(shape.height, shape.width, shape.channels, 0.0);
  if (init == AttackInit::RANDOM_UNIFORM) {
    for (double& v : delta.data()) v = rng.uniform(-epsilon, epsilon);
  }
  return delta;
}

// Feasibility is part of every attack's postcondition; cheap to assert.
inline void assert_feasible(const ImageTensor& x, const Tensor3& delta,
                            double epsilon) {
  if (delta.max_abs() > epsilon) {
    throw std::logic_error("attack produced delta outside the epsilon ball");
  }
  for (std::size_t i = 0; i < delta.data().size(); ++i) {
    const double v = x.tensor().data()[i] + delta.data()[i];
    if (!(v >= 0.0 && v <= 1.0)) {
      throw std::logic_error("attack produced delta outside the image box");
    }
  }
}

}  // namespace detail

// Fixed-step sign-gradient ascent on the embedding distortion, projected onto
// the epsilon ball and the image box every step. Returns the iterate with the
// highest recorded objective.
inline std::pair<Perturbation, AttackTrace> pgd_attack(
    const EncoderOracle& oracle, const ImageTensor& x,
    const AttackConfig& cfg) {
  cfg.validate();
  const double step = cfg.step_size ? *cfg.step_size : cfg.epsilon / 4.0;
  Rng rng(cfg.seed);
  Tensor3 delta = detail::initial_delta(x.shape(), cfg.epsilon, cfg.init, rng);
  delta = project_feasible(x, delta, cfg.epsilon);

  const EmbeddingVector clean = oracle.forward(x.tensor());
  auto objective = [&](const Tensor3& d, bool need_grad) {
    Tensor3 adv = x.tensor();
    for (std::size_t i = 0; i < adv.data().size(); ++i) adv.data()[i] += d.data()[i];
    DistortionEval e = distortion_value_and_gradient(oracle, clean, adv, need_grad);
    return ObjectiveEval{e.value, std::move(e.gradient)};
  };
  auto project = [&](const Tensor3& d) { return project_feasible(x, d, cfg.epsilon); };

  OptimResult res = pgd_optimize(objective, project, std::move(delta),
                                            step, cfg.iterations);
  detail::assert_feasible(x, res.best_delta, cfg.epsilon);
  Perturbation p;
  p.delta = std::move(res.best_delta);
  p.epsilon = cfg.epsilon;
  p.native_height = x.height();
  p.native_width = x.width();
  p.provenance = {"pgd", cfg.iterations, cfg.seed, oracle.encoder_id()};
  return {std::move(p), std::move(res.trace)};
}

// APGD on the same fixed objective; cfg.step_size must be auto.
inline std::pair<Perturbation, AttackTrace> apgd_attack(
    const EncoderOracle& oracle, const ImageTensor& x,
    const AttackConfig& cfg) {
  cfg.validate();
  if (cfg.step_size) {
    throw std::invalid_argument("apgd_attack: step_size must be auto");
  }
  Rng rng(cfg.seed);
  Tensor3 delta = detail::initial_delta(x.shape(), cfg.epsilon, cfg.init, rng);
  delta = project_feasible(x, delta, cfg.epsilon);

  const EmbeddingVector clean = oracle.forward(x.tensor());
  auto objective = [&](const Tensor3& d, bool need_grad) {
    Tensor3 adv = x.tensor();
    for (std::size_t i = 0; i < adv.data().size(); ++i) adv.data()[i] += d.data()[i];
    DistortionEval e = distortion_value_and_gradient(oracle, clean, adv, need_grad);
    return ObjectiveEval{e.value, std::move(e.gradient)};
  };
  auto project = [&](const Tensor3& d) { return project_feasible(x, d, cfg.epsilon); };

  OptimResult res = apgd_optimize(objective, project, std::move(delta),
                                             2.0 * cfg.epsilon, cfg.iterations);
  detail::assert_feasible(x, res.best_delta, cfg.epsilon);
  Perturbation p;
  p.delta = std::move(res.best_delta);
  p.epsilon = cfg.epsilon;
  p.native_height = x.height();
  p.native_width = x.width();
  p.provenance = {"apgd", cfg.iterations, cfg.seed, oracle.encoder_id()};
  return {std::move(p), std::move(res.trace)};
}

// PGD that, with probability p_crop per iteration, computes its gradient on a
// random crop of the current iterate and updates only that region of the
// delta. The full-image objective is evaluated each iteration for the trace
// and for best-iterate selection, so p_crop = 0 reproduces pgd_attack
// byte-for-byte under the same seed.
inline std::pair<Perturbation, AttackTrace> multicrop_pgd(
    const EncoderOracle& oracle, const ImageTensor& x,
    const MultiCropConfig& cfg) {
  cfg.validate();
  const AttackConfig& base = cfg.base;
  const double step = base.step_size ? *base.step_size : base.epsilon / 8.0;
  Rng rng(base.seed);
  Tensor3 delta =
      detail::initial_delta(x.shape(), base.epsilon, base.init, rng);
  delta = project_feasible(x, delta, base.epsilon);

  const bool croppable = x.height() >= 2 && x.width() >= 2;

  const EmbeddingVector clean = oracle.forward(x.tensor());
  auto full_objective = [&](const Tensor3& d, bool need_grad) {
    Tensor3 adv = x.tensor();
    for (std::size_t i = 0; i < adv.data().size(); ++i) adv.data()[i] += d.data()[i];
    DistortionEval e = distortion_value_and_gradient(oracle, clean, adv, need_grad);
    return ObjectiveEval{e.value, std::move(e.gradient)};
  };
  auto project = [&](const Tensor3& d) { return project_feasible(x, d, base.epsilon); };

  OptimResult res;
  AttackTrace& trace = res.trace;
  if (!croppable && cfg.p_crop > 0.0) {
    trace.warnings.push_back(
        "image smaller than 2x2; multi-crop fell back to full-image steps");
  }

  ObjectiveEval cur = full_objective(delta, true);
  detail::record_point(trace, &res.best_delta, delta, cur.value);
  for (int t = 1; t <= base.iterations; ++t) {
    bool crop_step = false;
    CropRegion region;
    if (croppable && cfg.p_crop > 0.0) {
      crop_step = rng.uniform01() < cfg.p_crop;
      if (crop_step) {
        region = sample_crop_region(x.height(), x.width(), cfg.min_frac,
                                    cfg.max_frac, rng);
      }
    }
    Tensor3 next = delta;
    if (crop_step) {
      const Tensor3 x_crop = crop(x.tensor(), region);
      Tensor3 adv = x.tensor();
      for (std::size_t i = 0; i < adv.data().size(); ++i) {
        adv.data()[i] += delta.data()[i];
      }
      const Tensor3 adv_crop = crop(adv, region);
      const Tensor3 g = distortion_gradient(oracle, x_crop, adv_crop);
      for (int i = 0; i < region.crop_height; ++i) {
        for (int j = 0; j < region.crop_width; ++j) {
          for (int c = 0; c < x.channels(); ++c) {
            next(region.top + i, region.left + j, c) +=
                step * detail::sign(g(i, j, c));
          }
        }
      }
      if (base.record_trace) trace.crop_regions.push_back({t, region});
    } else {
      for (std::size_t i = 0; i < next.data().size(); ++i) {
        next.data()[i] += step * detail::sign(cur.gradient.data()[i]);
      }
    }
    next = project(next);
    cur = full_objective(next, t < base.iterations);
    trace.step_size_per_iter.push_back(step);
    detail::record_point(trace, &res.best_delta, next, cur.value);
    delta = std::move(next);
  }

  detail::assert_feasible(x, res.best_delta, base.epsilon);
  Perturbation p;
  p.delta = std::move(res.best_delta);
  p.epsilon = base.epsilon;
  p.native_height = x.height();
  p.native_width = x.width();
  p.provenance = {"multicrop-pgd", base.iterations, base.seed,
                  oracle.encoder_id()};
  return {std::move(p), std::move(trace)};
}

// Trains one delta at a fixed native resolution over a pool of images. Per
// iteration: sample a batch, resize the delta to each image, pull the
// per-image distortion gradients back through the exact resize adjoint,
// normalize each to unit l2 norm, sum, take a sign step and project onto the
// epsilon ball. Box feasibility is per-image and enforced when the delta is
// applied, not during training. Returns the final delta.
inline std::pair<Perturbation, AttackTrace> universal_train(
    const EncoderOracle& oracle, const std::vector<ImageTensor>& train_images,
    const UniversalConfig& cfg) {
  cfg.validate(train_images.size());
  const int channels = train_images.front().channels();
  for (const ImageTensor& img : train_images) {
    if (img.channels() != channels) {
      throw std::invalid_argument(
          "universal_train: images must share a channel count");
    }
  }

  Rng rng(cfg.seed);
  Tensor3 delta = detail::initial_delta(
      Shape3{cfg.native_height, cfg.native_width, channels}, cfg.epsilon,
      cfg.init, rng);
  delta = project_linf(delta, cfg.epsilon);

  std::vector<EmbeddingVector> clean;
  clean.reserve(train_images.size());
  for (const ImageTensor& img : train_images) {
    clean.push_back(oracle.forward(img.tensor()));
  }

  auto l2_normalize = [](Tensor3& g) {
    double sq = 0.0;
    for (double v : g.data()) sq += v * v;
    const double n = std::sqrt(sq);
    if (n > 0.0) {
      for (double& v : g.data()) v /= n;
    }
    return n;
  };
  auto l2_norm = [](const Tensor3& g) {
    double sq = 0.0;
    for (double v : g.data()) sq += v * v;
    return std::sqrt(sq);
  };

  OptimResult res;
  AttackTrace& trace = res.trace;
  const std::size_t pool = train_images.size();
  for (int t = 1; t <= cfg.iterations; ++t) {
    const std::vector<std::int64_t> batch = rng.sample_without_replacement(
        static_cast<std::int64_t>(pool), cfg.batch_size);
    Tensor3 grad_sum(cfg.native_height, cfg.native_width, channels, 0.0);
    double batch_objective = 0.0;
    for (std::int64_t idx : batch) {
      const ImageTensor& img = train_images[static_cast<std::size_t>(idx)];
      const Tensor3 resized = nearest_resize(delta, img.height(), img.width());
      Tensor3 adv = img.tensor();
      for (std::size_t i = 0; i < adv.data().size(); ++i) {
        adv.data()[i] += resized.data()[i];
      }
      DistortionEval e = distortion_value_and_gradient(
          oracle, clean[static_cast<std::size_t>(idx)], adv, true);
      batch_objective += e.value;
      Tensor3 g_native;
      if (cfg.normalize_pre_pullback) {
        l2_normalize(e.gradient);
        g_native = nearest_resize_adjoint(e.gradient, cfg.native_height,
                                          cfg.native_width);
      } else {
        g_native = nearest_resize_adjoint(e.gradient, cfg.native_height,
                                          cfg.native_width);
        l2_normalize(g_native);
      }
      if (cfg.record_trace) trace.grad_norms.push_back(l2_norm(g_native));
      for (std::size_t i = 0; i < grad_sum.data().size(); ++i) {
        grad_sum.data()[i] += g_native.data()[i];
      }
    }
    trace.objective_per_iter.push_back(batch_objective);
    trace.step_size_per_iter.push_back(cfg.step_size);
    const int idx = static_cast<int>(trace.objective_per_iter.size()) - 1;
    if (idx == 0 || batch_objective > trace.best_objective) {
      trace.best_objective = batch_objective;
      trace.best_iter = idx;
    }
    for (std::size_t i = 0; i < delta.data().size(); ++i) {
      delta.data()[i] += cfg.step_size * detail::sign(grad_sum.data()[i]);
    }
    delta = project_linf(delta, cfg.epsilon);
  }

  if (delta.max_abs() > cfg.epsilon) {
    throw std::logic_error("universal_train produced delta outside the ball");
  }
  Perturbation p;
  p.delta = std::move(delta);
  p.epsilon = cfg.epsilon;
  p.native_height = cfg.native_height;
  p.native_width = cfg.native_width;
  p.provenance = {"universal", cfg.iterations, cfg.seed, oracle.encoder_id()};
  return {std::move(p), std::move(trace)};
}

}  // namespace fb
