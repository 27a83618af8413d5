#pragma once

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "fb/encoder.hpp"
#include "fb/masks.hpp"
#include "fb/tensor.hpp"

namespace fb {

// The prompts handed to a segmenter for one prediction.
struct PromptSet {
  std::vector<PointPrompt> points;
  std::optional<BoxPrompt> box;
};

struct MaskProposal {
  Mask2D mask;
  double score = 0.0;  // the segmenter's own quality estimate
};

// Promptable segmenter: proposals with quality scores, deterministic for a
// fixed (image, prompts).
class SegmenterOracle {
 public:
  virtual ~SegmenterOracle() = default;
  virtual const std::string& segmenter_id() const = 0;
  virtual const std::string& encoder_id() const = 0;
  virtual std::vector<MaskProposal> predict(const ImageTensor& image,
                                            const PromptSet& prompts) const = 0;
};

// Desk-scale promptable segmenter on top of the toy encoder's feature grid.
// A pixel belongs to a proposal when the cosine similarity between its
// (mean-centered) patch feature and the prompt-located reference feature
// clears a threshold; three proposals use thresholds tau * {0.9, 1.0, 1.1}
// and each scores itself by the mean similarity inside its own mask.
class ToyPromptSegmenter : public SegmenterOracle {
 public:
  ToyPromptSegmenter(ToyConvEncoder encoder, double tau)
      : encoder_(std::move(encoder)), tau_(tau) {
    if (!(tau > 0.0 && tau < 1.0)) {
      throw std::invalid_argument("ToyPromptSegmenter: tau must be in (0, 1)");
    }
    id_ = "toyseg-" + encoder_.encoder_id();
  }

  const std::string& segmenter_id() const override { return id_; }
  const std::string& encoder_id() const override {
    return encoder_.encoder_id();
  }
  const ToyConvEncoder& encoder() const { return encoder_; }
  double tau() const { return tau_; }

  std::vector<MaskProposal> predict(const ImageTensor& image,
                                    const PromptSet& prompts) const override {
    if (prompts.points.empty() && !prompts.box) {
      throw std::invalid_argument("ToyPromptSegmenter: no prompts given");
    }
    const Tensor3 grid = encoder_.feature_grid(image.tensor());
    const int gh = grid.height();
    const int gw = grid.width();
    const int gc = grid.channels();
    const int stride = encoder_.total_stride();

    // Center features by the per-image patch mean so cosine separation does
    // not collapse inside the positive orthant of the nonlinearity.
    std::vector<double> mean(static_cast<std::size_t>(gc), 0.0);
    for (int p = 0; p < gh; ++p) {
      for (int q = 0; q < gw; ++q) {
        for (int c = 0; c < gc; ++c) mean[static_cast<std::size_t>(c)] += grid(p, q, c);
      }
    }
    for (double& v : mean) v /= static_cast<double>(gh) * gw;
    auto centered = [&](int p, int q, int c) {
      return grid(p, q, c) - mean[static_cast<std::size_t>(c)];
    };

    auto patch_of = [&](int row, int col) {
      return std::pair<int, int>{std::min(row / stride, gh - 1),
                                 std::min(col / stride, gw - 1)};
    };

    // Positive reference: mean centered feature over positive point patches
    // and box patches.
    std::vector<double> ref(static_cast<std::size_t>(gc), 0.0);
    std::vector<double> neg(static_cast<std::size_t>(gc), 0.0);
    int ref_n = 0, neg_n = 0;
    for (const PointPrompt& pt : prompts.points) {
      const auto [p, q] = patch_of(pt.row, pt.col);
      auto& acc = pt.polarity == PromptPolarity::POSITIVE ? ref : neg;
      for (int c = 0; c < gc; ++c) acc[static_cast<std::size_t>(c)] += centered(p, q, c);
      (pt.polarity == PromptPolarity::POSITIVE ? ref_n : neg_n) += 1;
    }
    if (prompts.box) {
      int added = 0;
      for (int p = 0; p < gh; ++p) {
        for (int q = 0; q < gw; ++q) {
          const int ci = p * stride + stride / 2;
          const int cj = q * stride + stride / 2;
          if (ci >= prompts.box->top && ci < prompts.box->bottom &&
              cj >= prompts.box->left && cj < prompts.box->right) {
            for (int c = 0; c < gc; ++c) {
              ref[static_cast<std::size_t>(c)] += centered(p, q, c);
            }
            ++added;
          }
        }
      }
      if (added == 0) {
        const auto [p, q] = patch_of((prompts.box->top + prompts.box->bottom) / 2,
                                     (prompts.box->left + prompts.box->right) / 2);
        for (int c = 0; c < gc; ++c) {
          ref[static_cast<std::size_t>(c)] += centered(p, q, c);
        }
        ++added;
      }
      ref_n += added;
    }
    if (ref_n == 0) {
      throw std::invalid_argument(
          "ToyPromptSegmenter: prompts contain no positive cue");
    }
    for (double& v : ref) v /= ref_n;
    if (neg_n > 0) {
      for (double& v : neg) v /= neg_n;
    }

    auto cosine = [&](const std::vector<double>& a, int p, int q) {
      double dot = 0.0, na = 0.0, nb = 0.0;
      for (int c = 0; c < gc; ++c) {
        const double f = centered(p, q, c);
        dot += a[static_cast<std::size_t>(c)] * f;
        na += a[static_cast<std::size_t>(c)] * a[static_cast<std::size_t>(c)];
        nb += f * f;
      }
      const double denom = std::sqrt(na) * std::sqrt(nb);
      return denom > 0.0 ? dot / denom : 0.0;
    };

    std::vector<double> sim(static_cast<std::size_t>(gh) * gw);
    std::vector<double> neg_sim(static_cast<std::size_t>(gh) * gw, -1.0);
    for (int p = 0; p < gh; ++p) {
      for (int q = 0; q < gw; ++q) {
        sim[static_cast<std::size_t>(p) * gw + q] = cosine(ref, p, q);
        if (neg_n > 0) {
          neg_sim[static_cast<std::size_t>(p) * gw + q] = cosine(neg, p, q);
        }
      }
    }

    std::vector<MaskProposal> proposals;
    for (double factor : {0.9, 1.0, 1.1}) {
      const double threshold = tau_ * factor;
      Mask2D patch_mask(gh, gw);
      double score_sum = 0.0;
      int score_n = 0;
      for (int p = 0; p < gh; ++p) {
        for (int q = 0; q < gw; ++q) {
          const double s = sim[static_cast<std::size_t>(p) * gw + q];
          bool in = s >= threshold;
          if (in && neg_n > 0 &&
              neg_sim[static_cast<std::size_t>(p) * gw + q] > s) {
            in = false;  // closer to the negative cue than the positive one
          }
          if (in) {
            patch_mask.set(p, q, true);
            score_sum += s;
            ++score_n;
          }
        }
      }
      MaskProposal prop;
      prop.mask = Mask2D(image.height(), image.width());
      for (int i = 0; i < image.height(); ++i) {
        for (int j = 0; j < image.width(); ++j) {
          const auto [p, q] = patch_of(i, j);
          if (patch_mask.at(p, q)) prop.mask.set(i, j, true);
        }
      }
      prop.score = score_n > 0 ? score_sum / score_n : -1.0;
      proposals.push_back(std::move(prop));
    }
    return proposals;
  }

 private:
  ToyConvEncoder encoder_;
  double tau_;
  std::string id_;
};

}  // namespace fb
