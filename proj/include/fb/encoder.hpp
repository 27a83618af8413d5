#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "fb/errors.hpp"
#include "fb/rng.hpp"
#include "fb/tensor.hpp"

namespace fb {

// Input contract of an encoder: a fixed (h, w, c) or "any" shape with a
// channel count.
struct InputSpec {
  bool any_shape = true;
  Shape3 shape;  // meaningful when !any_shape; channels always meaningful
};

// Differentiable feature extractor. The only model component attacks touch;
// gradient access is via vector-Jacobian products only.
class EncoderOracle {
 public:
  virtual ~EncoderOracle() = default;

  virtual const std::string& encoder_id() const = 0;
  virtual InputSpec expected_input() const = 0;
  // Embedding length for inputs of the given spatial size.
  virtual int embedding_dim(int height, int width) const = 0;

  virtual EmbeddingVector forward(const Tensor3& x) const = 0;
  virtual Tensor3 vjp(const Tensor3& x,
                      const std::vector<double>& cotangent) const = 0;
};

namespace detail {

inline double softplus(double z) {
  return std::max(z, 0.0) + std::log1p(std::exp(-std::fabs(z)));
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace detail

struct ConvLayerSpec {
  int out_channels = 0;
  int kernel = 0;
  int stride = 0;
};

// Descriptor for the desk-scale encoder below. Everything needed to rebuild
// the weights bit-for-bit. The default stack is deep and saturating enough
// that the attack landscape is genuinely nonconvex, which is the regime the
// real backbones live in.
struct ToyEncoderConfig {
  int in_channels = 3;
  std::vector<ConvLayerSpec> layers = {{6, 2, 2}, {12, 2, 2}, {18, 2, 2},
                                       {24, 2, 2}};
  double weight_scale = 4.0;
  std::uint64_t seed = 0;
  std::string id;  // defaults to a descriptor-derived name

  std::string default_id() const {
    std::ostringstream os;
    os << "toy";
    for (const auto& l : layers) {
      os << "-" << l.out_channels << "k" << l.kernel << "s" << l.stride;
    }
    os << "-w" << weight_scale << "-seed" << seed;
    return os.str();
  }
};

// Small stack of strided valid convolutions with softplus nonlinearities.
// Smooth everywhere, so finite-difference checks are clean; weights are a
// pure function of (descriptor, seed). The embedding is the flattened final
// feature grid, mirroring the spatial embeddings of real promptable
// segmentation encoders; its length scales with the input size.
class ToyConvEncoder : public EncoderOracle {
 public:
  explicit ToyConvEncoder(ToyEncoderConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.layers.size() < 2 || cfg_.layers.size() > 4) {
      throw std::invalid_argument("ToyConvEncoder: need 2 to 4 layers");
    }
    for (const auto& l : cfg_.layers) {
      if (l.stride < 2 || l.kernel < l.stride || l.out_channels <= 0) {
        throw std::invalid_argument(
            "ToyConvEncoder: each layer needs stride >= 2, kernel >= stride, "
            "positive channels");
      }
    }
    if (cfg_.in_channels != 1 && cfg_.in_channels != 3) {
      throw std::invalid_argument("ToyConvEncoder: in_channels must be 1 or 3");
    }
    if (cfg_.id.empty()) cfg_.id = cfg_.default_id();
    init_weights();
  }

  const std::string& encoder_id() const override { return cfg_.id; }
  const ToyEncoderConfig& config() const { return cfg_; }

  InputSpec expected_input() const override {
    InputSpec spec;
    spec.any_shape = true;
    spec.shape.channels = cfg_.in_channels;
    return spec;
  }

  int total_stride() const {
    int s = 1;
    for (const auto& l : cfg_.layers) s *= l.stride;
    return s;
  }

  // Spatial size of the feature grid for an input of the given size.
  Shape3 grid_shape(int height, int width) const {
    int h = height;
    int w = width;
    for (const auto& l : cfg_.layers) {
      if (h < l.kernel || w < l.kernel) {
        throw std::invalid_argument("ToyConvEncoder: input too small");
      }
      h = (h - l.kernel) / l.stride + 1;
      w = (w - l.kernel) / l.stride + 1;
    }
    return Shape3{h, w, cfg_.layers.back().out_channels};
  }

  int embedding_dim(int height, int width) const override {
    return static_cast<int>(grid_shape(height, width).total());
  }

  EmbeddingVector forward(const Tensor3& x) const override {
    EmbeddingVector e;
    e.encoder_id = cfg_.id;
    e.data = feature_grid(x).data();
    for (double v : e.data) {
      if (!std::isfinite(v)) {
        throw EncoderUnavailableError("ToyConvEncoder: non-finite embedding");
      }
    }
    return e;
  }

  // Final post-nonlinearity feature map; the segmenter consumes this.
  Tensor3 feature_grid(const Tensor3& x) const {
    check_input(x);
    Tensor3 act = x;
    for (std::size_t li = 0; li < cfg_.layers.size(); ++li) {
      Tensor3 pre = conv_forward(act, li);
      for (double& v : pre.data()) v = detail::softplus(v);
      act = std::move(pre);
    }
    return act;
  }

  Tensor3 vjp(const Tensor3& x,
              const std::vector<double>& cotangent) const override {
    check_input(x);
    // Forward pass keeping pre-activations.
    std::vector<Tensor3> inputs;   // input to each layer
    std::vector<Tensor3> preacts;  // conv output before softplus
    inputs.push_back(x);
    for (std::size_t li = 0; li < cfg_.layers.size(); ++li) {
      Tensor3 pre = conv_forward(inputs.back(), li);
      preacts.push_back(pre);
      for (double& v : pre.data()) v = detail::softplus(v);
      inputs.push_back(std::move(pre));
    }
    const Tensor3& grid = inputs.back();
    if (cotangent.size() != grid.size()) {
      throw std::invalid_argument(
          "ToyConvEncoder::vjp: cotangent length does not match embedding");
    }
    Tensor3 grad(grid.shape(), cotangent);
    for (std::size_t li = cfg_.layers.size(); li-- > 0;) {
      // Through the nonlinearity.
      const Tensor3& pre = preacts[li];
      for (std::size_t i = 0; i < grad.data().size(); ++i) {
        grad.data()[i] *= detail::sigmoid(pre.data()[i]);
      }
      grad = conv_backward_input(grad, inputs[li].shape(), li);
    }
    return grad;
  }

 private:
  void check_input(const Tensor3& x) const {
    if (x.channels() != cfg_.in_channels) {
      throw std::invalid_argument("ToyConvEncoder: wrong channel count");
    }
    grid_shape(x.height(), x.width());  // throws if too small
  }

  void init_weights() {
    Rng rng(cfg_.seed);
    int ic = cfg_.in_channels;
    for (const auto& l : cfg_.layers) {
      const int fan_in = ic * l.kernel * l.kernel;
      const double sw = cfg_.weight_scale * std::sqrt(3.0 / fan_in);
      const double sb = 0.1 * cfg_.weight_scale;
      LayerWeights lw;
      lw.w.resize(static_cast<std::size_t>(l.out_channels) * fan_in);
      for (double& v : lw.w) v = rng.uniform(-sw, sw);
      lw.b.resize(static_cast<std::size_t>(l.out_channels));
      for (double& v : lw.b) v = rng.uniform(-sb, sb);
      weights_.push_back(std::move(lw));
      ic = l.out_channels;
    }
  }

  Tensor3 conv_forward(const Tensor3& in, std::size_t li) const {
    const auto& l = cfg_.layers[li];
    const auto& lw = weights_[li];
    const int oh = (in.height() - l.kernel) / l.stride + 1;
    const int ow = (in.width() - l.kernel) / l.stride + 1;
    const int ic = in.channels();
    Tensor3 out(oh, ow, l.out_channels);
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        for (int oc = 0; oc < l.out_channels; ++oc) {
          double acc = lw.b[static_cast<std::size_t>(oc)];
          const std::size_t wbase =
              static_cast<std::size_t>(oc) * ic * l.kernel * l.kernel;
          for (int c = 0; c < ic; ++c) {
            for (int u = 0; u < l.kernel; ++u) {
              for (int v = 0; v < l.kernel; ++v) {
                acc += lw.w[wbase + (static_cast<std::size_t>(c) * l.kernel + u) *
                                        l.kernel +
                            v] *
                       in(i * l.stride + u, j * l.stride + v, c);
              }
            }
          }
          out(i, j, oc) = acc;
        }
      }
    }
    return out;
  }

  Tensor3 conv_backward_input(const Tensor3& grad_out, const Shape3& in_shape,
                              std::size_t li) const {
    const auto& l = cfg_.layers[li];
    const auto& lw = weights_[li];
    const int ic = in_shape.channels;
    Tensor3 grad_in(in_shape.height, in_shape.width, ic, 0.0);
    for (int i = 0; i < grad_out.height(); ++i) {
      for (int j = 0; j < grad_out.width(); ++j) {
        for (int oc = 0; oc < l.out_channels; ++oc) {
          const double g = grad_out(i, j, oc);
          if (g == 0.0) continue;
          const std::size_t wbase =
              static_cast<std::size_t>(oc) * ic * l.kernel * l.kernel;
          for (int c = 0; c < ic; ++c) {
            for (int u = 0; u < l.kernel; ++u) {
              for (int v = 0; v < l.kernel; ++v) {
                grad_in(i * l.stride + u, j * l.stride + v, c) +=
                    g * lw.w[wbase +
                             (static_cast<std::size_t>(c) * l.kernel + u) *
                                 l.kernel +
                             v];
              }
            }
          }
        }
      }
    }
    return grad_in;
  }

  struct LayerWeights {
    std::vector<double> w;  // [oc][ic][ku][kv]
    std::vector<double> b;  // [oc]
  };

  ToyEncoderConfig cfg_;
  std::vector<LayerWeights> weights_;
};

// Gradient of the embedding-distortion objective |phi(x_adv) - phi(x)|^2
// with respect to x_adv: exactly 2 * J^T (phi(x_adv) - phi(x)).
inline Tensor3 distortion_gradient(const EncoderOracle& oracle,
                                   const Tensor3& x, const Tensor3& x_adv) {
  if (!(x.shape() == x_adv.shape())) {
    throw std::invalid_argument("distortion_gradient: shape mismatch");
  }
  const EmbeddingVector clean = oracle.forward(x);
  const EmbeddingVector adv = oracle.forward(x_adv);
  std::vector<double> residual(adv.data.size());
  for (std::size_t i = 0; i < residual.size(); ++i) {
    residual[i] = 2.0 * (adv.data[i] - clean.data[i]);
  }
  return oracle.vjp(x_adv, residual);
}

inline Tensor3 distortion_gradient(const EncoderOracle& oracle,
                                   const ImageTensor& x,
                                   const ImageTensor& x_adv) {
  return distortion_gradient(oracle, x.tensor(), x_adv.tensor());
}

// One evaluation of the distortion objective and its gradient at x_adv,
// given a precomputed clean embedding; one forward plus one vjp.
struct DistortionEval {
  double value = 0.0;
  Tensor3 gradient;
};

inline DistortionEval distortion_value_and_gradient(
    const EncoderOracle& oracle, const EmbeddingVector& clean,
    const Tensor3& x_adv, bool with_gradient = true) {
  const EmbeddingVector adv = oracle.forward(x_adv);
  if (adv.data.size() != clean.data.size()) {
    throw std::invalid_argument(
        "distortion_value_and_gradient: embedding length mismatch");
  }
  DistortionEval out;
  std::vector<double> residual(adv.data.size());
  for (std::size_t i = 0; i < residual.size(); ++i) {
    const double r = adv.data[i] - clean.data[i];
    residual[i] = 2.0 * r;
    out.value += r * r;
  }
  if (with_gradient) out.gradient = oracle.vjp(x_adv, residual);
  return out;
}

}  // namespace fb
