#pragma once

#include <mutex>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fb/constraints.hpp"
#include "fb/encoder.hpp"
#include "fb/tensor.hpp"

namespace fb {

// Scalar attack objective; per_image has length 1 for single-image attacks.
struct ObjectiveValue {
  double value = 0.0;
  std::vector<double> per_image;
};

// Squared Euclidean distance between two embeddings of the same encoder.
// Summation order is fixed (sequential over index) for bit-reproducibility.
inline double distortion(const EmbeddingVector& phi_clean,
                         const EmbeddingVector& phi_adv) {
  if (phi_clean.data.size() != phi_adv.data.size()) {
    throw std::invalid_argument("distortion: embedding length mismatch");
  }
  if (phi_clean.encoder_id != phi_adv.encoder_id) {
    throw std::invalid_argument("distortion: encoder_id mismatch");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < phi_clean.data.size(); ++i) {
    const double d = phi_adv.data[i] - phi_clean.data[i];
    acc += d * d;
  }
  return acc;
}

// Clean embeddings are constant across attack iterations; cache them per
// (encoder_id, image fingerprint).
class EmbeddingCache {
 public:
  EmbeddingVector get(const EncoderOracle& oracle, const Tensor3& x) {
    const std::string key =
        oracle.encoder_id() + "#" + std::to_string(tensor_fingerprint(x));
    {
      std::lock_guard<std::mutex> lock(mu_);
      auto it = map_.find(key);
      if (it != map_.end()) return it->second;
    }
    EmbeddingVector e = oracle.forward(x);
    std::lock_guard<std::mutex> lock(mu_);
    map_.emplace(key, e);
    return e;
  }

  std::size_t size() const {
    std::lock_guard<std::mutex> lock(mu_);
    return map_.size();
  }

 private:
  mutable std::mutex mu_;
  std::unordered_map<std::string, EmbeddingVector> map_;
};

// Multi-image objective of a shared fixed-resolution delta: every image gets
// the delta resized to its own resolution, box-clipped, and scored by
// embedding distortion. value is the fixed-order sum of per_image.
inline ObjectiveValue universal_objective(const EncoderOracle& oracle,
                                          const std::vector<ImageTensor>& images,
                                          const Tensor3& delta_native,
                                          EmbeddingCache* cache = nullptr) {
  if (images.empty()) {
    throw std::invalid_argument("universal_objective: empty image list");
  }
  ObjectiveValue out;
  out.per_image.reserve(images.size());
  for (const ImageTensor& img : images) {
    const Tensor3 resized =
        nearest_resize(delta_native, img.height(), img.width());
    const Tensor3 applied = clip_to_image_box(img, resized);
    Tensor3 adv = img.tensor();
    for (std::size_t i = 0; i < adv.data().size(); ++i) {
      adv.data()[i] += applied.data()[i];
    }
    const EmbeddingVector clean = cache ? cache->get(oracle, img.tensor())
                                        : oracle.forward(img.tensor());
    const EmbeddingVector adv_e = oracle.forward(adv);
    out.per_image.push_back(distortion(clean, adv_e));
  }
  for (double v : out.per_image) out.value += v;
  return out;
}

}  // namespace fb
