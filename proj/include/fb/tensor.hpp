#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fb {

struct Shape3 {
  int height = 0;
  int width = 0;
  int channels = 0;

  std::size_t total() const {
    return static_cast<std::size_t>(height) * static_cast<std::size_t>(width) *
           static_cast<std::size_t>(channels);
  }
  bool operator==(const Shape3& o) const = default;
};

// Dense (height, width, channels) array of doubles, row-major with channels
// fastest. Value semantics; the shared substrate for images, deltas and
// gradients.
class Tensor3 {
 public:
  Tensor3() = default;
  Tensor3(int height, int width, int channels, double fill = 0.0)
      : shape_{height, width, channels} {
    if (height <= 0 || width <= 0 || channels <= 0) {
      throw std::invalid_argument("Tensor3: dimensions must be positive");
    }
    data_.assign(shape_.total(), fill);
  }
  Tensor3(Shape3 shape, std::vector<double> data)
      : shape_(shape), data_(std::move(data)) {
    if (shape_.height <= 0 || shape_.width <= 0 || shape_.channels <= 0) {
      throw std::invalid_argument("Tensor3: dimensions must be positive");
    }
    if (data_.size() != shape_.total()) {
      throw std::invalid_argument("Tensor3: data size does not match shape");
    }
  }

  const Shape3& shape() const { return shape_; }
  int height() const { return shape_.height; }
  int width() const { return shape_.width; }
  int channels() const { return shape_.channels; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(int i, int j, int c) { return data_[index(i, j, c)]; }
  double operator()(int i, int j, int c) const { return data_[index(i, j, c)]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool operator==(const Tensor3& o) const = default;

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  double max_abs() const {
    double m = 0.0;
    for (double v : data_) {
      double a = std::fabs(v);
      if (a > m) m = a;
    }
    return m;
  }

 private:
  std::size_t index(int i, int j, int c) const {
    return (static_cast<std::size_t>(i) * shape_.width +
            static_cast<std::size_t>(j)) *
               shape_.channels +
           static_cast<std::size_t>(c);
  }

  Shape3 shape_;
  std::vector<double> data_;
};

// An image in the attack substrate: intensities in [0, 1], 1 or 3 channels.
// Validation happens once at construction; downstream code that needs raw
// tensors (adversarial iterates may sit marginally outside the box during
// universal training) works on Tensor3 directly.
class ImageTensor {
 public:
  ImageTensor() = default;
  explicit ImageTensor(Tensor3 values, std::string id = "")
      : values_(std::move(values)), id_(std::move(id)) {
    if (values_.channels() != 1 && values_.channels() != 3) {
      throw std::invalid_argument("ImageTensor: channels must be 1 or 3");
    }
    for (double v : values_.data()) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw std::invalid_argument(
            "ImageTensor: intensities must lie in [0, 1]");
      }
    }
  }

  const Tensor3& tensor() const { return values_; }
  const std::string& id() const { return id_; }
  void set_id(std::string id) { id_ = std::move(id); }

  int height() const { return values_.height(); }
  int width() const { return values_.width(); }
  int channels() const { return values_.channels(); }
  const Shape3& shape() const { return values_.shape(); }

  bool operator==(const ImageTensor& o) const {
    return values_ == o.values_;
  }

 private:
  Tensor3 values_;
  std::string id_;
};

// Output of an image encoder: finite feature vector tagged with its origin.
struct EmbeddingVector {
  std::vector<double> data;
  std::string encoder_id;

  std::size_t size() const { return data.size(); }
};

// FNV-1a over the raw tensor bytes plus dims; used as a cache key component.
inline std::uint64_t tensor_fingerprint(const Tensor3& t) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  const int dims[3] = {t.height(), t.width(), t.channels()};
  mix(reinterpret_cast<const unsigned char*>(dims), sizeof(dims));
  mix(reinterpret_cast<const unsigned char*>(t.data().data()),
      t.data().size() * sizeof(double));
  return h;
}

}  // namespace fb
