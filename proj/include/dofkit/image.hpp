#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace dofkit {

// Color-space tags. Pixel storage is identical; the tag stops a display-space
// buffer from being fed where linear light is expected (and vice versa).
struct linear_space {};
struct display_space {};

// Row-major interleaved raster of doubles.
template <typename Space>
class BasicImage {
 public:
  BasicImage() = default;

  BasicImage(int width, int height, int channels = 3, double fill = 0.0)
      : width_(width), height_(height), channels_(channels) {
    if (width <= 0 || height <= 0 || channels <= 0) {
      throw std::invalid_argument("image dimensions must be positive");
    }
    data_.assign(static_cast<std::size_t>(width) * height * channels, fill);
  }

  BasicImage(int width, int height, int channels, std::vector<double> values)
      : width_(width), height_(height), channels_(channels), data_(std::move(values)) {
    if (width <= 0 || height <= 0 || channels <= 0) {
      throw std::invalid_argument("image dimensions must be positive");
    }
    if (data_.size() != static_cast<std::size_t>(width) * height * channels) {
      throw std::invalid_argument("image buffer size does not match dimensions");
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  int channels() const noexcept { return channels_; }
  std::size_t pixel_count() const noexcept { return static_cast<std::size_t>(width_) * height_; }
  bool empty() const noexcept { return data_.empty(); }

  double& at(int x, int y, int c) { return data_[index(x, y, c)]; }
  double at(int x, int y, int c) const { return data_[index(x, y, c)]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool same_shape(const auto& other) const noexcept {
    return width_ == other.width() && height_ == other.height() && channels_ == other.channels();
  }

  friend bool operator==(const BasicImage&, const BasicImage&) = default;

 private:
  std::size_t index(int x, int y, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * channels_ + c;
  }

  int width_ = 0;
  int height_ = 0;
  int channels_ = 0;
  std::vector<double> data_;
};

using LinearImage = BasicImage<linear_space>;
using DisplayImage = BasicImage<display_space>;

template <typename A, typename B>
void require_same_shape(const A& a, const B& b, const char* what) {
  if (a.width() != b.width() || a.height() != b.height() || a.channels() != b.channels()) {
    throw std::invalid_argument(std::string(what) + ": dimension mismatch");
  }
}

// Per-pixel positive scene depth.
class DepthMap {
 public:
  DepthMap() = default;

  DepthMap(int width, int height, std::vector<double> values)
      : width_(width), height_(height), values_(std::move(values)) {
    if (width <= 0 || height <= 0) throw std::invalid_argument("depth dimensions must be positive");
    if (values_.size() != static_cast<std::size_t>(width) * height) {
      throw std::invalid_argument("depth buffer size does not match dimensions");
    }
    for (double d : values_) {
      if (!std::isfinite(d) || d <= 0.0) {
        throw std::domain_error("depth values must be finite and strictly positive");
      }
    }
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  std::size_t pixel_count() const noexcept { return values_.size(); }
  double at(int x, int y) const { return values_[static_cast<std::size_t>(y) * width_ + x]; }
  std::span<const double> values() const noexcept { return values_; }

  double min_depth() const { return *std::min_element(values_.begin(), values_.end()); }
  double max_depth() const { return *std::max_element(values_.begin(), values_.end()); }

  friend bool operator==(const DepthMap&, const DepthMap&) = default;

 private:
  int width_ = 0;
  int height_ = 0;
  std::vector<double> values_;
};

template <typename Img>
void require_same_dims(const Img& image, const DepthMap& depth, const char* what) {
  if (image.width() != depth.width() || image.height() != depth.height()) {
    throw std::invalid_argument(std::string(what) + ": image and depth dimensions differ");
  }
}

// Depth interval that maps onto normalized disparity [0, 1]; near -> 1, far -> 0.
struct DisparityRange {
  double near_depth = 1.0;
  double far_depth = 1.0;

  static DisparityRange of(const DepthMap& depth) { return {depth.min_depth(), depth.max_depth()}; }

  // Normalized disparity of a depth value, clamped to [0, 1]. A degenerate
  // range (near == far) maps everything to 1.
  double normalize(double depth) const {
    if (!(depth > 0.0) || !std::isfinite(depth)) throw std::domain_error("depth must be positive");
    const double inv_near = 1.0 / near_depth;
    const double inv_far = 1.0 / far_depth;
    const double span = inv_near - inv_far;
    if (!(span > 0.0)) return 1.0;
    return std::clamp((1.0 / depth - inv_far) / span, 0.0, 1.0);
  }

  friend bool operator==(const DisparityRange&, const DisparityRange&) = default;
};

inline std::vector<double> normalized_disparity(const DepthMap& depth, const DisparityRange& range) {
  std::vector<double> out(depth.pixel_count());
  auto src = depth.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = range.normalize(src[i]);
  return out;
}

inline std::vector<double> normalized_disparity(const DepthMap& depth) {
  return normalized_disparity(depth, DisparityRange::of(depth));
}

}  // namespace dofkit
