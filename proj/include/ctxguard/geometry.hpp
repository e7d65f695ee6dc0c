#pragma once

#include <compare>
#include <cstddef>
#include <span>
#include <vector>

namespace ctxguard {

inline constexpr int kImageSide = 64;
inline constexpr int kChannels = 3;
inline constexpr int kCropSide = 16;
inline constexpr std::size_t kCropSize = kCropSide * kCropSide * kChannels;  // 768
inline constexpr int kMinBoxSide = 4;

/// Integer pixel box: left, top, width, height.
struct Box {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  int area() const noexcept { return w * h; }
  friend auto operator<=>(const Box&, const Box&) = default;
};

/// Intersection over union; 0 for disjoint boxes.
double iou(const Box& a, const Box& b);

/// Clips to the image and widens to at least kMinBoxSide per side.
Box clamp_box(const Box& b, int width = kImageSide, int height = kImageSide);

bool box_within(const Box& b, int width = kImageSide, int height = kImageSide);

/// H x W x 3 raster, values in [0, 1], interleaved channels.
class Image {
 public:
  Image() = default;
  Image(int height, int width, double fill = 0.0)
      : height_(height), width_(width),
        px_(static_cast<std::size_t>(height) * width * kChannels, fill) {}

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }

  double& at(int y, int x, int c) { return px_[index(y, x, c)]; }
  double at(int y, int x, int c) const { return px_[index(y, x, c)]; }

  std::span<double> pixels() noexcept { return px_; }
  std::span<const double> pixels() const noexcept { return px_; }

  void clip01();

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width_ + x) * kChannels + c;
  }

  int height_ = 0;
  int width_ = 0;
  std::vector<double> px_;
};

}  // namespace ctxguard
