#include "ctxguard/geometry.hpp"

#include <algorithm>

namespace ctxguard {

double iou(const Box& a, const Box& b) {
  const int ix0 = std::max(a.x, b.x);
  const int iy0 = std::max(a.y, b.y);
  const int ix1 = std::min(a.x + a.w, b.x + b.w);
  const int iy1 = std::min(a.y + a.h, b.y + b.h);
  if (ix1 <= ix0 || iy1 <= iy0) return 0.0;
  const double inter = static_cast<double>(ix1 - ix0) * (iy1 - iy0);
  const double uni = static_cast<double>(a.area()) + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

namespace {

void clamp_axis(int& pos, int& len, int limit) {
  int lo = std::max(0, pos);
  int hi = std::min(limit, pos + len);
  if (hi - lo < kMinBoxSide) {
    const int need = kMinBoxSide - std::max(0, hi - lo);
    hi = std::min(limit, hi + need);
    lo = std::max(0, hi - kMinBoxSide);
    hi = lo + kMinBoxSide;
  }
  pos = lo;
  len = hi - lo;
}

}  // namespace

Box clamp_box(const Box& b, int width, int height) {
  Box out = b;
  clamp_axis(out.x, out.w, width);
  clamp_axis(out.y, out.h, height);
  return out;
}

bool box_within(const Box& b, int width, int height) {
  return b.x >= 0 && b.y >= 0 && b.w > 0 && b.h > 0 && b.x + b.w <= width && b.y + b.h <= height;
}

void Image::clip01() {
  for (double& v : px_) v = std::clamp(v, 0.0, 1.0);
}

}  // namespace ctxguard
