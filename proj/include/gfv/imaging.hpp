#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "gfv/error.hpp"
#include "gfv/rng.hpp"

namespace gfv {

/// Single-channel raster, row-major, intensities in [0, 1].
class GrayImage {
 public:
  GrayImage() = default;

  GrayImage(int width, int height, double fill = 0.0)
      : width_(width), height_(height) {
    if (width < 1 || height < 1) {
      fail(ErrorCode::InvalidDimensions,
           "image must be at least 1x1, got " + std::to_string(width) + "x" + std::to_string(height));
    }
    check_intensity(fill);
    pixels_.assign(static_cast<std::size_t>(width) * static_cast<std::size_t>(height), fill);
  }

  GrayImage(int width, int height, std::vector<double> pixels)
      : width_(width), height_(height), pixels_(std::move(pixels)) {
    if (width < 1 || height < 1) fail(ErrorCode::InvalidDimensions, "image must be at least 1x1");
    if (pixels_.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
      fail(ErrorCode::InvalidDimensions, "pixel count does not match width*height");
    }
    for (double p : pixels_) check_intensity(p);
  }

  int width() const noexcept { return width_; }
  int height() const noexcept { return height_; }
  bool empty() const noexcept { return pixels_.empty(); }

  double at(int x, int y) const { return pixels_[index(x, y)]; }

  // Callers writing through set() are responsible for staying inside [0, 1];
  // the value is clamped rather than rejected.
  void set(int x, int y, double v) { pixels_[index(x, y)] = std::clamp(v, 0.0, 1.0); }

  std::span<const double> pixels() const noexcept { return pixels_; }

  friend bool operator==(const GrayImage&, const GrayImage&) = default;

 private:
  static void check_intensity(double p) {
    if (!(p >= 0.0 && p <= 1.0)) fail(ErrorCode::InvalidArgument, "intensity outside [0,1]");
  }

  std::size_t index(int x, int y) const {
    return static_cast<std::size_t>(y) * static_cast<std::size_t>(width_) + static_cast<std::size_t>(x);
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<double> pixels_;
};

/// Axis-aligned rectangle, (x = column, y = row) of the top-left corner.
struct Region {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool fits(int width, int height) const {
    return x >= 0 && y >= 0 && w >= 0 && h >= 0 && x + w <= width && y + h <= height;
  }

  // Positive-area overlap; shared edges do not count.
  bool intersects(const Region& o) const {
    return x < o.x + o.w && o.x < x + w && y < o.y + o.h && o.y < y + h;
  }

  friend bool operator==(const Region&, const Region&) = default;
};

/// Row-major grid of non-overlapping N x N blocks. Block indices are 1-based.
struct BlockGrid {
  int block_size = 0;
  int cols = 0;
  int rows = 0;
  std::vector<Region> regions;

  std::size_t size() const noexcept { return regions.size(); }

  const Region& block(int index) const {
    if (index < 1 || index > static_cast<int>(regions.size())) {
      fail(ErrorCode::OutOfBounds, "block index " + std::to_string(index) + " outside grid");
    }
    return regions[static_cast<std::size_t>(index - 1)];
  }

  int index_of(int col, int row) const { return row * cols + col + 1; }
};

struct GuillocheParams {
  int curve_count = 12;
  double amplitude = 40.0;      // pixels
  double frequency = 3.0;       // cycles per image width
  double phase_jitter = 0.05;   // radians
  double line_intensity = 0.6;
  double background_intensity = 0.85;
  std::uint64_t seed = 0;
};

/// Bilinear resampling with corner-aligned sample positions: output pixel i
/// maps to source coordinate i * (in - 1) / (out - 1). A single output column
/// or row samples the source centre.
inline GrayImage resize_bilinear(const GrayImage& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1) {
    fail(ErrorCode::InvalidDimensions,
         "resize target must be positive, got " + std::to_string(out_w) + "x" + std::to_string(out_h));
  }
  if (img.empty()) fail(ErrorCode::InvalidDimensions, "cannot resize an empty image");

  const int in_w = img.width();
  const int in_h = img.height();
  auto source_coord = [](int i, int in, int out) {
    if (out == 1) return static_cast<double>(in - 1) / 2.0;
    return static_cast<double>(static_cast<long long>(i) * (in - 1)) / static_cast<double>(out - 1);
  };

  std::vector<int> x0(static_cast<std::size_t>(out_w)), x1(x0.size());
  std::vector<double> fx(x0.size());
  for (int i = 0; i < out_w; ++i) {
    const double s = source_coord(i, in_w, out_w);
    const int f = std::min(static_cast<int>(std::floor(s)), in_w - 1);
    x0[static_cast<std::size_t>(i)] = f;
    x1[static_cast<std::size_t>(i)] = std::min(f + 1, in_w - 1);
    fx[static_cast<std::size_t>(i)] = s - f;
  }

  std::vector<double> out(static_cast<std::size_t>(out_w) * static_cast<std::size_t>(out_h));
  for (int j = 0; j < out_h; ++j) {
    const double sy = source_coord(j, in_h, out_h);
    const int y0 = std::min(static_cast<int>(std::floor(sy)), in_h - 1);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double fy = sy - y0;
    for (int i = 0; i < out_w; ++i) {
      const auto k = static_cast<std::size_t>(i);
      const double top = (1.0 - fx[k]) * img.at(x0[k], y0) + fx[k] * img.at(x1[k], y0);
      const double bottom = (1.0 - fx[k]) * img.at(x0[k], y1) + fx[k] * img.at(x1[k], y1);
      const double v = (1.0 - fy) * top + fy * bottom;
      out[static_cast<std::size_t>(j) * static_cast<std::size_t>(out_w) + k] = std::clamp(v, 0.0, 1.0);
    }
  }
  return GrayImage(out_w, out_h, std::move(out));
}

/// Splits the image into floor(w/n) x floor(h/n) blocks; partial strips on
/// the right and bottom edges are left out.
inline BlockGrid partition_blocks(const GrayImage& img, int n) {
  if (n < 1 || n > std::min(img.width(), img.height())) {
    fail(ErrorCode::InvalidBlockSize, "block size " + std::to_string(n) + " does not fit a " +
                                          std::to_string(img.width()) + "x" + std::to_string(img.height()) +
                                          " image");
  }
  BlockGrid grid;
  grid.block_size = n;
  grid.cols = img.width() / n;
  grid.rows = img.height() / n;
  grid.regions.reserve(static_cast<std::size_t>(grid.cols) * static_cast<std::size_t>(grid.rows));
  for (int r = 0; r < grid.rows; ++r) {
    for (int c = 0; c < grid.cols; ++c) grid.regions.push_back(Region{c * n, r * n, n, n});
  }
  return grid;
}

/// Ascending 1-based indices of blocks that overlap none of `foreground`.
inline std::vector<int> select_candidate_zones(const GrayImage& /*img*/, const BlockGrid& grid,
                                               std::span<const Region> foreground) {
  std::vector<int> out;
  for (std::size_t i = 0; i < grid.regions.size(); ++i) {
    const Region& block = grid.regions[i];
    const bool touched = std::any_of(foreground.begin(), foreground.end(),
                                     [&](const Region& f) { return block.intersects(f); });
    if (!touched) out.push_back(static_cast<int>(i) + 1);
  }
  return out;
}

struct ForegroundHeuristic {
  double deviation = 0.25;  // |p - block median| above this counts as ink
  double fraction = 0.05;   // a block with more ink than this is foreground
};

/// Fallback when no annotations exist: flags blocks whose intensity
/// distribution is heavy-tailed around its median (text, photos, logos).
/// The median is the element of rank floor(n/2).
inline std::vector<Region> detect_foreground_blocks(const GrayImage& img, const BlockGrid& grid,
                                                    ForegroundHeuristic rule = {}) {
  std::vector<Region> out;
  std::vector<double> values;
  for (const Region& b : grid.regions) {
    values.clear();
    for (int y = b.y; y < b.y + b.h; ++y)
      for (int x = b.x; x < b.x + b.w; ++x) values.push_back(img.at(x, y));
    std::vector<double> sorted = values;
    const auto mid = sorted.begin() + static_cast<std::ptrdiff_t>(sorted.size() / 2);
    std::nth_element(sorted.begin(), mid, sorted.end());
    const double median = *mid;
    const auto ink = std::count_if(values.begin(), values.end(),
                                   [&](double p) { return std::abs(p - median) > rule.deviation; });
    if (static_cast<double>(ink) > rule.fraction * static_cast<double>(values.size())) out.push_back(b);
  }
  return out;
}

/// Returns a copy of `img` whose `dst` rectangle holds the original content
/// of `src`. Overlapping rectangles read from the untouched input.
inline GrayImage copy_move(const GrayImage& img, const Region& src, const Region& dst) {
  if (src.w != dst.w || src.h != dst.h) fail(ErrorCode::RegionMismatch, "source and destination shapes differ");
  if (src.w < 1 || src.h < 1) fail(ErrorCode::RegionMismatch, "empty region");
  if (!src.fits(img.width(), img.height()) || !dst.fits(img.width(), img.height())) {
    fail(ErrorCode::OutOfBounds, "region outside image");
  }
  if (src == dst) fail(ErrorCode::DegenerateCopy, "source and destination are the same region");

  GrayImage out = img;
  for (int dy = 0; dy < src.h; ++dy)
    for (int dx = 0; dx < src.w; ++dx) out.set(dst.x + dx, dst.y + dy, img.at(src.x + dx, src.y + dy));
  return out;
}

/// Interlaced sinusoids y(x) = h/2 + A sin(2 pi f x / w + phase_k), drawn as
/// anti-aliased one-pixel strokes. phase_k = 2 pi k / curve_count plus a
/// seeded uniform offset in [-phase_jitter, phase_jitter].
inline GrayImage synth_guilloche(const GuillocheParams& p, int w, int h) {
  if (w < 16 || h < 16) fail(ErrorCode::InvalidDimensions, "guilloche canvas must be at least 16x16");
  if (p.curve_count < 1) fail(ErrorCode::InvalidArgument, "curve_count must be >= 1");
  for (double v : {p.line_intensity, p.background_intensity}) {
    if (!(v >= 0.0 && v <= 1.0)) fail(ErrorCode::InvalidArgument, "intensities must lie in [0,1]");
  }

  constexpr double two_pi = 2.0 * std::numbers::pi;
  Rng rng(p.seed);
  std::vector<double> phases(static_cast<std::size_t>(p.curve_count));
  for (int k = 0; k < p.curve_count; ++k) {
    phases[static_cast<std::size_t>(k)] =
        two_pi * k / p.curve_count + rng.uniform(-p.phase_jitter, p.phase_jitter);
  }

  // Sub-sample each column finely enough that consecutive samples move less
  // than half a pixel vertically; strokes stay connected on steep slopes.
  const double slope = std::abs(p.amplitude) * two_pi * std::abs(p.frequency) / w;
  const int samples = std::max(1, static_cast<int>(std::ceil(2.0 * slope)));

  std::vector<double> coverage(static_cast<std::size_t>(w) * static_cast<std::size_t>(h), 0.0);
  auto splat = [&](int x, int y, double c) {
    if (y < 0 || y >= h || c <= 0.0) return;
    double& cell = coverage[static_cast<std::size_t>(y) * static_cast<std::size_t>(w) + static_cast<std::size_t>(x)];
    cell = std::max(cell, c);
  };
  for (double phase : phases) {
    for (int x = 0; x < w; ++x) {
      for (int s = 0; s < samples; ++s) {
        const double xs = x + static_cast<double>(s) / samples;
        const double y = h / 2.0 + p.amplitude * std::sin(two_pi * p.frequency * xs / w + phase);
        const double row = std::floor(y);
        const double frac = y - row;
        splat(x, static_cast<int>(row), 1.0 - frac);
        splat(x, static_cast<int>(row) + 1, frac);
      }
    }
  }

  std::vector<double> px(coverage.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = std::clamp(p.background_intensity + (p.line_intensity - p.background_intensity) * coverage[i], 0.0, 1.0);
  }
  return GrayImage(w, h, std::move(px));
}

/// Fills `r` with a constant value. Used to paint synthetic foreground.
inline void fill_region(GrayImage& img, const Region& r, double value) {
  if (!r.fits(img.width(), img.height())) fail(ErrorCode::OutOfBounds, "fill region outside image");
  for (int y = r.y; y < r.y + r.h; ++y)
    for (int x = r.x; x < r.x + r.w; ++x) img.set(x, y, value);
}

}  // namespace gfv
