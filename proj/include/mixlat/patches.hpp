#pragma once

// Random patch sampling for training and overlapping tiling with window-
// weighted stitching for whole-image inference.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <utility>
#include <vector>

#include "mixlat/error.hpp"
#include "mixlat/rng.hpp"

namespace mixlat {

/// Single-channel image, row-major, intensities nominally in [0,1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w), fill) {}

  float& at(int r, int c) { return pixels[static_cast<std::size_t>(r) * width + c]; }
  float at(int r, int c) const { return pixels[static_cast<std::size_t>(r) * width + c]; }
  std::size_t size() const { return pixels.size(); }
  bool operator==(const Image&) const = default;
};

struct Anchor {
  int row = 0;
  int col = 0;
  bool operator==(const Anchor&) const = default;
};

using Patch = std::vector<float>;

inline Patch extract_patch(const Image& img, Anchor a, int patch_size) {
  require(a.row >= 0 && a.col >= 0 && a.row + patch_size <= img.height && a.col + patch_size <= img.width,
          "extract_patch: patch at (" + std::to_string(a.row) + "," + std::to_string(a.col) + ") leaves the image");
  Patch p(static_cast<std::size_t>(patch_size) * patch_size);
  for (int r = 0; r < patch_size; ++r)
    std::copy_n(img.pixels.begin() + static_cast<std::ptrdiff_t>((a.row + r) * img.width + a.col), patch_size,
                p.begin() + r * patch_size);
  return p;
}

struct SampledPatch {
  Patch patch;
  Anchor anchor;
};

/// n patches with anchors drawn uniformly over all valid positions.
inline std::vector<SampledPatch> sample_random_patches(const Image& img, int n, int patch_size, Rng& rng) {
  require(n >= 1, "sample_random_patches: n must be >= 1");
  require(patch_size >= 1 && img.height >= patch_size && img.width >= patch_size,
          "sample_random_patches: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
              " is smaller than patch " + std::to_string(patch_size));
  std::vector<SampledPatch> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    Anchor a{static_cast<int>(rng.uniform_int(0, img.height - patch_size)),
             static_cast<int>(rng.uniform_int(0, img.width - patch_size))};
    out.push_back({extract_patch(img, a, patch_size), a});
  }
  return out;
}

/// Lift applied to the separable Hann window so border weights stay positive.
constexpr double kWindowLift = 1e-3;

inline double hann_1d(int i, int n) {
  const double s = std::sin(std::numbers::pi * (i + 0.5) / n);
  return s * s + kWindowLift;
}

struct PatchGrid {
  int image_height = 0;
  int image_width = 0;
  int patch_size = 0;
  int stride = 0;
  std::vector<Anchor> coords;        // row-major, unique
  std::vector<double> blend_window;  // patch_size^2

  std::size_t count() const { return coords.size(); }
};

namespace detail {
inline std::vector<int> axis_anchors(int extent, int patch, int stride) {
  std::vector<int> out;
  for (int a = 0; a + patch <= extent; a += stride) out.push_back(a);
  if (out.empty() || out.back() + patch < extent) out.push_back(extent - patch);
  return out;
}
}  // namespace detail

/// Anchors at multiples of the stride; the last row/column is clamped so the
/// final patch ends on the border.
inline PatchGrid make_grid(int image_height, int image_width, int patch_size, int stride) {
  if (stride < 1 || stride > patch_size)
    throw ConfigError("make_grid: stride " + std::to_string(stride) + " outside [1, " + std::to_string(patch_size) +
                      "]");
  require(image_height >= patch_size && image_width >= patch_size, "make_grid: image smaller than patch");
  PatchGrid g{image_height, image_width, patch_size, stride, {}, {}};
  const auto rows = detail::axis_anchors(image_height, patch_size, stride);
  const auto cols = detail::axis_anchors(image_width, patch_size, stride);
  for (int r : rows)
    for (int c : cols) g.coords.push_back({r, c});
  g.blend_window.resize(static_cast<std::size_t>(patch_size) * patch_size);
  for (int r = 0; r < patch_size; ++r)
    for (int c = 0; c < patch_size; ++c)
      g.blend_window[static_cast<std::size_t>(r) * patch_size + c] = hann_1d(r, patch_size) * hann_1d(c, patch_size);
  return g;
}

inline std::vector<Patch> extract(const Image& img, const PatchGrid& grid) {
  require(img.height == grid.image_height && img.width == grid.image_width, "extract: image does not match grid");
  std::vector<Patch> out;
  out.reserve(grid.count());
  for (const auto& a : grid.coords) out.push_back(extract_patch(img, a, grid.patch_size));
  return out;
}

/// Per-pixel window sum over every patch covering it.
inline std::vector<double> window_coverage(const PatchGrid& grid) {
  std::vector<double> cov(static_cast<std::size_t>(grid.image_height) * grid.image_width, 0.0);
  const int p = grid.patch_size;
  for (const auto& a : grid.coords)
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c)
        cov[static_cast<std::size_t>(a.row + r) * grid.image_width + a.col + c] +=
            grid.blend_window[static_cast<std::size_t>(r) * p + c];
  return cov;
}

/// Window-weighted average of overlapping patches.
inline Image stitch(const std::vector<Patch>& patches, const PatchGrid& grid) {
  require(patches.size() == grid.count(), "stitch: " + std::to_string(patches.size()) + " patches for a grid of " +
                                              std::to_string(grid.count()));
  const int p = grid.patch_size;
  std::vector<double> num(static_cast<std::size_t>(grid.image_height) * grid.image_width, 0.0);
  const auto den = window_coverage(grid);
  for (std::size_t i = 0; i < patches.size(); ++i) {
    require(patches[i].size() == static_cast<std::size_t>(p) * p, "stitch: patch size mismatch");
    const auto a = grid.coords[i];
    for (int r = 0; r < p; ++r)
      for (int c = 0; c < p; ++c) {
        const auto k = static_cast<std::size_t>(r) * p + c;
        num[static_cast<std::size_t>(a.row + r) * grid.image_width + a.col + c] +=
            grid.blend_window[k] * patches[i][k];
      }
  }
  Image out(grid.image_height, grid.image_width);
  for (std::size_t i = 0; i < num.size(); ++i) out.pixels[i] = static_cast<float>(num[i] / den[i]);
  return out;
}

}  // namespace mixlat
