#pragma once

// Region grid, training crops, and the self-supervision signal (per-cell
// region labels plus the visible-region set) derived from crop geometry.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "vpm/binary_io.hpp"
#include "vpm/tensor.hpp"

namespace vpm {

// Half-open pixel rectangle [x1,x2) x [y1,y2).
struct PixelRect {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int width() const { return x2 - x1; }
  int height() const { return y2 - y1; }
  long area() const { return static_cast<long>(std::max(0, width())) * std::max(0, height()); }
  friend bool operator==(const PixelRect&, const PixelRect&) = default;
};

// Rectangle in resized-input coordinates; corners need not be integral.
struct InputRect {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
};

// Rectangle of feature-map cells, half-open.
struct CellRect {
  int x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  bool degenerate() const { return x2 <= x1 || y2 <= y1; }
  int cells() const { return degenerate() ? 0 : (x2 - x1) * (y2 - y1); }
  friend bool operator==(const CellRect&, const CellRect&) = default;
};

using CropRect = PixelRect;

struct RegionGrid {
  int m = 1;  // vertical count (rows of regions)
  int n = 1;  // horizontal count
  int height = 0;
  int width = 0;
  std::vector<PixelRect> regions;  // region id i+1 at index i, row-major

  int p() const { return m * n; }
};

inline RegionGrid make_region_grid(int m, int n, int height, int width) {
  if (m <= 0 || n <= 0) {
    throw std::invalid_argument("region grid needs m,n >= 1 (got m=" + std::to_string(m) + ", n=" + std::to_string(n) + ")");
  }
  if (height < m || width < n) {
    throw std::invalid_argument("region grid " + std::to_string(m) + "x" + std::to_string(n) + " does not fit a " +
                                std::to_string(height) + "x" + std::to_string(width) + " image");
  }
  RegionGrid g{m, n, height, width, {}};
  const int band = height / m, stripe = width / n;
  for (int r = 0; r < m; ++r) {
    for (int c = 0; c < n; ++c) {
      // Remainder rows/columns go to the last band/stripe.
      g.regions.push_back({c * stripe, r * band, c + 1 == n ? width : (c + 1) * stripe,
                           r + 1 == m ? height : (r + 1) * band});
    }
  }
  return g;
}

enum class CropStrategy { kUniform, kTop, kBottom, kBilateral };

inline std::string_view to_string(CropStrategy s) {
  switch (s) {
    case CropStrategy::kUniform: return "uniform";
    case CropStrategy::kTop: return "top";
    case CropStrategy::kBottom: return "bottom";
    case CropStrategy::kBilateral: return "bilateral";
  }
  return "?";
}

inline CropStrategy parse_crop_strategy(std::string_view s) {
  if (s == "uniform") return CropStrategy::kUniform;
  if (s == "top") return CropStrategy::kTop;
  if (s == "bottom") return CropStrategy::kBottom;
  if (s == "bilateral") return CropStrategy::kBilateral;
  throw std::invalid_argument("unknown crop strategy '" + std::string(s) + "'");
}

struct CropSpec {
  CropStrategy strategy = CropStrategy::kTop;
  double gamma_min = 0.5;
  double gamma_max = 1.0;

  void validate() const {
    if (!(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max <= 1.0)) {
      throw std::invalid_argument("crop ratios must satisfy 0 < gamma_min <= gamma_max <= 1");
    }
  }
};

namespace detail {

inline int clamp_int(long v, long lo, long hi) { return static_cast<int>(std::clamp(v, lo, std::max(lo, hi))); }

// Crop of ratio `gamma` anchored at the top or bottom edge, full width.
inline CropRect anchored_crop(double gamma, double gmin, double gmax, int height, int width, bool top) {
  const long lo = std::max(1L, static_cast<long>(std::ceil(gmin * height - 1e-9)));
  const long hi = std::min<long>(height, static_cast<long>(std::floor(gmax * height + 1e-9)));
  const int h = clamp_int(std::lround(gamma * height), lo, hi);
  return top ? CropRect{0, 0, width, h} : CropRect{0, height - h, width, height};
}

}  // namespace detail

// Area ratio drawn uniformly from [gamma_min, gamma_max]. Top/bottom crops
// keep the full width; uniform crops draw the width ratio from [gamma, 1].
inline CropRect sample_crop(const CropSpec& spec, int height, int width, Rng& rng) {
  spec.validate();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double gamma = spec.gamma_min + (spec.gamma_max - spec.gamma_min) * unit(rng);
  CropStrategy strategy = spec.strategy;
  if (strategy == CropStrategy::kBilateral) strategy = unit(rng) < 0.5 ? CropStrategy::kTop : CropStrategy::kBottom;

  if (strategy != CropStrategy::kUniform) {
    return detail::anchored_crop(gamma, spec.gamma_min, spec.gamma_max, height, width,
                                 strategy == CropStrategy::kTop);
  }
  const double rw = gamma + (1.0 - gamma) * unit(rng);
  const int w = detail::clamp_int(std::lround(rw * width), 1, width);
  const double full = static_cast<double>(height) * width;
  const long hlo = std::max(1L, static_cast<long>(std::ceil(spec.gamma_min * full / w - 1e-9)));
  const long hhi = std::min<long>(height, static_cast<long>(std::floor(spec.gamma_max * full / w + 1e-9)));
  const int h = detail::clamp_int(std::lround(gamma * full / w), hlo, hhi);
  const int x1 = std::uniform_int_distribution<int>(0, width - w)(rng);
  const int y1 = std::uniform_int_distribution<int>(0, height - h)(rng);
  return {x1, y1, x1 + w, y1 + h};
}

// Nearest integer, halves rounded up.
inline int round_half_up(double v) { return static_cast<int>(std::floor(v + 0.5)); }

inline CellRect roi_project(const InputRect& rect, int stride) {
  if (stride < 1) throw std::invalid_argument("roi_project: down-sampling rate must be >= 1");
  if (rect.x1 < 0 || rect.y1 < 0 || rect.x2 < 0 || rect.y2 < 0) {
    throw std::invalid_argument("roi_project: negative coordinates");
  }
  const double s = stride;
  return {round_half_up(rect.x1 / s), round_half_up(rect.y1 / s), round_half_up(rect.x2 / s),
          round_half_up(rect.y2 / s)};
}

struct RegionSupervision {
  int h = 0;
  int w = 0;
  int p = 0;
  std::vector<std::uint8_t> labels;  // h*w region ids in 1..p, row-major
  std::vector<bool> visible;         // visible[i] for region id i+1

  int label(int y, int x) const { return labels[static_cast<std::size_t>(y) * w + x]; }
  bool is_visible(int region_id) const { return visible.at(static_cast<std::size_t>(region_id - 1)); }
  std::vector<int> visible_ids() const {
    std::vector<int> out;
    for (int i = 0; i < p; ++i) {
      if (visible[i]) out.push_back(i + 1);
    }
    return out;
  }
};

namespace detail {

// Region boundary, in crop-relative holistic pixels, mapped into the resized
// input and then onto the cell grid.
inline double to_input(int coord, int crop_origin, int crop_extent, int input_extent) {
  return static_cast<double>(coord - crop_origin) * input_extent / crop_extent;
}

}  // namespace detail

// Labels every feature-map cell with the region its source pixel came from and
// records which regions survive the crop. A region is visible when at least
// `visibility_threshold` of its area lies inside the crop; cells of regions
// below the threshold take the label of the nearest visible region. Returns
// nullopt for degenerate crops.
inline std::optional<RegionSupervision> build_supervision(const RegionGrid& grid, const CropRect& crop, int height,
                                                          int width, int stride, double visibility_threshold = 0.25) {
  if (grid.height != height || grid.width != width) {
    throw std::invalid_argument("build_supervision: grid built for a different image size");
  }
  if (stride < 1 || height % stride != 0 || width % stride != 0) {
    throw std::invalid_argument("build_supervision: image " + std::to_string(height) + "x" + std::to_string(width) +
                                " not divisible by down-sampling rate " + std::to_string(stride));
  }
  if (crop.x1 < 0 || crop.y1 < 0 || crop.x2 > width || crop.y2 > height) {
    throw std::invalid_argument("build_supervision: crop outside the holistic image");
  }
  if (grid.p() > 255) throw std::invalid_argument("build_supervision: at most 255 regions supported");
  if (crop.width() <= 0 || crop.height() <= 0) return std::nullopt;

  const int h = height / stride, w = width / stride;
  RegionSupervision sup{h, w, grid.p(), std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0),
                        std::vector<bool>(static_cast<std::size_t>(grid.p()), false)};

  auto project = [&](const PixelRect& r, const PixelRect& frame) {
    InputRect in{detail::to_input(r.x1, frame.x1, frame.width(), width),
                 detail::to_input(r.y1, frame.y1, frame.height(), height),
                 detail::to_input(r.x2, frame.x1, frame.width(), width),
                 detail::to_input(r.y2, frame.y1, frame.height(), height)};
    return roi_project(in, stride);
  };

  const PixelRect full{0, 0, width, height};
  for (const PixelRect& r : grid.regions) {
    if (project(r, full).degenerate()) {
      throw std::invalid_argument("build_supervision: region grid finer than the " + std::to_string(h) + "x" +
                                  std::to_string(w) + " feature map");
    }
  }

  std::vector<CellRect> cells(grid.p());
  for (int i = 0; i < grid.p(); ++i) {
    const PixelRect& r = grid.regions[i];
    const PixelRect clip{std::max(r.x1, crop.x1), std::max(r.y1, crop.y1), std::min(r.x2, crop.x2),
                         std::min(r.y2, crop.y2)};
    if (clip.width() <= 0 || clip.height() <= 0) continue;
    sup.visible[i] = static_cast<double>(clip.area()) >= visibility_threshold * static_cast<double>(r.area());
    cells[i] = project(clip, crop);
    for (int y = cells[i].y1; y < cells[i].y2; ++y) {
      for (int x = cells[i].x1; x < cells[i].x2; ++x) sup.labels[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint8_t>(i + 1);
    }
  }

  std::vector<int> anchors;
  for (int i = 0; i < grid.p(); ++i) {
    if (sup.visible[i] && !cells[i].degenerate()) anchors.push_back(i);
  }
  if (anchors.empty()) return std::nullopt;

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      auto& l = sup.labels[static_cast<std::size_t>(y) * w + x];
      if (l != 0 && sup.visible[l - 1]) continue;
      int best = -1, best_d = 0;
      for (int i : anchors) {
        const CellRect& c = cells[i];
        const int dy = y < c.y1 ? c.y1 - y : (y >= c.y2 ? y - c.y2 + 1 : 0);
        const int dx = x < c.x1 ? c.x1 - x : (x >= c.x2 ? x - c.x2 + 1 : 0);
        if (best < 0 || dy + dx < best_d) {
          best = i;
          best_d = dy + dx;
        }
      }
      l = static_cast<std::uint8_t>(best + 1);
    }
  }
  return sup;
}

// Supervision record:
//   magic "VPMSUP1\0" | u16 h | u16 w | u8 p | h*w u8 labels | ceil(p/8) bytes
//   visibility bitmask, bit (id-1)%8 of byte (id-1)/8 set when region id is visible.
inline constexpr std::string_view kSupervisionMagic{"VPMSUP1\0", 8};

inline void write_supervision(std::ostream& os, const RegionSupervision& sup) {
  os.write(kSupervisionMagic.data(), kSupervisionMagic.size());
  io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(sup.h));
  io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(sup.w));
  io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(sup.p));
  os.write(reinterpret_cast<const char*>(sup.labels.data()), static_cast<std::streamsize>(sup.labels.size()));
  std::vector<std::uint8_t> mask((sup.p + 7) / 8, 0);
  for (int i = 0; i < sup.p; ++i) {
    if (sup.visible[i]) mask[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
  }
  os.write(reinterpret_cast<const char*>(mask.data()), static_cast<std::streamsize>(mask.size()));
}

inline RegionSupervision read_supervision(std::istream& is) {
  io::expect_magic(is, kSupervisionMagic);
  RegionSupervision sup;
  sup.h = io::read_le<std::uint16_t>(is);
  sup.w = io::read_le<std::uint16_t>(is);
  sup.p = io::read_le<std::uint8_t>(is);
  sup.labels.resize(static_cast<std::size_t>(sup.h) * sup.w);
  if (!is.read(reinterpret_cast<char*>(sup.labels.data()), static_cast<std::streamsize>(sup.labels.size()))) {
    throw FormatError("truncated supervision labels");
  }
  std::vector<std::uint8_t> mask((sup.p + 7) / 8);
  if (!is.read(reinterpret_cast<char*>(mask.data()), static_cast<std::streamsize>(mask.size()))) {
    throw FormatError("truncated supervision mask");
  }
  sup.visible.resize(sup.p);
  for (int i = 0; i < sup.p; ++i) sup.visible[i] = (mask[i / 8] >> (i % 8)) & 1u;
  for (auto l : sup.labels) {
    if (l < 1 || l > sup.p) throw FormatError("supervision label " + std::to_string(l) + " out of range");
  }
  return sup;
}

}  // namespace vpm
