#pragma once

// Visibility-weighted matching, gallery ranking, CMC/mAP, region-map export.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "vpm/datagen.hpp"
#include "vpm/descriptor.hpp"
#include "vpm/vpm_net.hpp"

namespace vpm {

inline double region_distance(const Descriptor& a, const Descriptor& b, int i) {
  const auto fa = a.feature(i), fb = b.feature(i);
  double s = 0.0;
  for (std::size_t k = 0; k < fa.size(); ++k) {
    const double d = fa[k] - fb[k];
    s += d * d;
  }
  return std::sqrt(s);
}

// sum_i C_i^k C_i^l D_i / sum_i C_i^k C_i^l with D_i the Euclidean distance of
// region i. Without visibility every region weighs 1.
inline double pair_distance(const Descriptor& k, const Descriptor& l, bool use_visibility = true) {
  if (k.p != l.p || k.c != l.c) {
    throw std::invalid_argument("pair_distance: descriptor shapes differ (" + std::to_string(k.p) + "x" +
                                std::to_string(k.c) + " vs " + std::to_string(l.p) + "x" + std::to_string(l.c) + ")");
  }
  double num = 0.0, den = 0.0;
  for (int i = 0; i < k.p; ++i) {
    const double w = use_visibility ? k.visibility[i] * l.visibility[i] : 1.0;
    num += w * region_distance(k, l, i);
    den += w;
  }
  return num / den;
}

class GalleryIndex {
 public:
  GalleryIndex() = default;
  explicit GalleryIndex(std::vector<Descriptor> entries) {
    for (auto& d : entries) add(std::move(d));
  }

  void add(Descriptor d) {
    d.validate();
    if (!entries_.empty() && (d.p != p_ || d.c != c_)) {
      throw std::invalid_argument("gallery holds " + std::to_string(p_) + "x" + std::to_string(c_) +
                                  " descriptors, got " + std::to_string(d.p) + "x" + std::to_string(d.c));
    }
    p_ = d.p;
    c_ = d.c;
    entries_.push_back(std::move(d));
  }

  int p() const { return p_; }
  int c() const { return c_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  const Descriptor& operator[](std::size_t i) const { return entries_[i]; }
  std::span<const Descriptor> entries() const { return entries_; }

 private:
  std::vector<Descriptor> entries_;
  int p_ = 0;
  int c_ = 0;
};

struct RankingResult {
  std::vector<int> order;         // gallery indices, nearest first
  std::vector<double> distances;  // distance of order[r]
};

inline RankingResult rank_gallery(const Descriptor& query, const GalleryIndex& index, bool use_visibility = true) {
  if (index.empty()) throw std::invalid_argument("rank_gallery: empty gallery");
  if (query.p != index.p() || query.c != index.c()) {
    throw std::invalid_argument("rank_gallery: query is " + std::to_string(query.p) + "x" + std::to_string(query.c) +
                                ", gallery is " + std::to_string(index.p()) + "x" + std::to_string(index.c()));
  }
  std::vector<double> dist(index.size());
  for (std::size_t g = 0; g < index.size(); ++g) dist[g] = pair_distance(query, index[g], use_visibility);
  RankingResult r;
  r.order.resize(index.size());
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(), [&](int a, int b) { return dist[a] < dist[b]; });
  for (int g : r.order) r.distances.push_back(dist[g]);
  return r;
}

struct Label {
  int identity = 0;
  std::optional<int> camera;
};

inline Label label_of(const Descriptor& d) {
  if (!d.identity) throw std::invalid_argument("descriptor '" + d.name + "' carries no identity label");
  return {*d.identity, d.camera};
}

namespace detail {

// Gallery positions that count for a query: same-identity same-camera entries
// are dropped when both sides carry a camera id. Returns relevance flags for
// the remaining ranked list.
inline std::vector<bool> filtered_relevance(const RankingResult& r, const Label& q, std::span<const Label> gallery) {
  std::vector<bool> rel;
  rel.reserve(r.order.size());
  for (int g : r.order) {
    const Label& gl = gallery[g];
    const bool same_id = gl.identity == q.identity;
    if (same_id && q.camera && gl.camera && *q.camera == *gl.camera) continue;
    rel.push_back(same_id);
  }
  return rel;
}

}  // namespace detail

struct CmcResult {
  std::vector<double> curve;  // curve[k-1] = rank-k accuracy
  int evaluated = 0;
  int skipped = 0;            // queries without any valid gallery match

  double rank(int k) const {
    if (curve.empty()) return 0.0;
    return curve[std::min<std::size_t>(static_cast<std::size_t>(k), curve.size()) - 1];
  }
};

inline CmcResult cmc(std::span<const RankingResult> rankings, std::span<const Label> queries,
                     std::span<const Label> gallery, int max_rank = 10) {
  if (rankings.size() != queries.size()) throw std::invalid_argument("cmc: one ranking per query required");
  CmcResult out;
  out.curve.assign(static_cast<std::size_t>(max_rank), 0.0);
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto rel = detail::filtered_relevance(rankings[q], queries[q], gallery);
    const auto first = std::find(rel.begin(), rel.end(), true);
    if (first == rel.end()) {
      ++out.skipped;
      continue;
    }
    ++out.evaluated;
    const auto pos = static_cast<int>(first - rel.begin());
    for (int k = pos; k < max_rank; ++k) out.curve[k] += 1.0;
  }
  if (out.evaluated > 0) {
    for (double& v : out.curve) v /= out.evaluated;
  }
  return out;
}

inline double average_precision(const std::vector<bool>& relevance) {
  int hits = 0;
  double sum = 0.0;
  for (std::size_t i = 0; i < relevance.size(); ++i) {
    if (!relevance[i]) continue;
    ++hits;
    sum += static_cast<double>(hits) / static_cast<double>(i + 1);
  }
  return hits ? sum / hits : 0.0;
}

inline double mean_average_precision(std::span<const RankingResult> rankings, std::span<const Label> queries,
                                     std::span<const Label> gallery) {
  if (rankings.size() != queries.size()) throw std::invalid_argument("mAP: one ranking per query required");
  double total = 0.0;
  int n = 0;
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto rel = detail::filtered_relevance(rankings[q], queries[q], gallery);
    if (std::find(rel.begin(), rel.end(), true) == rel.end()) continue;
    total += average_precision(rel);
    ++n;
  }
  return n ? total / n : 0.0;
}

struct Metrics {
  double r1 = 0, r5 = 0, r10 = 0, map = 0;
  int evaluated = 0;
  int skipped = 0;
};

inline Metrics evaluate_rankings(std::span<const RankingResult> rankings, std::span<const Label> queries,
                                 std::span<const Label> gallery) {
  const CmcResult c = cmc(rankings, queries, gallery, 10);
  return {c.rank(1), c.rank(5), c.rank(10), mean_average_precision(rankings, queries, gallery), c.evaluated, c.skipped};
}

// query_id,rank,gallery_id,distance with 1-based ranks.
inline void write_rankings_csv(std::ostream& os, std::span<const Descriptor> queries, std::span<const RankingResult> rankings,
                               const GalleryIndex& gallery, int top_k = 0) {
  os << "query_id,rank,gallery_id,distance\n";
  char buf[64];
  for (std::size_t q = 0; q < rankings.size(); ++q) {
    const auto& r = rankings[q];
    const std::size_t n = top_k > 0 ? std::min<std::size_t>(static_cast<std::size_t>(top_k), r.order.size()) : r.order.size();
    for (std::size_t k = 0; k < n; ++k) {
      std::snprintf(buf, sizeof buf, "%.17g", r.distances[k]);
      os << queries[q].name << ',' << k + 1 << ',' << gallery[r.order[k]].name << ',' << buf << '\n';
    }
  }
}

inline void write_metrics_csv(std::ostream& os, const Metrics& m, bool header = true) {
  if (header) os << "R1,R5,R10,mAP\n";
  char buf[128];
  std::snprintf(buf, sizeof buf, "%.6f,%.6f,%.6f,%.6f\n", m.r1, m.r5, m.r10, m.map);
  os << buf;
}

// ---------------------------------------------------------------------------
// Region maps

// Per-cell argmax over the probability maps, lowest region id on ties.
// Returns 1-based ids, row-major h*w.
inline std::vector<int> region_argmax(const Tensor& maps) {
  const int p = maps.dim(0), h = maps.dim(1), w = maps.dim(2);
  std::vector<int> out(static_cast<std::size_t>(h) * w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int best = 0;
      for (int i = 1; i < p; ++i) {
        if (maps.at(i, y, x) > maps.at(best, y, x)) best = i;
      }
      out[static_cast<std::size_t>(y) * w + x] = best + 1;
    }
  }
  return out;
}

inline Color region_color(int id) {
  static constexpr std::array<Color, 12> kPalette{{{0.90, 0.10, 0.10},
                                                   {0.10, 0.60, 0.90},
                                                   {0.95, 0.80, 0.10},
                                                   {0.20, 0.75, 0.25},
                                                   {0.60, 0.25, 0.80},
                                                   {0.95, 0.50, 0.10},
                                                   {0.10, 0.85, 0.80},
                                                   {0.90, 0.40, 0.70},
                                                   {0.50, 0.50, 0.50},
                                                   {0.55, 0.35, 0.15},
                                                   {0.70, 0.90, 0.40},
                                                   {0.15, 0.20, 0.55}}};
  return kPalette[static_cast<std::size_t>(id - 1) % kPalette.size()];
}

// Color-indexed rendering of the argmax map, each cell upsampled to a
// stride x stride block.
inline Tensor render_region_map(std::span<const int> argmax, int h, int w, int stride) {
  Tensor img(Shape{3, h * stride, w * stride});
  for (int y = 0; y < h * stride; ++y) {
    for (int x = 0; x < w * stride; ++x) {
      const Color col = region_color(argmax[static_cast<std::size_t>(y / stride) * w + x / stride]);
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
    }
  }
  return img;
}

inline std::vector<int> export_region_maps(const Tensor& image, const VpmModel& model, const std::filesystem::path& out_path) {
  const auto out = model.forward(Var(image));
  const auto argmax = region_argmax(out.maps.value());
  const auto& cfg = model.config();
  write_ppm(out_path, render_region_map(argmax, cfg.feature_h(), cfg.feature_w(), cfg.stride()));
  return argmax;
}

}  // namespace vpm
