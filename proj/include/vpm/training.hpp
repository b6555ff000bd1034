#pragma once

// Losses, batch-hard mining and the two-stage training loop.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "vpm/checkpoint.hpp"
#include "vpm/datagen.hpp"
#include "vpm/region_supervision.hpp"
#include "vpm/tensor.hpp"
#include "vpm/vpm_net.hpp"

namespace vpm {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Mining { kBatchHard, kAll };

struct TripletConfig {
  double margin = 1.0;
  Mining mining = Mining::kBatchHard;
};

struct TrainSchedule {
  int pretrain_epochs = 15;
  int finetune_epochs = 25;
  double lr_initial = 0.1;
  double lr_decayed = 0.01;
  int decay_epoch = 10;  // within each stage
  int batch_identities = 4;
  int images_per_identity = 4;
  double grad_clip = 5.0;  // max global gradient L2 norm per step; 0 disables

  int batch_size() const { return batch_identities * images_per_identity; }
  double lr_at(int epoch_in_stage) const { return epoch_in_stage < decay_epoch ? lr_initial : lr_decayed; }
};

// Self-supervision switches. The match-time switch lives here too so one
// value describes a whole MVPM variant.
struct AblationFlags {
  bool mask_id_loss = true;
  bool mask_triplet_loss = true;
  bool use_visibility_at_match = true;

  static AblationFlags from_name(std::string_view name) {
    if (name == "none") return {};
    if (name == "mvpm1") return {true, true, false};
    if (name == "mvpm2") return {true, false, true};
    if (name == "mvpm3") return {false, true, true};
    if (name == "mvpm4") return {false, false, true};
    throw std::invalid_argument("unknown ablation '" + std::string(name) + "'");
  }
  friend bool operator==(const AblationFlags&, const AblationFlags&) = default;
};

// L_R: per-pixel negative log-likelihood of the self-supervised label, summed
// over the feature map.
inline Var region_loss(const Var& maps, const RegionSupervision& sup) {
  const Shape& s = maps.shape();
  if (s.size() != 3 || s[0] != sup.p || s[1] != sup.h || s[2] != sup.w) {
    throw ShapeError("region_loss: maps " + shape_str(s) + " vs supervision " +
                     shape_str({sup.p, sup.h, sup.w}));
  }
  const std::size_t hw = static_cast<std::size_t>(sup.h) * sup.w;
  double total = 0.0;
  for (std::size_t g = 0; g < hw; ++g) {
    const int l = sup.labels[g];
    if (l < 1 || l > sup.p) throw std::out_of_range("region_loss: label " + std::to_string(l) + " outside 1..p");
    total -= std::log(maps.value()[(l - 1) * hw + g]);
  }
  std::vector<std::uint8_t> labels = sup.labels;
  return Var::make(Tensor::scalar(total), {maps}, [labels = std::move(labels), hw](detail::Node& self) {
    double* gm = grad_of(self, 0);
    const double* pm = self.inputs[0]->value.data();
    for (std::size_t g = 0; g < hw; ++g) {
      const std::size_t idx = (labels[g] - 1) * hw + g;
      gm[idx] -= self.grad[0] / pm[idx];
    }
  });
}

// L_ID: sum over visible regions (all regions when unmasked) of the identity
// cross-entropy of each region's classifier. `label` is 1-based.
inline Var identity_loss(const Var& features, const std::vector<bool>& visible, int label,
                         std::span<const IdentityHead> heads, bool mask = true) {
  const int p = features.dim(0);
  if (static_cast<int>(heads.size()) != p || static_cast<int>(visible.size()) != p) {
    throw ShapeError("identity_loss: " + std::to_string(p) + " features, " + std::to_string(heads.size()) +
                     " heads, " + std::to_string(visible.size()) + " visibility flags");
  }
  if (label < 1 || label > heads[0].classes()) {
    throw std::out_of_range("identity_loss: label " + std::to_string(label) + " outside 1.." +
                            std::to_string(heads[0].classes()));
  }
  std::vector<Var> terms;
  for (int i = 0; i < p; ++i) {
    if (mask && !visible[i]) continue;
    terms.push_back(cross_entropy(heads[i].logits(row(features, i)), label - 1));
  }
  if (terms.empty()) throw std::invalid_argument("identity_loss: empty visible set");
  return add_n(terms);
}

// Zero-based region indices visible in both images.
inline std::vector<int> shared_regions(const std::vector<bool>& va, const std::vector<bool>& vb) {
  std::vector<int> out;
  for (std::size_t i = 0; i < va.size() && i < vb.size(); ++i) {
    if (va[i] && vb[i]) out.push_back(static_cast<int>(i));
  }
  return out;
}

inline std::vector<int> all_regions(int p) {
  std::vector<int> out(p);
  std::iota(out.begin(), out.end(), 0);
  return out;
}

// Mean Euclidean distance between corresponding region features over `regions`.
inline double masked_pair_distance(const Tensor& fa, const Tensor& fb, std::span<const int> regions) {
  if (regions.empty()) throw std::invalid_argument("masked_pair_distance: no shared visible region");
  const int c = fa.dim(1);
  double total = 0.0;
  for (int i : regions) {
    double s = 0.0;
    for (int ch = 0; ch < c; ++ch) {
      const double d = fa.at(i, ch) - fb.at(i, ch);
      s += d * d;
    }
    total += std::sqrt(s);
  }
  return total / static_cast<double>(regions.size());
}

inline Var masked_pair_distance(const Var& fa, const Var& fb, std::span<const int> regions) {
  if (regions.empty()) throw std::invalid_argument("masked_pair_distance: no shared visible region");
  if (fa.shape() != fb.shape()) throw ShapeError("masked_pair_distance: " + shape_str(fa.shape()) + " vs " + shape_str(fb.shape()));
  std::vector<Var> terms;
  for (int i : regions) terms.push_back(norm(sub(row(fa, i), row(fb, i))));
  return scale(add_n(terms), 1.0 / static_cast<double>(regions.size()));
}

struct TripletInput {
  Var features;  // [p,c]
  std::vector<bool> visible;
};

// [D_ap - D_an + margin]_+ with distances averaged over shared visible regions,
// or over all regions when `mask` is off.
inline Var triplet_loss(const TripletInput& anchor, const TripletInput& pos, const TripletInput& neg,
                        const TripletConfig& cfg, bool mask = true) {
  const int p = anchor.features.dim(0);
  const auto ap = mask ? shared_regions(anchor.visible, pos.visible) : all_regions(p);
  const auto an = mask ? shared_regions(anchor.visible, neg.visible) : all_regions(p);
  const Var d_ap = masked_pair_distance(anchor.features, pos.features, ap);
  const Var d_an = masked_pair_distance(anchor.features, neg.features, an);
  return relu(add_scalar(sub(d_ap, d_an), cfg.margin));
}

struct Triplet {
  int anchor, positive, negative;
  friend bool operator==(const Triplet&, const Triplet&) = default;
};

struct MiningItem {
  const Tensor* features;  // [p,c]
  int label;
  const std::vector<bool>* visible;
};

namespace detail {

inline std::vector<std::optional<double>> pair_distances(std::span<const MiningItem> batch, bool mask) {
  const std::size_t n = batch.size();
  std::vector<std::optional<double>> d(n * n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a + 1; b < n; ++b) {
      const int p = batch[a].features->dim(0);
      const auto regions = mask ? shared_regions(*batch[a].visible, *batch[b].visible) : all_regions(p);
      if (regions.empty()) continue;
      d[a * n + b] = d[b * n + a] = masked_pair_distance(*batch[a].features, *batch[b].features, regions);
    }
  }
  return d;
}

}  // namespace detail

// Per anchor: farthest same-identity and nearest other-identity sample among
// pairs that share a visible region. Ties go to the lowest batch index.
inline std::vector<Triplet> mine_batch_hard(std::span<const MiningItem> batch, bool mask = true) {
  const auto n = static_cast<int>(batch.size());
  const auto d = detail::pair_distances(batch, mask);
  std::vector<Triplet> out;
  for (int a = 0; a < n; ++a) {
    int pos = -1, neg = -1;
    for (int j = 0; j < n; ++j) {
      if (j == a) continue;
      const auto& dj = d[static_cast<std::size_t>(a) * n + j];
      if (!dj) continue;
      if (batch[j].label == batch[a].label) {
        if (pos < 0 || *dj > *d[static_cast<std::size_t>(a) * n + pos]) pos = j;
      } else if (neg < 0 || *dj < *d[static_cast<std::size_t>(a) * n + neg]) {
        neg = j;
      }
    }
    if (pos >= 0 && neg >= 0) out.push_back({a, pos, neg});
  }
  return out;
}

inline std::vector<Triplet> mine_all(std::span<const MiningItem> batch, bool mask = true) {
  const auto n = static_cast<int>(batch.size());
  const auto d = detail::pair_distances(batch, mask);
  std::vector<Triplet> out;
  for (int a = 0; a < n; ++a) {
    for (int pidx = 0; pidx < n; ++pidx) {
      if (pidx == a || batch[pidx].label != batch[a].label || !d[static_cast<std::size_t>(a) * n + pidx]) continue;
      for (int nidx = 0; nidx < n; ++nidx) {
        if (batch[nidx].label == batch[a].label || !d[static_cast<std::size_t>(a) * n + nidx]) continue;
        out.push_back({a, pidx, nidx});
      }
    }
  }
  return out;
}

// L = L_R + L_ID (+ L_tri in the fine-tuning stage).
inline Var total_loss(const Var& region, const Var& identity, const std::optional<Var>& triplet = std::nullopt) {
  std::vector<Var> terms{region, identity};
  if (triplet) terms.push_back(*triplet);
  return add_n(terms);
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  int epoch = 0;  // 1-based across both stages
  std::string stage;
  double lr = 0.0;
  double region = 0.0;
  double identity = 0.0;
  double triplet = 0.0;
  double total = 0.0;
};

struct TrainOptions {
  int m = 6;
  int n = 1;
  CropSpec crop;
  double visibility_threshold = 0.25;
  TrainSchedule schedule;
  TripletConfig triplet;
  AblationFlags flags;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;  // epochs; 0 disables
  std::filesystem::path checkpoint_dir;
  std::function<void(const EpochLog&)> on_epoch;
};

struct SampleTerms {
  Var features;  // [p,c]
  std::optional<Var> region;
  Var identity;
};

inline SampleTerms sample_terms(const VpmModel& model, const Tensor& image, const RegionSupervision& sup, int label,
                                const AblationFlags& flags) {
  const auto out = model.forward(Var(image));
  return {out.features, region_loss(out.maps, sup),
          identity_loss(out.features, sup.visible, label, model.heads(), flags.mask_id_loss)};
}

inline SampleTerms sample_terms(const BaselineModel& model, const Tensor& image, const RegionSupervision&, int label,
                                const AblationFlags&) {
  const auto out = model.forward(Var(image));
  return {out.features, std::nullopt, identity_loss(out.features, {true}, label, model.heads(), true)};
}

struct BatchLosses {
  Var total;
  double region = 0.0;
  double identity = 0.0;
  double triplet = 0.0;
};

// Training loss of one mini-batch: L_R and L_ID averaged over samples, L_tri
// averaged over mined triplets. Each element of `images`/`sups`/`labels` is
// one sample.
template <class Model>
BatchLosses batch_loss(const Model& model, std::span<const Tensor> images, std::span<const RegionSupervision> sups,
                       std::span<const int> labels, bool with_triplet, const TripletConfig& tcfg,
                       const AblationFlags& flags) {
  const std::size_t n = images.size();
  std::vector<SampleTerms> terms;
  terms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) terms.push_back(sample_terms(model, images[i], sups[i], labels[i], flags));

  std::vector<Var> region_terms, id_terms;
  for (const auto& t : terms) {
    if (t.region) region_terms.push_back(*t.region);
    id_terms.push_back(t.identity);
  }
  const double inv = 1.0 / static_cast<double>(n);
  BatchLosses out;
  const Var region = scale(add_n(region_terms), inv);
  const Var identity = scale(add_n(id_terms), inv);
  out.region = region.item();
  out.identity = identity.item();

  std::optional<Var> triplet;
  if (with_triplet) {
    std::vector<std::vector<bool>> vis(n);
    std::vector<MiningItem> items;
    for (std::size_t i = 0; i < n; ++i) {
      if constexpr (std::is_same_v<Model, BaselineModel>) {
        vis[i] = {true};
      } else {
        vis[i] = sups[i].visible;
      }
      items.push_back({&terms[i].features.value(), labels[i], &vis[i]});
    }
    const auto triplets =
        tcfg.mining == Mining::kBatchHard ? mine_batch_hard(items, flags.mask_triplet_loss) : mine_all(items, flags.mask_triplet_loss);
    std::vector<Var> tri;
    for (const Triplet& t : triplets) {
      tri.push_back(triplet_loss({terms[t.anchor].features, vis[t.anchor]}, {terms[t.positive].features, vis[t.positive]},
                                 {terms[t.negative].features, vis[t.negative]}, tcfg, flags.mask_triplet_loss));
    }
    const Var tri_mean = tri.empty() ? add_n({}) : scale(add_n(tri), 1.0 / static_cast<double>(tri.size()));
    out.triplet = tri_mean.item();
    triplet = tri_mean;
  }
  out.total = total_loss(region, identity, triplet);
  return out;
}

struct PreparedSample {
  Tensor image;
  RegionSupervision sup;
};

// Random crop of a holistic image, resized back to full size, with its
// supervision. Degenerate crops are redrawn.
inline PreparedSample prepare_sample(const Tensor& holistic, const RegionGrid& grid, const CropSpec& crop, int stride,
                                     double visibility_threshold, Rng& rng) {
  const int h = holistic.dim(1), w = holistic.dim(2);
  for (int attempt = 0; attempt < 1000; ++attempt) {
    const CropRect rect = sample_crop(crop, h, w, rng);
    auto sup = build_supervision(grid, rect, h, w, stride, visibility_threshold);
    if (!sup) continue;
    return {crop_resize(holistic, rect, h, w), std::move(*sup)};
  }
  throw TrainingError("could not draw a non-degenerate crop in 1000 attempts");
}

namespace detail {

// P identities x K images per step; identity order and image choice drawn
// from `rng`.
class PkSampler {
 public:
  PkSampler(const Dataset& data, int identities, int per_identity) : p_(identities), k_(per_identity) {
    for (std::size_t i = 0; i < data.samples.size(); ++i) by_id_[data.samples[i].identity].push_back(static_cast<int>(i));
    for (const auto& [id, idx] : by_id_) ids_.push_back(id);
    if (static_cast<int>(ids_.size()) < p_) {
      throw TrainingError("dataset has " + std::to_string(ids_.size()) + " identities, batch needs " + std::to_string(p_));
    }
  }

  std::vector<int> next(Rng& rng) {
    std::vector<int> ids = ids_;
    std::shuffle(ids.begin(), ids.end(), rng);
    std::vector<int> batch;
    for (int j = 0; j < p_; ++j) {
      std::vector<int> pool = by_id_[ids[j]];
      std::shuffle(pool.begin(), pool.end(), rng);
      for (int k = 0; k < k_; ++k) batch.push_back(pool[k % pool.size()]);
    }
    return batch;
  }

 private:
  int p_, k_;
  std::map<int, std::vector<int>> by_id_;
  std::vector<int> ids_;
};

}  // namespace detail

// Stage 1 ("pretrain") optimizes L_R + L_ID; stage 2 ("finetune") adds L_tri.
// The learning rate restarts at lr_initial in each stage.
template <class Model>
std::vector<EpochLog> train(Model& model, const Dataset& data, const TrainOptions& opt) {
  const auto& cfg = model.config();
  if (data.height != cfg.height || data.width != cfg.width) {
    throw TrainingError("dataset images are " + std::to_string(data.height) + "x" + std::to_string(data.width) +
                        ", model expects " + std::to_string(cfg.height) + "x" + std::to_string(cfg.width));
  }
  if (data.num_identities() > cfg.num_identities) {
    throw TrainingError("dataset has " + std::to_string(data.num_identities()) + " identities, classifier has " +
                        std::to_string(cfg.num_identities));
  }
  const auto& sch = opt.schedule;
  if (sch.batch_identities < 2 || sch.images_per_identity < 2) {
    throw TrainingError("batches need at least 2 identities with 2 images each");
  }
  const RegionGrid grid = make_region_grid(opt.m, opt.n, cfg.height, cfg.width);
  Rng rng = detail::derived_rng(opt.seed, 0x7EA1u);
  detail::PkSampler sampler(data, sch.batch_identities, sch.images_per_identity);
  auto params = model.parameters();
  const int steps =
      static_cast<int>((data.samples.size() + static_cast<std::size_t>(sch.batch_size()) - 1) / sch.batch_size());

  std::vector<EpochLog> log;
  int epoch = 0;
  for (int stage = 0; stage < 2; ++stage) {
    const int epochs = stage == 0 ? sch.pretrain_epochs : sch.finetune_epochs;
    for (int e = 0; e < epochs; ++e) {
      EpochLog row{++epoch, stage == 0 ? "pretrain" : "finetune", sch.lr_at(e)};
      for (int s = 0; s < steps; ++s) {
        std::vector<Tensor> images;
        std::vector<RegionSupervision> sups;
        std::vector<int> labels;
        for (int idx : sampler.next(rng)) {
          auto prep = prepare_sample(data.samples[idx].image, grid, opt.crop, cfg.stride(), opt.visibility_threshold, rng);
          images.push_back(std::move(prep.image));
          sups.push_back(std::move(prep.sup));
          labels.push_back(data.samples[idx].identity);
        }
        const BatchLosses losses = batch_loss(model, std::span<const Tensor>(images), std::span<const RegionSupervision>(sups),
                                              std::span<const int>(labels), stage == 1, opt.triplet, opt.flags);
        if (!std::isfinite(losses.total.item())) {
          std::ostringstream msg;
          msg << "non-finite loss at epoch " << epoch << " step " << s << ": L_R=" << losses.region
              << " L_ID=" << losses.identity << " L_tri=" << losses.triplet;
          throw TrainingError(msg.str());
        }
        backward(losses.total);
        if (sch.grad_clip > 0.0) {
          const double gnorm = grad_norm(params);
          if (gnorm > sch.grad_clip) scale_grads(params, sch.grad_clip / gnorm);
        }
        sgd_step(params, row.lr);
        row.region += losses.region / steps;
        row.identity += losses.identity / steps;
        row.triplet += losses.triplet / steps;
        row.total += losses.total.item() / steps;
      }
      log.push_back(row);
      if (opt.on_epoch) opt.on_epoch(row);
      if (opt.checkpoint_every > 0 && epoch % opt.checkpoint_every == 0) {
        std::filesystem::create_directories(opt.checkpoint_dir);
        save_checkpoint(opt.checkpoint_dir / ("epoch_" + std::to_string(epoch) + ".ckpt"), params);
      }
    }
  }
  return log;
}

inline void write_loss_csv(std::ostream& os, std::span<const EpochLog> log) {
  os << "epoch,stage,L_R,L_ID,L_tri,L\n";
  char buf[256];
  for (const auto& r : log) {
    std::snprintf(buf, sizeof buf, "%d,%s,%.12g,%.12g,%.12g,%.12g\n", r.epoch, r.stage.c_str(), r.region, r.identity,
                  r.triplet, r.total);
    os << buf;
  }
}

}  // namespace vpm
