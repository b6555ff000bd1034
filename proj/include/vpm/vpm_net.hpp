#pragma once

// Backbone, region locator, visibility scores and weighted pooling.

#include <cmath>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "vpm/descriptor.hpp"
#include "vpm/tensor.hpp"

namespace vpm {

struct BackboneConfig {
  std::vector<int> widths{8, 16, 32, 64};
  std::vector<int> strides{2, 2, 2, 2};
  int convs_per_stage = 2;  // first conv of a stage carries the stride
  int kernel = 3;
  double negative_slope = 0.1;  // 0 gives plain ReLU

  int downsampling() const {
    return std::accumulate(strides.begin(), strides.end(), 1, std::multiplies<>());
  }
  int channels() const { return widths.empty() ? 3 : widths.back(); }

  void validate() const {
    if (widths.empty() || widths.size() != strides.size()) {
      throw std::invalid_argument("backbone: widths and strides must be non-empty and of equal length");
    }
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (widths[i] < 1 || strides[i] < 1) throw std::invalid_argument("backbone: widths and strides must be >= 1");
    }
    if (convs_per_stage < 1 || kernel < 1 || kernel % 2 == 0) {
      throw std::invalid_argument("backbone: convs_per_stage >= 1 and odd kernel required");
    }
  }
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(const BackboneConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    int cin = 3;
    for (std::size_t s = 0; s < cfg_.widths.size(); ++s) {
      for (int j = 0; j < cfg_.convs_per_stage; ++j) {
        const int cout = cfg_.widths[s], k = cfg_.kernel;
        const std::string base = "backbone.stage" + std::to_string(s) + ".conv" + std::to_string(j);
        const double stddev = std::sqrt(2.0 / (cin * k * k));
        layers_.push_back({Parameter(base + ".weight", Tensor::randn({cout, cin, k, k}, stddev, rng)),
                           Parameter(base + ".bias", Tensor(Shape{cout})), j == 0 ? cfg_.strides[s] : 1});
        cin = cout;
      }
    }
  }

  const BackboneConfig& config() const { return cfg_; }

  // [3,H,W] -> [c,H/S,W/S]
  Var forward(const Var& image) const {
    const auto& s = image.shape();
    const int ds = cfg_.downsampling();
    if (s.size() != 3 || s[0] != 3 || s[1] % ds != 0 || s[2] % ds != 0) {
      throw ShapeError("backbone: image " + shape_str(s) + " must be [3,H,W] with H,W divisible by " + std::to_string(ds));
    }
    Var x = scale(add_scalar(image, -0.5), 4.0);  // [0,1] pixels to roughly unit scale
    for (const Layer& l : layers_) x = relu(conv2d(x, l.weight, l.bias, l.stride, cfg_.kernel / 2), cfg_.negative_slope);
    return x;
  }

  void collect(std::vector<Parameter*>& out) {
    for (Layer& l : layers_) {
      out.push_back(&l.weight);
      out.push_back(&l.bias);
    }
  }

 private:
  struct Layer {
    Parameter weight, bias;
    int stride;
  };
  BackboneConfig cfg_;
  std::vector<Layer> layers_;
};

// Per-pixel softmax over p regions of W g (+ b). T [c,h,w], W [p,c] -> [p,h,w].
inline Var locate_regions(const Var& features, const Var& weights, const Var* bias = nullptr) {
  const Shape& ts = features.shape();
  const Shape& ws = weights.shape();
  if (ts.size() != 3 || ws.size() != 2 || ws[1] != ts[0]) {
    throw ShapeError("locate_regions: feature tensor " + shape_str(ts) + " vs locator weights " + shape_str(ws));
  }
  if (bias && (bias->shape().size() != 1 || bias->dim(0) != ws[0])) {
    throw ShapeError("locate_regions: bias " + shape_str(bias->shape()) + " vs weights " + shape_str(ws));
  }
  const int c = ts[0], p = ws[0];
  const std::size_t hw = static_cast<std::size_t>(ts[1]) * ts[2];
  Tensor maps(Shape{p, ts[1], ts[2]});
  const double* t = features.value().data();
  const double* w = weights.value().data();
  double* m = maps.data();
  for (int i = 0; i < p; ++i) {
    double* mrow = m + i * hw;
    std::fill(mrow, mrow + hw, bias ? bias->value()[i] : 0.0);
    for (int ch = 0; ch < c; ++ch) {
      const double wv = w[static_cast<std::size_t>(i) * c + ch];
      const double* trow = t + ch * hw;
      for (std::size_t g = 0; g < hw; ++g) mrow[g] += wv * trow[g];
    }
  }
  for (std::size_t g = 0; g < hw; ++g) detail::softmax_into(m + g, m + g, p, hw);

  std::vector<Var> inputs{features, weights};
  if (bias) inputs.push_back(*bias);
  const bool has_bias = bias != nullptr;
  return Var::make(std::move(maps), std::move(inputs), [c, p, hw, has_bias](detail::Node& self) {
    const double* prob = self.value.data();
    const double* gm = self.grad.data();
    std::vector<double> glogit(static_cast<std::size_t>(p) * hw);
    for (std::size_t g = 0; g < hw; ++g) {
      double dot = 0.0;
      for (int i = 0; i < p; ++i) dot += gm[i * hw + g] * prob[i * hw + g];
      for (int i = 0; i < p; ++i) glogit[i * hw + g] = prob[i * hw + g] * (gm[i * hw + g] - dot);
    }
    const double* t = self.inputs[0]->value.data();
    const double* w = self.inputs[1]->value.data();
    double* gt = grad_of(self, 0);
    double* gw = grad_of(self, 1);
    double* gb = has_bias ? grad_of(self, 2) : nullptr;
    for (int i = 0; i < p; ++i) {
      const double* gl = glogit.data() + i * hw;
      if (gb) gb[i] += std::accumulate(gl, gl + hw, 0.0);
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t widx = static_cast<std::size_t>(i) * c + ch;
        if (gw) {
          double acc = 0.0;
          const double* trow = t + ch * hw;
          for (std::size_t g = 0; g < hw; ++g) acc += gl[g] * trow[g];
          gw[widx] += acc;
        }
        if (gt) {
          const double wv = w[widx];
          double* gtrow = gt + ch * hw;
          for (std::size_t g = 0; g < hw; ++g) gtrow[g] += wv * gl[g];
        }
      }
    }
  });
}

// C_i = sum over pixels of map i. [p,h,w] -> [p]
inline Var visibility_scores(const Var& maps) {
  if (maps.shape().size() != 3) throw ShapeError("visibility_scores: expected [p,h,w], got " + shape_str(maps.shape()));
  const int p = maps.dim(0);
  const std::size_t hw = static_cast<std::size_t>(maps.dim(1)) * maps.dim(2);
  Tensor c(Shape{p});
  for (int i = 0; i < p; ++i) {
    const double* m = maps.value().data() + i * hw;
    c[i] = std::accumulate(m, m + hw, 0.0);
  }
  return Var::make(std::move(c), {maps}, [p, hw](detail::Node& self) {
    double* gm = grad_of(self, 0);
    for (int i = 0; i < p; ++i) {
      for (std::size_t g = 0; g < hw; ++g) gm[i * hw + g] += self.grad[i];
    }
  });
}

// f_i = sum_g P(R_i|g) g / C_i. T [c,h,w], maps [p,h,w], C [p] -> [p,c]
inline Var extract_region_features(const Var& features, const Var& maps, const Var& scores) {
  const Shape& ts = features.shape();
  const Shape& ms = maps.shape();
  if (ts.size() != 3 || ms.size() != 3 || ts[1] != ms[1] || ts[2] != ms[2] || scores.shape() != Shape{ms[0]}) {
    throw ShapeError("extract_region_features: tensor " + shape_str(ts) + ", maps " + shape_str(ms) + ", scores " +
                     shape_str(scores.shape()));
  }
  const int c = ts[0], p = ms[0];
  const std::size_t hw = static_cast<std::size_t>(ts[1]) * ts[2];
  Tensor f(Shape{p, c});
  const double* t = features.value().data();
  const double* m = maps.value().data();
  for (int i = 0; i < p; ++i) {
    const double* mrow = m + i * hw;
    const double ci = scores.value()[i];
    for (int ch = 0; ch < c; ++ch) {
      const double* trow = t + ch * hw;
      double acc = 0.0;
      for (std::size_t g = 0; g < hw; ++g) acc += mrow[g] * trow[g];
      f.at(i, ch) = acc / ci;
    }
  }
  return Var::make(std::move(f), {features, maps, scores}, [c, p, hw](detail::Node& self) {
    const double* t = self.inputs[0]->value.data();
    const double* m = self.inputs[1]->value.data();
    const double* cs = self.inputs[2]->value.data();
    const double* fv = self.value.data();
    const double* gf = self.grad.data();
    double* gt = grad_of(self, 0);
    double* gm = grad_of(self, 1);
    double* gc = grad_of(self, 2);
    for (int i = 0; i < p; ++i) {
      const double inv = 1.0 / cs[i];
      const double* mrow = m + i * hw;
      if (gc) {
        double acc = 0.0;
        for (int ch = 0; ch < c; ++ch) acc += gf[i * c + ch] * fv[i * c + ch];
        gc[i] -= acc * inv;
      }
      for (int ch = 0; ch < c; ++ch) {
        const double g = gf[i * c + ch] * inv;
        if (g == 0.0) continue;
        if (gt) {
          double* gtrow = gt + ch * hw;
          for (std::size_t q = 0; q < hw; ++q) gtrow[q] += g * mrow[q];
        }
        if (gm) {
          const double* trow = t + ch * hw;
          double* gmrow = gm + i * hw;
          for (std::size_t q = 0; q < hw; ++q) gmrow[q] += g * trow[q];
        }
      }
    }
  });
}

// Identity classifier IP_i: FC(c -> reduce) then FC(reduce -> K).
class IdentityHead {
 public:
  IdentityHead() = default;
  IdentityHead(const std::string& name, int in_dim, int reduce_dim, int classes, Rng& rng)
      : fc1_w_(name + ".fc1.weight", Tensor::randn({reduce_dim, in_dim}, std::sqrt(1.0 / in_dim), rng)),
        fc1_b_(name + ".fc1.bias", Tensor(Shape{reduce_dim})),
        fc2_w_(name + ".fc2.weight", Tensor::randn({classes, reduce_dim}, std::sqrt(1.0 / reduce_dim), rng)),
        fc2_b_(name + ".fc2.bias", Tensor(Shape{classes})) {}

  Var logits(const Var& feature) const {
    return fully_connected(fully_connected(feature, fc1_w_, fc1_b_), fc2_w_, fc2_b_);
  }
  int classes() const { return fc2_w_.value().dim(0); }

  void collect(std::vector<Parameter*>& out) {
    for (Parameter* p : {&fc1_w_, &fc1_b_, &fc2_w_, &fc2_b_}) out.push_back(p);
  }

 private:
  Parameter fc1_w_, fc1_b_, fc2_w_, fc2_b_;
};

struct VpmConfig {
  BackboneConfig backbone;
  int height = 128;
  int width = 64;
  int m = 6;
  int n = 1;
  int num_identities = 20;
  int reduce_dim = 32;
  bool locator_bias = false;

  int p() const { return m * n; }
  int stride() const { return backbone.downsampling(); }
  int feature_h() const { return height / stride(); }
  int feature_w() const { return width / stride(); }

  void validate() const {
    backbone.validate();
    const int s = stride();
    if (height % s != 0 || width % s != 0) {
      throw std::invalid_argument("input " + std::to_string(height) + "x" + std::to_string(width) +
                                  " not divisible by down-sampling rate " + std::to_string(s));
    }
    if (m < 1 || n < 1 || m > feature_h() || n > feature_w()) {
      throw std::invalid_argument("region grid " + std::to_string(m) + "x" + std::to_string(n) +
                                  " does not fit the " + std::to_string(feature_h()) + "x" +
                                  std::to_string(feature_w()) + " feature map");
    }
    if (num_identities < 1 || reduce_dim < 1) throw std::invalid_argument("identity head sizes must be >= 1");
  }
};

class VpmModel {
 public:
  struct Output {
    Var tensor;    // T [c,h,w]
    Var maps;      // [p,h,w]
    Var scores;    // C [p]
    Var features;  // [p,c]
  };

  VpmModel(const VpmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    backbone_ = Backbone(cfg_.backbone, rng);
    const int c = cfg_.backbone.channels();
    locator_w_ = Parameter("locator.weight", Tensor::randn({cfg_.p(), c}, std::sqrt(1.0 / c), rng));
    if (cfg_.locator_bias) locator_b_ = Parameter("locator.bias", Tensor(Shape{cfg_.p()}));
    for (int i = 0; i < cfg_.p(); ++i) {
      heads_.emplace_back("head" + std::to_string(i + 1), c, cfg_.reduce_dim, cfg_.num_identities, rng);
    }
  }

  VpmModel(const VpmModel&) = delete;
  VpmModel& operator=(const VpmModel&) = delete;
  VpmModel(VpmModel&&) = default;
  VpmModel& operator=(VpmModel&&) = default;

  const VpmConfig& config() const { return cfg_; }
  int regions() const { return cfg_.p(); }
  std::span<const IdentityHead> heads() const { return heads_; }
  Parameter& locator_weight() { return locator_w_; }

  Output forward(const Var& image) const {
    Output o;
    o.tensor = backbone_.forward(image);
    o.maps = locate_regions(o.tensor, locator_w_, cfg_.locator_bias ? &locator_b_.var() : nullptr);
    o.scores = visibility_scores(o.maps);
    o.features = extract_region_features(o.tensor, o.maps, o.scores);
    return o;
  }

  Descriptor embed(const Tensor& image) const {
    const Output o = forward(Var(image));
    return Descriptor{cfg_.p(), cfg_.backbone.channels(),
                      std::vector<double>(o.scores.value().values().begin(), o.scores.value().values().end()),
                      std::vector<double>(o.features.value().values().begin(), o.features.value().values().end()),
                      std::nullopt, std::nullopt, {}};
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    backbone_.collect(out);
    out.push_back(&locator_w_);
    if (cfg_.locator_bias) out.push_back(&locator_b_);
    for (auto& h : heads_) h.collect(out);
    return out;
  }

 private:
  VpmConfig cfg_;
  Backbone backbone_;
  Parameter locator_w_;
  Parameter locator_b_;
  std::vector<IdentityHead> heads_;
};

// Global-average-pool model trained with the same losses, minus the region
// machinery. Its descriptor is a single region with visibility h*w.
class BaselineModel {
 public:
  struct Output {
    Var tensor;
    Var features;  // [1,c]
  };

  BaselineModel(const VpmConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    backbone_ = Backbone(cfg_.backbone, rng);
    head_ = IdentityHead("head1", cfg_.backbone.channels(), cfg_.reduce_dim, cfg_.num_identities, rng);
  }

  BaselineModel(const BaselineModel&) = delete;
  BaselineModel& operator=(const BaselineModel&) = delete;
  BaselineModel(BaselineModel&&) = default;
  BaselineModel& operator=(BaselineModel&&) = default;

  const VpmConfig& config() const { return cfg_; }
  int regions() const { return 1; }
  std::span<const IdentityHead> heads() const { return {&head_, 1}; }

  Output forward(const Var& image) const {
    Output o;
    o.tensor = backbone_.forward(image);
    o.features = reshape(global_average_pool(o.tensor), {1, cfg_.backbone.channels()});
    return o;
  }

  Descriptor embed(const Tensor& image) const {
    const Output o = forward(Var(image));
    const double hw = static_cast<double>(cfg_.feature_h()) * cfg_.feature_w();
    return Descriptor{1, cfg_.backbone.channels(), {hw},
                      std::vector<double>(o.features.value().values().begin(), o.features.value().values().end()),
                      std::nullopt, std::nullopt, {}};
  }

  std::vector<Parameter*> parameters() {
    std::vector<Parameter*> out;
    backbone_.collect(out);
    head_.collect(out);
    return out;
  }

 private:
  VpmConfig cfg_;
  Backbone backbone_;
  IdentityHead head_;
};

}  // namespace vpm
