#pragma once

// Shared helpers for the unit suites: central-difference gradient checks and
// tiny model/data configurations.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "vpm/datagen.hpp"
#include "vpm/tensor.hpp"
#include "vpm/vpm_net.hpp"

namespace vpm::test {

struct GradCheck {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
};

// Compares the analytic gradient of `loss()` with respect to each of `params`
// against central differences. Relative error uses max(|a|,|n|) with a floor
// so exact zeros compare by absolute error.
inline GradCheck check_gradients(const std::function<Var()>& loss, std::span<Parameter* const> params,
                                 double step = 1e-5, double floor = 1e-6) {
  zero_grad(params);
  backward(loss());
  std::vector<std::vector<double>> analytic;
  for (Parameter* p : params) analytic.emplace_back(p->grad().begin(), p->grad().end());
  zero_grad(params);

  GradCheck r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto v = params[k]->mutable_value().values();
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double orig = v[i];
      v[i] = orig + step;
      const double up = loss().item();
      v[i] = orig - step;
      const double down = loss().item();
      v[i] = orig;
      const double numeric = (up - down) / (2 * step);
      const double a = analytic[k].empty() ? 0.0 : analytic[k][i];
      const double abs_err = std::abs(numeric - a);
      r.max_abs_error = std::max(r.max_abs_error, abs_err);
      r.max_rel_error = std::max(r.max_rel_error, abs_err / std::max({std::abs(numeric), std::abs(a), floor}));
      ++r.checked;
    }
  }
  return r;
}

inline std::vector<Parameter*> ptrs(std::vector<Parameter>& ps) {
  std::vector<Parameter*> out;
  for (auto& p : ps) out.push_back(&p);
  return out;
}

// 16x8 input, S=4, 4x2 feature map.
inline VpmConfig tiny_config(int m = 3, int n = 1, int identities = 3) {
  VpmConfig c;
  c.backbone.widths = {3, 4};
  c.backbone.strides = {2, 2};
  c.backbone.convs_per_stage = 1;
  c.height = 16;
  c.width = 8;
  c.m = m;
  c.n = n;
  c.num_identities = identities;
  c.reduce_dim = 3;
  return c;
}

inline SynthSpec tiny_synth(int identities = 3, int images = 2, std::uint64_t seed = 4) {
  SynthSpec s;
  s.identities = identities;
  s.images_per_identity = images;
  s.height = 16;
  s.width = 8;
  s.max_shift = 1;
  s.seed = seed;
  return s;
}

}  // namespace vpm::test
