#pragma once

// Run configuration: every knob of a run in one flat key=value file with
// [sections]. Serialization writes every field, so parse(serialize(c)) == c.

#include <charconv>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "vpm/datagen.hpp"
#include "vpm/region_supervision.hpp"
#include "vpm/training.hpp"
#include "vpm/vpm_net.hpp"

namespace vpm {

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string field, const std::string& msg)
      : std::invalid_argument(field + ": " + msg), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DataSpec {
  int identities = 20;
  int images_per_identity = 12;
  int cameras = 2;
  double noise = 0.05;
  double brightness_jitter = 0.2;
  int max_shift = 3;
  int test_identities = 200;
  int test_images_per_identity = 4;
  friend bool operator==(const DataSpec&, const DataSpec&) = default;
};

enum class ModelKind { kVpm, kBaseline };

inline std::string_view to_string(ModelKind k) { return k == ModelKind::kVpm ? "vpm" : "baseline"; }

struct RunConfig {
  int m = 6;
  int n = 1;
  int height = 128;
  int width = 64;
  BackboneConfig backbone;
  bool locator_bias = false;
  int reduce_dim = 32;
  CropSpec crop;
  double visibility_threshold = 0.25;
  TrainSchedule schedule;
  TripletConfig triplet;
  AblationFlags ablation;
  DataSpec data;
  ModelKind model = ModelKind::kVpm;
  std::uint64_t seed = 1;
  int checkpoint_every = 0;

  int p() const { return m * n; }

  VpmConfig model_config() const {
    VpmConfig c;
    c.backbone = backbone;
    c.height = height;
    c.width = width;
    c.m = m;
    c.n = n;
    c.num_identities = data.identities;
    c.reduce_dim = reduce_dim;
    c.locator_bias = locator_bias;
    return c;
  }

  // Independent streams for each consumer of randomness, all from `seed`.
  std::uint64_t stream(std::uint64_t tag) const {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }

  SynthSpec train_spec() const {
    SynthSpec s;
    s.identities = data.identities;
    s.images_per_identity = data.images_per_identity;
    s.height = height;
    s.width = width;
    s.cameras = data.cameras;
    s.noise = data.noise;
    s.brightness_jitter = data.brightness_jitter;
    s.max_shift = data.max_shift;
    s.seed = stream(1);
    return s;
  }

  SynthSpec test_spec() const {
    SynthSpec s = train_spec();
    s.identities = data.test_identities;
    s.images_per_identity = data.test_images_per_identity;
    s.seed = stream(2);
    return s;
  }

  std::uint64_t init_seed() const { return stream(3); }

  TrainOptions train_options() const {
    TrainOptions o;
    o.m = m;
    o.n = n;
    o.crop = crop;
    o.visibility_threshold = visibility_threshold;
    o.schedule = schedule;
    o.triplet = triplet;
    o.flags = ablation;
    o.seed = stream(4);
    o.checkpoint_every = checkpoint_every;
    return o;
  }

  // Cross-field checks; throws ConfigError naming the offending field.
  void validate() const {
    auto req = [](bool ok, const char* field, const std::string& msg) {
      if (!ok) throw ConfigError(field, msg);
    };
    req(m >= 1, "grid.m", "must be >= 1");
    req(n >= 1, "grid.n", "must be >= 1");
    req(height >= 1, "image.height", "must be >= 1");
    req(width >= 1, "image.width", "must be >= 1");
    req(!backbone.widths.empty() && backbone.widths.size() == backbone.strides.size(), "backbone.widths",
        "needs one entry per stride");
    for (int w : backbone.widths) req(w >= 1, "backbone.widths", "entries must be >= 1");
    for (int s : backbone.strides) req(s >= 1, "backbone.strides", "entries must be >= 1");
    req(backbone.convs_per_stage >= 1, "backbone.convs_per_stage", "must be >= 1");
    req(backbone.negative_slope >= 0 && backbone.negative_slope < 1, "backbone.negative_slope", "must lie in [0,1)");
    req(backbone.kernel >= 1 && backbone.kernel % 2 == 1, "backbone.kernel", "must be odd");
    const int s = backbone.downsampling();
    req(height % s == 0, "image.height", "not divisible by down-sampling rate " + std::to_string(s));
    req(width % s == 0, "image.width", "not divisible by down-sampling rate " + std::to_string(s));
    req(m <= height / s, "grid.m", "exceeds feature-map height " + std::to_string(height / s));
    req(n <= width / s, "grid.n", "exceeds feature-map width " + std::to_string(width / s));
    req(m * n <= 255, "grid.m", "at most 255 regions");
    req(reduce_dim >= 1, "head.reduce_dim", "must be >= 1");
    req(crop.gamma_min > 0 && crop.gamma_min <= crop.gamma_max, "crop.gamma_min", "must satisfy 0 < gamma_min <= gamma_max");
    req(crop.gamma_max <= 1, "crop.gamma_max", "must be <= 1");
    req(visibility_threshold > 0 && visibility_threshold <= 1, "crop.visibility_threshold", "must lie in (0,1]");
    req(schedule.pretrain_epochs >= 0, "schedule.pretrain_epochs", "must be >= 0");
    req(schedule.finetune_epochs >= 0, "schedule.finetune_epochs", "must be >= 0");
    req(schedule.lr_initial >= 0, "schedule.lr_initial", "must be >= 0");
    req(schedule.lr_decayed >= 0, "schedule.lr_decayed", "must be >= 0");
    req(schedule.grad_clip >= 0, "schedule.grad_clip", "must be >= 0");
    req(schedule.decay_epoch >= 0, "schedule.decay_epoch", "must be >= 0");
    req(schedule.batch_identities >= 2, "schedule.batch_identities", "must be >= 2");
    req(schedule.images_per_identity >= 2, "schedule.images_per_identity", "must be >= 2");
    req(schedule.batch_identities <= data.identities, "schedule.batch_identities", "exceeds data.identities");
    req(triplet.margin >= 0, "triplet.margin", "must be >= 0");
    req(data.identities >= 2, "data.identities", "must be >= 2");
    req(data.images_per_identity >= 2, "data.images_per_identity", "must be >= 2");
    req(data.cameras >= 1, "data.cameras", "must be >= 1");
    req(data.noise >= 0, "data.noise", "must be >= 0");
    req(data.brightness_jitter >= 0 && data.brightness_jitter < 1, "data.brightness_jitter", "must lie in [0,1)");
    req(data.max_shift >= 0, "data.max_shift", "must be >= 0");
    req(data.test_identities >= 2, "data.test_identities", "must be >= 2");
    req(data.test_images_per_identity >= 2, "data.test_images_per_identity", "must be >= 2");
    req(height >= 12 && width >= 8, "image.height", "synthetic images need at least 12x8 pixels");
    req(checkpoint_every >= 0, "run.checkpoint_every", "must be >= 0");
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline std::string fmt_ints(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += std::to_string(v[i]);
  }
  return out;
}

template <class T>
T parse_number(const std::string& field, std::string_view s) {
  T v{};
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError(field, "cannot parse '" + std::string(s) + "'");
  return v;
}

inline bool parse_bool(const std::string& field, std::string_view s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(field, "expected true or false, got '" + std::string(s) + "'");
}

inline std::vector<int> parse_ints(const std::string& field, std::string_view s) {
  std::vector<int> out;
  while (!s.empty()) {
    const auto comma = s.find(',');
    std::string_view tok = s.substr(0, comma);
    while (!tok.empty() && tok.front() == ' ') tok.remove_prefix(1);
    while (!tok.empty() && tok.back() == ' ') tok.remove_suffix(1);
    out.push_back(parse_number<int>(field, tok));
    if (comma == std::string_view::npos) break;
    s.remove_prefix(comma + 1);
  }
  if (out.empty()) throw ConfigError(field, "empty list");
  return out;
}

struct Field {
  const char* section;
  const char* key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string& field, std::string_view)> set;
};

#define VPM_INT_FIELD(sec, key, member)                                                           \
  Field{sec, key, [](const RunConfig& c) { return std::to_string(c.member); },                    \
        [](RunConfig& c, const std::string& f, std::string_view v) { c.member = parse_number<int>(f, v); }}
#define VPM_DOUBLE_FIELD(sec, key, member)                                                        \
  Field{sec, key, [](const RunConfig& c) { return fmt_double(c.member); },                        \
        [](RunConfig& c, const std::string& f, std::string_view v) { c.member = parse_number<double>(f, v); }}
#define VPM_BOOL_FIELD(sec, key, member)                                                          \
  Field{sec, key, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },    \
        [](RunConfig& c, const std::string& f, std::string_view v) { c.member = parse_bool(f, v); }}

inline const std::vector<Field>& config_fields() {
  static const std::vector<Field> fields{
      VPM_INT_FIELD("grid", "m", m),
      VPM_INT_FIELD("grid", "n", n),
      VPM_INT_FIELD("image", "height", height),
      VPM_INT_FIELD("image", "width", width),
      Field{"backbone", "widths", [](const RunConfig& c) { return fmt_ints(c.backbone.widths); },
            [](RunConfig& c, const std::string& f, std::string_view v) { c.backbone.widths = parse_ints(f, v); }},
      Field{"backbone", "strides", [](const RunConfig& c) { return fmt_ints(c.backbone.strides); },
            [](RunConfig& c, const std::string& f, std::string_view v) { c.backbone.strides = parse_ints(f, v); }},
      VPM_INT_FIELD("backbone", "convs_per_stage", backbone.convs_per_stage),
      VPM_INT_FIELD("backbone", "kernel", backbone.kernel),
      VPM_DOUBLE_FIELD("backbone", "negative_slope", backbone.negative_slope),
      VPM_BOOL_FIELD("backbone", "locator_bias", locator_bias),
      VPM_INT_FIELD("head", "reduce_dim", reduce_dim),
      Field{"crop", "strategy", [](const RunConfig& c) { return std::string(to_string(c.crop.strategy)); },
            [](RunConfig& c, const std::string& f, std::string_view v) {
              try {
                c.crop.strategy = parse_crop_strategy(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(f, e.what());
              }
            }},
      VPM_DOUBLE_FIELD("crop", "gamma_min", crop.gamma_min),
      VPM_DOUBLE_FIELD("crop", "gamma_max", crop.gamma_max),
      VPM_DOUBLE_FIELD("crop", "visibility_threshold", visibility_threshold),
      VPM_INT_FIELD("schedule", "pretrain_epochs", schedule.pretrain_epochs),
      VPM_INT_FIELD("schedule", "finetune_epochs", schedule.finetune_epochs),
      VPM_DOUBLE_FIELD("schedule", "lr_initial", schedule.lr_initial),
      VPM_DOUBLE_FIELD("schedule", "lr_decayed", schedule.lr_decayed),
      VPM_INT_FIELD("schedule", "decay_epoch", schedule.decay_epoch),
      VPM_INT_FIELD("schedule", "batch_identities", schedule.batch_identities),
      VPM_INT_FIELD("schedule", "images_per_identity", schedule.images_per_identity),
      VPM_DOUBLE_FIELD("schedule", "grad_clip", schedule.grad_clip),
      VPM_DOUBLE_FIELD("triplet", "margin", triplet.margin),
      Field{"triplet", "mining",
            [](const RunConfig& c) { return std::string(c.triplet.mining == Mining::kBatchHard ? "batch-hard" : "all"); },
            [](RunConfig& c, const std::string& f, std::string_view v) {
              if (v == "batch-hard") {
                c.triplet.mining = Mining::kBatchHard;
              } else if (v == "all") {
                c.triplet.mining = Mining::kAll;
              } else {
                throw ConfigError(f, "expected batch-hard or all");
              }
            }},
      VPM_BOOL_FIELD("ablation", "mask_id_loss", ablation.mask_id_loss),
      VPM_BOOL_FIELD("ablation", "mask_triplet_loss", ablation.mask_triplet_loss),
      VPM_BOOL_FIELD("ablation", "use_visibility_at_match", ablation.use_visibility_at_match),
      VPM_INT_FIELD("data", "identities", data.identities),
      VPM_INT_FIELD("data", "images_per_identity", data.images_per_identity),
      VPM_INT_FIELD("data", "cameras", data.cameras),
      VPM_DOUBLE_FIELD("data", "noise", data.noise),
      VPM_DOUBLE_FIELD("data", "brightness_jitter", data.brightness_jitter),
      VPM_INT_FIELD("data", "max_shift", data.max_shift),
      VPM_INT_FIELD("data", "test_identities", data.test_identities),
      VPM_INT_FIELD("data", "test_images_per_identity", data.test_images_per_identity),
      Field{"run", "model", [](const RunConfig& c) { return std::string(to_string(c.model)); },
            [](RunConfig& c, const std::string& f, std::string_view v) {
              if (v == "vpm") {
                c.model = ModelKind::kVpm;
              } else if (v == "baseline") {
                c.model = ModelKind::kBaseline;
              } else {
                throw ConfigError(f, "expected vpm or baseline");
              }
            }},
      Field{"run", "seed", [](const RunConfig& c) { return std::to_string(c.seed); },
            [](RunConfig& c, const std::string& f, std::string_view v) { c.seed = parse_number<std::uint64_t>(f, v); }},
      VPM_INT_FIELD("run", "checkpoint_every", checkpoint_every),
  };
  return fields;
}

#undef VPM_INT_FIELD
#undef VPM_DOUBLE_FIELD
#undef VPM_BOOL_FIELD

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

}  // namespace detail

inline std::string serialize(const RunConfig& c) {
  std::ostringstream os;
  std::string section;
  for (const auto& f : detail::config_fields()) {
    if (section != f.section) {
      if (!section.empty()) os << '\n';
      section = f.section;
      os << '[' << section << "]\n";
    }
    os << f.key << " = " << f.get(c) << '\n';
  }
  return os.str();
}

inline bool operator==(const RunConfig& a, const RunConfig& b) { return serialize(a) == serialize(b); }

// Keys not given keep their defaults. Unknown sections or keys are errors.
inline RunConfig parse_config(std::string_view text, RunConfig base = {}) {
  std::string section;
  int lineno = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = detail::trim(text.substr(0, nl));
    text.remove_prefix(nl == std::string_view::npos ? text.size() : nl + 1);
    ++lineno;
    if (line.empty() || line.front() == '#' || line.front() == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError("line " + std::to_string(lineno), "unterminated section header");
      section = std::string(detail::trim(line.substr(1, line.size() - 2)));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError("line " + std::to_string(lineno), "expected key = value");
    const std::string key(detail::trim(line.substr(0, eq)));
    const std::string_view value = detail::trim(line.substr(eq + 1));
    const std::string field = section + "." + key;
    bool found = false;
    for (const auto& f : detail::config_fields()) {
      if (section == f.section && key == f.key) {
        f.set(base, field, value);
        found = true;
        break;
      }
    }
    if (!found) throw ConfigError(field, "unknown setting");
  }
  return base;
}

}  // namespace vpm
