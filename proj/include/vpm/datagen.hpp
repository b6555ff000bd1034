#pragma once

// Synthetic pedestrian-like images, partial query construction, and PPM
// image-folder ingestion.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <regex>
#include <string>
#include <vector>

#include "vpm/region_supervision.hpp"
#include "vpm/tensor.hpp"

namespace vpm {

using Color = std::array<double, 3>;
using Palette = std::vector<Color>;  // one color per band, top to bottom

struct CropRecord {
  double gamma = 1.0;
  CropStrategy strategy = CropStrategy::kTop;
  CropRect rect;
};

struct Sample {
  Tensor image;  // [3,H,W], values in [0,1]
  int identity = 0;
  int camera = 0;
  std::string name;
  std::optional<CropRecord> crop;
};

struct Dataset {
  int height = 0;
  int width = 0;
  std::vector<Sample> samples;

  int num_identities() const {
    int k = 0;
    for (const auto& s : samples) k = std::max(k, s.identity);
    return k;
  }
  std::size_t size() const { return samples.size(); }
};

// Bilinear resampling of `src` (a [c,H,W] image) restricted to `rect` into an
// out_h x out_w image. Pixel centres are aligned (half-pixel convention).
inline Tensor crop_resize(const Tensor& src, const PixelRect& rect, int out_h, int out_w) {
  const int c = src.dim(0), ih = src.dim(1), iw = src.dim(2);
  if (rect.x1 < 0 || rect.y1 < 0 || rect.x2 > iw || rect.y2 > ih || rect.width() <= 0 || rect.height() <= 0) {
    throw std::invalid_argument("crop_resize: rect outside image");
  }
  if (rect == PixelRect{0, 0, iw, ih} && out_h == ih && out_w == iw) return src;
  Tensor out(Shape{c, out_h, out_w});
  const double sy = static_cast<double>(rect.height()) / out_h;
  const double sx = static_cast<double>(rect.width()) / out_w;
  for (int y = 0; y < out_h; ++y) {
    double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, rect.height() - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, rect.height() - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, rect.width() - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, rect.width() - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const double a = src.at(ch, rect.y1 + y0, rect.x1 + x0), b = src.at(ch, rect.y1 + y0, rect.x1 + x1);
        const double d = src.at(ch, rect.y1 + y1, rect.x1 + x0), e = src.at(ch, rect.y1 + y1, rect.x1 + x1);
        out.at(ch, y, x) = (1 - wy) * ((1 - wx) * a + wx * b) + wy * ((1 - wx) * d + wx * e);
      }
    }
  }
  return out;
}

struct SynthSpec {
  int identities = 20;
  int images_per_identity = 12;
  int height = 128;
  int width = 64;
  int cameras = 2;
  double noise = 0.05;             // Gaussian sigma
  double brightness_jitter = 0.2;  // factor drawn from [1-j, 1+j]
  int max_shift = 3;               // horizontal shift in pixels
  std::uint64_t seed = 1;
  std::vector<Palette> palettes;   // optional explicit palette per identity

  void validate() const {
    if (identities < 2) throw std::invalid_argument("synth: identities must be >= 2");
    if (images_per_identity < 2) throw std::invalid_argument("synth: images_per_identity must be >= 2");
    if (height < 12 || width < 8) throw std::invalid_argument("synth: image too small");
    if (cameras < 1) throw std::invalid_argument("synth: cameras must be >= 1");
    if (noise < 0 || brightness_jitter < 0 || brightness_jitter >= 1 || max_shift < 0) {
      throw std::invalid_argument("synth: jitter parameters out of range");
    }
    if (!palettes.empty() && static_cast<int>(palettes.size()) != identities) {
      throw std::invalid_argument("synth: palettes must list one palette per identity");
    }
  }
};

inline constexpr int kSynthBands = 6;

namespace detail {

inline Rng derived_rng(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b), 0x5eedu};
  return Rng(seq);
}

// Horizontal extent of the figure in band `band` as fractions of the width:
// head, shoulders, chest, waist, thighs, shins. Every band has its own
// silhouette, so a band can be told apart from its shape alone.
inline bool figure_covers(int band, double u) {
  switch (band) {
    case 0: return u >= 0.38 && u < 0.62;
    case 1: return u >= 0.10 && u < 0.90;
    case 2: return u >= 0.18 && u < 0.82;
    case 3: return u >= 0.26 && u < 0.74;
    case 4: return (u >= 0.22 && u < 0.47) || (u >= 0.53 && u < 0.78);
    default: return (u >= 0.28 && u < 0.44) || (u >= 0.56 && u < 0.72);
  }
}

}  // namespace detail

inline Palette random_palette(Rng& rng) {
  std::uniform_real_distribution<double> c(0.05, 0.95);
  Palette p(kSynthBands);
  for (auto& col : p) col = {c(rng), c(rng), c(rng)};
  return p;
}

// Renders one image of an identity. `shift` moves the figure horizontally.
inline Tensor render_figure(const Palette& palette, int height, int width, double brightness, int shift,
                            double background, double noise, Rng& rng) {
  Tensor img(Shape{3, height, width});
  std::normal_distribution<double> gauss(0.0, noise > 0 ? noise : 1.0);
  const int band_h = height / kSynthBands;
  for (int y = 0; y < height; ++y) {
    const int band = std::min(y / band_h, kSynthBands - 1);
    for (int x = 0; x < width; ++x) {
      const double u = (x - shift + 0.5) / width;
      const bool on = detail::figure_covers(band, u);
      for (int ch = 0; ch < 3; ++ch) {
        double v = on ? palette[band][ch] * brightness : background;
        if (noise > 0) v += gauss(rng);
        img.at(ch, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return img;
}

// Pure function of `spec`. Identity k (1-based) owns a stack of six band
// colors; each image draws its own brightness, shift, background and noise
// from a stream keyed by (seed, identity, index). Cameras cycle per identity.
inline Dataset synth_generate(const SynthSpec& spec) {
  spec.validate();
  Dataset ds{spec.height, spec.width, {}};
  for (int k = 0; k < spec.identities; ++k) {
    Palette palette;
    if (!spec.palettes.empty()) {
      palette = spec.palettes[k];
    } else {
      Rng prng = detail::derived_rng(spec.seed, 0xA11CEu, static_cast<std::uint64_t>(k));
      palette = random_palette(prng);
    }
    for (int i = 0; i < spec.images_per_identity; ++i) {
      Rng rng = detail::derived_rng(spec.seed, static_cast<std::uint64_t>(k) + 1, static_cast<std::uint64_t>(i));
      std::uniform_real_distribution<double> unit(0.0, 1.0);
      const double brightness = 1.0 + spec.brightness_jitter * (2.0 * unit(rng) - 1.0);
      const int shift =
          spec.max_shift > 0 ? std::uniform_int_distribution<int>(-spec.max_shift, spec.max_shift)(rng) : 0;
      const double background = spec.brightness_jitter > 0 || spec.noise > 0 ? 0.3 + 0.4 * unit(rng) : 0.5;
      Sample s;
      s.image = render_figure(palette, spec.height, spec.width, brightness, shift, background, spec.noise, rng);
      s.identity = k + 1;
      s.camera = i % spec.cameras;
      s.name = std::to_string(k + 1) + "_" + std::to_string(s.camera) + "_" + std::to_string(i);
      ds.samples.push_back(std::move(s));
    }
  }
  return ds;
}

// Crop at exactly ratio gamma (up to one-pixel rounding). Top/bottom keep the
// full width; uniform draws the width ratio from [gamma, 1] and a free
// position; bilateral picks top or bottom.
inline CropRect exact_ratio_crop(double gamma, CropStrategy strategy, int height, int width, Rng& rng) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("crop ratio must lie in (0,1]");
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  if (strategy == CropStrategy::kBilateral) strategy = unit(rng) < 0.5 ? CropStrategy::kTop : CropStrategy::kBottom;
  if (strategy != CropStrategy::kUniform) {
    const int h = std::clamp(static_cast<int>(std::lround(gamma * height)), 1, height);
    return strategy == CropStrategy::kTop ? CropRect{0, 0, width, h} : CropRect{0, height - h, width, height};
  }
  const double rw = gamma + (1.0 - gamma) * unit(rng);
  const int w = std::clamp(static_cast<int>(std::lround(rw * width)), 1, width);
  const int h = std::clamp(static_cast<int>(std::lround(gamma * height * width / w)), 1, height);
  const int x1 = std::uniform_int_distribution<int>(0, width - w)(rng);
  const int y1 = std::uniform_int_distribution<int>(0, height - h)(rng);
  return {x1, y1, x1 + w, y1 + h};
}

inline Dataset build_partial_queries(const Dataset& queries, double gamma, CropStrategy strategy,
                                     std::uint64_t seed = 0) {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("crop ratio must lie in (0,1]");
  Dataset out{queries.height, queries.width, {}};
  Rng rng = detail::derived_rng(seed, 0x9E77u);
  for (const Sample& s : queries.samples) {
    Sample q = s;
    const CropRect rect = exact_ratio_crop(gamma, strategy, queries.height, queries.width, rng);
    q.image = crop_resize(s.image, rect, queries.height, queries.width);
    q.crop = CropRecord{gamma, strategy, rect};
    out.samples.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// PPM (binary P6, maxval 255)

inline std::uint8_t quantize(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

inline void write_ppm(std::ostream& os, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3) throw ShapeError("write_ppm: expected [3,H,W], got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  os << "P6\n" << w << ' ' << h << "\n255\n";
  std::vector<char> buf(static_cast<std::size_t>(w) * h * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) buf[(static_cast<std::size_t>(y) * w + x) * 3 + c] = static_cast<char>(quantize(image.at(c, y, x)));
    }
  }
  os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& image) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_ppm(os, image);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline Tensor read_ppm(std::istream& is) {
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  auto number = [&](const char* what, int lo) {
    const std::string t = token();
    int v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || v < lo) throw FormatError(std::string("bad PPM ") + what);
    return v;
  };
  const std::string magic = token();
  if (magic != "P6" && magic != "P3") throw FormatError("not a PPM image");
  const int w = number("width", 1), h = number("height", 1), maxval = number("maxval", 1);
  if (maxval > 255) throw FormatError("16-bit PPM not supported");
  if (static_cast<long>(w) * h > (1L << 26)) throw FormatError("PPM too large");
  Tensor img(Shape{3, h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < 3; ++c) {
        int v;
        if (magic == "P6") {
          char ch;
          if (!is.get(ch)) throw FormatError("truncated PPM payload");
          v = static_cast<unsigned char>(ch);
        } else {
          v = number("sample", 0);
          if (v > maxval) throw FormatError("PPM sample exceeds maxval");
        }
        img.at(c, y, x) = static_cast<double>(v) / maxval;
      }
    }
  }
  return img;
}

inline Tensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  return read_ppm(is);
}

// Writes every sample as <identity>_<camera>_<index>.ppm.
inline void write_image_folder(const std::filesystem::path& dir, const Dataset& ds) {
  std::filesystem::create_directories(dir);
  std::map<int, int> counters;
  for (const Sample& s : ds.samples) {
    const int idx = counters[s.identity]++;
    write_ppm(dir / (std::to_string(s.identity) + "_" + std::to_string(s.camera) + "_" + std::to_string(idx) + ".ppm"),
              s.image);
  }
}

struct LoadResult {
  Dataset dataset;
  std::vector<std::string> warnings;
};

// Loads `<identity>_<camera>_<index>.ppm` files, resized to height x width.
// Identities are relabelled densely to 1..K in ascending order of the raw id.
inline LoadResult load_image_folder(const std::filesystem::path& dir, int height, int width) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  static const std::regex pattern(R"((\d+)_(\d+)_(\d+)\.(\w+))");
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  struct Raw {
    long identity, camera, index;
    Sample sample;
  };
  std::vector<Raw> raw;
  LoadResult result;
  for (const auto& f : files) {
    const std::string name = f.filename().string();
    std::smatch m;
    if (!std::regex_match(name, m, pattern)) {
      result.warnings.push_back("skipping " + name + ": name does not match <identity>_<camera>_<index>.<ext>");
      continue;
    }
    if (m[4] != "ppm" && m[4] != "PPM") {
      result.warnings.push_back("skipping " + name + ": unsupported image format");
      continue;
    }
    try {
      Tensor img = read_ppm(f);
      Sample s;
      s.image = crop_resize(img, {0, 0, img.dim(2), img.dim(1)}, height, width);
      s.camera = static_cast<int>(std::stol(m[2]));
      s.name = f.stem().string();
      raw.push_back({std::stol(m[1]), std::stol(m[2]), std::stol(m[3]), std::move(s)});
    } catch (const std::exception& e) {
      result.warnings.push_back("skipping " + name + ": " + e.what());
    }
  }
  if (raw.empty()) throw std::runtime_error("no usable images in " + dir.string());
  std::map<long, int> dense;
  for (const auto& r : raw) dense.emplace(r.identity, 0);
  int next = 1;
  for (auto& [id, label] : dense) label = next++;
  std::stable_sort(raw.begin(), raw.end(), [](const Raw& a, const Raw& b) {
    return std::tie(a.identity, a.camera, a.index) < std::tie(b.identity, b.camera, b.index);
  });
  result.dataset = Dataset{height, width, {}};
  for (auto& r : raw) {
    r.sample.identity = dense[r.identity];
    result.dataset.samples.push_back(std::move(r.sample));
  }
  return result;
}

}  // namespace vpm
