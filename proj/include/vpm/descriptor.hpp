#pragma once

// Retrieval-time representation of one image and its batch file format.
//
// Batch file, version 1, little-endian:
//   magic    8 bytes "VPMDESC\0"
//   version  u32 = 1
//   records, each:
//     p u32 | c u32 | identity i32 (-1 = none) | camera i32 (-1 = none)
//     name (u32 length + bytes)
//     p x f64 visibility scores
//     p*c x f64 region features, region-major
//   footer:
//     count x u64 byte offset of each record from file start
//     count u64
//     magic 8 bytes "VPMINDX\0"

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "vpm/binary_io.hpp"

namespace vpm {

struct Descriptor {
  int p = 0;
  int c = 0;
  std::vector<double> visibility;  // C_1..C_p
  std::vector<double> features;    // p*c, row i is f_{i+1}
  std::optional<int> identity;
  std::optional<int> camera;
  std::string name;

  std::span<const double> feature(int i) const {
    return std::span<const double>(features).subspan(static_cast<std::size_t>(i) * c, static_cast<std::size_t>(c));
  }
  void validate() const {
    if (p < 1 || c < 1 || visibility.size() != static_cast<std::size_t>(p) ||
        features.size() != static_cast<std::size_t>(p) * c) {
      throw FormatError("descriptor sizes inconsistent with p=" + std::to_string(p) + ", c=" + std::to_string(c));
    }
  }
  friend bool operator==(const Descriptor&, const Descriptor&) = default;
};

inline constexpr std::string_view kDescriptorMagic{"VPMDESC\0", 8};
inline constexpr std::string_view kDescriptorIndexMagic{"VPMINDX\0", 8};
inline constexpr std::uint32_t kDescriptorVersion = 1;

inline void write_descriptors(std::ostream& os, std::span<const Descriptor> descs) {
  const auto start = os.tellp();
  os.write(kDescriptorMagic.data(), kDescriptorMagic.size());
  io::write_le<std::uint32_t>(os, kDescriptorVersion);
  std::vector<std::uint64_t> offsets;
  for (const Descriptor& d : descs) {
    d.validate();
    offsets.push_back(static_cast<std::uint64_t>(os.tellp() - start));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.p));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d.c));
    io::write_le<std::int32_t>(os, d.identity.value_or(-1));
    io::write_le<std::int32_t>(os, d.camera.value_or(-1));
    io::write_string(os, d.name);
    for (double v : d.visibility) io::write_f64(os, v);
    for (double v : d.features) io::write_f64(os, v);
  }
  for (auto off : offsets) io::write_le<std::uint64_t>(os, off);
  io::write_le<std::uint64_t>(os, offsets.size());
  os.write(kDescriptorIndexMagic.data(), kDescriptorIndexMagic.size());
}

namespace detail {

inline Descriptor read_descriptor_record(std::istream& is) {
  Descriptor d;
  d.p = static_cast<int>(io::read_le<std::uint32_t>(is));
  d.c = static_cast<int>(io::read_le<std::uint32_t>(is));
  if (d.p < 1 || d.c < 1 || d.p > 4096 || d.c > (1 << 20)) throw FormatError("implausible descriptor dimensions");
  const auto id = io::read_le<std::int32_t>(is);
  const auto cam = io::read_le<std::int32_t>(is);
  if (id >= 0) d.identity = id;
  if (cam >= 0) d.camera = cam;
  d.name = io::read_string(is);
  d.visibility.resize(d.p);
  for (double& v : d.visibility) v = io::read_f64(is);
  d.features.resize(static_cast<std::size_t>(d.p) * d.c);
  for (double& v : d.features) v = io::read_f64(is);
  return d;
}

}  // namespace detail

// Reads a complete batch held in memory; the footer index locates records.
inline std::vector<Descriptor> read_descriptors(const std::string& bytes) {
  constexpr std::size_t kTail = 8 + 8;
  if (bytes.size() < kDescriptorMagic.size() + 4 + kTail) throw FormatError("descriptor file too short");
  std::istringstream is(bytes);
  io::expect_magic(is, kDescriptorMagic);
  if (io::read_le<std::uint32_t>(is) != kDescriptorVersion) throw FormatError("unsupported descriptor file version");

  if (bytes.compare(bytes.size() - 8, 8, kDescriptorIndexMagic) != 0) throw FormatError("descriptor index footer missing");
  is.seekg(static_cast<std::streamoff>(bytes.size() - kTail));
  const auto count = io::read_le<std::uint64_t>(is);
  if (count > (bytes.size() - kTail) / 8) throw FormatError("descriptor index count corrupt");
  const std::size_t index_pos = bytes.size() - kTail - count * 8;
  is.seekg(static_cast<std::streamoff>(index_pos));
  std::vector<std::uint64_t> offsets(count);
  for (auto& off : offsets) off = io::read_le<std::uint64_t>(is);

  std::vector<Descriptor> out;
  out.reserve(count);
  for (auto off : offsets) {
    if (off >= index_pos) throw FormatError("descriptor offset beyond payload");
    is.seekg(static_cast<std::streamoff>(off));
    out.push_back(detail::read_descriptor_record(is));
    if (static_cast<std::size_t>(is.tellg()) > index_pos) throw FormatError("descriptor record overruns index");
  }
  return out;
}

inline void save_descriptors(const std::filesystem::path& path, std::span<const Descriptor> descs) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_descriptors(os, descs);
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline std::vector<Descriptor> load_descriptors(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream buf;
  buf << is.rdbuf();
  return read_descriptors(buf.str());
}

}  // namespace vpm
