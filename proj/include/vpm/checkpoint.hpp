#pragma once

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   magic      8 bytes  "VPMCKPT\0"
//   version    u32      1
//   count      u32      number of tensors
//   count x {
//     name     u32 length + bytes
//     rank     u32
//     dims     rank x u32
//     payload  prod(dims) x f64
//   }

#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>

#include "vpm/binary_io.hpp"
#include "vpm/tensor.hpp"

namespace vpm {

inline constexpr std::string_view kCheckpointMagic{"VPMCKPT\0", 8};
inline constexpr std::uint32_t kCheckpointVersion = 1;

using TensorMap = std::map<std::string, Tensor>;

inline void write_checkpoint(std::ostream& os, const TensorMap& tensors) {
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  io::write_le<std::uint32_t>(os, kCheckpointVersion);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    io::write_string(os, name);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    for (double v : t.values()) io::write_f64(os, v);
  }
}

inline TensorMap read_checkpoint(std::istream& is) {
  io::expect_magic(is, kCheckpointMagic);
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const auto count = io::read_le<std::uint32_t>(is);
  TensorMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = io::read_string(is);
    const auto rank = io::read_le<std::uint32_t>(is);
    if (rank > 8) throw FormatError("tensor '" + name + "' has implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int>(io::read_le<std::uint32_t>(is));
    std::vector<double> values(numel(shape));
    for (double& v : values) v = io::read_f64(is);
    out.emplace(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

inline TensorMap snapshot(std::span<Parameter* const> params) {
  TensorMap out;
  for (const Parameter* p : params) out.emplace(p->name(), p->value());
  return out;
}

// Every parameter must be present with a matching shape.
inline void restore(std::span<Parameter* const> params, const TensorMap& tensors) {
  for (Parameter* p : params) {
    auto it = tensors.find(p->name());
    if (it == tensors.end()) throw FormatError("checkpoint is missing parameter '" + p->name() + "'");
    if (it->second.shape() != p->value().shape()) {
      throw FormatError("parameter '" + p->name() + "' has shape " + shape_str(it->second.shape()) +
                        " in checkpoint but " + shape_str(p->value().shape()) + " in model");
    }
    p->mutable_value() = it->second;
  }
}

inline void save_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(os, snapshot(params));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

inline void load_checkpoint(const std::filesystem::path& path, std::span<Parameter* const> params) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  restore(params, read_checkpoint(is));
}

}  // namespace vpm
