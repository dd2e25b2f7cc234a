#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

#include "lightdarts/supernet.hpp"

namespace lightdarts {

inline constexpr char kModelMagic[4] = {'F', 'A', 'D', 'M'};
inline constexpr std::uint32_t kModelVersion = 1;

// A trained discrete network with population norm statistics, plus the frame
// count its inputs were fixed to.
struct Model {
  Network network;
  std::size_t frames = 0;
};

// Layout, little-endian: magic "FADM", u32 version, u32 length + config echo
// (key=value lines), u32 length + genotype text, u64 count + float64
// parameters in traversal order, u64 count + float64 norm statistics (per
// norm layer, means then variances).
std::string serialize_model(Network& net, std::size_t frames);
// Throws FormatError on any mismatch between header, genotype and payload.
Model deserialize_model(std::string_view bytes);

void save_model(const std::string& path, Network& net, std::size_t frames);
Model load_model(const std::string& path);

}  // namespace lightdarts
