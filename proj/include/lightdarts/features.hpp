#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace lightdarts {

// T x F matrix of per-frame features, row-major, stored as float32 on disk.
struct FeatureMatrix {
  std::size_t frames = 0;
  std::size_t dims = 0;
  std::vector<float> values;

  float at(std::size_t t, std::size_t f) const { return values[t * dims + f]; }
  friend bool operator==(const FeatureMatrix&, const FeatureMatrix&) = default;
};

inline constexpr char kFeatureMagic[4] = {'F', 'A', 'F', 'D'};
inline constexpr std::uint32_t kFeatureVersion = 1;

// Header: magic "FAFD", u32 version, u32 T, u32 F (little-endian), then
// T*F float32 little-endian values.
void store_feature(const std::string& path, const FeatureMatrix& m);
// Throws FormatError (bad_magic, unsupported_version, truncated,
// dimension_overflow or malformed) or Error when the file cannot be opened.
FeatureMatrix load_feature(const std::string& path);

// Exactly `target` rows: longer inputs keep their first rows, shorter ones
// repeat cyclically (row k of the output is input row k mod T).
FeatureMatrix fix_frames(const FeatureMatrix& m, std::size_t target = 400);

}  // namespace lightdarts
