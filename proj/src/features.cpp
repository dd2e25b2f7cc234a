#include "lightdarts/features.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "lightdarts/error.hpp"

namespace lightdarts {

namespace {

// Feature files hold at most this many values (16 GiB of float32).
constexpr std::uint64_t kMaxValues = std::uint64_t{1} << 32;

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
}

}  // namespace

void store_feature(const std::string& path, const FeatureMatrix& m) {
  if (m.values.size() != m.frames * m.dims) {
    throw ShapeError("store_feature: " + std::to_string(m.values.size()) + " values for " + std::to_string(m.frames) +
                     "x" + std::to_string(m.dims));
  }
  if (m.frames > std::numeric_limits<std::uint32_t>::max() || m.dims > std::numeric_limits<std::uint32_t>::max()) {
    throw FormatError(FormatError::Kind::dimension_overflow, "store_feature: dimensions exceed 32 bits");
  }
  std::string out(kFeatureMagic, 4);
  put_u32(out, kFeatureVersion);
  put_u32(out, static_cast<std::uint32_t>(m.frames));
  put_u32(out, static_cast<std::uint32_t>(m.dims));
  out.reserve(out.size() + 4 * m.values.size());
  for (float v : m.values) put_u32(out, std::bit_cast<std::uint32_t>(v));

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("store_feature: cannot open " + path + " for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw Error("store_feature: write failed for " + path);
}

FeatureMatrix load_feature(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("load_feature: cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());

  if (bytes.size() < 4 || std::memcmp(p, kFeatureMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, "load_feature: " + path + ": bad magic, expected FAFD");
  }
  if (bytes.size() < 16) {
    throw FormatError(FormatError::Kind::truncated, "load_feature: " + path + ": header truncated");
  }
  const std::uint32_t version = get_u32(p + 4);
  if (version != kFeatureVersion) {
    throw FormatError(FormatError::Kind::unsupported_version,
                      "load_feature: " + path + ": unsupported version " + std::to_string(version));
  }
  const std::uint64_t t = get_u32(p + 8);
  const std::uint64_t f = get_u32(p + 12);
  if (t == 0 || f == 0) {
    throw FormatError(FormatError::Kind::malformed, "load_feature: " + path + ": zero dimension");
  }
  const std::uint64_t count = t * f;
  if (count > kMaxValues) {
    throw FormatError(FormatError::Kind::dimension_overflow,
                      "load_feature: " + path + ": " + std::to_string(t) + "x" + std::to_string(f) + " is too large");
  }
  const std::uint64_t payload = bytes.size() - 16;
  if (payload < 4 * count) {
    throw FormatError(FormatError::Kind::truncated, "load_feature: " + path + ": header claims " +
                                                        std::to_string(count) + " values, payload holds " +
                                                        std::to_string(payload / 4));
  }
  if (payload > 4 * count) {
    throw FormatError(FormatError::Kind::malformed, "load_feature: " + path + ": trailing bytes after payload");
  }

  FeatureMatrix m{static_cast<std::size_t>(t), static_cast<std::size_t>(f), std::vector<float>(count)};
  for (std::size_t i = 0; i < count; ++i) {
    const float v = std::bit_cast<float>(get_u32(p + 16 + 4 * i));
    if (!std::isfinite(v)) {
      throw FormatError(FormatError::Kind::malformed, "load_feature: " + path + ": non-finite value at index " +
                                                          std::to_string(i));
    }
    m.values[i] = v;
  }
  return m;
}

FeatureMatrix fix_frames(const FeatureMatrix& m, std::size_t target) {
  if (m.frames == 0) throw ShapeError("fix_frames: input has no frames");
  FeatureMatrix out{target, m.dims, std::vector<float>(target * m.dims)};
  for (std::size_t t = 0; t < target; ++t) {
    const float* src = m.values.data() + (t % m.frames) * m.dims;
    std::copy(src, src + m.dims, out.values.begin() + static_cast<std::ptrdiff_t>(t * m.dims));
  }
  return out;
}

}  // namespace lightdarts
