#include "lightdarts/model_io.hpp"

#include <bit>
#include <charconv>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "lightdarts/error.hpp"

namespace lightdarts {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_text(std::string& out, const std::string& text) {
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
}

void put_doubles(std::string& out, const std::vector<double>& values) {
  put_u64(out, values.size());
  for (double v : values) put_u64(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view take(std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(FormatError::Kind::truncated, std::string("model: truncated ") + what);
    }
    std::string_view s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::uint64_t uint(std::size_t width, const char* what) {
    const std::string_view s = take(width, what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < width; ++i) v |= std::uint64_t{static_cast<unsigned char>(s[i])} << (8 * i);
    return v;
  }

  std::string text(const char* what) { return std::string(take(uint(4, what), what)); }

  std::vector<double> doubles(const char* what) {
    const std::uint64_t n = uint(8, what);
    if (n > (bytes_.size() - pos_) / 8) {
      throw FormatError(FormatError::Kind::truncated, std::string("model: truncated ") + what);
    }
    std::vector<double> v(n);
    for (double& x : v) x = std::bit_cast<double>(uint(8, what));
    return v;
  }

  bool done() const noexcept { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

std::string config_echo(const NetworkConfig& c, std::size_t frames) {
  return "cells=" + std::to_string(c.cells) + "\nchannels=" + std::to_string(c.channels) +
         "\nnodes=" + std::to_string(c.nodes) + "\nfeature_dim=" + std::to_string(c.feature_dim) +
         "\nseed=" + std::to_string(c.seed) + "\nframes=" + std::to_string(frames) + "\n";
}

std::map<std::string, std::uint64_t> parse_echo(std::string_view text) {
  std::map<std::string, std::uint64_t> out;
  while (!text.empty()) {
    const std::size_t end = text.find('\n');
    const std::string_view line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    std::uint64_t v = 0;
    const std::string_view value = eq == std::string_view::npos ? std::string_view{} : line.substr(eq + 1);
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (eq == std::string_view::npos || res.ec != std::errc() || res.ptr != value.data() + value.size()) {
      throw FormatError(FormatError::Kind::malformed, "model: bad config line '" + std::string(line) + "'");
    }
    out[std::string(line.substr(0, eq))] = v;
  }
  return out;
}

}  // namespace

std::string serialize_model(Network& net, std::size_t frames) {
  if (net.is_supernet()) throw Error("model: only discrete networks can be saved");
  const LayerRefs refs = net.refs();
  std::vector<double> params;
  for (const Tensor* t : refs.params) params.insert(params.end(), t->values().begin(), t->values().end());
  std::vector<double> stats;
  for (const ChannelNorm* n : refs.norms) {
    if (!n->population()) throw Error("model: norm statistics missing; calibrate before saving");
    stats.insert(stats.end(), n->population()->mean.begin(), n->population()->mean.end());
    stats.insert(stats.end(), n->population()->var.begin(), n->population()->var.end());
  }

  std::string out(kModelMagic, 4);
  put_u32(out, kModelVersion);
  put_text(out, config_echo(net.config(), frames));
  put_text(out, format_genotype(*net.genotype()));
  put_doubles(out, params);
  put_doubles(out, stats);
  return out;
}

Model deserialize_model(std::string_view bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kModelMagic, 4) != 0) {
    throw FormatError(FormatError::Kind::bad_magic, "model: bad magic, expected FADM");
  }
  Reader r(bytes.substr(4));
  const std::uint64_t version = r.uint(4, "version");
  if (version != kModelVersion) {
    throw FormatError(FormatError::Kind::unsupported_version, "model: unsupported version " + std::to_string(version));
  }
  const std::map<std::string, std::uint64_t> echo = parse_echo(r.text("config"));
  auto field = [&](const char* key) {
    const auto it = echo.find(key);
    if (it == echo.end()) throw FormatError(FormatError::Kind::malformed, std::string("model: config lacks ") + key);
    return it->second;
  };
  NetworkConfig config{field("cells"), field("channels"), field("nodes"), field("feature_dim"), field("seed")};
  const std::size_t frames = field("frames");

  Genotype genotype;
  try {
    genotype = parse_genotype(r.text("genotype"));
  } catch (const ParseError& e) {
    throw FormatError(FormatError::Kind::malformed, std::string("model: genotype: ") + e.what());
  }
  if (genotype.nodes() != config.nodes) {
    throw FormatError(FormatError::Kind::malformed, "model: genotype has " + std::to_string(genotype.nodes()) +
                                                        " nodes, config says " + std::to_string(config.nodes));
  }
  const std::vector<double> params = r.doubles("parameters");
  const std::vector<double> stats = r.doubles("norm statistics");
  if (!r.done()) throw FormatError(FormatError::Kind::malformed, "model: trailing bytes");

  Model m{Network::discrete(genotype, config), frames};
  const LayerRefs refs = m.network.refs();
  std::size_t want_params = 0, want_stats = 0;
  for (const Tensor* t : refs.params) want_params += t->size();
  for (const ChannelNorm* n : refs.norms) want_stats += 2 * n->channels();
  if (params.size() != want_params || stats.size() != want_stats) {
    throw FormatError(FormatError::Kind::malformed,
                      "model: payload holds " + std::to_string(params.size()) + " parameters and " +
                          std::to_string(stats.size()) + " statistics, genotype needs " + std::to_string(want_params) +
                          " and " + std::to_string(want_stats));
  }
  std::size_t at = 0;
  for (Tensor* t : refs.params) {
    std::copy(params.begin() + static_cast<std::ptrdiff_t>(at),
              params.begin() + static_cast<std::ptrdiff_t>(at + t->size()), t->data());
    at += t->size();
  }
  at = 0;
  for (ChannelNorm* n : refs.norms) {
    const auto base = stats.begin() + static_cast<std::ptrdiff_t>(at);
    const auto c = static_cast<std::ptrdiff_t>(n->channels());
    n->set_population(NormStatistics{std::vector<double>(base, base + c), std::vector<double>(base + c, base + 2 * c)});
    at += 2 * n->channels();
  }
  return m;
}

void save_model(const std::string& path, Network& net, std::size_t frames) {
  const std::string bytes = serialize_model(net, frames);
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw Error("model: cannot open " + path + " for writing");
  file.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!file) throw Error("model: write failed for " + path);
}

Model load_model(const std::string& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw Error("model: cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  try {
    return deserialize_model(bytes);
  } catch (const FormatError& e) {
    throw FormatError(e.kind(), path + ": " + e.what());
  }
}

}  // namespace lightdarts
