#include "lightdarts/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <vector>

#include "lightdarts/dataset.hpp"
#include "lightdarts/error.hpp"

namespace lightdarts {

namespace {

constexpr double kRidgeHeight = 2.0;
constexpr double kRidgeWidth = 1.5;

}  // namespace

void SyntheticConfig::validate() const {
  if (frames < 8 || dims < 8) {
    throw Error("synthetic: T and F must both be at least 8, got T=" + std::to_string(frames) +
                " F=" + std::to_string(dims));
  }
  if (n_train == 0 || n_val == 0 || n_eval == 0) throw Error("synthetic: every split needs at least one utterance");
  if (!(artifact_amplitude >= 0.0) || !(noise_sigma >= 0.0)) {
    throw Error("synthetic: amplitude and noise must be non-negative");
  }
}

FeatureMatrix synthesize_utterance(const SyntheticConfig& config, bool spoof, Rng& rng) {
  const std::size_t t_n = config.frames;
  const std::size_t f_n = config.dims;
  const double span = static_cast<double>(f_n) - 4.0;
  const double center = 2.0 + span * rng.uniform();
  const double sway = rng.uniform(0.0, 0.25 * span);
  const double cycles = rng.uniform(0.5, 2.0);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  FeatureMatrix m{t_n, f_n, std::vector<float>(t_n * f_n)};
  for (std::size_t t = 0; t < t_n; ++t) {
    const double u = static_cast<double>(t) / static_cast<double>(t_n);
    const double c = center + sway * std::sin(2.0 * std::numbers::pi * cycles * u + phase);
    for (std::size_t f = 0; f < f_n; ++f) {
      const double d = (static_cast<double>(f) - c) / kRidgeWidth;
      double v = kRidgeHeight * std::exp(-0.5 * d * d) + config.noise_sigma * rng.normal();
      if (spoof) v += (t + f) % 2 == 0 ? config.artifact_amplitude : -config.artifact_amplitude;
      m.values[t * f_n + f] = static_cast<float>(v);
    }
  }
  return m;
}

void gen_synthetic(const std::string& out_dir, const SyntheticConfig& config) {
  config.validate();
  namespace fs = std::filesystem;
  const fs::path root(out_dir);
  std::error_code ec;
  fs::create_directories(root / "features", ec);
  if (ec) throw Error("synthetic: cannot create " + (root / "features").string() + ": " + ec.message());

  const struct {
    const char* name;
    std::size_t count;
  } splits[] = {{"train", config.n_train}, {"val", config.n_val}, {"eval", config.n_eval}};

  for (const auto& split : splits) {
    // Exactly half spoof (rounded down), in a seeded order.
    std::vector<bool> spoof(split.count, false);
    for (std::size_t i = 0; i < split.count / 2; ++i) spoof[i] = true;
    Rng order_rng(derive_seed(config.seed, {hash_tag("synthetic_labels"), hash_tag(split.name)}));
    order_rng.shuffle(spoof.begin(), spoof.end());

    std::vector<ManifestEntry> entries;
    for (std::size_t i = 0; i < split.count; ++i) {
      char id[64];
      std::snprintf(id, sizeof id, "%s_%05zu", split.name, i);
      Rng rng(derive_seed(config.seed, {hash_tag("synthetic_utt"), hash_tag(split.name), i}));
      const std::string rel = std::string("features/") + id + ".fafd";
      store_feature((root / rel).string(), synthesize_utterance(config, spoof[i], rng));
      entries.push_back({id, rel, spoof[i] ? Label::spoof : Label::bonafide});
    }
    write_manifest((root / (std::string(split.name) + ".tsv")).string(), entries);
  }

  std::ofstream info(root / "generator.txt", std::ios::trunc);
  if (!info) throw Error("synthetic: cannot write " + (root / "generator.txt").string());
  info << "generator_version=" << kSyntheticVersion << '\n'
       << "seed=" << config.seed << '\n'
       << "frames=" << config.frames << '\n'
       << "dims=" << config.dims << '\n'
       << "n_train=" << config.n_train << '\n'
       << "n_val=" << config.n_val << '\n'
       << "n_eval=" << config.n_eval << '\n'
       << "artifact_amplitude=" << config.artifact_amplitude << '\n'
       << "noise_sigma=" << config.noise_sigma << '\n';
  if (!info) throw Error("synthetic: write failed for generator.txt");
}

}  // namespace lightdarts
