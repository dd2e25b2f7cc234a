#pragma once

#include <cstddef>
#include <cstdint>
#include <string>

#include "lightdarts/features.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

// Bumped whenever generated values change for a given configuration.
inline constexpr std::uint32_t kSyntheticVersion = 1;

struct SyntheticConfig {
  std::size_t n_train = 400;
  std::size_t n_val = 200;
  std::size_t n_eval = 200;
  std::size_t frames = 40;
  std::size_t dims = 16;
  std::uint64_t seed = 0;
  double artifact_amplitude = 1.0;
  double noise_sigma = 0.5;

  // Throws Error unless frames >= 8, dims >= 8 and every split is nonempty.
  void validate() const;
};

// One utterance: a smooth ridge wandering along the feature axis plus white
// noise; spoofed utterances add a +/-amplitude checkerboard.
FeatureMatrix synthesize_utterance(const SyntheticConfig& config, bool spoof, Rng& rng);

// Writes train.tsv, val.tsv, eval.tsv, features/<id>.fafd and generator.txt
// under `out_dir`. Each split has labels balanced to within one.
void gen_synthetic(const std::string& out_dir, const SyntheticConfig& config);

}  // namespace lightdarts
