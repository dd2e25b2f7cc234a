#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lightdarts/dataset.hpp"
#include "lightdarts/genotype.hpp"
#include "lightdarts/rng.hpp"
#include "lightdarts/supernet.hpp"
#include "lightdarts/synthetic.hpp"
#include "lightdarts/tensor.hpp"

namespace testutil {

inline lightdarts::Tensor random_tensor(lightdarts::Shape shape, std::uint64_t seed, double lo = -1.0,
                                        double hi = 1.0) {
  lightdarts::Rng rng(seed);
  lightdarts::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

inline double max_abs_diff(const lightdarts::Tensor& a, const lightdarts::Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const std::filesystem::path p = std::filesystem::temp_directory_path() / ("lightdarts_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline lightdarts::Genotype random_genotype(std::size_t nodes, std::uint64_t seed) {
  lightdarts::Rng rng(seed);
  auto cell = [&] {
    std::vector<lightdarts::GenotypeEdge> edges;
    for (std::size_t j = 0; j < nodes; ++j) {
      std::size_t a = rng.below(j + 2), b = rng.below(j + 2);
      while (b == a) b = rng.below(j + 2);
      if (b < a) std::swap(a, b);
      for (std::size_t src : {a, b}) {
        lightdarts::OpKind op = lightdarts::OpKind::zero;
        while (op == lightdarts::OpKind::zero) op = lightdarts::kAllOps[rng.below(lightdarts::kNumOps)];
        edges.push_back({op, src});
      }
    }
    return edges;
  };
  lightdarts::Genotype g;
  g.normal = cell();
  g.reduce = cell();
  return g;
}

// Logits whose softmax is exactly one-hot: the genotype's op on its edges,
// zero on every other edge. exp(-1000) underflows to 0 in double.
inline lightdarts::ArchParams one_hot_alpha(const lightdarts::Genotype& g) {
  using namespace lightdarts;
  ArchParams a = ArchParams::zeros(g.nodes());
  auto fill = [&](Tensor& logits, const std::vector<GenotypeEdge>& edges) {
    for (std::size_t row = 0; row < logits.dim(0); ++row)
      for (std::size_t k = 0; k < kNumOps; ++k)
        logits[row * kNumOps + k] = k == op_index(OpKind::zero) ? 0.0 : -1000.0;
    for (std::size_t i = 0; i < edges.size(); ++i) {
      const std::size_t row = edge_index(i / 2, edges[i].source);
      for (std::size_t k = 0; k < kNumOps; ++k) logits[row * kNumOps + k] = -1000.0;
      logits[row * kNumOps + op_index(edges[i].op)] = 0.0;
    }
  };
  fill(a.normal, g.normal);
  fill(a.reduce, g.reduce);
  return a;
}

// In-memory labelled dataset drawn from the synthetic generator.
inline lightdarts::Dataset synthetic_dataset(std::size_t n, std::size_t frames, std::size_t dims, std::uint64_t seed,
                                             double amplitude = 1.0) {
  using namespace lightdarts;
  SyntheticConfig cfg;
  cfg.frames = frames;
  cfg.dims = dims;
  cfg.artifact_amplitude = amplitude;
  Rng rng(seed);
  std::vector<ManifestEntry> entries;
  std::vector<FeatureMatrix> features;
  for (std::size_t i = 0; i < n; ++i) {
    const bool spoof = i % 2 == 1;
    entries.push_back({"u" + std::to_string(i), "", spoof ? Label::spoof : Label::bonafide});
    features.push_back(synthesize_utterance(cfg, spoof, rng));
  }
  return make_dataset(std::move(entries), std::move(features), frames);
}

}  // namespace testutil
