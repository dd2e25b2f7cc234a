#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <variant>
#include <vector>

#include "lightdarts/candidate_ops.hpp"
#include "lightdarts/genotype.hpp"
#include "lightdarts/layers.hpp"

namespace lightdarts {

// Softmax-weighted mixture of candidate outputs on one edge. `weights` holds
// the mixture probabilities (already softmaxed); `row` selects the edge.
Var mixed_forward(ForwardContext& ctx, std::span<OpInstance> ops, Var x, Var weights, std::size_t row);

// Same, starting from raw logits for a single edge.
Var mixed_forward(ForwardContext& ctx, std::span<OpInstance> ops, Var x, Var logits_row);

struct NetworkConfig {
  std::size_t cells = 8;
  std::size_t channels = 16;
  std::size_t nodes = 4;
  std::size_t feature_dim = 16;
  std::uint64_t seed = 0;
};

// Cell indices holding reduction cells: floor(N/3) and floor(2N/3).
std::vector<std::size_t> reduction_indices(std::size_t cells);

// A DAG of `nodes` intermediate nodes over two preprocessed inputs. In a
// mixed cell every (source, node) pair carries all candidate ops; in a
// discrete cell each node has the two edges named by the genotype.
class Cell {
 public:
  struct Edge {
    std::size_t source;
    std::size_t node;
    std::vector<OpInstance> ops;
  };

  struct Layout {
    bool reduction = false;
    bool reduction_prev = false;
    std::size_t prev_prev_channels = 0;
    std::size_t prev_channels = 0;
    std::size_t channels = 0;
    std::size_t nodes = 4;
    std::size_t index = 0;
    std::uint64_t seed = 0;
  };

  static Cell mixed(const Layout& layout);
  static Cell discrete(const Layout& layout, std::span<const GenotypeEdge> edges);

  // `weights` ([edges x 9] mixture probabilities) is required for mixed cells.
  Var forward(ForwardContext& ctx, Var s0, Var s1, const Var* weights);

  bool reduction() const noexcept { return layout_.reduction; }
  bool is_mixed() const noexcept { return mixed_; }
  std::size_t output_channels() const noexcept { return layout_.nodes * layout_.channels; }
  std::vector<Edge>& edges() noexcept { return edges_; }
  void collect(LayerRefs& refs);

 private:
  Cell(const Layout& layout, bool mixed);

  Layout layout_;
  bool mixed_;
  std::variant<ReluConvNorm, FactorizedReduce> pre0_;
  ReluConvNorm pre1_;
  std::vector<Edge> edges_;
};

// Stem (3x3 conv lifting the 1-channel T x F input to C channels, then norm),
// a stack of cells and a global-pool + linear head producing two logits
// (bonafide, spoof).
class Network {
 public:
  struct Output {
    Var logits;     // [N, 2]
    Var embedding;  // [N, D], the pooled features fed to the head
  };

  static Network supernet(const NetworkConfig& config);
  // Fresh parameters with the same per-component seeds as the supernet.
  static Network discrete(const Genotype& genotype, const NetworkConfig& config);

  // features: [N, 1, T, F]. Mixed networks need `alpha`.
  Output forward(ForwardContext& ctx, Var features, ArchParams* alpha = nullptr);

  bool is_supernet() const noexcept { return !genotype_.has_value(); }
  const NetworkConfig& config() const noexcept { return config_; }
  const std::optional<Genotype>& genotype() const noexcept { return genotype_; }
  std::size_t embedding_dim() const noexcept { return cells_.back().output_channels(); }
  std::vector<Cell>& cells() noexcept { return cells_; }

  LayerRefs refs();
  std::vector<Tensor*> parameters() { return refs().params; }
  std::size_t parameter_count();
  void set_requires_grad(bool on);
  void zero_grad();
  void zero_head() { head_.zero(); }

 private:
  Network(const NetworkConfig& config, std::optional<Genotype> genotype);

  NetworkConfig config_;
  std::optional<Genotype> genotype_;
  Conv stem_;
  ChannelNorm stem_norm_;
  std::vector<Cell> cells_;
  Linear head_;
};

}  // namespace lightdarts
