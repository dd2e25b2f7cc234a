#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "lightdarts/candidate_ops.hpp"
#include "lightdarts/tensor.hpp"

namespace lightdarts {

// Number of mixed edges in a cell: node j (0-based) has j + 2 predecessors.
constexpr std::size_t edge_count(std::size_t nodes) noexcept { return nodes * (nodes + 3) / 2; }

// Row of the logit matrix for the edge from `source` into intermediate node
// `node`. Sources 0 and 1 are the cell inputs, 2.. the earlier intermediates.
constexpr std::size_t edge_index(std::size_t node, std::size_t source) noexcept {
  return 2 * node + node * (node - 1) / 2 + source;
}

// Architecture logits, one [edges x 9] matrix per cell type. Shared by every
// cell of that type.
struct ArchParams {
  Tensor normal;
  Tensor reduce;

  // Small Gaussian logits, seeded.
  static ArchParams init(std::size_t nodes, std::uint64_t seed, double scale = 1e-3);
  static ArchParams zeros(std::size_t nodes);

  std::size_t edges() const { return normal.dim(0); }
  std::size_t nodes() const;
  bool all_finite() const noexcept { return normal.all_finite() && reduce.all_finite(); }
  std::vector<Tensor*> tensors() { return {&normal, &reduce}; }
};

struct GenotypeEdge {
  OpKind op;
  std::size_t source;
  friend bool operator==(const GenotypeEdge&, const GenotypeEdge&) = default;
};

// Discrete architecture: two (op, source) pairs per intermediate node,
// node-major, for each cell type. Every intermediate node feeds the output.
struct Genotype {
  std::vector<GenotypeEdge> normal;
  std::vector<GenotypeEdge> reduce;

  std::size_t nodes() const noexcept { return normal.size() / 2; }
  // Throws Error on a structurally invalid genotype.
  void validate() const;

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

// Per edge the strongest non-zero op; per node the two edges whose chosen op
// has the largest softmax weight. Ties prefer the lower op index, then the
// lower source index. Pairs within a node are listed by ascending source.
Genotype derive_genotype(const ArchParams& alpha);

// Canonical three-line text form:
//   normal: (op,src) ...
//   reduce: (op,src) ...
//   concat: 2-5
std::string format_genotype(const Genotype& genotype);
// Throws ParseError with line and column.
Genotype parse_genotype(std::string_view text);

Genotype read_genotype_file(const std::string& path);
void write_genotype_file(const std::string& path, const Genotype& genotype);

}  // namespace lightdarts
