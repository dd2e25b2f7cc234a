#include "lightdarts/supernet.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "lightdarts/error.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

Var mixed_forward(ForwardContext& ctx, std::span<OpInstance> ops, Var x, Var weights, std::size_t row) {
  const Tensor& w = weights.value();
  if (w.rank() != 2 || w.dim(1) != ops.size() || row >= w.dim(0)) {
    throw ShapeError("mixed_forward: weights " + shape_string(w.shape()) + " do not cover " +
                     std::to_string(ops.size()) + " ops at row " + std::to_string(row));
  }
  for (std::size_t k = 0; k < ops.size(); ++k) {
    if (!std::isfinite(w[row * ops.size() + k])) throw NonFiniteError("mixed_forward: non-finite mixture weight");
  }
  // The zero op adds nothing to the sum and its weight gradient is exactly 0.
  std::optional<Var> rectified;
  std::vector<Var> outputs;
  std::vector<std::size_t> columns;
  for (std::size_t k = 0; k < ops.size(); ++k) {
    if (ops[k].kind() == OpKind::zero) continue;
    if (ops[k].begins_with_relu() && !rectified) rectified = relu(x);
    outputs.push_back(ops[k].apply(ctx, x, rectified ? &*rectified : nullptr));
    columns.push_back(k);
  }
  if (outputs.empty()) return ops.front().apply(ctx, x);
  return weighted_sum(outputs, columns, weights, row);
}

Var mixed_forward(ForwardContext& ctx, std::span<OpInstance> ops, Var x, Var logits_row) {
  const Tensor& l = logits_row.value();
  if (!l.all_finite()) throw NonFiniteError("mixed_forward: non-finite architecture logits");
  if (l.size() != ops.size()) {
    throw ShapeError("mixed_forward: " + std::to_string(l.size()) + " logits for " + std::to_string(ops.size()) +
                     " ops");
  }
  Var row = reshape(logits_row, {1, l.size()});
  return mixed_forward(ctx, ops, x, softmax(row), 0);
}

std::vector<std::size_t> reduction_indices(std::size_t cells) {
  std::vector<std::size_t> out = {cells / 3, 2 * cells / 3};
  if (out[0] == out[1]) out.pop_back();
  return out;
}

namespace {

std::uint64_t op_seed(std::uint64_t seed, std::size_t cell, std::size_t source, std::size_t node, OpKind kind) {
  return derive_seed(seed, {hash_tag("op"), cell, source, node, op_index(kind)});
}

std::variant<ReluConvNorm, FactorizedReduce> make_pre0(const Cell::Layout& l) {
  const std::uint64_t s = derive_seed(l.seed, {hash_tag("pre0"), l.index});
  if (l.reduction_prev) return FactorizedReduce(l.prev_prev_channels, l.channels, s);
  return ReluConvNorm(l.prev_prev_channels, l.channels, s);
}

}  // namespace

Cell::Cell(const Layout& layout, bool mixed)
    : layout_(layout),
      mixed_(mixed),
      pre0_(make_pre0(layout)),
      pre1_(layout.prev_channels, layout.channels, derive_seed(layout.seed, {hash_tag("pre1"), layout.index})) {
  if (layout.nodes < 1) throw Error("cell: need at least one intermediate node");
}

Cell Cell::mixed(const Layout& layout) {
  Cell cell(layout, true);
  for (std::size_t j = 0; j < layout.nodes; ++j) {
    for (std::size_t src = 0; src < j + 2; ++src) {
      const std::size_t stride = layout.reduction && src < 2 ? 2 : 1;
      Edge edge{src, j, {}};
      edge.ops.reserve(kNumOps);
      for (OpKind kind : kAllOps) {
        edge.ops.emplace_back(kind, layout.channels, stride, op_seed(layout.seed, layout.index, src, j, kind));
      }
      cell.edges_.push_back(std::move(edge));
    }
  }
  return cell;
}

Cell Cell::discrete(const Layout& layout, std::span<const GenotypeEdge> edges) {
  if (edges.size() != 2 * layout.nodes) {
    throw Error("cell: genotype lists " + std::to_string(edges.size()) + " edges for " +
                std::to_string(layout.nodes) + " nodes");
  }
  Cell cell(layout, false);
  for (std::size_t k = 0; k < edges.size(); ++k) {
    const std::size_t j = k / 2;
    const GenotypeEdge& e = edges[k];
    if (e.source >= j + 2) {
      throw Error("cell: node " + std::to_string(j + 2) + " references invalid node " + std::to_string(e.source));
    }
    const std::size_t stride = layout.reduction && e.source < 2 ? 2 : 1;
    Edge edge{e.source, j, {}};
    edge.ops.emplace_back(e.op, layout.channels, stride, op_seed(layout.seed, layout.index, e.source, j, e.op));
    cell.edges_.push_back(std::move(edge));
  }
  return cell;
}

Var Cell::forward(ForwardContext& ctx, Var s0, Var s1, const Var* weights) {
  if (mixed_ && weights == nullptr) throw Error("cell: mixed cell needs mixture weights");
  std::vector<Var> states;
  states.reserve(layout_.nodes + 2);
  states.push_back(std::visit([&](auto& pre) { return pre.forward(ctx, s0); }, pre0_));
  states.push_back(pre1_.forward(ctx, s1));
  if (states[0].shape() != states[1].shape()) {
    throw ShapeError("cell " + std::to_string(layout_.index) + ": preprocessed inputs " +
                     shape_string(states[0].shape()) + " and " + shape_string(states[1].shape()) + " disagree");
  }
  std::vector<Var> terms;
  std::size_t k = 0;
  for (std::size_t j = 0; j < layout_.nodes; ++j) {
    terms.clear();
    for (; k < edges_.size() && edges_[k].node == j; ++k) {
      Edge& e = edges_[k];
      if (mixed_) {
        terms.push_back(mixed_forward(ctx, e.ops, states[e.source], *weights, k));
      } else {
        terms.push_back(e.ops.front().apply(ctx, states[e.source]));
      }
    }
    states.push_back(add_n(terms));
  }
  return concat_channels(std::span<const Var>(states).subspan(2));
}

void Cell::collect(LayerRefs& refs) {
  std::visit([&](auto& pre) { pre.collect(refs); }, pre0_);
  pre1_.collect(refs);
  for (Edge& e : edges_) {
    for (OpInstance& op : e.ops) op.collect(refs);
  }
}

namespace {

void validate_config(const NetworkConfig& c) {
  if (c.cells < 1) throw Error("network: need at least one cell");
  if (c.channels < 2 || c.channels % 2 != 0) {
    throw Error("network: channels must be even and >= 2, got " + std::to_string(c.channels));
  }
  if (c.nodes < 1) throw Error("network: need at least one node per cell");
  if (c.feature_dim < 1) throw Error("network: feature dimension must be positive");
}

std::size_t final_channels(const NetworkConfig& c) {
  std::size_t ch = c.channels;
  for (std::size_t i = 0; i < reduction_indices(c.cells).size(); ++i) ch *= 2;
  return ch * c.nodes;
}

}  // namespace

Network::Network(const NetworkConfig& config, std::optional<Genotype> genotype)
    : config_((validate_config(config), config)),
      genotype_(std::move(genotype)),
      stem_(1, config.channels, 3, Conv2dOptions{1, 1, 1, 1}, derive_seed(config.seed, {hash_tag("stem")})),
      stem_norm_(config.channels),
      head_(final_channels(config), 2, derive_seed(config.seed, {hash_tag("head")})) {
  const std::vector<std::size_t> reductions = reduction_indices(config.cells);
  std::size_t c_curr = config.channels;
  std::size_t c_pp = config.channels;
  std::size_t c_p = config.channels;
  bool reduction_prev = false;
  for (std::size_t i = 0; i < config.cells; ++i) {
    const bool reduction = std::find(reductions.begin(), reductions.end(), i) != reductions.end();
    if (reduction) c_curr *= 2;
    const Cell::Layout layout{reduction, reduction_prev, c_pp, c_p, c_curr, config.nodes, i, config.seed};
    if (genotype_) {
      cells_.push_back(Cell::discrete(layout, reduction ? genotype_->reduce : genotype_->normal));
    } else {
      cells_.push_back(Cell::mixed(layout));
    }
    c_pp = c_p;
    c_p = config.nodes * c_curr;
    reduction_prev = reduction;
  }
}

Network Network::supernet(const NetworkConfig& config) { return Network(config, std::nullopt); }

Network Network::discrete(const Genotype& genotype, const NetworkConfig& config) {
  genotype.validate();
  NetworkConfig c = config;
  c.nodes = genotype.nodes();
  return Network(c, genotype);
}

Network::Output Network::forward(ForwardContext& ctx, Var features, ArchParams* alpha) {
  const Tensor& f = features.value();
  if (f.rank() != 4 || f.dim(1) != 1) {
    throw ShapeError("network: features must be [N,1,T,F], got " + shape_string(f.shape()));
  }
  if (f.dim(3) != config_.feature_dim) {
    throw ShapeError("network: features have F=" + std::to_string(f.dim(3)) + " but the stem expects F=" +
                     std::to_string(config_.feature_dim));
  }
  Var wn, wr;
  if (is_supernet()) {
    if (alpha == nullptr) throw Error("network: supernet forward needs architecture parameters");
    if (alpha->edges() != edge_count(config_.nodes)) {
      throw ShapeError("network: architecture parameters cover " + std::to_string(alpha->edges()) +
                       " edges, cells have " + std::to_string(edge_count(config_.nodes)));
    }
    if (!alpha->all_finite()) throw NonFiniteError("network: non-finite architecture logits");
    wn = softmax(ctx.tape.parameter(alpha->normal));
    wr = softmax(ctx.tape.parameter(alpha->reduce));
  }
  Var x = stem_norm_.forward(ctx, stem_.forward(ctx, features));
  Var s0 = x, s1 = x;
  for (Cell& cell : cells_) {
    Var out = cell.forward(ctx, s0, s1, cell.reduction() ? &wr : &wn);
    s0 = s1;
    s1 = out;
  }
  Var embedding = global_avg_pool(s1);
  return {head_.forward(ctx, embedding), embedding};
}

LayerRefs Network::refs() {
  LayerRefs refs;
  stem_.collect(refs);
  stem_norm_.collect(refs);
  for (Cell& c : cells_) c.collect(refs);
  head_.collect(refs);
  return refs;
}

std::size_t Network::parameter_count() {
  std::size_t n = 0;
  for (const Tensor* t : parameters()) n += t->size();
  return n;
}

void Network::set_requires_grad(bool on) {
  for (Tensor* t : parameters()) t->set_requires_grad(on);
}

void Network::zero_grad() {
  for (Tensor* t : parameters()) t->zero_grad();
}

}  // namespace lightdarts
