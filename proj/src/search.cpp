#include "lightdarts/search.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include "lightdarts/error.hpp"
#include "lightdarts/ops.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

void SearchConfig::validate() const {
  if (epochs < 1) throw Error("search: epochs must be at least 1");
  if (batch_size < 1) throw Error("search: batch size must be at least 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw Error("search: lr must be positive");
  if (!(arch_lr >= 0.0) || !std::isfinite(arch_lr)) throw Error("search: arch_lr must be non-negative");
  if (xi && (!(*xi >= 0.0) || !std::isfinite(*xi))) throw Error("search: xi must be non-negative");
  if (cells < 1) throw Error("search: cells must be at least 1");
  if (channels < 2 || channels % 2 != 0) throw Error("search: channels must be even and at least 2");
  if (nodes < 1) throw Error("search: nodes must be at least 1");
}

NetworkConfig SearchConfig::network(std::size_t feature_dim) const {
  return {cells, channels, nodes, feature_dim, derive_seed(seed, {hash_tag("network")})};
}

SearchOptimizers SearchOptimizers::for_problem(const BilevelProblem& problem) {
  return {AdamState::for_params(problem.weights), AdamState::for_params(problem.arch)};
}

namespace {

void set_requires_grad(std::span<Tensor* const> ts, bool on) {
  for (Tensor* t : ts) t->set_requires_grad(on);
}

std::vector<std::vector<double>> grads_of(std::span<Tensor* const> ts) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : ts) out.emplace_back(t->grad().begin(), t->grad().end());
  return out;
}

std::vector<std::vector<double>> values_of(std::span<Tensor* const> ts) {
  std::vector<std::vector<double>> out;
  for (const Tensor* t : ts) out.emplace_back(t->values().begin(), t->values().end());
  return out;
}

// t = base + step * direction, tensor by tensor.
void assign_along(std::span<Tensor* const> ts, const std::vector<std::vector<double>>& base, double step,
                  const std::vector<std::vector<double>>& direction) {
  for (std::size_t i = 0; i < ts.size(); ++i) {
    for (std::size_t k = 0; k < ts[i]->size(); ++k) (*ts[i])[k] = base[i][k] + step * direction[i][k];
  }
}

double accuracy(const Tensor& logits, std::span<const int> labels) {
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int predicted = logits[2 * i] >= logits[2 * i + 1] ? 0 : 1;
    if (predicted == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

struct PassResult {
  double loss;
  double acc;
};

// Forward in batch-norm mode; backward into whichever leaves require grad.
PassResult loss_pass(BilevelProblem& problem, const Batch& batch, bool backward, const char* split) {
  Tape tape;
  ForwardContext ctx{tape, NormMode::batch};
  Var logits = problem.logits(ctx, batch);
  Var loss = cross_entropy(logits, batch.labels);
  const double l = loss.value()[0];
  if (!std::isfinite(l)) {
    throw NonFiniteError(std::string("search: non-finite ") + split + " loss on batch " + std::to_string(batch.index));
  }
  if (backward) tape.backward(loss);
  return {l, accuracy(logits.value(), batch.labels)};
}

void checked_update(std::span<Tensor* const> params, AdamState& state, double lr, const Batch& batch) {
  try {
    adam_update(params, state, AdamConfig{lr});
  } catch (const NonFiniteError& e) {
    throw NonFiniteError(std::string(e.what()) + " (batch " + std::to_string(batch.index) + ")");
  }
}

void notify(const BatchObserver& observer, SearchPhase phase, const Batch& batch) {
  if (observer) observer(phase, batch);
}

}  // namespace

StepStats search_step(BilevelProblem& problem, const Batch& train, const Batch& val, SearchOptimizers& optimizers,
                      const SearchConfig& config, const BatchObserver& observer) {
  if (train.labels.empty() || val.labels.empty()) throw Error("search_step: empty batch");
  StepStats stats;
  const std::span<Tensor* const> w = problem.weights;
  const std::span<Tensor* const> a = problem.arch;

  set_requires_grad(a, false);
  set_requires_grad(w, true);
  notify(observer, SearchPhase::weights, train);
  const PassResult tr = loss_pass(problem, train, true, "train");
  stats.train_loss = tr.loss;
  stats.train_acc = tr.acc;
  checked_update(w, optimizers.weights, config.lr, train);

  const double xi = config.virtual_step();
  if (config.order == SearchOrder::first || xi == 0.0) {
    set_requires_grad(w, false);
    set_requires_grad(a, true);
    notify(observer, SearchPhase::arch, val);
    const PassResult vr = loss_pass(problem, val, true, "val");
    stats.val_loss = vr.loss;
    stats.val_acc = vr.acc;
    checked_update(a, optimizers.arch, config.arch_lr, val);
    set_requires_grad(a, false);
    return stats;
  }

  // Virtual step w' = w - xi * grad_w L_train(w, alpha).
  set_requires_grad(w, true);
  notify(observer, SearchPhase::arch, train);
  loss_pass(problem, train, true, "train");
  const auto w0 = values_of(w);
  assign_along(w, w0, -xi, grads_of(w));

  // grad_alpha and grad_w' of L_val(w', alpha).
  set_requires_grad(w, true);
  set_requires_grad(a, true);
  notify(observer, SearchPhase::arch, val);
  const PassResult vr = loss_pass(problem, val, true, "val");
  stats.val_loss = vr.loss;
  stats.val_acc = vr.acc;
  std::vector<std::vector<double>> d_alpha = grads_of(a);
  const auto d_w = grads_of(w);

  double norm_sq = 0.0;
  for (const auto& g : d_w) {
    for (double v : g) norm_sq += v * v;
  }
  set_requires_grad(w, false);
  if (norm_sq > 0.0) {
    // Central difference of grad_alpha L_train along d_w, around the original w.
    const double eps = 0.01 / std::sqrt(norm_sq);
    assign_along(w, w0, eps, d_w);
    set_requires_grad(a, true);
    notify(observer, SearchPhase::arch, train);
    loss_pass(problem, train, true, "train");
    const auto g_plus = grads_of(a);
    assign_along(w, w0, -eps, d_w);
    set_requires_grad(a, true);
    notify(observer, SearchPhase::arch, train);
    loss_pass(problem, train, true, "train");
    const auto g_minus = grads_of(a);
    for (std::size_t i = 0; i < d_alpha.size(); ++i) {
      for (std::size_t k = 0; k < d_alpha[i].size(); ++k) {
        d_alpha[i][k] -= xi * (g_plus[i][k] - g_minus[i][k]) / (2.0 * eps);
      }
    }
  }
  for (std::size_t i = 0; i < w.size(); ++i) std::copy(w0[i].begin(), w0[i].end(), w[i]->data());

  set_requires_grad(a, true);
  for (std::size_t i = 0; i < a.size(); ++i) std::copy(d_alpha[i].begin(), d_alpha[i].end(), a[i]->grad().begin());
  checked_update(a, optimizers.arch, config.arch_lr, val);
  set_requires_grad(a, false);
  return stats;
}

double mean_row_entropy(const Tensor& logits) {
  const std::size_t rows = logits.dim(0);
  const std::size_t cols = logits.dim(1);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = logits.data() + r * cols;
    const double m = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += std::exp(row[c] - m);
    double h = 0.0;
    for (std::size_t c = 0; c < cols; ++c) {
      const double p = std::exp(row[c] - m) / z;
      if (p > 0.0) h -= p * std::log(p);
    }
    total += h;
  }
  return total / static_cast<double>(rows);
}

void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("history: cannot open " + path + " for writing");
  file << kHistoryHeader << '\n';
  auto cell = [](double v) {
    if (std::isnan(v)) return std::string();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const EpochRecord& r : history) {
    file << r.epoch << ',' << cell(r.train_loss) << ',' << cell(r.val_loss) << ',' << cell(r.train_acc) << ','
         << cell(r.val_acc) << ',' << cell(r.alpha_entropy_normal) << ',' << cell(r.alpha_entropy_reduce) << '\n';
  }
  if (!file) throw Error("history: write failed for " + path);
}

namespace {

void check_trainable(const Dataset& data, const char* split) {
  if (data.size() == 0) throw Error(std::string("search: ") + split + " set is empty");
  if (data.count(Label::unknown) > 0) throw Error(std::string("search: ") + split + " set has unlabeled entries");
  if (data.count(Label::bonafide) == 0 || data.count(Label::spoof) == 0) {
    std::fprintf(stderr, "warning: %s set contains a single class\n", split);
  }
}

Var feature_input(ForwardContext& ctx, const Batch& batch) { return ctx.tape.constant(batch.features); }

}  // namespace

SearchResult run_search(const SearchConfig& config, const Dataset& train, const Dataset& val,
                        const EpochLogger& logger) {
  config.validate();
  check_trainable(train, "training");
  check_trainable(val, "validation");
  if (train.dims != val.dims || train.frames != val.frames) {
    throw Error("search: training and validation features differ in shape");
  }

  Network net = Network::supernet(config.network(train.dims));
  ArchParams alpha = ArchParams::init(config.nodes, derive_seed(config.seed, {hash_tag("alpha")}));
  BilevelProblem problem{net.parameters(), alpha.tensors(), [&](ForwardContext& ctx, const Batch& b) {
                           return net.forward(ctx, feature_input(ctx, b), &alpha).logits;
                         }};
  SearchOptimizers optimizers = SearchOptimizers::for_problem(problem);
  const std::uint64_t train_seed = derive_seed(config.seed, {hash_tag("train_batches")});
  const std::uint64_t val_seed = derive_seed(config.seed, {hash_tag("val_batches")});

  std::vector<EpochRecord> history;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const std::vector<Batch> tb = batches(train, config.batch_size, train_seed, epoch);
    const std::vector<Batch> vb = batches(val, config.batch_size, val_seed, epoch);
    const std::size_t steps = std::min(tb.size(), vb.size());
    EpochRecord rec;
    rec.epoch = epoch + 1;
    double n_train = 0.0, n_val = 0.0;
    for (std::size_t s = 0; s < steps; ++s) {
      const StepStats st = search_step(problem, tb[s], vb[s], optimizers, config);
      const double bt = static_cast<double>(tb[s].labels.size());
      const double bv = static_cast<double>(vb[s].labels.size());
      rec.train_loss += bt * st.train_loss;
      rec.train_acc += bt * st.train_acc;
      rec.val_loss += bv * st.val_loss;
      rec.val_acc += bv * st.val_acc;
      n_train += bt;
      n_val += bv;
    }
    rec.train_loss /= n_train;
    rec.train_acc /= n_train;
    rec.val_loss /= n_val;
    rec.val_acc /= n_val;
    rec.alpha_entropy_normal = mean_row_entropy(alpha.normal);
    rec.alpha_entropy_reduce = mean_row_entropy(alpha.reduce);
    history.push_back(rec);
    if (logger) logger(rec);
  }
  set_requires_grad(problem.weights, false);
  set_requires_grad(problem.arch, false);
  Genotype genotype = derive_genotype(alpha);
  return SearchResult{std::move(genotype), std::move(alpha), std::move(history), std::move(net)};
}

void calibrate_norms(Network& net, const Dataset& data, std::size_t batch_size, ArchParams* alpha) {
  net.set_requires_grad(false);
  const LayerRefs refs = net.refs();
  for (ChannelNorm* n : refs.norms) n->reset_calibration();
  for (const Batch& b : ordered_batches(data, batch_size)) {
    Tape tape(TapeMode::inference);
    ForwardContext ctx{tape, NormMode::calibrate};
    net.forward(ctx, feature_input(ctx, b), alpha);
  }
  for (ChannelNorm* n : refs.norms) n->finish_calibration();
}

RetrainResult retrain_discrete(const Genotype& genotype, const SearchConfig& config, const Dataset& train,
                               const EpochLogger& logger) {
  config.validate();
  check_trainable(train, "training");
  NetworkConfig nc = config.network(train.dims);
  nc.seed = derive_seed(config.seed, {hash_tag("retrain")});
  Network net = Network::discrete(genotype, nc);
  const std::vector<Tensor*> params = net.parameters();
  set_requires_grad(params, true);
  AdamState state = AdamState::for_params(params);
  const std::uint64_t batch_seed = derive_seed(config.seed, {hash_tag("retrain_batches")});

  std::vector<EpochRecord> history;
  const double nan = std::nan("");
  for (std::size_t epoch = 0; epoch < config.effective_retrain_epochs(); ++epoch) {
    EpochRecord rec{epoch + 1, 0.0, nan, 0.0, nan, nan, nan};
    double seen = 0.0;
    for (const Batch& b : batches(train, config.batch_size, batch_seed, epoch)) {
      for (Tensor* p : params) p->zero_grad();
      Tape tape;
      ForwardContext ctx{tape, NormMode::batch};
      Var logits = net.forward(ctx, feature_input(ctx, b)).logits;
      Var loss = cross_entropy(logits, b.labels);
      const double l = loss.value()[0];
      if (!std::isfinite(l)) {
        throw NonFiniteError("retrain: non-finite loss on batch " + std::to_string(b.index) + " of epoch " +
                             std::to_string(epoch + 1));
      }
      tape.backward(loss);
      checked_update(params, state, config.lr, b);
      const double bs = static_cast<double>(b.labels.size());
      rec.train_loss += bs * l;
      rec.train_acc += bs * accuracy(logits.value(), b.labels);
      seen += bs;
    }
    rec.train_loss /= seen;
    rec.train_acc /= seen;
    history.push_back(rec);
    if (logger) logger(rec);
  }
  calibrate_norms(net, train, config.batch_size);
  return RetrainResult{std::move(net), std::move(history)};
}

Evaluation evaluate_accuracy(Network& net, const Dataset& data, std::size_t batch_size, NormMode mode,
                             ArchParams* alpha) {
  if (data.count(Label::unknown) > 0) throw Error("evaluate: dataset has unlabeled entries");
  Evaluation ev;
  double seen = 0.0;
  for (const Batch& b : ordered_batches(data, batch_size)) {
    Tape tape(TapeMode::inference);
    ForwardContext ctx{tape, mode};
    Var logits = net.forward(ctx, feature_input(ctx, b), alpha).logits;
    const double bs = static_cast<double>(b.labels.size());
    ev.loss += bs * cross_entropy(logits, b.labels).value()[0];
    ev.accuracy += bs * accuracy(logits.value(), b.labels);
    seen += bs;
  }
  ev.loss /= seen;
  ev.accuracy /= seen;
  return ev;
}

}  // namespace lightdarts
