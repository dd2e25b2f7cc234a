#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lightdarts/adam.hpp"
#include "lightdarts/dataset.hpp"
#include "lightdarts/genotype.hpp"
#include "lightdarts/supernet.hpp"

namespace lightdarts {

enum class SearchOrder { first, second };

struct SearchConfig {
  std::size_t epochs = 50;
  double lr = 1e-4;
  double arch_lr = 1e-4;
  std::size_t batch_size = 16;
  std::size_t cells = 8;
  std::size_t channels = 16;
  std::size_t nodes = 4;
  std::uint64_t seed = 0;
  SearchOrder order = SearchOrder::first;
  // Virtual-step size of the second-order approximation; defaults to lr.
  std::optional<double> xi;
  // Epochs of discrete retraining; 0 means twice `epochs`.
  std::size_t retrain_epochs = 0;

  // Throws Error on a value outside its domain.
  void validate() const;
  double virtual_step() const { return xi.value_or(lr); }
  std::size_t effective_retrain_epochs() const { return retrain_epochs == 0 ? 2 * epochs : retrain_epochs; }
  NetworkConfig network(std::size_t feature_dim) const;
};

// Weights w and architecture parameters alpha of a bilevel problem, plus the
// forward pass producing [N, 2] logits for a batch.
struct BilevelProblem {
  std::vector<Tensor*> weights;
  std::vector<Tensor*> arch;
  std::function<Var(ForwardContext&, const Batch&)> logits;
};

enum class SearchPhase { weights, arch };

// Called each time a step reads a batch, naming the phase that reads it.
using BatchObserver = std::function<void(SearchPhase, const Batch&)>;

struct SearchOptimizers {
  AdamState weights;
  AdamState arch;

  static SearchOptimizers for_problem(const BilevelProblem& problem);
};

struct StepStats {
  double train_loss = 0.0;
  double train_acc = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
};

// One Adam step on w minimizing the training loss, then one Adam step on
// alpha minimizing the validation loss with w fixed. With order second the
// alpha gradient carries the finite-difference Hessian-vector correction
// taken around a virtual SGD step of size xi on w; xi = 0 reduces to first
// order exactly. Non-finite losses or gradients throw NonFiniteError naming
// the batch.
StepStats search_step(BilevelProblem& problem, const Batch& train, const Batch& val, SearchOptimizers& optimizers,
                      const SearchConfig& config, const BatchObserver& observer = {});

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double train_acc = 0.0;
  double val_acc = 0.0;
  double alpha_entropy_normal = 0.0;
  double alpha_entropy_reduce = 0.0;
};

// Mean per-edge entropy (nats) of the softmaxed rows of a logit matrix.
double mean_row_entropy(const Tensor& logits);

inline constexpr const char* kHistoryHeader =
    "epoch,train_loss,val_loss,train_acc,val_acc,alpha_entropy_normal,alpha_entropy_reduce";
void write_history_csv(const std::string& path, const std::vector<EpochRecord>& history);

using EpochLogger = std::function<void(const EpochRecord&)>;

struct SearchResult {
  Genotype genotype;
  ArchParams alpha;
  std::vector<EpochRecord> history;
  Network supernet;
};

// Each epoch pairs shuffled training batches with shuffled validation
// batches and takes one search_step per pair, stopping at the shorter list.
SearchResult run_search(const SearchConfig& config, const Dataset& train, const Dataset& val,
                        const EpochLogger& logger = {});

// Batch statistics of every norm layer over `data`, stored as population
// statistics for frozen-mode inference.
void calibrate_norms(Network& net, const Dataset& data, std::size_t batch_size, ArchParams* alpha = nullptr);

struct RetrainResult {
  Network model;
  std::vector<EpochRecord> history;
};

// Fresh seeded discrete network trained with Adam on every training batch
// per epoch, then calibrated on the training split.
RetrainResult retrain_discrete(const Genotype& genotype, const SearchConfig& config, const Dataset& train,
                               const EpochLogger& logger = {});

// Accuracy and mean loss of a network over a dataset in the given norm mode.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};
Evaluation evaluate_accuracy(Network& net, const Dataset& data, std::size_t batch_size, NormMode mode,
                             ArchParams* alpha = nullptr);

}  // namespace lightdarts
