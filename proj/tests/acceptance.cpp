// Acceptance run: one PASS/FAIL line per criterion, exit code 1 if any fail.

#include <sys/wait.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include "helpers.hpp"
#include "lightdarts/evaluation.hpp"
#include "lightdarts/features.hpp"
#include "lightdarts/gradient_suite.hpp"
#include "lightdarts/search.hpp"
#include "oracles.hpp"

using namespace lightdarts;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::size_t peak_rss_mb() {
  std::ifstream in("/proc/self/status");
  std::string key;
  std::size_t kb = 0;
  while (in >> key)
    if (key == "VmHWM:" && in >> kb) break;
  return kb / 1024;
}

Outcome gradient_fidelity() {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<GradCaseResult> results = run_gradient_suite(GradSuiteOptions{});
  const double elapsed = seconds_since(start);
  double worst = 0.0;
  std::string worst_name, failed;
  for (const GradCaseResult& r : results) {
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = r.name;
    }
    if (!r.passed || r.instances != 10) failed += " " + r.name;
  }
  const bool pass = failed.empty() && worst <= 1e-4 && elapsed < 60.0;
  return {pass, fmt("%zu cases x 10 instances, worst rel err %.2e (%s), %.1f s", results.size(), worst,
                    worst_name.c_str(), elapsed) +
                    (failed.empty() ? "" : ", failed:" + failed)};
}

std::vector<ScoreRecord> as_records(const std::vector<double>& bona, const std::vector<double>& spoof) {
  std::vector<ScoreRecord> r;
  for (std::size_t i = 0; i < bona.size(); ++i) r.push_back({"b" + std::to_string(i), bona[i], Label::bonafide});
  for (std::size_t i = 0; i < spoof.size(); ++i) r.push_back({"s" + std::to_string(i), spoof[i], Label::spoof});
  return r;
}

Outcome eer_oracle() {
  Rng rng(derive_seed(0, {hash_tag("acceptance_eer")}));
  double worst = 0.0;
  for (int set = 0; set < 1000; ++set) {
    std::vector<double> bona(50), spoof(50);
    for (double& v : bona) v = rng.uniform();
    for (double& v : spoof) v = rng.uniform();
    worst = std::max(worst, std::abs(compute_eer(as_records(bona, spoof)).eer - oracle::eer(bona, spoof)));
  }
  std::size_t separated_nonzero = 0;
  for (int set = 0; set < 100; ++set) {
    std::vector<double> bona(50), spoof(50);
    for (double& v : bona) v = rng.uniform(0.5, 1.0);
    for (double& v : spoof) v = rng.uniform(0.0, 0.5);
    separated_nonzero += compute_eer(as_records(bona, spoof)).eer != 0.0;
  }
  return {worst <= 1e-12 && separated_nonzero == 0,
          fmt("1000 uniform sets, max |diff| %.2e; %zu of 100 separated sets nonzero", worst, separated_nonzero)};
}

Outcome mixed_edge() {
  double worst_mean = 0.0, worst_shift = 0.0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const std::size_t stride = 1 + seed % 2;
    std::vector<OpInstance> ops;
    for (OpKind k : kAllOps) ops.emplace_back(k, 8, stride, derive_seed(seed, {op_index(k)}));
    const Tensor x = testutil::random_tensor({2, 8, 10, 9}, derive_seed(seed, {hash_tag("x")}), -2.0, 2.0);
    Tape tape;
    ForwardContext ctx{tape};
    const Tensor uniform = mixed_forward(ctx, ops, tape.constant(x), tape.constant(Tensor({kNumOps}, 0.0))).value();
    Tensor mean(uniform.shape());
    for (OpInstance& op : ops) {
      const Tensor& y = op.apply(ctx, tape.constant(x)).value();
      for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += y[i] / static_cast<double>(kNumOps);
    }
    worst_mean = std::max(worst_mean, testutil::max_abs_diff(uniform, mean));

    Tensor logits = testutil::random_tensor({kNumOps}, derive_seed(seed, {hash_tag("logits")}), -3.0, 3.0);
    const Tensor base = mixed_forward(ctx, ops, tape.constant(x), tape.constant(logits)).value();
    for (double& v : logits.values()) v += 12.5 - static_cast<double>(seed);
    const Tensor shifted = mixed_forward(ctx, ops, tape.constant(x), tape.constant(logits)).value();
    worst_shift = std::max(worst_shift, testutil::max_abs_diff(base, shifted));
  }
  return {worst_mean <= 1e-6 && worst_shift <= 1e-12,
          fmt("10 edges, uniform-vs-mean %.2e, shift %.2e", worst_mean, worst_shift)};
}

// Rows drawn from a coarse value set, some copied from earlier rows, so
// weight ties within and across edges are frequent.
ArchParams tie_heavy_alpha(std::size_t nodes, std::uint64_t seed) {
  Rng rng(seed);
  ArchParams a = ArchParams::zeros(nodes);
  for (Tensor* t : a.tensors()) {
    for (double& v : t->values()) v = 0.5 * static_cast<double>(rng.below(5));
    for (std::size_t row = 1; row < t->dim(0); ++row)
      if (rng.below(3) == 0) {
        const std::size_t from = rng.below(row);
        std::copy(t->data() + from * kNumOps, t->data() + (from + 1) * kNumOps, t->data() + row * kNumOps);
      }
  }
  return a;
}

Outcome genotype_derivation() {
  std::size_t mismatches = 0, invariance_failures = 0;
  for (std::uint64_t draw = 0; draw < 100; ++draw) {
    const std::size_t nodes = 2 + draw % 4;
    const std::uint64_t seed = derive_seed(draw, {hash_tag("acceptance_genotype")});
    ArchParams a = draw % 2 == 0 ? tie_heavy_alpha(nodes, seed) : ArchParams::init(nodes, seed, 1.0);
    const Genotype g = derive_genotype(a);
    mismatches += g.normal != oracle::derive_cell(a.normal, nodes) || g.reduce != oracle::derive_cell(a.reduce, nodes);

    // Per-row shifts keep the whole genotype.
    ArchParams shifted = a;
    Rng rng(seed + 1);
    for (Tensor* t : shifted.tensors())
      for (std::size_t row = 0; row < t->dim(0); ++row) {
        const double c = rng.uniform(-10.0, 10.0);
        for (std::size_t k = 0; k < kNumOps; ++k) (*t)[row * kNumOps + k] += c;
      }
    invariance_failures += derive_genotype(shifted) != g;

    // Increasing maps keep each edge's op; the first node always keeps both edges.
    ArchParams mapped = a;
    for (Tensor* t : mapped.tensors())
      for (double& v : t->values()) v = std::exp(v) + v * v * v;
    const Genotype m = derive_genotype(mapped);
    for (std::size_t i = 0; i < 2; ++i) invariance_failures += m.normal[i] != g.normal[i] || m.reduce[i] != g.reduce[i];
  }
  return {mismatches == 0 && invariance_failures == 0,
          fmt("100 draws, %zu oracle mismatches, %zu invariance failures", mismatches, invariance_failures)};
}

Outcome one_hot() {
  double worst = 0.0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const NetworkConfig cfg{4, 8, 4, 16, seed};
    const Genotype g = testutil::random_genotype(cfg.nodes, derive_seed(seed, {hash_tag("genotype")}));
    Network super = Network::supernet(cfg);
    Network disc = Network::discrete(g, cfg);
    ArchParams alpha = testutil::one_hot_alpha(g);
    const Tensor x = testutil::random_tensor({4, 1, 40, 16}, derive_seed(seed, {hash_tag("input")}), -2.0, 2.0);
    Tape tape;
    ForwardContext ctx{tape};
    const Tensor a = super.forward(ctx, tape.constant(x), &alpha).logits.value();
    const Tensor b = disc.forward(ctx, tape.constant(x)).logits.value();
    worst = std::max(worst, testutil::max_abs_diff(a, b));
  }
  return {worst <= 1e-10, fmt("5 genotypes at N=4 C=8, max |diff| %.2e", worst)};
}

Outcome desk_search(const fs::path& work) {
  const auto start = std::chrono::steady_clock::now();
  SyntheticConfig data_cfg;
  const fs::path data = work / "desk";
  gen_synthetic(data.string(), data_cfg);
  const Dataset train = load_dataset((data / "train.tsv").string(), data_cfg.frames);
  const Dataset val = load_dataset((data / "val.tsv").string(), data_cfg.frames);
  const Dataset eval = load_dataset((data / "eval.tsv").string(), data_cfg.frames);

  // Energy-detector calibration: threshold midway between the class means on train.
  double mean[2] = {0.0, 0.0};
  for (std::size_t i = 0; i < train.size(); ++i) {
    const int c = static_cast<int>(train.entries[i].label);
    mean[c] += oracle::residual_energy(train.features[i]) / static_cast<double>(train.count(static_cast<Label>(c)));
  }
  const double threshold = 0.5 * (mean[0] + mean[1]);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < eval.size(); ++i) {
    hits += (oracle::residual_energy(eval.features[i]) > threshold) == (eval.entries[i].label == Label::spoof);
  }
  const double detector_acc = static_cast<double>(hits) / static_cast<double>(eval.size());

  SearchConfig cfg;
  cfg.epochs = 15;
  cfg.cells = 4;
  cfg.channels = 8;
  const SearchResult search = run_search(cfg, train, val);
  RetrainResult retrained = retrain_discrete(search.genotype, cfg, train);
  const EerResult eer = compute_eer(score_dataset(retrained.model, eval, cfg.batch_size));
  const double elapsed = seconds_since(start);
  const bool pass = detector_acc >= 0.95 && eer.eer <= 0.05 && elapsed < 600.0;
  return {pass, fmt("generator v%u, energy detector %.1f%%, EER %.2f%% after 15 search + %zu retrain epochs, %.0f s",
                    kSyntheticVersion, 100.0 * detector_acc, 100.0 * eer.eer, cfg.effective_retrain_epochs(),
                    elapsed)};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LIGHTDARTS_CLI) + " " + args + " >> " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

Outcome determinism(const fs::path& work) {
  const fs::path log = work / "determinism.log";
  const std::string data = (work / "det_data").string();
  if (run_cli("gen-synthetic --out " + data + " --n-train 48 --n-val 32 --n-eval 32 --seed 4", log) != 0) {
    return {false, "gen-synthetic failed, see " + log.string()};
  }
  const std::string net = " --cells 3 --channels 4 --nodes 3 --frames 40 --batch-size 8 --seed 11 --lr 1e-3";
  std::vector<std::string> outputs[2];
  for (int run = 0; run < 2; ++run) {
    const std::string d = (work / ("det_run" + std::to_string(run))).string();
    const bool ok =
        run_cli("search --train-manifest " + data + "/train.tsv --val-manifest " + data + "/val.tsv --epochs 2 --out " +
                    d + "/genotype.txt" + net,
                log) == 0 &&
        run_cli("train --genotype " + d + "/genotype.txt --train-manifest " + data + "/train.tsv --epochs 2 --out " + d +
                    "/model.bin" + net,
                log) == 0 &&
        run_cli("eval --model " + d + "/model.bin --manifest " + data + "/eval.tsv --scores " + d + "/scores.txt", log) ==
            0;
    if (!ok) return {false, "pipeline failed, see " + log.string()};
    for (const char* f : {"genotype.txt", "model.bin", "scores.txt"}) outputs[run].push_back(slurp(fs::path(d) / f));
  }
  const bool pass = outputs[0] == outputs[1] && !outputs[0][1].empty();
  return {pass, fmt("two search/train/eval runs, genotype %s, model %s (%zu bytes), scores %s",
                    outputs[0][0] == outputs[1][0] ? "identical" : "differ",
                    outputs[0][1] == outputs[1][1] ? "identical" : "differ", outputs[0][1].size(),
                    outputs[0][2] == outputs[1][2] ? "identical" : "differ")};
}

Outcome wide_features(const fs::path& work) {
  const fs::path dir = work / "wide";
  fs::create_directories(dir);
  Rng rng(derive_seed(0, {hash_tag("acceptance_wide")}));
  std::vector<ManifestEntry> entries;
  for (int i = 0; i < 2; ++i) {
    FeatureMatrix m{400, 1024, std::vector<float>(400 * 1024)};
    for (float& v : m.values) v = static_cast<float>(rng.normal());
    const std::string name = "w" + std::to_string(i) + ".fafd";
    store_feature((dir / name).string(), m);
    entries.push_back({"w" + std::to_string(i), name, i == 0 ? Label::bonafide : Label::spoof});
  }
  write_manifest((dir / "wide.tsv").string(), entries);

  // Same calls as `lightdarts eval`; the timed forward pass scores both files as one batch.
  const Dataset data = load_dataset((dir / "wide.tsv").string(), 400);
  SearchConfig cfg;
  Network net = Network::discrete(derive_genotype(ArchParams::init(cfg.nodes, 0)), cfg.network(data.dims));
  const auto calib_start = std::chrono::steady_clock::now();
  calibrate_norms(net, data, 2);
  const double calib = seconds_since(calib_start);
  const auto start = std::chrono::steady_clock::now();
  const std::vector<ScoreRecord> scores = score_dataset(net, data, 2);
  const double elapsed = seconds_since(start);
  bool finite = scores.size() == 2;
  for (const ScoreRecord& r : scores) finite = finite && std::isfinite(r.score);
  const bool pass = finite && elapsed < 30.0;
  return {pass, fmt("batch of 2 x 400 x 1024, default N=%zu C=%zu, forward %.1f s (calibration %.1f s), peak RSS %zu MB",
                    cfg.cells, cfg.channels, elapsed, calib, peak_rss_mb())};
}

}  // namespace

// Usage: lightdarts_acceptance [work_dir] [criterion numbers, e.g. 68]
int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "lightdarts_acceptance";
  const std::string only = argc > 2 ? argv[2] : "";
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient fidelity", gradient_fidelity},
      {"EER oracle equivalence", eer_oracle},
      {"mixed-edge convexity and shift symmetry", mixed_edge},
      {"genotype derivation", genotype_derivation},
      {"one-hot equivalence", one_hot},
      {"desk-scale search", [&] { return desk_search(work); }},
      {"determinism", [&] { return determinism(work); }},
      {"400x1024 feature smoke test", [&] { return wide_features(work); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && only.find(static_cast<char>('1' + i)) == std::string::npos) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("criterion %zu %s: %s (%s)\n", i + 1, criteria[i].first.c_str(), o.pass ? "PASS" : "FAIL",
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
