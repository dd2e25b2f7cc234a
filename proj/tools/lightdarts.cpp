// Command-line front end: synthetic data, search, retraining, scoring, EER
// and the gradient suite. Exit codes: 0 success, 1 runtime or data error,
// 2 usage error.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "lightdarts/dataset.hpp"
#include "lightdarts/error.hpp"
#include "lightdarts/evaluation.hpp"
#include "lightdarts/genotype.hpp"
#include "lightdarts/gradient_suite.hpp"
#include "lightdarts/model_io.hpp"
#include "lightdarts/search.hpp"
#include "lightdarts/synthetic.hpp"

namespace fs = std::filesystem;
using namespace lightdarts;

namespace {

// Raised for invalid flag combinations found after parsing.
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Plain key=value dump of every effective setting, written next to outputs.
class Provenance {
 public:
  explicit Provenance(std::string command) { add("command", std::move(command)); }

  template <class T>
  void add(const std::string& key, const T& value) {
    std::ostringstream s;
    s.precision(17);
    s << value;
    lines_.push_back(key + "=" + s.str());
  }

  void write(const fs::path& dir, const std::string& command) const {
    const fs::path path = (dir.empty() ? fs::path(".") : dir) / (command + ".run.txt");
    std::ofstream file(path, std::ios::trunc);
    if (!file) throw Error("provenance: cannot write " + path.string());
    for (const std::string& l : lines_) file << l << '\n';
    if (!file) throw Error("provenance: write failed for " + path.string());
  }

 private:
  std::vector<std::string> lines_;
};

fs::path parent_dir(const std::string& path) { return fs::path(path).parent_path(); }

void ensure_parent(const std::string& path) {
  const fs::path dir = parent_dir(path);
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error("cannot create directory " + dir.string() + ": " + ec.message());
}

std::string order_name(SearchOrder o) { return o == SearchOrder::first ? "first" : "second"; }

void log_epoch(const char* phase, const EpochRecord& r) {
  if (std::isnan(r.val_loss)) {
    std::fprintf(stderr, "[%s] epoch %zu train_loss %.4f train_acc %.4f\n", phase, r.epoch, r.train_loss, r.train_acc);
  } else {
    std::fprintf(stderr, "[%s] epoch %zu train_loss %.4f val_loss %.4f train_acc %.4f val_acc %.4f H_n %.4f H_r %.4f\n",
                 phase, r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc, r.alpha_entropy_normal,
                 r.alpha_entropy_reduce);
  }
}

void print_eer(const EerResult& e) { std::printf("EER%% = %.2f\n", 100.0 * e.eer); }

// ---- gen-synthetic ----

struct GenArgs {
  std::string out;
  std::size_t n_per_split = 0;
  SyntheticConfig config;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* sub = app.add_subcommand("gen-synthetic", "Write a seeded synthetic train/val/eval corpus");
  sub->add_option("--out", a.out, "Output directory")->required();
  sub->add_option("--n-per-split", a.n_per_split, "Utterances in every split (overrides --n-train/--n-val/--n-eval)")
      ->check(CLI::PositiveNumber);
  sub->add_option("--n-train", a.config.n_train, "Training utterances")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--n-val", a.config.n_val, "Validation utterances")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--n-eval", a.config.n_eval, "Evaluation utterances")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--t", a.config.frames, "Frames per utterance (>= 8)")->check(CLI::Range(8, 1 << 20))->capture_default_str();
  sub->add_option("--f", a.config.dims, "Feature dimension (>= 8)")->check(CLI::Range(8, 1 << 20))->capture_default_str();
  sub->add_option("--seed", a.config.seed, "Generator seed")->capture_default_str();
  sub->add_option("--amplitude", a.config.artifact_amplitude, "Spoof artifact amplitude")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
}

int run_gen(GenArgs& a) {
  if (a.n_per_split > 0) a.config.n_train = a.config.n_val = a.config.n_eval = a.n_per_split;
  gen_synthetic(a.out, a.config);
  Provenance p("gen-synthetic");
  p.add("out", a.out);
  p.add("generator_version", kSyntheticVersion);
  p.add("n_train", a.config.n_train);
  p.add("n_val", a.config.n_val);
  p.add("n_eval", a.config.n_eval);
  p.add("t", a.config.frames);
  p.add("f", a.config.dims);
  p.add("seed", a.config.seed);
  p.add("amplitude", a.config.artifact_amplitude);
  p.add("noise_sigma", a.config.noise_sigma);
  p.write(a.out, "gen-synthetic");
  std::printf("wrote %zu/%zu/%zu utterances to %s\n", a.config.n_train, a.config.n_val, a.config.n_eval,
              a.out.c_str());
  return 0;
}

// ---- shared network/training flags ----

struct TrainFlags {
  SearchConfig config;
  std::size_t frames = 400;
};

void add_network_flags(CLI::App* sub, TrainFlags& f) {
  sub->add_option("--lr", f.config.lr, "Adam learning rate for the weights")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--batch-size", f.config.batch_size, "Batch size")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--cells", f.config.cells, "Number of cells")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--channels", f.config.channels, "Initial channel count (even)")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--nodes", f.config.nodes, "Intermediate nodes per cell")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--frames", f.frames, "Frames every utterance is fixed to")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--seed", f.config.seed, "Seed")->capture_default_str();
}

void record_network_flags(Provenance& p, const TrainFlags& f) {
  p.add("lr", f.config.lr);
  p.add("batch_size", f.config.batch_size);
  p.add("cells", f.config.cells);
  p.add("channels", f.config.channels);
  p.add("nodes", f.config.nodes);
  p.add("frames", f.frames);
  p.add("seed", f.config.seed);
}

void check_channels(const SearchConfig& c) {
  if (c.channels % 2 != 0) throw UsageError("--channels must be even");
}

// ---- search ----

struct SearchArgs {
  std::string train_manifest;
  std::string val_manifest;
  std::string out = "genotype.txt";
  std::string history;
  std::string order = "first";
  double xi = -1.0;
  TrainFlags flags;
};

void add_search(CLI::App& app, SearchArgs& a) {
  auto* sub = app.add_subcommand("search", "Bilevel architecture search on the supernet");
  sub->add_option("--train-manifest", a.train_manifest, "Training manifest")->required();
  sub->add_option("--val-manifest", a.val_manifest, "Validation manifest")->required();
  sub->add_option("--epochs", a.flags.config.epochs, "Search epochs")->check(CLI::PositiveNumber)->capture_default_str();
  sub->add_option("--arch-lr", a.flags.config.arch_lr, "Adam learning rate for the architecture logits")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  sub->add_option("--order", a.order, "first or second")->check(CLI::IsMember({"first", "second"}))->capture_default_str();
  sub->add_option("--xi", a.xi, "Virtual step for --order second (default: --lr)")->check(CLI::NonNegativeNumber);
  sub->add_option("--out", a.out, "Genotype output file")->capture_default_str();
  sub->add_option("--history", a.history, "History CSV (default: history.csv next to --out)");
  add_network_flags(sub, a.flags);
}

int run_search_cmd(SearchArgs& a) {
  SearchConfig& c = a.flags.config;
  check_channels(c);
  c.order = a.order == "second" ? SearchOrder::second : SearchOrder::first;
  if (a.xi >= 0.0) c.xi = a.xi;
  if (a.history.empty()) a.history = (parent_dir(a.out) / "history.csv").string();

  const Dataset train = load_dataset(a.train_manifest, a.flags.frames);
  const Dataset val = load_dataset(a.val_manifest, a.flags.frames);
  SearchResult r = run_search(c, train, val, [](const EpochRecord& e) { log_epoch("search", e); });

  ensure_parent(a.out);
  ensure_parent(a.history);
  write_genotype_file(a.out, r.genotype);
  write_history_csv(a.history, r.history);
  Provenance p("search");
  p.add("train_manifest", a.train_manifest);
  p.add("val_manifest", a.val_manifest);
  p.add("epochs", c.epochs);
  p.add("arch_lr", c.arch_lr);
  p.add("order", order_name(c.order));
  p.add("xi", c.virtual_step());
  record_network_flags(p, a.flags);
  p.add("out", a.out);
  p.add("history", a.history);
  p.write(parent_dir(a.out), "search");
  std::printf("%s", format_genotype(r.genotype).c_str());
  return 0;
}

// ---- train ----

struct TrainArgs {
  std::string genotype;
  std::string train_manifest;
  std::string out = "model.bin";
  std::string history;
  std::size_t epochs = 100;
  TrainFlags flags;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Retrain a discrete genotype from scratch");
  sub->add_option("--genotype", a.genotype, "Genotype file")->required();
  sub->add_option("--train-manifest", a.train_manifest, "Training manifest")->required();
  sub->add_option("--epochs", a.epochs, "Training epochs (default: twice the default search epochs)")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  sub->add_option("--out", a.out, "Model output file")->capture_default_str();
  sub->add_option("--history", a.history, "History CSV (default: train_history.csv next to --out)");
  add_network_flags(sub, a.flags);
}

int run_train(TrainArgs& a) {
  SearchConfig& c = a.flags.config;
  check_channels(c);
  c.epochs = a.epochs;
  c.retrain_epochs = a.epochs;
  if (a.history.empty()) a.history = (parent_dir(a.out) / "train_history.csv").string();

  const Genotype g = read_genotype_file(a.genotype);
  if (g.nodes() != c.nodes) {
    throw Error("genotype has " + std::to_string(g.nodes()) + " nodes per cell but --nodes is " +
                std::to_string(c.nodes));
  }
  const Dataset train = load_dataset(a.train_manifest, a.flags.frames);
  RetrainResult r = retrain_discrete(g, c, train, [](const EpochRecord& e) { log_epoch("train", e); });

  ensure_parent(a.out);
  ensure_parent(a.history);
  save_model(a.out, r.model, a.flags.frames);
  write_history_csv(a.history, r.history);
  Provenance p("train");
  p.add("genotype", a.genotype);
  p.add("train_manifest", a.train_manifest);
  p.add("epochs", a.epochs);
  record_network_flags(p, a.flags);
  p.add("out", a.out);
  p.add("history", a.history);
  p.add("parameters", r.model.parameter_count());
  p.write(parent_dir(a.out), "train");
  std::printf("trained %zu parameters, final train_acc %.4f\n", r.model.parameter_count(),
              r.history.empty() ? 0.0 : r.history.back().train_acc);
  return 0;
}

// ---- eval ----

struct EvalArgs {
  std::string model;
  std::string manifest;
  std::string scores;
  std::string det;
  std::string embeddings;
  std::size_t batch_size = 16;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* sub = app.add_subcommand("eval", "Score a manifest with a trained model");
  sub->add_option("--model", a.model, "Model file")->required();
  sub->add_option("--manifest", a.manifest, "Manifest to score (labels may be unknown)")->required();
  sub->add_option("--scores", a.scores, "Score file output")->required();
  sub->add_option("--det", a.det, "DET CSV output");
  sub->add_option("--embeddings", a.embeddings, "Embedding CSV output");
  sub->add_option("--batch-size", a.batch_size, "Scoring batch size")->check(CLI::PositiveNumber)->capture_default_str();
}

int run_eval(EvalArgs& a) {
  Model m = load_model(a.model);
  const Dataset data = load_dataset(a.manifest, m.frames, true);
  if (data.dims != m.network.config().feature_dim) {
    throw Error("manifest features have F=" + std::to_string(data.dims) + " but the model expects F=" +
                std::to_string(m.network.config().feature_dim));
  }
  const std::vector<ScoreRecord> records = score_dataset(m.network, data, a.batch_size);
  ensure_parent(a.scores);
  write_score_file(a.scores, records);
  const bool labeled = data.count(Label::bonafide) > 0 && data.count(Label::spoof) > 0;
  if (!a.det.empty()) {
    if (!labeled) throw Error("--det needs both bonafide and spoof labels in the manifest");
    ensure_parent(a.det);
    write_det_csv(a.det, det_points(records));
  }
  if (!a.embeddings.empty()) {
    ensure_parent(a.embeddings);
    dump_embeddings(m.network, data, a.batch_size, a.embeddings);
  }
  Provenance p("eval");
  p.add("model", a.model);
  p.add("manifest", a.manifest);
  p.add("scores", a.scores);
  p.add("det", a.det);
  p.add("embeddings", a.embeddings);
  p.add("batch_size", a.batch_size);
  p.add("frames", m.frames);
  p.write(parent_dir(a.scores), "eval");
  if (labeled) {
    print_eer(compute_eer(records));
  } else if (data.count(Label::bonafide) + data.count(Label::spoof) > 0) {
    std::fprintf(stderr, "note: manifest labels cover a single class; no EER computed\n");
  }
  return 0;
}

// ---- eer ----

struct EerArgs {
  std::string scores;
  std::string labels;
  std::string det;
};

void add_eer(CLI::App& app, EerArgs& a) {
  auto* sub = app.add_subcommand("eer", "EER of a score file against a labeled manifest");
  sub->add_option("--scores", a.scores, "Score file")->required();
  sub->add_option("--labels-manifest", a.labels, "Manifest with labels")->required();
  sub->add_option("--det", a.det, "DET CSV output");
}

int run_eer(EerArgs& a) {
  std::vector<ScoreRecord> records = read_score_file(a.scores);
  const std::vector<ManifestEntry> entries = load_manifest(a.labels, true);
  std::map<std::string, Label> labels;
  for (const ManifestEntry& e : entries) labels[e.utt_id] = e.label;

  std::vector<std::string> unmatched;
  std::map<std::string, bool> scored;
  for (ScoreRecord& r : records) {
    const auto it = labels.find(r.utt_id);
    if (it == labels.end()) {
      unmatched.push_back(r.utt_id);
      continue;
    }
    if (scored[r.utt_id]) throw Error("score file lists " + r.utt_id + " twice");
    scored[r.utt_id] = true;
    r.label = it->second;
  }
  for (const ManifestEntry& e : entries) {
    if (!scored.count(e.utt_id)) unmatched.push_back(e.utt_id);
  }
  if (!unmatched.empty()) {
    std::string list;
    for (const std::string& id : unmatched) list += " " + id;
    throw Error("unmatched utt_ids:" + list);
  }
  if (!a.det.empty()) {
    ensure_parent(a.det);
    write_det_csv(a.det, det_points(records));
  }
  print_eer(compute_eer(records));
  return 0;
}

// ---- gradcheck ----

struct GradArgs {
  GradSuiteOptions options;
};

void add_gradcheck(CLI::App& app, GradArgs& a) {
  auto* sub = app.add_subcommand("gradcheck", "Finite-difference check of every primitive and candidate op");
  sub->add_option("--seed", a.options.seed, "Suite seed")->capture_default_str();
  sub->add_option("--instances", a.options.instances, "Random instances per case")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
}

int run_gradcheck(GradArgs& a) {
  std::size_t failed = 0;
  for (const GradCase& c : gradient_cases()) {
    const GradCaseResult r = run_grad_case(c, a.options);
    std::printf("%-26s %s max_rel_err=%.3e instances=%zu rejected=%zu\n", r.name.c_str(), r.passed ? "ok  " : "FAIL",
                r.max_rel_error, r.instances, r.rejected_draws);
    if (!r.passed) ++failed;
  }
  std::printf("%zu case(s) failed\n", failed);
  return failed == 0 ? 0 : 1;
}

// Inserts `--key=value` for each line of the --config file right after the
// subcommand name, so flags given on the command line (parsed later) win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  std::string config;
  std::size_t sub = 0;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (sub == 0 && !args[i].empty() && args[i][0] != '-') sub = i;
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw UsageError("--config needs a file");
      config = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
      --i;
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
      --i;
    }
  }
  if (config.empty()) return args;
  if (sub == 0) throw UsageError("--config needs a subcommand");

  std::ifstream file(config);
  if (!file) throw UsageError("cannot read config file " + config);
  std::vector<std::string> extra;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(file, line)) {
    ++line_no;
    const std::size_t start = line.find_first_not_of(" \t\r");
    if (start == std::string::npos || line[start] == '#') continue;
    const std::size_t end = line.find_last_not_of(" \t\r");
    const std::string body = line.substr(start, end - start + 1);
    const std::size_t eq = body.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw UsageError(config + ":" + std::to_string(line_no) + ": expected key=value");
    }
    std::string key = body.substr(0, eq);
    const std::size_t key_end = key.find_last_not_of(" \t");
    key.resize(key_end + 1);
    std::string value = body.substr(eq + 1);
    value.erase(0, value.find_first_not_of(" \t"));
    for (char& ch : key) {
      if (ch == '_') ch = '-';
    }
    if (key == "config") throw UsageError(config + ":" + std::to_string(line_no) + ": nested config");
    extra.push_back("--" + key + "=" + value);
  }
  args.insert(args.begin() + static_cast<std::ptrdiff_t>(sub + 1), extra.begin(), extra.end());
  return args;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates and frees the same large buffers every step; keep them
  // on the heap instead of returning them to the kernel each time.
  mallopt(M_MMAP_THRESHOLD, 32 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif

  CLI::App app{"Differentiable architecture search for fake-audio detection", "lightdarts"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  GenArgs gen;
  SearchArgs search;
  TrainArgs train;
  EvalArgs eval;
  EerArgs eer;
  GradArgs grad;
  add_gen(app, gen);
  add_search(app, search);
  add_train(app, train);
  add_eval(app, eval);
  add_eer(app, eer);
  add_gradcheck(app, grad);
  for (CLI::App* sub : app.get_subcommands({})) {
    sub->add_option("--config", "key=value file; command-line flags take precedence");
  }

  try {
    std::vector<std::string> args = expand_config(argc, argv);
    std::vector<std::string> rest(args.rbegin(), args.rend() - 1);
    app.parse(std::move(rest));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  }

  try {
    if (app.got_subcommand("gen-synthetic")) return run_gen(gen);
    if (app.got_subcommand("search")) return run_search_cmd(search);
    if (app.got_subcommand("train")) return run_train(train);
    if (app.got_subcommand("eval")) return run_eval(eval);
    if (app.got_subcommand("eer")) return run_eer(eer);
    if (app.got_subcommand("gradcheck")) return run_gradcheck(grad);
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
