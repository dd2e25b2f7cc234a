#include <sys/wait.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>

#include "doctest.h"
#include "helpers.hpp"

namespace fs = std::filesystem;

namespace {

// Runs the CLI with `args`, output captured to `log`; returns the exit code.
int run(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(LIGHTDARTS_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("cli pipeline from synthetic data to eer") {
  const fs::path dir = testutil::scratch_dir("cli");
  const fs::path log = dir / "log.txt";
  const std::string d = dir.string();
  const std::string net = " --cells 3 --channels 4 --nodes 2 --frames 16 --batch-size 8 --seed 3";

  REQUIRE(run("gen-synthetic --out " + d + "/data --n-train 24 --n-val 16 --n-eval 16 --t 16 --f 8 --seed 1", log) ==
          0);
  CHECK(fs::exists(dir / "data" / "generator.txt"));

  REQUIRE(run("search --train-manifest " + d + "/data/train.tsv --val-manifest " + d +
                  "/data/val.tsv --epochs 1 --lr 1e-3 --out " + d + "/g.txt" + net,
              log) == 0);
  CHECK(slurp(log).find("normal:") != std::string::npos);
  CHECK(fs::exists(dir / "history.csv"));
  CHECK(fs::exists(dir / "search.run.txt"));

  // Config files expand into flags; explicit flags still win.
  std::ofstream(dir / "train.cfg") << "epochs=7\nlr=0.001\n";
  REQUIRE(run("train --config " + d + "/train.cfg --epochs 2 --genotype " + d + "/g.txt --train-manifest " + d +
                  "/data/train.tsv --out " + d + "/m.bin" + net,
              log) == 0);
  const std::string history = slurp(dir / "train_history.csv");
  CHECK(std::count(history.begin(), history.end(), '\n') == 3);

  REQUIRE(run("eval --model " + d + "/m.bin --manifest " + d + "/data/eval.tsv --scores " + d + "/s.txt --det " + d +
                  "/det.csv --embeddings " + d + "/e.csv",
              log) == 0);
  CHECK(slurp(log).find("EER% = ") != std::string::npos);
  CHECK(fs::exists(dir / "det.csv"));
  CHECK(fs::exists(dir / "e.csv"));

  CHECK(run("eer --scores " + d + "/s.txt --labels-manifest " + d + "/data/eval.tsv", log) == 0);
  CHECK(slurp(log).find("EER") != std::string::npos);

  // A score file missing one utterance does not match the manifest.
  std::string scores = slurp(dir / "s.txt");
  scores.erase(0, scores.find('\n') + 1);
  std::ofstream(dir / "short.txt") << scores;
  CHECK(run("eer --scores " + d + "/short.txt --labels-manifest " + d + "/data/eval.tsv", log) == 1);

  CHECK(run("eval --model " + d + "/missing.bin --manifest " + d + "/data/eval.tsv --scores " + d + "/x.txt", log) ==
        1);
  CHECK(run("train --genotype " + d + "/g.txt", log) == 2);
  CHECK(run("search --bogus-flag 1", log) == 2);
  CHECK(run("frobnicate", log) == 2);
  CHECK(run("search --train-manifest a --val-manifest b --order third", log) == 2);
}

TEST_CASE("cli gradcheck passes") {
  const fs::path dir = testutil::scratch_dir("cli_grad");
  CHECK(run("gradcheck --instances 2", dir / "log.txt") == 0);
}
