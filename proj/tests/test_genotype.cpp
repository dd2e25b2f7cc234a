#include <cmath>
#include <string>

#include "doctest.h"
#include "helpers.hpp"
#include "lightdarts/error.hpp"
#include "lightdarts/genotype.hpp"
#include "oracles.hpp"

using namespace lightdarts;

namespace {

// Logits from a small value set so that equal weights are common, with some
// rows copied wholesale to force cross-edge ties.
ArchParams tie_heavy_alpha(std::size_t nodes, std::uint64_t seed) {
  Rng rng(seed);
  ArchParams a = ArchParams::zeros(nodes);
  const double levels[] = {-1.0, 0.0, 0.5, 1.0, 2.0};
  for (Tensor* t : a.tensors()) {
    for (double& v : t->values()) v = levels[rng.below(5)];
    for (std::size_t row = 1; row < t->dim(0); ++row) {
      if (rng.below(3) != 0) continue;
      const std::size_t from = rng.below(row);
      std::copy(t->data() + from * kNumOps, t->data() + (from + 1) * kNumOps, t->data() + row * kNumOps);
    }
  }
  return a;
}

}  // namespace

TEST_CASE("genotype matches the exhaustive oracle on random draws") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    CAPTURE(seed);
    const std::size_t nodes = 2 + seed % 4;
    const ArchParams a = seed % 2 == 0 ? tie_heavy_alpha(nodes, seed) : ArchParams::init(nodes, seed, 1.0);
    const Genotype g = derive_genotype(a);
    CHECK(g.normal == oracle::derive_cell(a.normal, nodes));
    CHECK(g.reduce == oracle::derive_cell(a.reduce, nodes));
    CHECK_NOTHROW(g.validate());
  }
}

TEST_CASE("ties prefer the lower op index, then the lower source") {
  ArchParams a = ArchParams::zeros(2);
  const Genotype g = derive_genotype(a);
  // All-zero logits: every edge ties, so sep_conv_3x3 wins and the first two sources are kept.
  CHECK(format_genotype(g) ==
        "normal: (sep_conv_3x3,0) (sep_conv_3x3,1) (sep_conv_3x3,0) (sep_conv_3x3,1)\n"
        "reduce: (sep_conv_3x3,0) (sep_conv_3x3,1) (sep_conv_3x3,0) (sep_conv_3x3,1)\n"
        "concat: 2-3\n");
}

TEST_CASE("the zero op is never selected") {
  ArchParams a = ArchParams::zeros(3);
  for (Tensor* t : a.tensors())
    for (std::size_t row = 0; row < t->dim(0); ++row) (*t)[row * kNumOps + op_index(OpKind::zero)] = 50.0;
  const Genotype g = derive_genotype(a);
  for (const GenotypeEdge& e : g.normal) CHECK(e.op != OpKind::zero);
}

TEST_CASE("per-row shifts leave the genotype unchanged") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ArchParams a = ArchParams::init(4, seed, 1.0);
    const Genotype before = derive_genotype(a);
    Rng rng(seed + 1000);
    for (Tensor* t : a.tensors())
      for (std::size_t row = 0; row < t->dim(0); ++row) {
        const double c = rng.uniform(-20.0, 20.0);
        for (std::size_t k = 0; k < kNumOps; ++k) (*t)[row * kNumOps + k] += c;
      }
    CHECK(derive_genotype(a) == before);
  }
}

TEST_CASE("increasing maps of a row keep that edge's op choice") {
  // The first node keeps both of its edges, so its op choices are visible.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ArchParams a = ArchParams::init(3, seed, 1.0);
    const Genotype before = derive_genotype(a);
    for (Tensor* t : a.tensors())
      for (double& v : t->values()) v = std::exp(v) + 0.5 * v * v * v;
    const Genotype after = derive_genotype(a);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(after.normal[i] == before.normal[i]);
      CHECK(after.reduce[i] == before.reduce[i]);
    }
  }
}

TEST_CASE("non-finite logits are rejected") {
  ArchParams a = ArchParams::zeros(2);
  a.reduce[4] = std::nan("");
  CHECK_THROWS_AS(derive_genotype(a), NonFiniteError);
}

TEST_CASE("genotype text round trips") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Genotype g = testutil::random_genotype(2 + seed % 4, seed);
    CHECK(parse_genotype(format_genotype(g)) == g);
  }
  const auto dir = testutil::scratch_dir("genotype_io");
  const Genotype g = testutil::random_genotype(4, 3);
  write_genotype_file((dir / "g.txt").string(), g);
  CHECK(read_genotype_file((dir / "g.txt").string()) == g);
}

TEST_CASE("genotype parse errors carry positions") {
  auto fails_at = [](const std::string& text, std::size_t line) {
    try {
      parse_genotype(text);
    } catch (const ParseError& e) {
      return e.line() == line;
    }
    return false;
  };
  const std::string ok_reduce = "reduce: (skip_connect,0) (avg_pool_3x3,1)\n";
  CHECK(fails_at("normal: (conv_9x9,0) (skip_connect,1)\n" + ok_reduce + "concat: 2-2\n", 1));
  CHECK(fails_at("normal: (skip_connect,0) (skip_connect,2)\n" + ok_reduce + "concat: 2-2\n", 1));
  CHECK(fails_at("normal: (skip_connect,0) (zero,1)\n" + ok_reduce + "concat: 2-2\n", 1));
  CHECK(fails_at("normal: (skip_connect,1) (skip_connect,1)\n" + ok_reduce + "concat: 2-2\n", 1));
  CHECK(fails_at("normal: (skip_connect,0) (skip_connect,1)\n" + ok_reduce + "concat: 2-5\n", 3));
  CHECK(fails_at("normal: (skip_connect,0) (skip_connect,1)\n" + ok_reduce, 3));
  CHECK(fails_at("normal: (skip_connect,0 (skip_connect,1)\n" + ok_reduce + "concat: 2-2\n", 1));
  CHECK(fails_at("normal: (skip_connect,0) (skip_connect,1)\nreduce: (skip_connect,0)\nconcat: 2-2\n", 2));
  CHECK_NOTHROW(parse_genotype("normal: (skip_connect,0) (skip_connect,1)\n" + ok_reduce + "concat: 2-2\n"));

  try {
    parse_genotype("normal: (skip_connect,0) (bogus,1)\n" + ok_reduce + "concat: 2-2\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.column() == 27);
  }
}
