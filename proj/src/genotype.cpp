#include "lightdarts/genotype.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <fstream>
#include <sstream>

#include "lightdarts/error.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

ArchParams ArchParams::init(std::size_t nodes, std::uint64_t seed, double scale) {
  ArchParams a = zeros(nodes);
  Rng rng(derive_seed(seed, {hash_tag("alpha")}));
  for (double& v : a.normal.values()) v = scale * rng.normal();
  for (double& v : a.reduce.values()) v = scale * rng.normal();
  return a;
}

ArchParams ArchParams::zeros(std::size_t nodes) {
  ArchParams a{Tensor({edge_count(nodes), kNumOps}), Tensor({edge_count(nodes), kNumOps})};
  a.normal.set_requires_grad(true);
  a.reduce.set_requires_grad(true);
  return a;
}

std::size_t ArchParams::nodes() const {
  std::size_t n = 0;
  while (edge_count(n) < edges()) ++n;
  return n;
}

namespace {

void validate_cell(const std::vector<GenotypeEdge>& cell, const char* name) {
  if (cell.empty() || cell.size() % 2 != 0) {
    throw Error(std::string("genotype: ") + name + " cell needs two entries per node, got " +
                std::to_string(cell.size()));
  }
  for (std::size_t j = 0; j < cell.size() / 2; ++j) {
    const GenotypeEdge& a = cell[2 * j];
    const GenotypeEdge& b = cell[2 * j + 1];
    for (const GenotypeEdge& e : {a, b}) {
      if (e.source >= j + 2) {
        throw Error(std::string("genotype: ") + name + " node " + std::to_string(j + 2) + " references node " +
                    std::to_string(e.source) + " which is not a predecessor");
      }
      if (e.op == OpKind::zero) {
        throw Error(std::string("genotype: ") + name + " node " + std::to_string(j + 2) + " uses the zero op");
      }
    }
    if (a.source == b.source) {
      throw Error(std::string("genotype: ") + name + " node " + std::to_string(j + 2) + " has duplicate source " +
                  std::to_string(a.source));
    }
  }
}

}  // namespace

void Genotype::validate() const {
  validate_cell(normal, "normal");
  validate_cell(reduce, "reduce");
  if (normal.size() != reduce.size()) throw Error("genotype: normal and reduce cells differ in node count");
}

namespace {

std::vector<double> softmax_row(const double* logits) {
  const double mx = *std::max_element(logits, logits + kNumOps);
  std::vector<double> w(kNumOps);
  double z = 0.0;
  for (std::size_t k = 0; k < kNumOps; ++k) {
    w[k] = std::exp(logits[k] - mx);
    z += w[k];
  }
  for (double& v : w) v /= z;
  return w;
}

std::vector<GenotypeEdge> derive_cell(const Tensor& logits, std::size_t nodes) {
  struct Candidate {
    double strength;
    std::size_t op;
    std::size_t source;
  };
  std::vector<GenotypeEdge> cell;
  for (std::size_t j = 0; j < nodes; ++j) {
    std::vector<Candidate> candidates;
    for (std::size_t src = 0; src < j + 2; ++src) {
      const std::vector<double> w = softmax_row(logits.data() + edge_index(j, src) * kNumOps);
      std::size_t best = kNumOps;
      for (std::size_t k = 0; k < kNumOps; ++k) {
        if (k == op_index(OpKind::zero)) continue;
        if (best == kNumOps || w[k] > w[best]) best = k;
      }
      candidates.push_back({w[best], best, src});
    }
    std::sort(candidates.begin(), candidates.end(), [](const Candidate& a, const Candidate& b) {
      if (a.strength != b.strength) return a.strength > b.strength;
      if (a.op != b.op) return a.op < b.op;
      return a.source < b.source;
    });
    std::array<Candidate, 2> kept = {candidates[0], candidates[1]};
    if (kept[1].source < kept[0].source) std::swap(kept[0], kept[1]);
    for (const Candidate& c : kept) cell.push_back({kAllOps[c.op], c.source});
  }
  return cell;
}

}  // namespace

Genotype derive_genotype(const ArchParams& alpha) {
  if (!alpha.all_finite()) throw NonFiniteError("derive_genotype: non-finite architecture logits");
  const std::size_t nodes = alpha.nodes();
  return Genotype{derive_cell(alpha.normal, nodes), derive_cell(alpha.reduce, nodes)};
}

std::string format_genotype(const Genotype& genotype) {
  std::ostringstream out;
  auto cell = [&](const char* name, const std::vector<GenotypeEdge>& edges) {
    out << name << ":";
    for (const GenotypeEdge& e : edges) out << " (" << op_name(e.op) << "," << e.source << ")";
    out << "\n";
  };
  cell("normal", genotype.normal);
  cell("reduce", genotype.reduce);
  out << "concat: 2-" << genotype.nodes() + 1 << "\n";
  return out.str();
}

namespace {

class LineParser {
 public:
  LineParser(std::string_view text, std::size_t line) : text_(text), line_(line) {}

  [[noreturn]] void fail(const std::string& message) const { throw ParseError(line_, pos_ + 1, message); }

  void skip_spaces() {
    while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t')) ++pos_;
  }
  bool at_end() {
    skip_spaces();
    return pos_ >= text_.size();
  }
  void expect(char c) {
    skip_spaces();
    if (pos_ >= text_.size() || text_[pos_] != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string_view word() {
    skip_spaces();
    const std::size_t start = pos_;
    while (pos_ < text_.size() && (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_')) {
      ++pos_;
    }
    if (start == pos_) fail("expected a name");
    return text_.substr(start, pos_ - start);
  }
  std::size_t number() {
    skip_spaces();
    const std::size_t start = pos_;
    std::size_t value = 0;
    while (pos_ < text_.size() && std::isdigit(static_cast<unsigned char>(text_[pos_]))) {
      value = value * 10 + static_cast<std::size_t>(text_[pos_] - '0');
      if (value > 1000000) fail("number out of range");
      ++pos_;
    }
    if (start == pos_) fail("expected a number");
    return value;
  }
  std::size_t column() const { return pos_ + 1; }
  std::size_t line() const { return line_; }
  void rewind_to(std::size_t column) { pos_ = column - 1; }

 private:
  std::string_view text_;
  std::size_t line_;
  std::size_t pos_ = 0;
};

std::vector<GenotypeEdge> parse_cell_line(std::string_view text, std::size_t line, std::string_view key) {
  LineParser p(text, line);
  if (p.word() != key) {
    p.rewind_to(1);
    p.fail("expected '" + std::string(key) + ":'");
  }
  p.expect(':');
  std::vector<GenotypeEdge> edges;
  while (!p.at_end()) {
    p.expect('(');
    const std::size_t name_col = p.column();
    const std::string_view name = p.word();
    const auto op = parse_op_name(name);
    if (!op) {
      p.rewind_to(name_col);
      p.skip_spaces();
      p.fail("unknown operation '" + std::string(name) + "'");
    }
    p.expect(',');
    const std::size_t src = p.number();
    p.expect(')');
    edges.push_back({*op, src});
  }
  return edges;
}

}  // namespace

Genotype parse_genotype(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    std::string_view l = text.substr(start, end - start);
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
    lines.push_back(l);
    start = end + 1;
  }
  while (!lines.empty() && lines.back().find_first_not_of(" \t") == std::string_view::npos) lines.pop_back();
  if (lines.size() != 3) {
    throw ParseError(std::min<std::size_t>(lines.size() + 1, 4), 1,
                     "expected 3 lines (normal, reduce, concat), got " + std::to_string(lines.size()));
  }
  Genotype g{parse_cell_line(lines[0], 1, "normal"), parse_cell_line(lines[1], 2, "reduce")};
  const char* names[] = {"normal", "reduce"};
  for (std::size_t i = 0; i < 2; ++i) {
    try {
      validate_cell(i == 0 ? g.normal : g.reduce, names[i]);
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(i + 1, 1, e.what());
    }
  }
  if (g.normal.size() != g.reduce.size()) throw ParseError(2, 1, "normal and reduce cells differ in node count");

  LineParser p(lines[2], 3);
  if (p.word() != "concat") {
    p.rewind_to(1);
    p.fail("expected 'concat:'");
  }
  p.expect(':');
  const std::size_t first_col = p.column();
  const std::size_t first = p.number();
  p.expect('-');
  const std::size_t last = p.number();
  if (!p.at_end()) p.fail("unexpected trailing text");
  if (first != 2 || last != g.nodes() + 1) {
    p.rewind_to(first_col);
    p.skip_spaces();
    p.fail("concat range must be 2-" + std::to_string(g.nodes() + 1));
  }
  return g;
}

Genotype read_genotype_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open genotype file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_genotype(buf.str());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.column(), path + ": " + e.message());
  }
}

void write_genotype_file(const std::string& path, const Genotype& genotype) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write genotype file " + path);
  out << format_genotype(genotype);
  if (!out) throw Error("failed writing genotype file " + path);
}

}  // namespace lightdarts
