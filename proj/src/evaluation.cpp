#include "lightdarts/evaluation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

#include "lightdarts/error.hpp"

namespace lightdarts {

namespace {

struct SortedScores {
  std::vector<double> bonafide;
  std::vector<double> spoof;
};

SortedScores split_scores(std::span<const ScoreRecord> records) {
  SortedScores s;
  for (const ScoreRecord& r : records) {
    if (!std::isfinite(r.score)) throw Error("eer: non-finite score for " + r.utt_id);
    if (r.label == Label::bonafide) s.bonafide.push_back(r.score);
    if (r.label == Label::spoof) s.spoof.push_back(r.score);
  }
  if (s.bonafide.empty() || s.spoof.empty()) throw Error("eer: need at least one bonafide and one spoof score");
  std::sort(s.bonafide.begin(), s.bonafide.end());
  std::sort(s.spoof.begin(), s.spoof.end());
  return s;
}

}  // namespace

std::vector<DetPoint> det_points(std::span<const ScoreRecord> records) {
  const SortedScores s = split_scores(records);
  std::vector<double> thresholds;
  thresholds.reserve(s.bonafide.size() + s.spoof.size());
  std::merge(s.bonafide.begin(), s.bonafide.end(), s.spoof.begin(), s.spoof.end(), std::back_inserter(thresholds));
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  const double nb = static_cast<double>(s.bonafide.size());
  const double ns = static_cast<double>(s.spoof.size());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<DetPoint> points;
  points.reserve(thresholds.size() + 2);
  points.push_back({-inf, 1.0, 0.0});
  // Walk both sorted lists; `rejected_*` counts scores strictly below t.
  std::size_t rejected_b = 0, rejected_s = 0;
  for (double t : thresholds) {
    while (rejected_b < s.bonafide.size() && s.bonafide[rejected_b] < t) ++rejected_b;
    while (rejected_s < s.spoof.size() && s.spoof[rejected_s] < t) ++rejected_s;
    points.push_back({t, static_cast<double>(s.spoof.size() - rejected_s) / ns, static_cast<double>(rejected_b) / nb});
  }
  points.push_back({inf, 0.0, 1.0});
  return points;
}

EerResult compute_eer(std::span<const ScoreRecord> records) {
  const std::vector<DetPoint> points = det_points(records);
  for (std::size_t k = 1; k < points.size(); ++k) {
    const DetPoint& cur = points[k];
    const double d = cur.far - cur.frr;
    if (d > 0.0) continue;
    if (d == 0.0) return {cur.far, cur.threshold};
    const DetPoint& prev = points[k - 1];
    const double dp = prev.far - prev.frr;
    const double u = dp / (dp - d);
    const double eer = prev.far + u * (cur.far - prev.far);
    double threshold;
    if (!std::isfinite(prev.threshold)) {
      threshold = cur.threshold;
    } else if (!std::isfinite(cur.threshold)) {
      threshold = prev.threshold;
    } else {
      threshold = prev.threshold + u * (cur.threshold - prev.threshold);
    }
    return {eer, threshold};
  }
  // The +inf endpoint always has FAR - FRR = -1, so the loop returns.
  throw Error("eer: no crossing found");
}

void write_det_csv(const std::string& path, std::span<const DetPoint> points) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("det: cannot open " + path + " for writing");
  file << "threshold,far,frr\n";
  char buf[96];
  for (const DetPoint& p : points) {
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.threshold, p.far, p.frr);
    file << buf;
  }
  if (!file) throw Error("det: write failed for " + path);
}

std::string format_scores(std::span<const ScoreRecord> records) {
  std::string out;
  char buf[64];
  for (const ScoreRecord& r : records) {
    std::snprintf(buf, sizeof buf, " %.6f\n", r.score);
    out += r.utt_id;
    out += buf;
  }
  return out;
}

std::vector<ScoreRecord> parse_scores(std::string_view text) {
  std::vector<ScoreRecord> out;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const std::size_t end = text.find('\n');
    std::string_view line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.find_first_not_of(" \t") == std::string_view::npos) continue;

    std::vector<std::pair<std::string_view, std::size_t>> fields;
    std::size_t i = 0;
    while (i < line.size()) {
      const std::size_t start = line.find_first_not_of(" \t", i);
      if (start == std::string_view::npos) break;
      const std::size_t stop = std::min(line.find_first_of(" \t", start), line.size());
      fields.emplace_back(line.substr(start, stop - start), start + 1);
      i = stop;
    }
    if (fields.size() != 2) {
      throw ParseError(line_no, 1, "expected 'utt_id score', got " + std::to_string(fields.size()) + " fields");
    }
    const auto [token, column] = fields[1];
    double score = 0.0;
    const auto res = std::from_chars(token.data(), token.data() + token.size(), score);
    if (res.ec != std::errc() || res.ptr != token.data() + token.size() || !std::isfinite(score)) {
      throw ParseError(line_no, column, "invalid score '" + std::string(token) + "'");
    }
    out.push_back({std::string(fields[0].first), score, Label::unknown});
  }
  return out;
}

void write_score_file(const std::string& path, std::span<const ScoreRecord> records) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("scores: cannot open " + path + " for writing");
  file << format_scores(records);
  if (!file) throw Error("scores: write failed for " + path);
}

std::vector<ScoreRecord> read_score_file(const std::string& path) {
  std::ifstream file(path);
  if (!file) throw Error("scores: cannot open " + path);
  std::stringstream buffer;
  buffer << file.rdbuf();
  try {
    return parse_scores(buffer.str());
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.column(), path + ": " + e.message());
  }
}

namespace {

Network::Output frozen_forward(Tape& tape, Network& net, const Tensor& features) {
  if (net.is_supernet()) throw Error("scoring: needs a discrete network");
  ForwardContext ctx{tape, NormMode::frozen};
  return net.forward(ctx, tape.constant(features));
}

}  // namespace

std::vector<double> score_batch(Network& net, const Tensor& features) {
  Tape tape(TapeMode::inference);
  const Network::Output out = frozen_forward(tape, net, features);
  const Tensor& logits = out.logits.value();
  std::vector<double> scores(logits.dim(0));
  for (std::size_t i = 0; i < scores.size(); ++i) {
    scores[i] = logits[2 * i] - logits[2 * i + 1];
    if (!std::isfinite(scores[i])) throw NonFiniteError("scoring: non-finite logits for row " + std::to_string(i));
  }
  return scores;
}

double score_utterance(Network& net, const FeatureMatrix& features) {
  Tensor x = Tensor::uninitialized({1, 1, features.frames, features.dims});
  std::copy(features.values.begin(), features.values.end(), x.data());
  return score_batch(net, x)[0];
}

std::vector<ScoreRecord> score_dataset(Network& net, const Dataset& data, std::size_t batch_size) {
  std::vector<ScoreRecord> out;
  out.reserve(data.size());
  for (const Batch& b : ordered_batches(data, batch_size)) {
    const std::vector<double> scores = score_batch(net, b.features);
    for (std::size_t i = 0; i < scores.size(); ++i) {
      out.push_back({b.ids[i], scores[i], static_cast<Label>(b.labels[i])});
    }
  }
  return out;
}

std::vector<std::vector<double>> embed_dataset(Network& net, const Dataset& data, std::size_t batch_size) {
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (const Batch& b : ordered_batches(data, batch_size)) {
    Tape tape(TapeMode::inference);
    const Network::Output pass = frozen_forward(tape, net, b.features);
    const Tensor& e = pass.embedding.value();
    const std::size_t d = e.dim(1);
    for (std::size_t i = 0; i < e.dim(0); ++i) out.emplace_back(e.data() + i * d, e.data() + (i + 1) * d);
  }
  return out;
}

void dump_embeddings(Network& net, const Dataset& data, std::size_t batch_size, const std::string& path) {
  const std::vector<std::vector<double>> rows = embed_dataset(net, data, batch_size);
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("embeddings: cannot open " + path + " for writing");
  file << "utt_id,label";
  for (std::size_t j = 0; j < net.embedding_dim(); ++j) file << ",e" << j;
  file << '\n';
  char buf[32];
  for (std::size_t i = 0; i < rows.size(); ++i) {
    file << data.entries[i].utt_id << ',' << label_name(data.entries[i].label);
    for (double v : rows[i]) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      file << buf;
    }
    file << '\n';
  }
  if (!file) throw Error("embeddings: write failed for " + path);
}

}  // namespace lightdarts
