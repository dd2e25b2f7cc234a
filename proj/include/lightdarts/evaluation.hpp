#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lightdarts/dataset.hpp"
#include "lightdarts/supernet.hpp"

namespace lightdarts {

// Higher score means more bonafide.
struct ScoreRecord {
  std::string utt_id;
  double score = 0.0;
  Label label = Label::unknown;
};

struct EerResult {
  double eer = 0.0;
  double threshold = 0.0;
};

// A score s is accepted as bonafide at threshold t when s >= t. Operating
// points are taken at -inf, every unique score and +inf; the EER is read off
// where FAR - FRR changes sign, interpolating linearly between the two
// adjacent points. Unknown labels are ignored. Throws Error unless both
// classes are present.
EerResult compute_eer(std::span<const ScoreRecord> records);

struct DetPoint {
  double threshold = 0.0;
  double far = 0.0;
  double frr = 0.0;
};

// Same operating points as compute_eer, by increasing threshold.
std::vector<DetPoint> det_points(std::span<const ScoreRecord> records);
void write_det_csv(const std::string& path, std::span<const DetPoint> points);

// `utt_id score` per line with six decimals. Parsed records carry unknown
// labels; malformed lines throw ParseError.
std::string format_scores(std::span<const ScoreRecord> records);
std::vector<ScoreRecord> parse_scores(std::string_view text);
void write_score_file(const std::string& path, std::span<const ScoreRecord> records);
std::vector<ScoreRecord> read_score_file(const std::string& path);

// Bonafide logit minus spoof logit per row of [N, 1, T, F] features, using
// stored norm statistics so each score depends only on its own utterance.
std::vector<double> score_batch(Network& net, const Tensor& features);
double score_utterance(Network& net, const FeatureMatrix& features);
std::vector<ScoreRecord> score_dataset(Network& net, const Dataset& data, std::size_t batch_size);

// Pooled features fed to the classifier head, one row per utterance.
std::vector<std::vector<double>> embed_dataset(Network& net, const Dataset& data, std::size_t batch_size);
// CSV with header `utt_id,label,e0,...,e{D-1}`.
void dump_embeddings(Network& net, const Dataset& data, std::size_t batch_size, const std::string& path);

}  // namespace lightdarts
