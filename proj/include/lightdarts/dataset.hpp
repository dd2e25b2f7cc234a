#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lightdarts/features.hpp"
#include "lightdarts/tensor.hpp"

namespace lightdarts {

// Class index doubles as the logit index: 0 bonafide, 1 spoof.
enum class Label { bonafide = 0, spoof = 1, unknown = 2 };

std::string_view label_name(Label label) noexcept;
std::optional<Label> parse_label(std::string_view text) noexcept;

struct ManifestEntry {
  std::string utt_id;
  std::string path;  // relative to the manifest's directory
  Label label = Label::unknown;
  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

// `utt_id<TAB>path<TAB>label` per line. Labels are bonafide or spoof;
// `unknown` is accepted only when `allow_unknown` is set. Duplicate ids and
// malformed lines throw ParseError with the line number.
std::vector<ManifestEntry> parse_manifest(std::string_view text, bool allow_unknown = false);
std::vector<ManifestEntry> load_manifest(const std::string& path, bool allow_unknown = false);
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);

// A manifest with every feature file loaded and frame-fixed.
struct Dataset {
  std::vector<ManifestEntry> entries;
  std::vector<FeatureMatrix> features;
  std::size_t frames = 0;
  std::size_t dims = 0;

  std::size_t size() const noexcept { return entries.size(); }
  std::size_t count(Label label) const;
};

// Unreadable or inconsistent feature files throw Error naming the utt_id.
Dataset load_dataset(const std::string& manifest_path, std::size_t frames, bool allow_unknown = false);
Dataset make_dataset(std::vector<ManifestEntry> entries, std::vector<FeatureMatrix> features, std::size_t frames);

struct Batch {
  std::size_t index = 0;
  Tensor features;          // [B, 1, T, F]
  std::vector<int> labels;  // class indices; 2 for unknown
  std::vector<std::string> ids;
};

// Entry order for one epoch, a pure function of (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch);

// Shuffled batches for one epoch; the last short batch is kept.
std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch);
// Batches in manifest order.
std::vector<Batch> ordered_batches(const Dataset& data, std::size_t batch_size);
Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, std::size_t index);

}  // namespace lightdarts
