#include "lightdarts/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "lightdarts/error.hpp"
#include "lightdarts/rng.hpp"

namespace lightdarts {

std::string_view label_name(Label label) noexcept {
  switch (label) {
    case Label::bonafide:
      return "bonafide";
    case Label::spoof:
      return "spoof";
    case Label::unknown:
      return "unknown";
  }
  return "unknown";
}

std::optional<Label> parse_label(std::string_view text) noexcept {
  if (text == "bonafide") return Label::bonafide;
  if (text == "spoof") return Label::spoof;
  if (text == "unknown") return Label::unknown;
  return std::nullopt;
}

std::vector<ManifestEntry> parse_manifest(std::string_view text, bool allow_unknown) {
  std::vector<ManifestEntry> entries;
  std::unordered_set<std::string> seen;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const std::size_t end = text.find('\n');
    std::string_view line = text.substr(0, end);
    text = end == std::string_view::npos ? std::string_view{} : text.substr(end + 1);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (line.empty()) continue;

    std::vector<std::string_view> fields;
    std::vector<std::size_t> columns;
    std::size_t start = 0;
    while (true) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
      columns.push_back(start + 1);
      if (tab == std::string_view::npos) break;
      start = tab + 1;
    }
    if (fields.size() != 3) {
      throw ParseError(line_no, 1, "expected 3 tab-separated fields, got " + std::to_string(fields.size()));
    }
    for (std::size_t i = 0; i < 3; ++i) {
      if (fields[i].empty()) throw ParseError(line_no, columns[i], "empty field");
    }
    const std::optional<Label> label = parse_label(fields[2]);
    if (!label || (*label == Label::unknown && !allow_unknown)) {
      throw ParseError(line_no, columns[2], "label must be bonafide or spoof, got '" + std::string(fields[2]) + "'");
    }
    std::string id(fields[0]);
    if (!seen.insert(id).second) throw ParseError(line_no, 1, "duplicate utt_id '" + id + "'");
    entries.push_back({std::move(id), std::string(fields[1]), *label});
  }
  return entries;
}

std::vector<ManifestEntry> load_manifest(const std::string& path, bool allow_unknown) {
  std::ifstream file(path);
  if (!file) throw Error("manifest: cannot open " + path);
  std::stringstream buffer;
  buffer << file.rdbuf();
  try {
    return parse_manifest(buffer.str(), allow_unknown);
  } catch (const ParseError& e) {
    throw ParseError(e.line(), e.column(), path + ": " + e.message());
  }
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream file(path, std::ios::trunc);
  if (!file) throw Error("manifest: cannot open " + path + " for writing");
  for (const ManifestEntry& e : entries) file << e.utt_id << '\t' << e.path << '\t' << label_name(e.label) << '\n';
  if (!file) throw Error("manifest: write failed for " + path);
}

std::size_t Dataset::count(Label label) const {
  return static_cast<std::size_t>(
      std::count_if(entries.begin(), entries.end(), [&](const ManifestEntry& e) { return e.label == label; }));
}

Dataset make_dataset(std::vector<ManifestEntry> entries, std::vector<FeatureMatrix> features, std::size_t frames) {
  if (entries.size() != features.size()) throw Error("dataset: entry and feature counts differ");
  if (frames == 0) throw Error("dataset: frame count must be positive");
  Dataset d;
  d.frames = frames;
  for (std::size_t i = 0; i < entries.size(); ++i) {
    FeatureMatrix& m = features[i];
    if (i == 0) d.dims = m.dims;
    if (m.dims != d.dims) {
      throw Error("dataset: " + entries[i].utt_id + " has F=" + std::to_string(m.dims) + ", expected " +
                  std::to_string(d.dims));
    }
    if (m.frames != frames) m = fix_frames(m, frames);
  }
  d.entries = std::move(entries);
  d.features = std::move(features);
  return d;
}

Dataset load_dataset(const std::string& manifest_path, std::size_t frames, bool allow_unknown) {
  std::vector<ManifestEntry> entries = load_manifest(manifest_path, allow_unknown);
  if (entries.empty()) throw Error("dataset: manifest " + manifest_path + " is empty");
  const std::filesystem::path base = std::filesystem::path(manifest_path).parent_path();
  std::vector<FeatureMatrix> features;
  features.reserve(entries.size());
  for (const ManifestEntry& e : entries) {
    try {
      features.push_back(load_feature((base / e.path).string()));
    } catch (const Error& err) {
      throw Error("dataset: utterance " + e.utt_id + ": " + err.what());
    }
  }
  return make_dataset(std::move(entries), std::move(features), frames);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::uint64_t epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, {hash_tag("epoch_order"), epoch}));
  rng.shuffle(order.begin(), order.end());
  return order;
}

Batch make_batch(const Dataset& data, std::span<const std::size_t> rows, std::size_t index) {
  Batch b;
  b.index = index;
  const std::size_t plane = data.frames * data.dims;
  b.features = Tensor::uninitialized({rows.size(), 1, data.frames, data.dims});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const std::size_t r = rows[i];
    std::copy(data.features[r].values.begin(), data.features[r].values.end(), b.features.data() + i * plane);
    b.labels.push_back(static_cast<int>(data.entries[r].label));
    b.ids.push_back(data.entries[r].utt_id);
  }
  return b;
}

namespace {

std::vector<Batch> split(const Dataset& data, const std::vector<std::size_t>& order, std::size_t batch_size) {
  if (batch_size == 0) throw Error("batches: batch size must be at least 1");
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t len = std::min(batch_size, order.size() - start);
    out.push_back(make_batch(data, std::span(order).subspan(start, len), out.size()));
  }
  return out;
}

}  // namespace

std::vector<Batch> batches(const Dataset& data, std::size_t batch_size, std::uint64_t seed, std::uint64_t epoch) {
  return split(data, epoch_order(data.size(), seed, epoch), batch_size);
}

std::vector<Batch> ordered_batches(const Dataset& data, std::size_t batch_size) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  return split(data, order, batch_size);
}

}  // namespace lightdarts
