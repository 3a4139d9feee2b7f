#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace nfb {

struct Sentence {
  std::string id;
  std::string text;
  std::optional<int> label;  // dataset label, e.g. 1 = morally wrong

  friend bool operator==(const Sentence&, const Sentence&) = default;
};

// One JSON object per line with fields {id, text, label?}. Blank lines are
// skipped; a missing id becomes the 1-based line number.
std::vector<Sentence> parse_corpus_jsonl(std::string_view text);
std::vector<Sentence> load_corpus(const std::string& path);
std::string corpus_to_jsonl(const std::vector<Sentence>& sentences);

// First-person everyday scenarios built from templates, half labeled 1
// (wrong) and half 0 (fine), shuffled with the seed. Stand-in for the real
// dataset when none is available.
std::vector<Sentence> synthetic_corpus(std::size_t count, std::uint64_t seed);

struct DatasetSplit {
  std::vector<std::size_t> axis_fit;    // indices into the corpus
  std::vector<std::size_t> experiment;  // disjoint from axis_fit
  std::uint64_t seed = 0;
  bool odd_count = false;
};

// Seeded halving, stratified by label when every sentence has one. An odd
// count leaves the extra sentence in the experiment half.
DatasetSplit split_dataset(const std::vector<Sentence>& sentences, std::uint64_t seed);

// layer = max(1, round(p * L / 100)) per percentile, deduplicated, ascending.
std::vector<int> select_layers(int layer_count, const std::vector<double>& percentiles = {0, 25, 50, 75, 100});

// "auto" -> percentiles, otherwise a comma-separated list of layer indices.
std::vector<int> parse_layers(std::string_view spec, int layer_count);

}  // namespace nfb
