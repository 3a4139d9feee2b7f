#include "nfb/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json_internal.hpp"
#include "nfb/error.hpp"
#include "nfb/random.hpp"

namespace nfb {

std::vector<Sentence> parse_corpus_jsonl(std::string_view text) {
  std::vector<Sentence> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    const auto line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const std::string where = "corpus line " + std::to_string(line_no);
    const auto j = detail::parse_json(line, where);
    try {
      Sentence s;
      s.text = j.at("text").get<std::string>();
      if (j.contains("id") && !j.at("id").is_null()) {
        s.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      } else {
        s.id = std::to_string(line_no);
      }
      if (j.contains("label") && !j.at("label").is_null()) s.label = j.at("label").get<int>();
      if (s.text.empty()) throw Error(ErrorCode::BadFormat, where + ": empty text");
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::BadFormat, where + ": " + e.what());
    }
  }
  std::map<std::string, std::size_t> seen;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (!seen.emplace(out[i].id, i).second) {
      throw Error(ErrorCode::BadFormat, "duplicate sentence id '" + out[i].id + "'");
    }
  }
  return out;
}

std::vector<Sentence> load_corpus(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::BadConfig, "cannot open corpus '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_corpus_jsonl(ss.str());
}

std::string corpus_to_jsonl(const std::vector<Sentence>& sentences) {
  std::string out;
  for (const auto& s : sentences) {
    detail::ojson j;
    j["id"] = s.id;
    j["text"] = s.text;
    if (s.label) j["label"] = *s.label;
    out += detail::dump(j);
    out += '\n';
  }
  return out;
}

namespace {

constexpr std::string_view kWrong[] = {
    "took money from my friend's wallet",
    "lied to my boss about finishing the report",
    "copied my classmate's answers on the exam",
    "kicked the neighbor's dog",
    "kept the extra change the cashier gave me by mistake",
    "spread a rumor about my coworker",
    "broke my sister's phone and blamed the dog",
    "ignored my grandmother's calls for a month",
    "read my roommate's diary",
    "cut in front of everyone in the line",
    "parked in the disabled spot",
    "threw my trash on the beach",
    "took credit for my teammate's idea",
    "cheated on my partner",
    "made fun of the new student's accent",
    "left the restaurant without paying",
    "scratched a stranger's car on purpose",
    "sold a broken bike as if it worked",
    "stole a pack of gum from the store",
    "yelled at the waiter for no reason",
};

constexpr std::string_view kFine[] = {
    "helped my neighbor carry the groceries",
    "returned the wallet I found to its owner",
    "told my boss the report would be late",
    "studied hard for the exam",
    "walked the neighbor's dog while they were away",
    "gave the cashier back the extra change",
    "thanked my coworker for the help",
    "fixed my sister's phone",
    "called my grandmother on her birthday",
    "waited my turn in the line",
    "donated old clothes to the shelter",
    "picked up the trash on the beach",
    "shared the credit with my teammate",
    "cooked dinner for my partner",
    "welcomed the new student to class",
    "left a generous tip at the restaurant",
    "told the driver that their headlight was out",
    "sold my old bike at a fair price",
    "paid for the gum at the store",
    "smiled at the waiter and said thanks",
};

constexpr std::string_view kWhen[] = {
    "", " yesterday", " last week", " this morning", " at work", " after school",
    " on Sunday", " during the holidays", " in front of everyone", " without thinking twice",
};

}  // namespace

std::vector<Sentence> synthetic_corpus(std::size_t count, std::uint64_t seed) {
  const std::size_t per_label = std::size(kWrong) * std::size(kWhen);
  if (count / 2 + count % 2 > per_label) {
    throw Error(ErrorCode::ConfigTooLarge,
                "synthetic corpus holds at most " + std::to_string(2 * per_label) + " sentences");
  }
  Rng rng(mix_seed({seed, 0x636f72ULL}));
  auto pick = [&](const auto& acts, std::size_t n) {
    std::vector<std::size_t> combos(std::size(acts) * std::size(kWhen));
    for (std::size_t i = 0; i < combos.size(); ++i) combos[i] = i;
    rng.shuffle(combos);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < n; ++i) {
      const auto act = combos[i] / std::size(kWhen);
      const auto when = combos[i] % std::size(kWhen);
      out.push_back("I " + std::string(acts[act]) + std::string(kWhen[when]) + ".");
    }
    return out;
  };
  const auto wrong = pick(kWrong, count / 2 + count % 2);
  const auto fine = pick(kFine, count / 2);
  std::vector<Sentence> out;
  for (const auto& t : wrong) out.push_back({"", t, 1});
  for (const auto& t : fine) out.push_back({"", t, 0});
  rng.shuffle(out);
  for (std::size_t i = 0; i < out.size(); ++i) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "s%05zu", i);
    out[i].id = buf;
  }
  return out;
}

DatasetSplit split_dataset(const std::vector<Sentence>& sentences, std::uint64_t seed) {
  if (sentences.size() < 2) throw Error(ErrorCode::EmptyInput, "need at least two sentences to split");
  DatasetSplit split;
  split.seed = seed;
  split.odd_count = sentences.size() % 2 == 1;
  Rng rng(mix_seed({seed, 0x73706cULL}));

  const bool stratified = std::all_of(sentences.begin(), sentences.end(),
                                      [](const Sentence& s) { return s.label.has_value(); });
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < sentences.size(); ++i) {
    groups[stratified ? *sentences[i].label : 0].push_back(i);
  }
  const std::size_t target = sentences.size() / 2;
  std::size_t taken = 0;
  std::vector<std::size_t> quota;
  for (auto& [label, members] : groups) {
    rng.shuffle(members);
    quota.push_back(members.size() / 2);
    taken += members.size() / 2;
  }
  // Groups of odd size contribute their extra sentence in a seeded order
  // until the axis-fit half reaches floor(n / 2).
  std::vector<std::size_t> odd;
  std::size_t g = 0;
  for (auto& [label, members] : groups) {
    if (members.size() % 2 == 1) odd.push_back(g);
    ++g;
  }
  rng.shuffle(odd);
  for (std::size_t k = 0; k < odd.size() && taken < target; ++k, ++taken) ++quota[odd[k]];

  g = 0;
  for (auto& [label, members] : groups) {
    for (std::size_t i = 0; i < members.size(); ++i) {
      (i < quota[g] ? split.axis_fit : split.experiment).push_back(members[i]);
    }
    ++g;
  }
  std::sort(split.axis_fit.begin(), split.axis_fit.end());
  std::sort(split.experiment.begin(), split.experiment.end());
  return split;
}

std::vector<int> select_layers(int layer_count, const std::vector<double>& percentiles) {
  if (layer_count < 1) throw Error(ErrorCode::BadParams, "layer_count must be positive");
  std::vector<int> layers;
  for (double p : percentiles) {
    if (p < 0.0 || p > 100.0) throw Error(ErrorCode::BadParams, "percentile outside [0, 100]");
    const int l = std::max(1, static_cast<int>(std::lround(p * layer_count / 100.0)));
    layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

std::vector<int> parse_layers(std::string_view spec, int layer_count) {
  if (spec.empty() || spec == "auto") return select_layers(layer_count);
  std::vector<int> layers;
  std::size_t pos = 0;
  while (pos <= spec.size()) {
    const auto comma = spec.find(',', pos);
    const std::string item(spec.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    pos = comma == std::string_view::npos ? spec.size() + 1 : comma + 1;
    std::size_t used = 0;
    int l = 0;
    try {
      l = std::stoi(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != item.size()) throw Error(ErrorCode::BadConfig, "bad layer '" + item + "'");
    if (l < 1 || l > layer_count) {
      throw Error(ErrorCode::BadLayer, "layer " + item + " outside [1, " + std::to_string(layer_count) + "]");
    }
    layers.push_back(l);
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

}  // namespace nfb
