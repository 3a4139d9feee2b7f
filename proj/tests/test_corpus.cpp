#include <doctest.h>

#include <algorithm>
#include <set>

#include "nfb/corpus.hpp"
#include "nfb/error.hpp"

using namespace nfb;

namespace {

std::vector<Sentence> labeled(std::size_t ones, std::size_t zeros) {
  std::vector<Sentence> out;
  for (std::size_t i = 0; i < ones + zeros; ++i) {
    out.push_back({"id" + std::to_string(i), "Sentence " + std::to_string(i) + ".", i < ones ? 1 : 0});
  }
  return out;
}

std::size_t count_label(const std::vector<Sentence>& s, const std::vector<std::size_t>& idx, int label) {
  return std::count_if(idx.begin(), idx.end(), [&](std::size_t i) { return s[i].label == label; });
}

}  // namespace

TEST_CASE("jsonl corpus parsing") {
  const auto s = parse_corpus_jsonl(
      "{\"id\": \"a\", \"text\": \"First.\", \"label\": 1}\n"
      "\n"
      "{\"text\": \"No id, no label.\"}\r\n"
      "{\"id\": 7, \"text\": \"Numeric id.\", \"label\": null}");
  REQUIRE(s.size() == 3);
  CHECK(s[0] == Sentence{"a", "First.", 1});
  CHECK(s[1].id == "3");
  CHECK_FALSE(s[1].label);
  CHECK(s[2].id == "7");
  CHECK(parse_corpus_jsonl(corpus_to_jsonl(s)) == s);

  CHECK_THROWS_AS(parse_corpus_jsonl("{\"id\":\"x\",\"text\":\"a\"}\n{\"id\":\"x\",\"text\":\"b\"}"), Error);
  CHECK_THROWS_AS(parse_corpus_jsonl("{\"id\":\"x\"}"), Error);
  CHECK_THROWS_AS(parse_corpus_jsonl("{\"text\":\"\"}"), Error);
  CHECK_THROWS_AS(parse_corpus_jsonl("not json"), Error);
  CHECK_THROWS_AS(load_corpus("/nonexistent/corpus.jsonl"), Error);
}

TEST_CASE("split halves a 1200-sentence corpus into disjoint 600/600") {
  const auto corpus = labeled(600, 600);
  const auto a = split_dataset(corpus, 11);
  CHECK(a.axis_fit.size() == 600);
  CHECK(a.experiment.size() == 600);
  std::set<std::size_t> all(a.axis_fit.begin(), a.axis_fit.end());
  all.insert(a.experiment.begin(), a.experiment.end());
  CHECK(all.size() == 1200);
  CHECK_FALSE(a.odd_count);

  const auto b = split_dataset(corpus, 11);
  CHECK(a.axis_fit == b.axis_fit);
  CHECK(split_dataset(corpus, 12).axis_fit != a.axis_fit);
  CHECK(count_label(corpus, a.axis_fit, 1) == 300);
}

TEST_CASE("stratified split keeps label counts within one") {
  for (auto [ones, zeros] : {std::pair<std::size_t, std::size_t>{7, 6}, {5, 5}, {9, 2}, {1, 1}, {3, 0}}) {
    const auto corpus = labeled(ones, zeros);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto s = split_dataset(corpus, seed);
      CHECK(s.axis_fit.size() == corpus.size() / 2);
      CHECK(s.experiment.size() == corpus.size() - corpus.size() / 2);
      CHECK(s.odd_count == (corpus.size() % 2 == 1));
      for (int label : {0, 1}) {
        const auto fit = count_label(corpus, s.axis_fit, label);
        const auto exp = count_label(corpus, s.experiment, label);
        CHECK(std::max(fit, exp) - std::min(fit, exp) <= 1);
      }
    }
  }
  std::vector<Sentence> unlabeled{{"a", "A.", {}}, {"b", "B.", {}}, {"c", "C.", 1}};
  const auto s = split_dataset(unlabeled, 0);
  CHECK(s.axis_fit.size() == 1);
  CHECK(s.experiment.size() == 2);
  CHECK_THROWS_AS(split_dataset({unlabeled[0]}, 0), Error);
}

TEST_CASE("synthetic corpus") {
  const auto c = synthetic_corpus(101, 2);
  CHECK(c.size() == 101);
  CHECK(std::count_if(c.begin(), c.end(), [](const Sentence& s) { return s.label == 1; }) == 51);
  std::set<std::string> texts;
  for (const auto& s : c) texts.insert(s.text);
  CHECK(texts.size() == c.size());
  CHECK(synthetic_corpus(101, 2) == c);
  CHECK_THROWS_AS(synthetic_corpus(100000, 0), Error);
}

TEST_CASE("layer selection by depth percentile") {
  CHECK(select_layers(32) == std::vector<int>{1, 8, 16, 24, 32});
  CHECK(select_layers(28) == std::vector<int>{1, 7, 14, 21, 28});
  CHECK(select_layers(4) == std::vector<int>{1, 2, 3, 4});
  CHECK(select_layers(2) == std::vector<int>{1, 2});
  CHECK(select_layers(1) == std::vector<int>{1});
  CHECK_THROWS_AS(select_layers(0), Error);
  CHECK_THROWS_AS(select_layers(8, {120}), Error);
}

TEST_CASE("parse_layers") {
  CHECK(parse_layers("auto", 32) == select_layers(32));
  CHECK(parse_layers("", 28) == select_layers(28));
  CHECK(parse_layers("3,1,3", 4) == std::vector<int>{1, 3});
  auto code = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code();
    }
    return ErrorCode::EmptySpan;
  };
  CHECK(code([] { parse_layers("5", 4); }) == ErrorCode::BadLayer);
  CHECK(code([] { parse_layers("0", 4); }) == ErrorCode::BadLayer);
  CHECK(code([] { parse_layers("1,x", 4); }) == ErrorCode::BadConfig);
  CHECK(code([] { parse_layers("2a", 4); }) == ErrorCode::BadConfig);
}
