#include <doctest.h>

#include <cmath>

#include "nfb/backend.hpp"
#include "nfb/error.hpp"
#include "nfb/toy_model.hpp"
#include "oracles.hpp"

using namespace nfb;

namespace {

ChatTranscript small_prompt(const std::string& sentence = "I returned the wallet.") {
  ExampleSet ex;
  ex.pairs = {{"I lied to my friend.", 1}, {"I fed the cat.", 0}};
  return build_control_prompt(ex, 1, ControlMode::Implicit, sentence);
}

BackendRequest forward_request(ChatTranscript t, std::vector<int> layers) {
  BackendRequest r;
  r.id = "t";
  r.transcript = std::move(t);
  r.want_layers = std::move(layers);
  return r;
}

}  // namespace

TEST_CASE("tokenizer frames messages with role markers") {
  ChatTranscript t;
  t.messages = {{Role::System, "ab", std::nullopt}, {Role::Assistant, "xyz", TextRange{1, 3}}};
  auto enc = ToyTokenizer::encode(t);
  CHECK(enc.ids == std::vector<int>{ToyTokenizer::kSystem, 'a', 'b', ToyTokenizer::kEndOfTurn,
                                    ToyTokenizer::kAssistant, 'x', 'y', 'z', ToyTokenizer::kEndOfTurn});
  CHECK(enc.token_message == std::vector<int>{-1, 0, 0, -1, -1, 1, 1, 1, -1});
  REQUIRE(enc.spans.size() == 1);
  CHECK(enc.spans[0].message == 1);
  CHECK(enc.spans[0].tokens == TokenSpan{6, 8});

  t.final_open = true;
  enc = ToyTokenizer::encode(t);
  CHECK(enc.ids.back() == 'z');

  CHECK(ToyTokenizer::token_id("1") == '1');
  CHECK(ToyTokenizer::token_id("<|eot|>") == ToyTokenizer::kEndOfTurn);
  CHECK(ToyTokenizer::token_id("<0xC3>") == 0xC3);
  CHECK(ToyTokenizer::token_text(0xC3) == "<0xC3>");
  CHECK_THROWS_AS(ToyTokenizer::token_id("10"), Error);
}

TEST_CASE("each block adds its attention and MLP outputs to the residual") {
  for (std::uint64_t seed : {0u, 3u}) {
    ToyModelSpec spec;
    spec.seed = seed;
    spec.layer_count = 3;
    ToyModel model(spec);
    const auto ids = ToyTokenizer::encode(small_prompt()).ids;
    ToyModel::Session s(model);
    for (int id : ids) s.append(id);
    const auto ref = oracle::toy_reference(model, ids);
    double worst = 0.0;
    for (int l = 1; l <= spec.layer_count; ++l) {
      for (std::size_t t = 0; t < ids.size(); ++t) {
        const auto prev = s.residual(l - 1, t);
        const auto cur = s.residual(l, t);
        for (std::size_t j = 0; j < spec.width; ++j) {
          const double expected = prev[j] + ref.attn[l - 1][t][j] + ref.mlp[l - 1][t][j];
          worst = std::max(worst, std::abs(cur[j] - expected));
          worst = std::max(worst, std::abs(cur[j] - ref.residual[l][t][j]));
        }
      }
    }
    CHECK(worst < 1e-6);
    const auto logits = s.next_logits();
    const auto ref_logits = oracle::toy_logits(model, ref.residual.back().back());
    for (std::size_t v = 0; v < logits.size(); ++v) CHECK(std::abs(logits[v] - ref_logits[v]) < 1e-6);
  }
}

TEST_CASE("truncate then re-append reproduces the session exactly") {
  ToyModel model;
  const auto ids = ToyTokenizer::encode(small_prompt()).ids;
  ToyModel::Session a(model);
  for (int id : ids) a.append(id);
  ToyModel::Session b = a;
  b.truncate(10);
  CHECK(b.length() == 10);
  for (std::size_t i = 10; i < ids.size(); ++i) b.append(ids[i]);
  for (int l = 0; l <= 2; ++l) {
    for (std::size_t t = 0; t < ids.size(); ++t) {
      const auto x = a.residual(l, t), y = b.residual(l, t);
      CHECK(std::equal(x.begin(), x.end(), y.begin()));
    }
  }
  CHECK_THROWS_AS(ToyModel::Session(model).append(ToyTokenizer::kVocabSize), Error);
}

TEST_CASE("toy forward is byte-identical across calls and instances") {
  ToyBackend a, b;
  const auto req = forward_request(small_prompt(), {1, 2});
  const std::string first = to_json(a.forward(req));
  // Warm the prefix cache with a different prompt sharing the system text.
  a.forward(forward_request(small_prompt("Something else entirely."), {2}));
  CHECK(to_json(a.forward(req)) == first);
  CHECK(to_json(b.forward(req)) == first);
}

TEST_CASE("toy forward shapes, spans and logits") {
  ToyBackend toy;
  auto req = forward_request(small_prompt(), {1, 2});
  req.want_logit_tokens = {"1", "0", "<|eot|>"};
  const auto res = toy.forward(req);
  const auto enc = ToyTokenizer::encode(req.transcript);
  REQUIRE(res.activations.size() == 2);
  for (const auto& [layer, acts] : res.activations) {
    CHECK(acts.dim() == 16);
    CHECK(acts.token_count() == enc.ids.size());
  }
  CHECK(res.spans.size() == 3);
  for (const auto& s : res.spans) {
    const Message& m = req.transcript.messages[s.message];
    CHECK(detokenize(res.tokens, s.tokens) == m.text.substr(m.sentence->begin, m.sentence->end - m.sentence->begin));
  }
  CHECK(res.logits.size() == 3);

  ToyModel model;
  const auto ref = oracle::toy_reference(model, enc.ids);
  const auto ref_logits = oracle::toy_logits(model, ref.residual.back().back());
  CHECK(std::abs(res.logits.at("1") - ref_logits['1']) < 1e-6);

  req.want_layers = {3};
  CHECK_THROWS_AS(toy.forward(req), Error);
  req.want_layers = {1};
  req.want_logit_tokens = {"12"};
  CHECK_THROWS_AS(toy.forward(req), Error);
}

TEST_CASE("greedy generation follows the argmax chain of the reference pass") {
  ToyBackend toy;
  ExampleSet ex;
  ex.pairs = {{"I lied to my friend.", 1}};
  BackendRequest req;
  req.id = "g";
  req.transcript = build_control_prompt(ex, 0, ControlMode::Explicit);
  req.want_layers = {2};
  GenerateParams g;
  g.max_new_tokens = 12;
  g.stop = {};
  req.generate = g;
  const auto res = toy.generate(req);
  REQUIRE(res.generated_text);

  ToyModel model;
  auto ids = ToyTokenizer::encode(req.transcript).ids;
  std::string expected;
  for (int step = 0; step < g.max_new_tokens; ++step) {
    const auto ref = oracle::toy_reference(model, ids);
    const auto logits = oracle::toy_logits(model, ref.residual.back().back());
    int best = 0x20;
    for (int c = 0x20; c < 0x7f; ++c)
      if (logits[c] > logits[best]) best = c;
    if (step > 0 && logits[ToyTokenizer::kEndOfTurn] > logits[best]) break;
    expected.push_back(char(best));
    ids.push_back(best);
  }
  CHECK(*res.generated_text == expected);
  CHECK(to_json(toy.generate(req)) == to_json(res));

  // Activations cover the generated tokens and match a plain forward of the result.
  BackendRequest fwd = forward_request(req.transcript, {2});
  fwd.transcript.messages.back().text = expected;
  fwd.transcript.messages.back().sentence = TextRange{0, expected.size()};
  ToyBackend fresh;
  const auto direct = fresh.forward(fwd);
  CHECK(direct.activations.at(2) == res.activations.at(2));
  CHECK(res.spans.back().tokens.size() == expected.size());
}

TEST_CASE("stop strings truncate the generation") {
  ToyBackend toy;
  ExampleSet ex;
  ex.pairs = {{"I fed the cat.", 0}};
  BackendRequest req;
  req.transcript = build_control_prompt(ex, 1, ControlMode::Explicit);
  req.want_layers = {1};
  GenerateParams g;
  g.max_new_tokens = 16;
  g.stop = {};
  req.generate = g;
  const std::string full = *toy.generate(req).generated_text;
  REQUIRE(full.size() >= 3);
  g.stop = {full.substr(1, 2)};
  req.generate = g;
  const auto cut = toy.generate(req);
  CHECK(*cut.generated_text == full.substr(0, full.find(full.substr(1, 2))));

  BackendRequest fwd = forward_request(req.transcript, {1});
  fwd.transcript.messages.back().text = *cut.generated_text;
  if (!cut.generated_text->empty()) fwd.transcript.messages.back().sentence = TextRange{0, cut.generated_text->size()};
  CHECK(ToyBackend().forward(fwd).activations.at(1) == cut.activations.at(1));
}

TEST_CASE("sampled generation is seeded") {
  ToyBackend toy;
  BackendRequest req;
  req.transcript = build_control_prompt(ExampleSet{}, 1, ControlMode::Explicit);
  req.want_layers = {1};
  GenerateParams g;
  g.mode = DecodeMode::Sampled;
  g.temperature = 2.0;
  g.max_new_tokens = 20;
  g.seed = 1;
  req.generate = g;
  const auto a = *toy.generate(req).generated_text;
  CHECK(*toy.generate(req).generated_text == a);
  bool differs = false;
  for (std::uint64_t s = 2; s < 6 && !differs; ++s) {
    req.generate->seed = s;
    differs = *toy.generate(req).generated_text != a;
  }
  CHECK(differs);
  for (char c : a) CHECK((c >= 0x20 && c < 0x7f));
  req.generate->max_new_tokens = 0;
  CHECK_THROWS_AS(toy.generate(req), Error);
}

TEST_CASE("toy model metadata and parameters") {
  ToyModelSpec spec;
  spec.layer_count = 3;
  spec.width = 8;
  spec.seed = 4;
  ToyBackend toy(spec);
  const auto info = toy.model_info();
  CHECK(info.model_id == "toy-L3-D8-seed4");
  CHECK(info.layer_count == 3);
  CHECK(info.width == 8);
  CHECK(info.vocab_size == 260);
  spec.width = 7;
  CHECK_THROWS_AS(ToyModel{spec}, Error);
}
