#include "nfb/conformance.hpp"

#include <cmath>
#include <functional>

#include "nfb/error.hpp"

namespace nfb {

namespace {

ExampleSet probe_examples() {
  ExampleSet ex;
  ex.pairs = {{"Helping others is a positive action.", 0},
              {"I took credit for my coworker's project.", 1}};
  ex.axis_id = "PC1";
  return ex;
}

BackendRequest probe_forward(const ModelInfo& info) {
  BackendRequest r;
  r.id = "conformance-forward";
  r.transcript = build_report_prompt(probe_examples(), "Cheating is not acceptable and should be avoided.");
  for (int l = 1; l <= info.layer_count; ++l) r.want_layers.push_back(l);
  r.want_logit_tokens = {"0", "1"};
  return r;
}

BackendRequest probe_generate(const ModelInfo& info, int max_new_tokens) {
  BackendRequest r;
  r.id = "conformance-generate";
  r.transcript = build_control_prompt(probe_examples(), 1, ControlMode::Explicit);
  r.want_layers = {info.layer_count};
  GenerateParams g;
  g.max_new_tokens = max_new_tokens;
  r.generate = g;
  return r;
}

std::string span_problem(const BackendRequest& req, const BackendResponse& res) {
  const auto& msgs = req.transcript.messages;
  std::size_t expected = 0;
  for (std::size_t i = 0; i < msgs.size(); ++i) {
    std::size_t found = 0;
    for (const auto& s : res.spans) found += s.message == i ? 1 : 0;
    if (!msgs[i].sentence) {
      if (found != 0) return "message " + std::to_string(i) + " has a span but no sentence";
      continue;
    }
    ++expected;
    if (found != 1) return "message " + std::to_string(i) + " has " + std::to_string(found) + " spans";
    const SentenceSpan* span = res.span_for_message(i);
    if (span->tokens.end > res.tokens.size() || span->tokens.empty()) {
      return "span of message " + std::to_string(i) + " is empty or out of range";
    }
    const auto& m = msgs[i];
    const std::string want = m.text.substr(m.sentence->begin, m.sentence->end - m.sentence->begin);
    const std::string got = detokenize(res.tokens, span->tokens);
    if (got != want) return "span text '" + got + "' != sentence '" + want + "'";
    for (std::size_t t = span->tokens.begin; t < span->tokens.end; ++t) {
      if (t < res.token_message.size() && res.token_message[t] != static_cast<int>(i)) {
        return "token " + std::to_string(t) + " inside span is tagged with another message";
      }
    }
  }
  if (res.spans.size() != expected) return "extra spans in response";
  return {};
}

std::string layer_problem(const BackendRequest& req, const BackendResponse& res, const ModelInfo& info) {
  for (int layer : req.want_layers) {
    const auto it = res.activations.find(layer);
    if (it == res.activations.end()) return "layer " + std::to_string(layer) + " missing";
    if (it->second.dim() != info.width) {
      return "layer " + std::to_string(layer) + " has width " + std::to_string(it->second.dim());
    }
    if (it->second.token_count() != res.tokens.size()) {
      return "layer " + std::to_string(layer) + " covers " +
             std::to_string(it->second.token_count()) + " of " + std::to_string(res.tokens.size()) +
             " tokens";
    }
    for (double v : it->second.data()) {
      if (!std::isfinite(v)) return "non-finite activation at layer " + std::to_string(layer);
    }
  }
  return {};
}

std::string expect_error(ErrorCode want, const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    if (e.code() == want) return {};
    return std::string("got ") + std::string(to_string(e.code())) + ": " + e.what();
  }
  return "no error raised";
}

class Suite {
 public:
  void check(std::string name, const std::function<std::string()>& body) {
    CheckResult r{std::move(name), false, {}};
    try {
      r.detail = body();
      r.passed = r.detail.empty();
    } catch (const std::exception& e) {
      r.detail = std::string("exception: ") + e.what();
    }
    results.push_back(std::move(r));
  }

  std::vector<CheckResult> results;
};

}  // namespace

std::vector<CheckResult> run_conformance(Backend& backend) {
  Suite s;
  s.check("health", [&] { return backend.healthy() ? "" : "health endpoint not ok"; });

  ModelInfo info;
  s.check("model_info", [&]() -> std::string {
    info = backend.model_info();
    if (info.layer_count < 1) return "layer_count < 1";
    if (info.width < 1) return "width < 1";
    if (to_json(model_info_from_json(to_json(info))) != to_json(info)) return "model info not byte-stable";
    return {};
  });
  if (info.layer_count < 1) return s.results;

  const BackendRequest fwd = probe_forward(info);
  s.check("request_roundtrip", [&]() -> std::string {
    for (const auto& r : {fwd, probe_generate(info, 16)}) {
      const std::string once = to_json(r);
      const std::string twice = to_json(request_from_json(once));
      if (once != twice) return "request '" + r.id + "' changes on re-serialization";
      if (request_from_json(once) != r) return "request '" + r.id + "' does not parse back equal";
    }
    return {};
  });

  std::optional<BackendResponse> first;
  s.check("forward", [&]() -> std::string {
    first = backend.forward(fwd);
    return {};
  });
  if (!first) return s.results;

  s.check("id_echo", [&] { return first->id == fwd.id ? "" : "response id '" + first->id + "'"; });
  s.check("layers_and_width", [&] { return layer_problem(fwd, *first, info); });
  s.check("response_roundtrip", [&]() -> std::string {
    const std::string once = to_json(*first);
    return to_json(response_from_json(once)) == once ? "" : "response changes on re-serialization";
  });
  s.check("span_coverage", [&] { return span_problem(fwd, *first); });
  s.check("forward_determinism", [&]() -> std::string {
    return to_json(backend.forward(fwd)) == to_json(*first) ? "" : "second forward differs";
  });
  s.check("logits", [&]() -> std::string {
    for (const auto& tok : fwd.want_logit_tokens) {
      const auto it = first->logits.find(tok);
      if (it == first->logits.end()) return "no logit for '" + tok + "'";
      if (!std::isfinite(it->second)) return "non-finite logit for '" + tok + "'";
    }
    return {};
  });

  const BackendRequest gen = probe_generate(info, 16);
  std::optional<BackendResponse> generated;
  s.check("generate", [&]() -> std::string {
    generated = backend.generate(gen);
    if (!generated->generated_text) return "no generated_text";
    if (generated->id != gen.id) return "response id '" + generated->id + "'";
    if (generated->generated_text->find(prompts::kStopScore) != std::string::npos) {
      return "generated text contains the stop sequence";
    }
    return {};
  });
  if (generated) {
    s.check("generated_span", [&]() -> std::string {
      const std::string& text = *generated->generated_text;
      const SentenceSpan* span = generated->span_for_message(gen.transcript.messages.size() - 1);
      if (text.empty()) return span ? "span for an empty generation" : "";
      if (!span) return "no span for the generated sentence";
      const std::string got = detokenize(generated->tokens, span->tokens);
      if (got != text) return "span text '" + got + "' != generated '" + text + "'";
      return layer_problem(gen, *generated, info);
    });
    s.check("greedy_determinism", [&]() -> std::string {
      return to_json(backend.generate(gen)) == to_json(*generated) ? "" : "second greedy run differs";
    });
    s.check("stop_sequence", [&]() -> std::string {
      const std::string& text = *generated->generated_text;
      if (text.size() < 3) return {};
      BackendRequest r = gen;
      r.id = "conformance-stop";
      const std::string stop = text.substr(1, 2);
      r.generate->stop = {stop};
      const auto res = backend.generate(r);
      const std::string want = text.substr(0, text.find(stop));
      if (!res.generated_text) return "no generated_text";
      if (*res.generated_text != want) {
        return "stop '" + stop + "' gave '" + *res.generated_text + "', expected '" + want + "'";
      }
      return {};
    });
  }

  s.check("error_bad_layer", [&] {
    BackendRequest r = fwd;
    r.want_layers = {info.layer_count + 1};
    return expect_error(ErrorCode::BadLayer, [&] { backend.forward(r); });
  });
  s.check("error_bad_token", [&] {
    BackendRequest r = fwd;
    r.want_logit_tokens = {"\x01 no such token \x02"};
    return expect_error(ErrorCode::BadToken, [&] { backend.forward(r); });
  });
  s.check("error_bad_params", [&]() -> std::string {
    BackendRequest r = gen;
    r.generate->max_new_tokens = 0;
    auto problem = expect_error(ErrorCode::BadParams, [&] { backend.generate(r); });
    if (!problem.empty()) return "max_new_tokens=0: " + problem;
    BackendRequest empty = fwd;
    empty.want_layers.clear();
    empty.want_logit_tokens.clear();
    problem = expect_error(ErrorCode::BadParams, [&] { backend.forward(empty); });
    return problem.empty() ? "" : "empty request: " + problem;
  });
  return s.results;
}

bool all_passed(const std::vector<CheckResult>& results) {
  for (const auto& r : results) {
    if (!r.passed) return false;
  }
  return !results.empty();
}

}  // namespace nfb
