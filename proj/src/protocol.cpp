#include "nfb/protocol.hpp"

#include <cstdio>

#include "json_internal.hpp"
#include "nfb/error.hpp"

namespace nfb {

using detail::json;
using detail::ojson;

std::string_view to_string(DecodeMode mode) { return mode == DecodeMode::Greedy ? "greedy" : "sampled"; }

const SentenceSpan* BackendResponse::span_for_message(std::size_t message) const {
  for (const auto& s : spans) {
    if (s.message == message) return &s;
  }
  return nullptr;
}

SentenceEmbedding BackendResponse::pool_message(int layer, std::size_t message) const {
  const auto it = activations.find(layer);
  if (it == activations.end()) {
    throw Error(ErrorCode::IncompleteActivations,
                "response lacks layer " + std::to_string(layer));
  }
  const SentenceSpan* span = span_for_message(message);
  if (!span) {
    throw Error(ErrorCode::EmptySpan, "no sentence span for message " + std::to_string(message));
  }
  return mean_pool(it->second, span->tokens);
}

namespace {

ojson generate_json(const GenerateParams& g) {
  ojson j;
  j["max_new_tokens"] = g.max_new_tokens;
  j["decode_mode"] = to_string(g.mode);
  j["seed"] = g.seed;
  j["temperature"] = g.temperature;
  j["stop"] = g.stop;
  return j;
}

GenerateParams generate_from_json(const json& j) {
  GenerateParams g;
  g.max_new_tokens = j.at("max_new_tokens").get<int>();
  const auto mode = j.at("decode_mode").get<std::string>();
  if (mode == "greedy") {
    g.mode = DecodeMode::Greedy;
  } else if (mode == "sampled") {
    g.mode = DecodeMode::Sampled;
  } else {
    throw Error(ErrorCode::BadParams, "decode_mode must be greedy or sampled");
  }
  g.seed = j.value("seed", std::uint64_t{0});
  g.temperature = j.value("temperature", 1.0);
  g.stop = j.value("stop", std::vector<std::string>{});
  return g;
}

template <typename F>
auto guarded(std::string_view what, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, "malformed " + std::string(what) + ": " + e.what());
  }
}

}  // namespace

std::string to_json(const BackendRequest& r) {
  ojson j;
  j["id"] = r.id;
  j["transcript"] = detail::transcript_to_json(r.transcript);
  j["want_layers"] = r.want_layers;
  j["want_logit_tokens"] = r.want_logit_tokens;
  j["generate"] = r.generate ? generate_json(*r.generate) : ojson(nullptr);
  return detail::dump(j);
}

BackendRequest request_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "request");
  return guarded("request", [&] {
    BackendRequest r;
    r.id = j.value("id", std::string{});
    r.transcript = detail::transcript_from_json(j.at("transcript"));
    r.want_layers = j.value("want_layers", std::vector<int>{});
    r.want_logit_tokens = j.value("want_logit_tokens", std::vector<std::string>{});
    if (j.contains("generate") && !j.at("generate").is_null()) {
      r.generate = generate_from_json(j.at("generate"));
    }
    return r;
  });
}

std::string to_json(const BackendResponse& r) {
  ojson j;
  j["id"] = r.id;
  ojson acts = ojson::array();
  for (const auto& [layer, a] : r.activations) {
    ojson aj;
    aj["layer"] = layer;
    aj["width"] = a.dim();
    ojson rows = ojson::array();
    for (std::size_t t = 0; t < a.token_count(); ++t) {
      const auto row = a.row(t);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    aj["vectors"] = std::move(rows);
    acts.push_back(std::move(aj));
  }
  j["activations"] = std::move(acts);
  j["tokens"] = r.tokens;
  j["token_message"] = r.token_message;
  ojson spans = ojson::array();
  for (const auto& s : r.spans) {
    ojson sj;
    sj["message"] = s.message;
    sj["begin"] = s.tokens.begin;
    sj["end"] = s.tokens.end;
    spans.push_back(std::move(sj));
  }
  j["token_span_map"] = std::move(spans);
  ojson logits = ojson::object();
  for (const auto& [tok, v] : r.logits) logits[tok] = v;
  j["logits"] = std::move(logits);
  j["generated_text"] = r.generated_text ? ojson(*r.generated_text) : ojson(nullptr);
  return detail::dump(j);
}

BackendResponse response_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "response");
  return guarded("response", [&] {
    BackendResponse r;
    r.id = j.value("id", std::string{});
    r.tokens = j.value("tokens", std::vector<std::string>{});
    r.token_message = j.value("token_message", std::vector<int>{});
    for (const auto& aj : j.at("activations")) {
      const int layer = aj.at("layer").get<int>();
      const auto width = aj.at("width").get<std::size_t>();
      LayerActivations acts(layer, width);
      for (const auto& row : aj.at("vectors")) {
        // Backends may compute in float32; values are widened here.
        const auto values = row.get<std::vector<double>>();
        acts.append_row(values);
      }
      acts.set_token_tags(r.token_message);
      r.activations.emplace(layer, std::move(acts));
    }
    for (const auto& sj : j.at("token_span_map")) {
      r.spans.push_back({sj.at("message").get<std::size_t>(),
                         TokenSpan{sj.at("begin").get<std::size_t>(), sj.at("end").get<std::size_t>()}});
    }
    for (const auto& [tok, v] : j.at("logits").items()) r.logits[tok] = v.get<double>();
    if (j.contains("generated_text") && !j.at("generated_text").is_null()) {
      r.generated_text = j.at("generated_text").get<std::string>();
    }
    return r;
  });
}

std::string to_json(const ModelInfo& info) {
  ojson j;
  j["model_id"] = info.model_id;
  j["layer_count"] = info.layer_count;
  j["width"] = info.width;
  j["vocab_size"] = info.vocab_size;
  j["tokenizer"] = info.tokenizer;
  j["max_in_flight"] = info.max_in_flight;
  return detail::dump(j);
}

ModelInfo model_info_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "model info");
  return guarded("model info", [&] {
    ModelInfo info;
    info.model_id = j.at("model_id").get<std::string>();
    info.layer_count = j.at("layer_count").get<int>();
    info.width = j.at("width").get<std::size_t>();
    info.vocab_size = j.value("vocab_size", std::size_t{0});
    info.tokenizer = j.value("tokenizer", std::string{});
    info.max_in_flight = j.value("max_in_flight", 1);
    return info;
  });
}

std::string error_json(const Error& error) {
  ojson j;
  j["error"]["code"] = to_string(error.code());
  j["error"]["message"] = error.what();
  return detail::dump(j);
}

ErrorBody error_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "error body");
  return guarded("error body", [&] {
    const auto& e = j.at("error");
    return ErrorBody{error_code_from_string(e.at("code").get<std::string>()),
                     e.value("message", std::string{})};
  });
}

void validate_request(const BackendRequest& request, const ModelInfo& info) {
  if (request.want_layers.empty() && request.want_logit_tokens.empty() && !request.generate) {
    throw Error(ErrorCode::BadParams, "request asks for nothing");
  }
  if (request.transcript.messages.empty()) {
    throw Error(ErrorCode::BadParams, "empty transcript");
  }
  for (int layer : request.want_layers) {
    if (layer < 1 || layer > info.layer_count) {
      throw Error(ErrorCode::BadLayer, "layer " + std::to_string(layer) + " outside [1, " +
                                           std::to_string(info.layer_count) + "]");
    }
  }
  if (request.generate) {
    const auto& g = *request.generate;
    if (g.max_new_tokens <= 0) throw Error(ErrorCode::BadParams, "max_new_tokens must be positive");
    if (g.mode == DecodeMode::Sampled && !(g.temperature > 0.0)) {
      throw Error(ErrorCode::BadParams, "sampling temperature must be positive");
    }
    const auto& last = request.transcript.messages.back();
    if (!request.transcript.final_open || last.role != Role::Assistant) {
      throw Error(ErrorCode::BadParams, "generation needs an open final assistant message");
    }
  }
}

std::string detokenize(const std::vector<std::string>& tokens, TokenSpan span) {
  std::string out;
  for (std::size_t i = span.begin; i < span.end && i < tokens.size(); ++i) {
    const std::string& t = tokens[i];
    if (t.size() == 6 && t.starts_with("<0x") && t.back() == '>') {
      unsigned value = 0;
      if (std::sscanf(t.c_str() + 3, "%2x", &value) == 1) {
        out.push_back(static_cast<char>(value));
        continue;
      }
    }
    out += t;
  }
  return out;
}

}  // namespace nfb
