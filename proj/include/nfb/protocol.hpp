#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/activations.hpp"
#include "nfb/error.hpp"
#include "nfb/prompting.hpp"

namespace nfb {

// Wire protocol between the harness and a model backend. Bodies are JSON;
// see docs/protocol.md for the schema. Serialization is deterministic so that
// serialize -> parse -> serialize is byte-stable.

enum class DecodeMode { Greedy, Sampled };

std::string_view to_string(DecodeMode mode);

struct GenerateParams {
  int max_new_tokens = 64;
  DecodeMode mode = DecodeMode::Greedy;
  std::uint64_t seed = 0;
  double temperature = 1.0;
  std::vector<std::string> stop{std::string(prompts::kStopScore)};

  friend bool operator==(const GenerateParams&, const GenerateParams&) = default;
};

struct BackendRequest {
  std::string id;
  ChatTranscript transcript;
  std::vector<int> want_layers;
  std::vector<std::string> want_logit_tokens;  // read at the transcript's final token
  std::optional<GenerateParams> generate;

  friend bool operator==(const BackendRequest&, const BackendRequest&) = default;
};

// Token range of one message's sentence.
struct SentenceSpan {
  std::size_t message = 0;
  TokenSpan tokens;
  friend bool operator==(const SentenceSpan&, const SentenceSpan&) = default;
};

struct BackendResponse {
  std::string id;
  std::map<int, LayerActivations> activations;
  std::vector<std::string> tokens;  // per-position token text; bytes >= 0x80 as "<0xHH>"
  std::vector<int> token_message;   // message index per token, -1 for template tokens
  std::vector<SentenceSpan> spans;
  std::map<std::string, double> logits;
  std::optional<std::string> generated_text;

  const SentenceSpan* span_for_message(std::size_t message) const;
  // Mean-pooled sentence activations of one message at one layer.
  SentenceEmbedding pool_message(int layer, std::size_t message) const;

  friend bool operator==(const BackendResponse&, const BackendResponse&) = default;
};

struct ModelInfo {
  std::string model_id;
  int layer_count = 0;
  std::size_t width = 0;
  std::size_t vocab_size = 0;
  std::string tokenizer;
  int max_in_flight = 1;

  friend bool operator==(const ModelInfo&, const ModelInfo&) = default;
};

struct ErrorBody {
  ErrorCode code;
  std::string message;
};

std::string to_json(const BackendRequest& request);
std::string to_json(const BackendResponse& response);
std::string to_json(const ModelInfo& info);
std::string error_json(const Error& error);

BackendRequest request_from_json(std::string_view text);
BackendResponse response_from_json(std::string_view text);
ModelInfo model_info_from_json(std::string_view text);
ErrorBody error_from_json(std::string_view text);

// Checks the request invariants against a model's advertised shape.
void validate_request(const BackendRequest& request, const ModelInfo& info);

// Decodes the token-text escape used in BackendResponse::tokens.
std::string detokenize(const std::vector<std::string>& tokens, TokenSpan span);

}  // namespace nfb
