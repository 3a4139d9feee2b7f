#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/prompting.hpp"
#include "nfb/protocol.hpp"

namespace nfb {

// Byte-level tokenizer with four reserved role/control markers.
class ToyTokenizer {
 public:
  static constexpr int kSystem = 256;
  static constexpr int kUser = 257;
  static constexpr int kAssistant = 258;
  static constexpr int kEndOfTurn = 259;
  static constexpr int kVocabSize = 260;

  struct Encoded {
    std::vector<int> ids;
    std::vector<int> token_message;
    std::vector<SentenceSpan> spans;
  };

  // <role> text <eot> per message; the final message stays open when the
  // transcript says so.
  static Encoded encode(const ChatTranscript& transcript);
  static std::string token_text(int id);
  // Single-byte token strings and marker names map to ids; anything else is BadToken.
  static int token_id(std::string_view text);
};

struct ToyModelSpec {
  int layer_count = 2;
  std::size_t width = 16;
  int head_count = 2;
  std::size_t mlp_width = 64;
  std::uint64_t seed = 0;
};

// Row-major dense matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
};

struct ToyLayerWeights {
  Matrix wq, wk, wv, wo;  // width x width
  Matrix w_in;            // mlp_width x width
  std::vector<double> b_in;
  Matrix w_out;           // width x mlp_width
  std::vector<double> b_out;
};

struct ToyWeights {
  Matrix embed;  // vocab x width, also the tied unembedding
  std::vector<ToyLayerWeights> layers;
};

// A tiny pre-norm decoder-only transformer. Every block adds its attention
// and MLP outputs to the residual stream:
//   h' = h + Attn(rms(h)),  h_next = h' + MLP(rms(h')).
// Weights are drawn from the seed, so the forward pass is bit-deterministic.
class ToyModel {
 public:
  explicit ToyModel(ToyModelSpec spec = {});

  const ToyModelSpec& spec() const noexcept { return spec_; }
  const ToyWeights& weights() const noexcept { return weights_; }

  static std::vector<double> position_encoding(std::size_t position, std::size_t width);
  static void rms_normalize(std::vector<double>& x);

  // Incremental forward pass with a key/value cache.
  class Session {
   public:
    explicit Session(const ToyModel& model);

    // Appends one token; results are read through the accessors.
    void append(int token);
    // Drops positions from `length` on.
    void truncate(std::size_t length);

    std::size_t length() const noexcept { return length_; }
    // Residual after block `layer` (1-based) at `position`; layer 0 is the embedding.
    std::span<const double> residual(int layer, std::size_t position) const;
    // Next-token logits at the last appended position.
    std::vector<double> next_logits() const;

   private:
    const ToyModel* model_;
    std::size_t length_ = 0;
    std::vector<std::vector<double>> residual_;  // [layer 0..L], length * width
    std::vector<std::vector<double>> keys_;      // [layer], length * width
    std::vector<std::vector<double>> values_;
  };

 private:
  ToyModelSpec spec_;
  ToyWeights weights_;
};

}  // namespace nfb
