#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "nfb/axes.hpp"
#include "nfb/protocol.hpp"
#include "nfb/toy_model.hpp"

namespace nfb {

// A model that serves residual-stream activations, label logits and greedy or
// sampled continuations. Implementations must tolerate concurrent calls.
class Backend {
 public:
  virtual ~Backend() = default;

  virtual ModelInfo model_info() = 0;
  virtual BackendResponse forward(const BackendRequest& request) = 0;
  virtual BackendResponse generate(const BackendRequest& request) = 0;
  virtual bool healthy() { return true; }
};

// Deterministic in-process transformer.
class ToyBackend : public Backend {
 public:
  explicit ToyBackend(ToyModelSpec spec = {});

  ModelInfo model_info() override;
  BackendResponse forward(const BackendRequest& request) override;
  BackendResponse generate(const BackendRequest& request) override;

  const ToyModel& model() const noexcept { return model_; }

 private:
  // A session positioned at the end of `ids`, resumed from the longest cached
  // prefix. Results are identical to a fresh pass.
  ToyModel::Session session_for(const std::vector<int>& ids);
  void remember(const std::vector<int>& ids, const ToyModel::Session& session);

  struct CacheEntry {
    std::vector<int> ids;
    std::shared_ptr<const ToyModel::Session> session;
  };

  ToyModel model_;
  std::mutex cache_mutex_;
  std::vector<CacheEntry> cache_;  // most recent last
};

struct ScriptGain {
  double delta = 0.0;
  std::vector<double> direction;
  // When set, the named label is read through the label assignment shown in
  // the examples: the shift is + when the instruction asks for the group whose
  // true label is 1, whichever token the examples use for it.
  std::map<std::string, int> sentence_labels;
};

// Replays an ordered list of responses. An optional label-sensitivity gain
// moves the final sentence's activations by +delta/2 along `direction` when the
// imitation instruction names label 1 and by -delta/2 for label 0.
class ScriptedBackend : public Backend {
 public:
  using Gain = ScriptGain;

  ScriptedBackend(ModelInfo info, std::vector<BackendResponse> script, Gain gain = {});

  ModelInfo model_info() override;
  BackendResponse forward(const BackendRequest& request) override;
  BackendResponse generate(const BackendRequest& request) override;

  std::size_t replay_count() const;
  std::size_t script_length() const noexcept { return script_.size(); }

 private:
  BackendResponse next(const BackendRequest& request);

  ModelInfo info_;
  std::vector<BackendResponse> script_;
  Gain gain_;
  mutable std::mutex mutex_;
  std::size_t cursor_ = 0;
};

std::unique_ptr<ScriptedBackend> script_mock(ModelInfo info, std::vector<BackendResponse> script,
                                             ScriptedBackend::Gain gain = {});

// A synthetic model with known ground truth. Each sentence has a fixed
// embedding (identical at every layer), so axes fitted on it are known in
// advance. Given control targets, the model reads the in-context examples,
// works out which target axis and which label assignment they encode, and
// moves the final sentence along that axis by +/- half the configured gain
// (in units of the axis score SD) from `onset_layer` on. Report prompts are
// answered by an oracle or label-blind readout.
class SimulatedBackend : public Backend {
 public:
  struct Target {
    std::string axis_id;
    std::vector<double> direction;  // oriented unit vector
    AxisThresholds thresholds;
    double score_sd = 1.0;
  };

  enum class ReportMode { Oracle, Blind };

  struct Config {
    int layer_count = 4;
    std::size_t width = 32;
    std::uint64_t seed = 0;
    // Per-dimension SD of sentence embeddings; defaults to 3 * 0.85^j.
    std::vector<double> scales;
    // Dataset labels shift sentences along `label_dim` by +/- label_strength.
    std::map<std::string, int> sentence_labels;
    std::size_t label_dim = 0;
    double label_strength = 0.0;
    // Control gain in SD units as a function of the number of examples.
    std::function<double(std::size_t)> gain = [](std::size_t) { return 0.0; };
    int onset_layer = 1;
    ReportMode report_mode = ReportMode::Blind;
    double report_margin = 4.0;
    LabelMode label_mode = LabelMode::Binary;
  };

  explicit SimulatedBackend(Config config);

  void set_targets(std::vector<Target> targets);

  ModelInfo model_info() override;
  BackendResponse forward(const BackendRequest& request) override;
  BackendResponse generate(const BackendRequest& request) override;

  std::vector<double> sentence_embedding(std::string_view text) const;

  // Which target the examples encode and whether their labels are flipped.
  struct Reading {
    const Target* target = nullptr;
    bool flipped = false;
  };
  Reading read_examples(const ParsedTranscript& parsed) const;

 private:
  BackendResponse respond(const BackendRequest& request, const ChatTranscript& transcript);

  Config config_;
  std::vector<Target> targets_;
  mutable std::mutex mutex_;
};

// Saturating schedule: max_gain * N / (N + half_n).
std::function<double(std::size_t)> saturating_gain(double max_gain, double half_n);
std::function<double(std::size_t)> constant_gain(double gain);

}  // namespace nfb
