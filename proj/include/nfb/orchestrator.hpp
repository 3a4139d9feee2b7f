#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/axes.hpp"
#include "nfb/backend.hpp"
#include "nfb/corpus.hpp"
#include "nfb/metrics.hpp"

namespace nfb {

enum class Task { Report, ExplicitControl, ImplicitControl };

std::string_view to_string(Task task);
Task task_from_string(std::string_view name);
inline bool is_control(Task t) { return t != Task::Report; }

// One experiment grid. Text form is one `key = value` per line, '#' starts a
// comment, lists are comma-separated; see config_to_text for every key.
struct ExperimentConfig {
  std::string model_id;
  Task task = Task::Report;
  std::vector<int> layers;  // empty: depth percentiles below
  std::vector<double> layer_percentiles{0, 25, 50, 75, 100};
  std::vector<std::size_t> n_examples{0, 2, 4, 8, 16, 32, 64, 128, 256};
  std::vector<std::string> axes{"PC1", "PC2", "PC4", "PC8", "PC32", "PC128", "PC512", "LR"};
  std::vector<std::string> targets;  // empty: every axis in `axes`
  int repeats = 100;
  std::uint64_t seed = 0;
  LabelMode label_mode = LabelMode::Binary;
  int workers = 1;
  GenerateParams decode;              // explicit control
  bool record_source_layers = false;  // project every layer onto the target axis
  int max_retries = 3;
  double retry_base_ms = 100.0;

  const std::vector<std::string>& target_axes() const { return targets.empty() ? axes : targets; }
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);
std::string config_to_text(const ExperimentConfig& config);

std::vector<int> resolve_layers(const ExperimentConfig& config, int layer_count);

// Standalone ("Say something." + sentence) embeddings of a sentence set.
struct EmbeddingTable {
  std::vector<Sentence> sentences;
  std::map<int, std::vector<SentenceEmbedding>> layers;

  const SentenceEmbedding& at(int layer, std::size_t i) const;
};

EmbeddingTable embed_sentences(Backend& backend, std::vector<Sentence> sentences,
                               const std::vector<int>& layers, int workers = 1, int max_retries = 3);

struct AxisFitOptions {
  int max_pcs = 512;
  LogisticOptions logistic;
  int ordinal_levels = 8;
};

// PCA per layer (k capped by the data), a logistic-regression axis when the
// sentences carry both dataset labels, orientation by those labels, and
// median / quantile thresholds from the fit sentences' own scores.
AxisStore fit_axes(const EmbeddingTable& fit, const ModelInfo& info, std::uint64_t seed,
                   const AxisFitOptions& options = {});

struct TrialRecord {
  Task task = Task::Report;
  int layer = 0;
  std::size_t n_examples = 0;
  std::string target_axis;
  int repeat = 0;
  int condition = 0;  // 1..4 for control cells (i)..(iv), 0 for reporting
  std::string label_mode = "binary";
  std::string assignment = "identity";
  std::optional<int> imitate_label;  // label named in the instruction
  std::optional<int> imitated_side;  // 1 when the high-score group is imitated
  std::vector<std::string> example_ids;
  std::vector<int> true_labels;
  std::vector<int> shown_labels;
  std::string query_id;  // report query or implicit-control sentence
  std::optional<int> true_label;
  std::map<std::string, double> scores;  // affected axis -> score at `layer`
  std::map<int, double> source_scores;   // source layer -> score on the target axis
  std::map<std::string, double> logits;
  std::optional<std::string> final_text;  // controlled sentence (generated or provided)
  std::optional<GenerateParams> decode;
  std::string status = "ok";
  std::string error;
  int attempts = 0;
  std::string config_hash;
  std::string timestamp;

  friend bool operator==(const TrialRecord&, const TrialRecord&) = default;
};

std::string to_json(const TrialRecord& record);
TrialRecord trial_record_from_json(std::string_view line);
std::vector<TrialRecord> parse_records(std::string_view jsonl);
std::vector<TrialRecord> load_records(const std::string& path);
bool same_except_timestamp(const TrialRecord& a, const TrialRecord& b);

// Hash of every coordinate field plus the seed.
std::string config_hash(Task task, int layer, std::size_t n, std::string_view target, int repeat,
                        int condition, LabelMode mode, std::uint64_t seed);

using RecordSink = std::function<void(const TrialRecord&)>;

struct SweepResult {
  std::vector<TrialRecord> records;
  std::size_t failed = 0;
};

// Examples and queries are drawn from `pool` only. Records reach `sink` in
// plan order while the sweep runs.
SweepResult run_reporting_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                                const EmbeddingTable& pool, const RecordSink& sink = {});
SweepResult run_control_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                              const EmbeddingTable& pool, const RecordSink& sink = {});
SweepResult run_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                      const EmbeddingTable& pool, const RecordSink& sink = {});

struct PlanCell {
  int layer = 0;
  std::string target;
  std::size_t n_examples = 0;
  std::size_t records = 0;
  std::size_t requests = 0;
};

std::vector<PlanCell> plan(const ExperimentConfig& config, const std::vector<int>& layers);
std::string plan_text(const ExperimentConfig& config, const std::vector<PlanCell>& cells);

// ---------------------------------------------------------------- analysis

struct ReportCell {
  int layer = 0;
  std::string axis;
  std::size_t n_examples = 0;
  ReportMetrics metrics;
  std::size_t failed = 0;
};

std::vector<ReportCell> aggregate_report(const std::vector<TrialRecord>& records);

// d is (high-side mean - low-side mean) / pooled SD, grouping the four
// conditions by which sentence group they imitate.
struct ControlCell {
  Task task = Task::ExplicitControl;
  int layer = 0;
  std::string target;
  std::string affected;
  std::size_t n_examples = 0;
  std::optional<EffectSize> effect;
  std::string note;
  std::size_t failed = 0;
};

std::vector<ControlCell> aggregate_control(const std::vector<TrialRecord>& records);

struct PrecisionCell {
  Task task = Task::ExplicitControl;
  int layer = 0;
  std::string target;
  std::size_t n_examples = 0;
  std::size_t axis_count = 0;
  std::optional<double> precision;
  double target_abs_d = 0.0;
  double mean_abs_d = 0.0;
  double off_target_mean_abs_d = 0.0;
};

// Over the PC columns only; LR targets get no precision.
std::vector<PrecisionCell> control_precisions(const std::vector<ControlCell>& cells);

struct AccumulationCell {
  Task task = Task::ExplicitControl;
  int target_layer = 0;
  int source_layer = 0;
  std::string target;
  std::size_t n_examples = 0;
  std::optional<EffectSize> effect;
};

// Records without source scores are re-served through `backend`, rebuilding
// each prompt from the record and `texts` (sentence id -> text).
std::vector<AccumulationCell> accumulation_analysis(
    const std::vector<TrialRecord>& records, const AxisStore& axes, Backend* backend = nullptr,
    const std::map<std::string, std::string>* texts = nullptr, int workers = 1);

// Standalone scores of the pool sentences per (layer, axis): the uncontrolled
// baseline for extremity comparisons.
using BaselineScores = std::map<int, std::map<std::string, std::vector<double>>>;
BaselineScores baseline_scores(const AxisStore& axes, const EmbeddingTable& pool,
                               const std::vector<int>& layers, const std::vector<std::string>& axis_ids);
std::string to_json(const BaselineScores& baseline);
BaselineScores baseline_from_json(std::string_view text);

}  // namespace nfb
