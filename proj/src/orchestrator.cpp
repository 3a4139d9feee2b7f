#include "nfb/orchestrator.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json_internal.hpp"
#include "nfb/error.hpp"
#include "nfb/random.hpp"

namespace nfb {

using detail::json;
using detail::ojson;

std::string_view to_string(Task task) {
  switch (task) {
    case Task::Report: return "report";
    case Task::ExplicitControl: return "explicit_control";
    case Task::ImplicitControl: return "implicit_control";
  }
  return "report";
}

Task task_from_string(std::string_view name) {
  if (name == "report") return Task::Report;
  if (name == "explicit_control") return Task::ExplicitControl;
  if (name == "implicit_control") return Task::ImplicitControl;
  throw Error(ErrorCode::BadConfig, "task must be report, explicit_control or implicit_control");
}

// ---------------------------------------------------------------- config

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const auto comma = s.find(',', pos);
    auto item = trim(s.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos));
    if (!item.empty()) out.push_back(std::move(item));
    pos = comma == std::string_view::npos ? s.size() + 1 : comma + 1;
  }
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  std::istringstream in(value);
  T out{};
  in >> out;
  if (in.fail() || !in.eof()) throw Error(ErrorCode::BadConfig, "bad value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw Error(ErrorCode::BadConfig, "bad boolean for " + key + ": '" + value + "'");
}

template <typename T>
std::string join(const std::vector<T>& items) {
  std::ostringstream out;
  for (std::size_t i = 0; i < items.size(); ++i) out << (i ? "," : "") << items[i];
  return out.str();
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig c;
  std::size_t pos = 0;
  std::size_t line_no = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string line(text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos));
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw Error(ErrorCode::BadConfig, "config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (key == "model_id") {
      c.model_id = value;
    } else if (key == "task") {
      c.task = task_from_string(value);
    } else if (key == "layers") {
      c.layers.clear();
      if (value != "auto") {
        for (const auto& v : split_list(value)) c.layers.push_back(parse_number<int>(key, v));
      }
    } else if (key == "layer_percentiles") {
      c.layer_percentiles.clear();
      for (const auto& v : split_list(value)) c.layer_percentiles.push_back(parse_number<double>(key, v));
    } else if (key == "n_examples") {
      c.n_examples.clear();
      for (const auto& v : split_list(value)) {
        if (!v.empty() && v[0] == '-') throw Error(ErrorCode::BadConfig, "n_examples must be non-negative");
        c.n_examples.push_back(parse_number<std::size_t>(key, v));
      }
    } else if (key == "axes") {
      c.axes = split_list(value);
    } else if (key == "targets") {
      c.targets = split_list(value);
    } else if (key == "repeats") {
      c.repeats = parse_number<int>(key, value);
    } else if (key == "seed") {
      c.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "label_mode") {
      try {
        c.label_mode = label_mode_from_string(value);
      } catch (const Error& e) {
        throw Error(ErrorCode::BadConfig, e.what());
      }
    } else if (key == "workers") {
      c.workers = parse_number<int>(key, value);
    } else if (key == "max_new_tokens") {
      c.decode.max_new_tokens = parse_number<int>(key, value);
    } else if (key == "decode_mode") {
      if (value == "greedy") {
        c.decode.mode = DecodeMode::Greedy;
      } else if (value == "sampled") {
        c.decode.mode = DecodeMode::Sampled;
      } else {
        throw Error(ErrorCode::BadConfig, "decode_mode must be greedy or sampled");
      }
    } else if (key == "temperature") {
      c.decode.temperature = parse_number<double>(key, value);
    } else if (key == "decode_seed") {
      c.decode.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "record_source_layers") {
      c.record_source_layers = parse_bool(key, value);
    } else if (key == "max_retries") {
      c.max_retries = parse_number<int>(key, value);
    } else if (key == "retry_base_ms") {
      c.retry_base_ms = parse_number<double>(key, value);
    } else {
      throw Error(ErrorCode::BadConfig, "unknown config key '" + key + "'");
    }
  }
  if (c.repeats < 1) throw Error(ErrorCode::BadConfig, "repeats must be at least 1");
  if (c.workers < 1) throw Error(ErrorCode::BadConfig, "workers must be at least 1");
  if (c.max_retries < 0) throw Error(ErrorCode::BadConfig, "max_retries must be non-negative");
  if (c.axes.empty()) throw Error(ErrorCode::BadConfig, "axes list is empty");
  for (const auto& a : c.axes) parse_axis_id(a);
  for (const auto& t : c.targets) {
    if (std::find(c.axes.begin(), c.axes.end(), t) == c.axes.end()) {
      throw Error(ErrorCode::BadConfig, "target '" + t + "' is not in the axes list");
    }
  }
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::BadConfig, "cannot open config '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string config_to_text(const ExperimentConfig& c) {
  std::ostringstream out;
  out << "model_id = " << c.model_id << "\n";
  out << "task = " << to_string(c.task) << "\n";
  out << "layers = " << (c.layers.empty() ? std::string("auto") : join(c.layers)) << "\n";
  out << "layer_percentiles = " << join(c.layer_percentiles) << "\n";
  out << "n_examples = " << join(c.n_examples) << "\n";
  out << "axes = " << join(c.axes) << "\n";
  if (!c.targets.empty()) out << "targets = " << join(c.targets) << "\n";
  out << "repeats = " << c.repeats << "\n";
  out << "seed = " << c.seed << "\n";
  out << "label_mode = " << to_string(c.label_mode) << "\n";
  out << "workers = " << c.workers << "\n";
  out << "max_new_tokens = " << c.decode.max_new_tokens << "\n";
  out << "decode_mode = " << to_string(c.decode.mode) << "\n";
  out << "temperature = " << c.decode.temperature << "\n";
  out << "decode_seed = " << c.decode.seed << "\n";
  out << "record_source_layers = " << (c.record_source_layers ? "true" : "false") << "\n";
  out << "max_retries = " << c.max_retries << "\n";
  out << "retry_base_ms = " << c.retry_base_ms << "\n";
  return out.str();
}

std::vector<int> resolve_layers(const ExperimentConfig& config, int layer_count) {
  if (config.layers.empty()) return select_layers(layer_count, config.layer_percentiles);
  std::vector<int> layers = config.layers;
  for (int l : layers) {
    if (l < 1 || l > layer_count) {
      throw Error(ErrorCode::BadLayer,
                  "layer " + std::to_string(l) + " outside [1, " + std::to_string(layer_count) + "]");
    }
  }
  std::sort(layers.begin(), layers.end());
  layers.erase(std::unique(layers.begin(), layers.end()), layers.end());
  return layers;
}

// ---------------------------------------------------------------- execution helpers

namespace {

template <typename F>
auto with_retries(int max_retries, double base_ms, int& attempts, F&& f) {
  for (int k = 0;; ++k) {
    ++attempts;
    try {
      return f();
    } catch (const Error& e) {
      if (!e.retriable() || k >= max_retries) throw;
    }
    std::this_thread::sleep_for(std::chrono::duration<double, std::milli>(base_ms * std::ldexp(1.0, k)));
  }
}

// Runs job(i) for i in [0, count) on `workers` threads and hands results to
// `emit` in index order from a single thread at a time.
template <typename Result>
void run_ordered(std::size_t count, int workers, const std::function<Result(std::size_t)>& job,
                 const std::function<void(Result&&)>& emit) {
  std::vector<std::optional<Result>> slots(count);
  std::atomic<std::size_t> next{0};
  std::size_t emitted = 0;
  std::mutex mutex;
  std::exception_ptr failure;
  std::atomic<bool> stop{false};

  auto worker = [&] {
    while (!stop.load()) {
      const std::size_t i = next.fetch_add(1);
      if (i >= count) return;
      try {
        Result r = job(i);
        std::lock_guard lock(mutex);
        slots[i] = std::move(r);
        while (emitted < count && slots[emitted]) {
          emit(std::move(*slots[emitted]));
          slots[emitted].reset();
          ++emitted;
        }
      } catch (...) {
        std::lock_guard lock(mutex);
        if (!failure) failure = std::current_exception();
        stop = true;
      }
    }
  };
  const auto n = static_cast<std::size_t>(std::max(1, workers));
  if (n == 1 || count <= 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (std::size_t t = 0; t < std::min(n, count); ++t) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }
  if (failure) std::rethrow_exception(failure);
}

std::string now_iso8601() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d.%03dZ", tm.tm_year + 1900, tm.tm_mon + 1,
                tm.tm_mday, tm.tm_hour, tm.tm_min, tm.tm_sec, static_cast<int>(ms));
  return buf;
}

std::vector<std::string> label_tokens(LabelMode mode, int levels) {
  std::vector<std::string> out;
  if (mode == LabelMode::Binary) return {"0", "1"};
  for (int k = 1; k <= levels; ++k) out.push_back(std::to_string(k));
  return out;
}

}  // namespace

const SentenceEmbedding& EmbeddingTable::at(int layer, std::size_t i) const {
  const auto it = layers.find(layer);
  if (it == layers.end()) {
    throw Error(ErrorCode::IncompleteActivations, "no standalone embeddings at layer " + std::to_string(layer));
  }
  return it->second.at(i);
}

EmbeddingTable embed_sentences(Backend& backend, std::vector<Sentence> sentences, const std::vector<int>& layers,
                               int workers, int max_retries) {
  if (layers.empty()) throw Error(ErrorCode::BadParams, "no layers to embed");
  EmbeddingTable table;
  table.sentences = std::move(sentences);
  for (int l : layers) table.layers[l].reserve(table.sentences.size());
  using Row = std::vector<SentenceEmbedding>;
  run_ordered<Row>(
      table.sentences.size(), workers,
      [&](std::size_t i) {
        BackendRequest req;
        req.id = "embed-" + table.sentences[i].id;
        req.transcript = build_standalone_prompt(table.sentences[i].text);
        req.want_layers = layers;
        int attempts = 0;
        const auto res = with_retries(max_retries, 100.0, attempts, [&] { return backend.forward(req); });
        Row row;
        for (int l : layers) row.push_back(res.pool_message(l, req.transcript.messages.size() - 1));
        return row;
      },
      [&](Row&& row) {
        for (std::size_t k = 0; k < layers.size(); ++k) table.layers[layers[k]].push_back(std::move(row[k]));
      });
  return table;
}

AxisStore fit_axes(const EmbeddingTable& fit, const ModelInfo& info, std::uint64_t seed,
                   const AxisFitOptions& options) {
  AxisStore store;
  store.model_id = info.model_id;
  store.layer_count = info.layer_count;
  store.width = info.width;
  store.seed = seed;
  store.fit_sentence_count = fit.sentences.size();

  std::vector<int> labels;
  bool labeled = !fit.sentences.empty();
  for (const auto& s : fit.sentences) {
    if (!s.label) {
      labeled = false;
      break;
    }
    labels.push_back(*s.label != 0 ? 1 : 0);
  }
  if (labeled) {
    const auto ones = std::count(labels.begin(), labels.end(), 1);
    labeled = ones > 0 && ones < static_cast<long>(labels.size());
  }

  for (const auto& [layer, embeddings] : fit.layers) {
    const int n = static_cast<int>(embeddings.size());
    const int k = std::min({options.max_pcs, n - 1, static_cast<int>(info.width)});
    auto pca = fit_pca(embeddings, k);
    AxisBasis basis;
    basis.layer = layer;
    basis.data_mean = std::move(pca.data_mean);
    basis.total_variance = pca.total_variance;
    for (auto& axis : pca.pcs) {
      basis.pcs.push_back(labeled ? orient_axis(std::move(axis), embeddings, labels) : std::move(axis));
    }
    if (labeled) {
      auto lr = fit_logistic(embeddings, labels, options.logistic);
      basis.lr = orient_axis(std::move(lr.axis), embeddings, labels);
    }
    auto set_thresholds = [&](Axis& axis) {
      std::vector<double> scores;
      scores.reserve(embeddings.size());
      for (const auto& e : embeddings) scores.push_back(project(e, axis));
      axis.thresholds = fit_thresholds(scores, options.ordinal_levels);
    };
    for (auto& axis : basis.pcs) set_thresholds(axis);
    if (basis.lr) set_thresholds(*basis.lr);
    store.layers.push_back(std::move(basis));
  }
  return store;
}

// ---------------------------------------------------------------- records

std::string config_hash(Task task, int layer, std::size_t n, std::string_view target, int repeat, int condition,
                        LabelMode mode, std::uint64_t seed) {
  std::string key = std::string(to_string(task)) + "|" + std::to_string(layer) + "|" + std::to_string(n) + "|" +
                    std::string(target) + "|" + std::to_string(repeat) + "|" + std::to_string(condition) + "|" +
                    std::string(to_string(mode)) + "|" + std::to_string(seed);
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(key)));
  return buf;
}

std::string to_json(const TrialRecord& r) {
  ojson j;
  j["task"] = to_string(r.task);
  j["layer"] = r.layer;
  j["n_examples"] = r.n_examples;
  j["target_axis"] = r.target_axis;
  j["repeat"] = r.repeat;
  j["condition"] = r.condition;
  j["label_mode"] = r.label_mode;
  j["assignment"] = r.assignment;
  j["imitate_label"] = r.imitate_label ? ojson(*r.imitate_label) : ojson(nullptr);
  j["imitated_side"] = r.imitated_side ? ojson(*r.imitated_side) : ojson(nullptr);
  j["example_ids"] = r.example_ids;
  j["true_labels"] = r.true_labels;
  j["shown_labels"] = r.shown_labels;
  j["query_id"] = r.query_id;
  j["true_label"] = r.true_label ? ojson(*r.true_label) : ojson(nullptr);
  ojson scores = ojson::object();
  for (const auto& [k, v] : r.scores) scores[k] = v;
  j["scores"] = std::move(scores);
  ojson sources = ojson::object();
  for (const auto& [k, v] : r.source_scores) sources[std::to_string(k)] = v;
  j["source_scores"] = std::move(sources);
  ojson logits = ojson::object();
  for (const auto& [k, v] : r.logits) logits[k] = v;
  j["logits"] = std::move(logits);
  j["final_text"] = r.final_text ? ojson(*r.final_text) : ojson(nullptr);
  if (r.decode) {
    ojson d;
    d["max_new_tokens"] = r.decode->max_new_tokens;
    d["decode_mode"] = to_string(r.decode->mode);
    d["seed"] = r.decode->seed;
    d["temperature"] = r.decode->temperature;
    d["stop"] = r.decode->stop;
    j["decode"] = std::move(d);
  } else {
    j["decode"] = nullptr;
  }
  j["status"] = r.status;
  j["error"] = r.error;
  j["attempts"] = r.attempts;
  j["config_hash"] = r.config_hash;
  j["timestamp"] = r.timestamp;
  return detail::dump(j);
}

TrialRecord trial_record_from_json(std::string_view line) {
  const json j = detail::parse_json(line, "trial record");
  try {
    TrialRecord r;
    r.task = task_from_string(j.at("task").get<std::string>());
    r.layer = j.at("layer").get<int>();
    r.n_examples = j.at("n_examples").get<std::size_t>();
    r.target_axis = j.at("target_axis").get<std::string>();
    r.repeat = j.at("repeat").get<int>();
    r.condition = j.value("condition", 0);
    r.label_mode = j.value("label_mode", std::string("binary"));
    r.assignment = j.value("assignment", std::string("identity"));
    if (j.contains("imitate_label") && !j["imitate_label"].is_null()) r.imitate_label = j["imitate_label"].get<int>();
    if (j.contains("imitated_side") && !j["imitated_side"].is_null()) r.imitated_side = j["imitated_side"].get<int>();
    r.example_ids = j.value("example_ids", std::vector<std::string>{});
    r.true_labels = j.value("true_labels", std::vector<int>{});
    r.shown_labels = j.value("shown_labels", std::vector<int>{});
    r.query_id = j.value("query_id", std::string{});
    if (j.contains("true_label") && !j["true_label"].is_null()) r.true_label = j["true_label"].get<int>();
    if (j.contains("scores")) {
      for (const auto& [k, v] : j["scores"].items()) r.scores[k] = v.get<double>();
    }
    if (j.contains("source_scores")) {
      for (const auto& [k, v] : j["source_scores"].items()) r.source_scores[std::stoi(k)] = v.get<double>();
    }
    if (j.contains("logits")) {
      for (const auto& [k, v] : j["logits"].items()) r.logits[k] = v.get<double>();
    }
    if (j.contains("final_text") && !j["final_text"].is_null()) r.final_text = j["final_text"].get<std::string>();
    if (j.contains("decode") && !j["decode"].is_null()) {
      const auto& d = j["decode"];
      GenerateParams g;
      g.max_new_tokens = d.at("max_new_tokens").get<int>();
      g.mode = d.at("decode_mode").get<std::string>() == "sampled" ? DecodeMode::Sampled : DecodeMode::Greedy;
      g.seed = d.value("seed", std::uint64_t{0});
      g.temperature = d.value("temperature", 1.0);
      g.stop = d.value("stop", std::vector<std::string>{});
      r.decode = g;
    }
    r.status = j.value("status", std::string("ok"));
    r.error = j.value("error", std::string{});
    r.attempts = j.value("attempts", 0);
    r.config_hash = j.value("config_hash", std::string{});
    r.timestamp = j.value("timestamp", std::string{});
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("malformed trial record: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw Error(ErrorCode::BadFormat, std::string("malformed trial record: ") + e.what());
  }
}

std::vector<TrialRecord> parse_records(std::string_view jsonl) {
  std::vector<TrialRecord> out;
  std::size_t pos = 0;
  while (pos < jsonl.size()) {
    const auto nl = jsonl.find('\n', pos);
    const auto line = jsonl.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? jsonl.size() : nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    out.push_back(trial_record_from_json(line));
  }
  return out;
}

std::vector<TrialRecord> load_records(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::BadConfig, "cannot open records '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_records(ss.str());
}

bool same_except_timestamp(const TrialRecord& a, const TrialRecord& b) {
  TrialRecord x = a;
  x.timestamp = b.timestamp;
  return x == b;
}

// ---------------------------------------------------------------- sweeps

namespace {

struct Trial {
  int layer = 0;
  std::string target;
  std::size_t n = 0;
  int repeat = 0;
};

std::vector<Trial> enumerate_trials(const ExperimentConfig& config, const std::vector<int>& layers) {
  std::vector<Trial> trials;
  for (int layer : layers) {
    for (const auto& target : config.target_axes()) {
      for (std::size_t n : config.n_examples) {
        for (int r = 0; r < config.repeats; ++r) trials.push_back({layer, target, n, r});
      }
    }
  }
  return trials;
}

std::size_t draws_per_trial(Task task, std::size_t n) { return task == Task::ExplicitControl ? n : n + 1; }

void check_inputs(const ExperimentConfig& config, const AxisStore& axes, const EmbeddingTable& pool,
                  const std::vector<int>& layers) {
  for (int layer : layers) {
    if (!pool.layers.count(layer)) {
      throw Error(ErrorCode::IncompleteActivations,
                  "sentence pool lacks standalone embeddings at layer " + std::to_string(layer));
    }
    for (const auto& id : config.axes) {
      if (!axes.has(layer, id)) {
        throw Error(ErrorCode::BadConfig, "axis " + id + " was not fitted at layer " + std::to_string(layer));
      }
      const Axis& a = axes.axis(layer, id);
      if (!a.thresholds) throw Error(ErrorCode::BadConfig, "axis " + id + " has no thresholds");
      if (config.label_mode == LabelMode::Ordinal8 && !a.thresholds->ordinal) {
        throw Error(ErrorCode::DegenerateData, "axis " + id + " has no ordinal thresholds");
      }
    }
  }
  for (std::size_t n : config.n_examples) {
    if (draws_per_trial(config.task, n) > pool.sentences.size()) {
      throw Error(ErrorCode::ConfigTooLarge, "N=" + std::to_string(n) + " needs " +
                                                 std::to_string(draws_per_trial(config.task, n)) +
                                                 " sentences but the pool has " +
                                                 std::to_string(pool.sentences.size()));
    }
  }
}

struct Draw {
  std::vector<std::size_t> examples;  // pool indices, presentation order
  std::vector<int> labels;            // true labels on the target axis
  std::optional<std::size_t> extra;   // query or provided sentence
  std::uint64_t seed = 0;
};

std::uint64_t trial_seed(const ExperimentConfig& config, const Trial& t) {
  return mix_seed({config.seed, fnv1a64(to_string(config.task)), static_cast<std::uint64_t>(t.layer),
                   fnv1a64(t.target), t.n, static_cast<std::uint64_t>(t.repeat)});
}

Draw draw(const ExperimentConfig& config, const Trial& t, const Axis& axis, const EmbeddingTable& pool) {
  Draw d;
  d.seed = trial_seed(config, t);
  Rng rng(d.seed);
  auto picked = rng.sample(pool.sentences.size(), draws_per_trial(config.task, t.n));
  if (config.task != Task::ExplicitControl) {
    d.extra = picked.back();
    picked.pop_back();
  }
  std::vector<int> labels;
  for (std::size_t i : picked) labels.push_back(axis.thresholds->label(project(pool.at(t.layer, i), axis), config.label_mode));
  const auto order = balanced_interleave(labels, rng.bits());
  for (std::size_t k : order) {
    d.examples.push_back(picked[k]);
    d.labels.push_back(labels[k]);
  }
  return d;
}

ExampleSet example_set(const ExperimentConfig& config, const Draw& d, const EmbeddingTable& pool,
                       const std::string& target, LabelAssignment assignment, int levels) {
  ExampleSet ex;
  ex.axis_id = target;
  ex.assignment = assignment;
  ex.mode = config.label_mode;
  ex.levels = levels;
  for (std::size_t k = 0; k < d.examples.size(); ++k) {
    ex.pairs.push_back({pool.sentences[d.examples[k]].text, d.labels[k]});
  }
  return ex;
}

TrialRecord base_record(const ExperimentConfig& config, const Trial& t, const Draw& d, const EmbeddingTable& pool,
                        const ExampleSet& ex, int condition) {
  TrialRecord r;
  r.task = config.task;
  r.layer = t.layer;
  r.n_examples = t.n;
  r.target_axis = t.target;
  r.repeat = t.repeat;
  r.condition = condition;
  r.label_mode = std::string(to_string(config.label_mode));
  r.assignment = std::string(to_string(ex.assignment));
  for (std::size_t k = 0; k < d.examples.size(); ++k) {
    r.example_ids.push_back(pool.sentences[d.examples[k]].id);
    r.true_labels.push_back(d.labels[k]);
    r.shown_labels.push_back(ex.shown_label(k));
  }
  if (d.extra) r.query_id = pool.sentences[*d.extra].id;
  r.config_hash = config_hash(config.task, t.layer, t.n, t.target, t.repeat, condition, config.label_mode, config.seed);
  return r;
}

void fail(TrialRecord& r, const Error& e) {
  r.status = "failed";
  r.error = std::string(to_string(e.code())) + ": " + e.what();
  r.scores.clear();
  r.source_scores.clear();
  r.logits.clear();
}

// Trial-level failures are recorded; anything else (bad config, protocol
// misuse) aborts the sweep.
bool trial_level(const Error& e) {
  return e.retriable() || e.code() == ErrorCode::EmptySpan || e.code() == ErrorCode::BadLogits;
}

// Scores of one controlled sentence on every configured axis and, when
// requested, of every source layer on the target axis.
void score_response(const ExperimentConfig& config, const AxisStore& axes, const BackendResponse& res,
                    std::size_t message, int layer, const std::string& target, int layer_count, TrialRecord& r) {
  const SentenceEmbedding emb = res.pool_message(layer, message);
  for (const auto& id : config.axes) r.scores[id] = project(emb, axes.axis(layer, id));
  if (config.record_source_layers) {
    const Axis& axis = axes.axis(layer, target);
    for (int s = 1; s <= layer_count; ++s) {
      r.source_scores[s] = project(res.pool_message(s, message), axis, LayerPolicy::CrossLayer);
    }
  }
}

SweepResult collect(const ExperimentConfig& config, std::size_t count,
                    const std::function<std::vector<TrialRecord>(std::size_t)>& job, const RecordSink& sink) {
  SweepResult out;
  run_ordered<std::vector<TrialRecord>>(count, config.workers, job, [&](std::vector<TrialRecord>&& batch) {
    for (auto& r : batch) {
      if (r.status != "ok") ++out.failed;
      if (sink) sink(r);
      out.records.push_back(std::move(r));
    }
  });
  return out;
}

}  // namespace

SweepResult run_reporting_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                                const EmbeddingTable& pool, const RecordSink& sink) {
  if (config.task != Task::Report) throw Error(ErrorCode::BadConfig, "reporting sweep needs task = report");
  const ModelInfo info = backend.model_info();
  const auto layers = resolve_layers(config, info.layer_count);
  check_inputs(config, axes, pool, layers);
  const auto trials = enumerate_trials(config, layers);

  return collect(config, trials.size(), [&](std::size_t i) {
    const Trial& t = trials[i];
    const Axis& axis = axes.axis(t.layer, t.target);
    const int levels = axis.thresholds->level_count(config.label_mode);
    const Draw d = draw(config, t, axis, pool);
    const ExampleSet ex = example_set(config, d, pool, t.target, LabelAssignment::Identity, levels);
    TrialRecord r = base_record(config, t, d, pool, ex, 0);
    r.true_label = axis.thresholds->label(project(pool.at(t.layer, *d.extra), axis), config.label_mode);

    BackendRequest req;
    req.id = r.config_hash;
    req.transcript = build_report_prompt(ex, pool.sentences[*d.extra].text);
    req.want_logit_tokens = label_tokens(config.label_mode, levels);
    try {
      const auto res = with_retries(config.max_retries, config.retry_base_ms, r.attempts,
                                    [&] { return backend.forward(req); });
      r.logits = res.logits;
      for (const auto& tok : req.want_logit_tokens) {
        const auto it = r.logits.find(tok);
        if (it == r.logits.end() || !std::isfinite(it->second)) {
          throw Error(ErrorCode::BadLogits, "missing or non-finite logit for '" + tok + "'");
        }
      }
    } catch (const Error& e) {
      if (!trial_level(e)) throw;
      fail(r, e);
    }
    r.timestamp = now_iso8601();
    return std::vector<TrialRecord>{std::move(r)};
  }, sink);
}

SweepResult run_control_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                              const EmbeddingTable& pool, const RecordSink& sink) {
  if (!is_control(config.task)) throw Error(ErrorCode::BadConfig, "control sweep needs a control task");
  const ModelInfo info = backend.model_info();
  const auto layers = resolve_layers(config, info.layer_count);
  check_inputs(config, axes, pool, layers);
  const auto trials = enumerate_trials(config, layers);
  const bool explicit_mode = config.task == Task::ExplicitControl;

  return collect(config, trials.size(), [&](std::size_t i) {
    const Trial& t = trials[i];
    const Axis& axis = axes.axis(t.layer, t.target);
    const int levels = axis.thresholds->level_count(config.label_mode);
    const Draw d = draw(config, t, axis, pool);
    std::vector<TrialRecord> out;
    for (const ConditionSpec& c : counterbalanced_conditions()) {
      const ExampleSet ex = example_set(config, d, pool, t.target, c.assignment, levels);
      TrialRecord r = base_record(config, t, d, pool, ex, c.index);
      const int imitate = config.label_mode == LabelMode::Binary ? c.imitate_label : (c.imitate_label ? levels : 1);
      r.imitate_label = imitate;
      r.imitated_side = c.imitated_side();

      BackendRequest req;
      req.id = r.config_hash;
      if (config.record_source_layers) {
        for (int l = 1; l <= info.layer_count; ++l) req.want_layers.push_back(l);
      } else {
        req.want_layers = {t.layer};
      }
      try {
        if (explicit_mode) {
          req.transcript = build_control_prompt(ex, imitate, ControlMode::Explicit);
          GenerateParams g = config.decode;
          g.seed = mix_seed({config.decode.seed, d.seed, static_cast<std::uint64_t>(c.index)});
          req.generate = g;
          r.decode = g;
        } else {
          r.final_text = pool.sentences[*d.extra].text;
          req.transcript = build_control_prompt(ex, imitate, ControlMode::Implicit, *r.final_text);
        }
        const auto res = with_retries(config.max_retries, config.retry_base_ms, r.attempts, [&] {
          return explicit_mode ? backend.generate(req) : backend.forward(req);
        });
        if (explicit_mode) r.final_text = res.generated_text.value_or("");
        score_response(config, axes, res, req.transcript.messages.size() - 1, t.layer, t.target,
                       info.layer_count, r);
      } catch (const Error& e) {
        if (!trial_level(e)) throw;
        fail(r, e);
      }
      r.timestamp = now_iso8601();
      out.push_back(std::move(r));
    }
    return out;
  }, sink);
}

SweepResult run_sweep(const ExperimentConfig& config, Backend& backend, const AxisStore& axes,
                      const EmbeddingTable& pool, const RecordSink& sink) {
  return config.task == Task::Report ? run_reporting_sweep(config, backend, axes, pool, sink)
                                     : run_control_sweep(config, backend, axes, pool, sink);
}

std::vector<PlanCell> plan(const ExperimentConfig& config, const std::vector<int>& layers) {
  std::vector<PlanCell> cells;
  const std::size_t per_trial = config.task == Task::Report ? 1 : 4;
  for (int layer : layers) {
    for (const auto& target : config.target_axes()) {
      for (std::size_t n : config.n_examples) {
        const std::size_t records = per_trial * static_cast<std::size_t>(config.repeats);
        cells.push_back({layer, target, n, records, records});
      }
    }
  }
  return cells;
}

std::string plan_text(const ExperimentConfig& config, const std::vector<PlanCell>& cells) {
  std::ostringstream out;
  std::size_t records = 0;
  std::size_t requests = 0;
  out << "task " << to_string(config.task) << ", label mode " << to_string(config.label_mode) << ", seed "
      << config.seed << ", " << config.repeats << " repeats\n";
  out << "layer\ttarget\tN\trecords\trequests\n";
  for (const auto& c : cells) {
    out << c.layer << '\t' << c.target << '\t' << c.n_examples << '\t' << c.records << '\t' << c.requests << '\n';
    records += c.records;
    requests += c.requests;
  }
  out << "total: " << cells.size() << " cells, " << records << " records, " << requests << " backend requests\n";
  return out.str();
}

// ---------------------------------------------------------------- analysis

std::vector<ReportCell> aggregate_report(const std::vector<TrialRecord>& records) {
  struct Acc {
    std::vector<ReportTrial> binary;
    std::vector<OrdinalReportTrial> ordinal;
    std::size_t failed = 0;
  };
  std::map<std::tuple<int, std::string, std::size_t>, Acc> groups;
  for (const auto& r : records) {
    if (r.task != Task::Report) continue;
    Acc& acc = groups[{r.layer, r.target_axis, r.n_examples}];
    if (r.status != "ok" || !r.true_label) {
      ++acc.failed;
      continue;
    }
    if (r.label_mode == "binary") {
      acc.binary.push_back({*r.true_label, r.logits.at("1"), r.logits.at("0")});
    } else {
      OrdinalReportTrial t;
      t.true_label = *r.true_label;
      for (int k = 1; r.logits.count(std::to_string(k)); ++k) t.logits.push_back(r.logits.at(std::to_string(k)));
      acc.ordinal.push_back(std::move(t));
    }
  }
  std::vector<ReportCell> out;
  for (const auto& [key, acc] : groups) {
    ReportCell c;
    std::tie(c.layer, c.axis, c.n_examples) = key;
    c.failed = acc.failed;
    if (!acc.binary.empty()) c.metrics = report_metrics(acc.binary);
    if (!acc.ordinal.empty()) c.metrics = ordinal_report_metrics(acc.ordinal);
    out.push_back(std::move(c));
  }
  return out;
}

namespace {

std::optional<EffectSize> effect_or_note(const std::vector<double>& low, const std::vector<double>& high,
                                         std::string& note) {
  try {
    return cohens_d(low, high);
  } catch (const Error& e) {
    note = std::string(to_string(e.code())) + ": " + e.what();
    return std::nullopt;
  }
}

}  // namespace

std::vector<ControlCell> aggregate_control(const std::vector<TrialRecord>& records) {
  struct Acc {
    std::vector<double> side[2];
    std::size_t failed = 0;
  };
  using Key = std::tuple<Task, int, std::string, std::string, std::size_t>;
  std::map<Key, Acc> groups;
  std::map<std::tuple<Task, int, std::string, std::size_t>, std::size_t> failures;
  for (const auto& r : records) {
    if (!is_control(r.task)) continue;
    if (r.status != "ok" || !r.imitated_side) {
      ++failures[{r.task, r.layer, r.target_axis, r.n_examples}];
      continue;
    }
    for (const auto& [affected, score] : r.scores) {
      groups[{r.task, r.layer, r.target_axis, affected, r.n_examples}].side[*r.imitated_side != 0].push_back(score);
    }
  }
  std::vector<ControlCell> out;
  for (const auto& [key, acc] : groups) {
    ControlCell c;
    std::tie(c.task, c.layer, c.target, c.affected, c.n_examples) = key;
    c.effect = effect_or_note(acc.side[0], acc.side[1], c.note);
    const auto f = failures.find({c.task, c.layer, c.target, c.n_examples});
    c.failed = f == failures.end() ? 0 : f->second;
    out.push_back(std::move(c));
  }
  return out;
}

std::vector<PrecisionCell> control_precisions(const std::vector<ControlCell>& cells) {
  using Key = std::tuple<Task, int, std::string, std::size_t>;
  std::map<Key, std::vector<const ControlCell*>> rows;
  for (const auto& c : cells) {
    if (c.affected == kLrAxisId || c.target == kLrAxisId) continue;
    rows[{c.task, c.layer, c.target, c.n_examples}].push_back(&c);
  }
  std::vector<PrecisionCell> out;
  for (const auto& [key, row] : rows) {
    PrecisionCell p;
    std::tie(p.task, p.layer, p.target, p.n_examples) = key;
    std::vector<double> d;
    std::optional<std::size_t> target_index;
    bool complete = true;
    for (const ControlCell* c : row) {
      if (!c->effect) {
        complete = false;
        break;
      }
      if (c->affected == p.target) target_index = d.size();
      d.push_back(c->effect->d);
    }
    p.axis_count = d.size();
    if (complete && target_index) {
      double total = 0.0;
      for (double v : d) total += std::abs(v);
      p.target_abs_d = std::abs(d[*target_index]);
      p.mean_abs_d = total / static_cast<double>(d.size());
      p.off_target_mean_abs_d =
          d.size() > 1 ? (total - p.target_abs_d) / static_cast<double>(d.size() - 1) : 0.0;
      try {
        p.precision = control_precision(d, *target_index);
      } catch (const Error&) {
      }
    }
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<AccumulationCell> accumulation_analysis(const std::vector<TrialRecord>& records, const AxisStore& axes,
                                                    Backend* backend, const std::map<std::string, std::string>* texts,
                                                    int workers) {
  std::vector<const TrialRecord*> usable;
  for (const auto& r : records) {
    if (is_control(r.task) && r.status == "ok" && r.imitated_side) usable.push_back(&r);
  }
  std::vector<std::map<int, double>> sources(usable.size());
  std::vector<std::size_t> missing;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    if (usable[i]->source_scores.empty()) {
      missing.push_back(i);
    } else {
      sources[i] = usable[i]->source_scores;
    }
  }
  if (!missing.empty()) {
    if (!backend || !texts) {
      throw Error(ErrorCode::IncompleteActivations,
                  std::to_string(missing.size()) + " control records lack source-layer scores and no backend "
                                                   "was given to re-serve them");
    }
    const ModelInfo info = backend->model_info();
    run_ordered<std::map<int, double>>(
        missing.size(), workers,
        [&](std::size_t k) {
          const TrialRecord& r = *usable[missing[k]];
          ExampleSet ex;
          ex.axis_id = r.target_axis;
          ex.mode = label_mode_from_string(r.label_mode);
          const Axis& axis = axes.axis(r.layer, r.target_axis);
          ex.levels = axis.thresholds ? axis.thresholds->level_count(ex.mode) : 2;
          for (std::size_t e = 0; e < r.example_ids.size(); ++e) {
            const auto it = texts->find(r.example_ids[e]);
            if (it == texts->end()) {
              throw Error(ErrorCode::IncompleteActivations, "unknown sentence id '" + r.example_ids[e] + "'");
            }
            ex.pairs.push_back({it->second, r.shown_labels.at(e)});
          }
          if (!r.final_text || !r.imitate_label) {
            throw Error(ErrorCode::IncompleteActivations, "record lacks the controlled sentence");
          }
          BackendRequest req;
          req.id = r.config_hash + "-accumulation";
          req.transcript = build_control_prompt(ex, *r.imitate_label, ControlMode::Implicit, *r.final_text);
          for (int l = 1; l <= info.layer_count; ++l) req.want_layers.push_back(l);
          int attempts = 0;
          const auto res = with_retries(3, 100.0, attempts, [&] { return backend->forward(req); });
          std::map<int, double> out;
          const std::size_t msg = req.transcript.messages.size() - 1;
          for (int s = 1; s <= info.layer_count; ++s) {
            out[s] = project(res.pool_message(s, msg), axis, LayerPolicy::CrossLayer);
          }
          return out;
        },
        [&, k = std::size_t{0}](std::map<int, double>&& m) mutable { sources[missing[k++]] = std::move(m); });
  }

  struct Acc {
    std::vector<double> side[2];
  };
  using Key = std::tuple<Task, int, std::string, std::size_t, int>;
  std::map<Key, Acc> groups;
  for (std::size_t i = 0; i < usable.size(); ++i) {
    const TrialRecord& r = *usable[i];
    for (const auto& [s, score] : sources[i]) {
      groups[{r.task, r.layer, r.target_axis, r.n_examples, s}].side[*r.imitated_side != 0].push_back(score);
    }
  }
  std::vector<AccumulationCell> out;
  for (const auto& [key, acc] : groups) {
    AccumulationCell c;
    std::tie(c.task, c.target_layer, c.target, c.n_examples, c.source_layer) = key;
    std::string note;
    c.effect = effect_or_note(acc.side[0], acc.side[1], note);
    out.push_back(std::move(c));
  }
  return out;
}

BaselineScores baseline_scores(const AxisStore& axes, const EmbeddingTable& pool, const std::vector<int>& layers,
                               const std::vector<std::string>& axis_ids) {
  BaselineScores out;
  for (int layer : layers) {
    for (const auto& id : axis_ids) {
      const Axis& axis = axes.axis(layer, id);
      auto& scores = out[layer][id];
      for (std::size_t i = 0; i < pool.sentences.size(); ++i) scores.push_back(project(pool.at(layer, i), axis));
    }
  }
  return out;
}

std::string to_json(const BaselineScores& baseline) {
  ojson j = ojson::array();
  for (const auto& [layer, per_axis] : baseline) {
    for (const auto& [axis, scores] : per_axis) {
      ojson e;
      e["layer"] = layer;
      e["axis"] = axis;
      e["scores"] = scores;
      j.push_back(std::move(e));
    }
  }
  return j.dump(1) + "\n";
}

BaselineScores baseline_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "baseline scores");
  try {
    BaselineScores out;
    for (const auto& e : j) {
      out[e.at("layer").get<int>()][e.at("axis").get<std::string>()] = e.at("scores").get<std::vector<double>>();
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("malformed baseline scores: ") + e.what());
  }
}

}  // namespace nfb
