#include <doctest.h>

#include <mutex>
#include <set>

#include "nfb/error.hpp"
#include "nfb/orchestrator.hpp"

using namespace nfb;

namespace {

struct ToyWorld {
  ToyBackend backend;
  EmbeddingTable fit;
  EmbeddingTable pool;
  AxisStore axes;
  std::map<std::string, std::string> texts;

  ToyWorld() {
    const auto corpus = synthetic_corpus(60, 5);
    const auto split = split_dataset(corpus, 5);
    std::vector<Sentence> fit_sentences, pool_sentences;
    for (std::size_t i : split.axis_fit) fit_sentences.push_back(corpus[i]);
    for (std::size_t i : split.experiment) pool_sentences.push_back(corpus[i]);
    fit = embed_sentences(backend, fit_sentences, {1, 2}, 2);
    pool = embed_sentences(backend, pool_sentences, {1, 2}, 2);
    axes = fit_axes(fit, backend.model_info(), 5);
    for (const auto& s : corpus) texts[s.id] = s.text;
  }
};

ToyWorld& world() {
  static ToyWorld w;
  return w;
}

ExperimentConfig small_config(Task task) {
  ExperimentConfig c;
  c.model_id = "toy-L2-D16-seed0";
  c.task = task;
  c.layers = {1, 2};
  c.n_examples = {0, 2, 4};
  c.axes = {"PC1", "PC2", "LR"};
  c.repeats = 3;
  c.seed = 17;
  c.decode.max_new_tokens = 6;
  return c;
}

ErrorCode code_of(auto&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::BadFormat;
}

// Fails the first forward of every request id with a transport error and can
// drop the sentence spans from the replies.
class FlakyBackend : public Backend {
 public:
  explicit FlakyBackend(Backend& inner, bool drop_spans) : inner_(inner), drop_spans_(drop_spans) {}
  ModelInfo model_info() override { return inner_.model_info(); }
  BackendResponse forward(const BackendRequest& r) override {
    {
      std::lock_guard lock(mutex_);
      if (seen_.insert(r.id).second) throw Error(ErrorCode::BackendUnavailable, "first try fails");
    }
    auto res = inner_.forward(r);
    if (drop_spans_) res.spans.clear();
    return res;
  }
  BackendResponse generate(const BackendRequest& r) override { return inner_.generate(r); }

 private:
  Backend& inner_;
  bool drop_spans_;
  std::mutex mutex_;
  std::set<std::string> seen_;
};

}  // namespace

TEST_CASE("config text round trip and validation") {
  ExperimentConfig c = small_config(Task::ExplicitControl);
  c.targets = {"PC2"};
  c.label_mode = LabelMode::Ordinal8;
  c.decode.mode = DecodeMode::Sampled;
  c.decode.temperature = 0.5;
  c.record_source_layers = true;
  const std::string text = config_to_text(c);
  CHECK(config_to_text(parse_config(text)) == text);
  CHECK(parse_config(text).target_axes() == std::vector<std::string>{"PC2"});

  const auto d = parse_config("# nothing but a comment\n\ntask = report  # trailing\n");
  CHECK(d.task == Task::Report);
  CHECK(d.repeats == 100);
  CHECK(d.n_examples.back() == 256);

  CHECK(code_of([] { parse_config("colour = blue"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("repeats"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("repeats = 0"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("repeats = 2x"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("n_examples = 2,-1"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("axes = PC1\ntargets = PC2"); }) == ErrorCode::BadConfig);
  CHECK(code_of([] { parse_config("task = dream"); }) == ErrorCode::BadConfig);
  CHECK_THROWS_AS(load_config("/nonexistent.conf"), Error);
}

TEST_CASE("resolve_layers") {
  ExperimentConfig c;
  c.layers.clear();
  CHECK(resolve_layers(c, 32) == std::vector<int>{1, 8, 16, 24, 32});
  c.layers = {2, 1, 2};
  CHECK(resolve_layers(c, 2) == std::vector<int>{1, 2});
  c.layers = {3};
  CHECK(code_of([&] { resolve_layers(c, 2); }) == ErrorCode::BadLayer);
}

TEST_CASE("fitted axes on the toy model") {
  const auto& w = world();
  for (int layer : {1, 2}) {
    const auto& b = w.axes.basis(layer);
    CHECK(b.pcs.size() == 16);
    REQUIRE(b.lr);
    CHECK(b.lr->thresholds);
    CHECK(w.axes.has(layer, "PC16"));
  }
  CHECK(w.axes.fit_sentence_count == 30);
  CHECK(w.pool.sentences.size() == 30);
}

TEST_CASE("implicit control sweep: layout, draws and determinism") {
  auto& w = world();
  const auto c = small_config(Task::ImplicitControl);
  std::vector<TrialRecord> streamed;
  const auto a = run_control_sweep(c, w.backend, w.axes, w.pool, [&](const TrialRecord& r) { streamed.push_back(r); });
  REQUIRE(a.records.size() == 2 * 3 * 3 * 3 * 4);
  CHECK(a.failed == 0);
  CHECK(streamed == a.records);

  std::map<std::string, std::string> id_text;
  for (const auto& s : w.pool.sentences) id_text[s.id] = s.text;
  for (std::size_t i = 0; i < a.records.size(); ++i) {
    const auto& r = a.records[i];
    CHECK(r.condition == int(i % 4) + 1);
    CHECK(r.example_ids.size() == r.n_examples);
    std::set<std::string> ids(r.example_ids.begin(), r.example_ids.end());
    CHECK(ids.size() == r.example_ids.size());
    CHECK_FALSE(ids.count(r.query_id));
    REQUIRE(id_text.count(r.query_id));
    CHECK(r.final_text == id_text[r.query_id]);
    CHECK(r.scores.size() == 3);
    CHECK(r.imitate_label == (r.condition <= 2 ? 0 : 1));
    CHECK(r.imitated_side == (r.condition == 2 || r.condition == 3 ? 1 : 0));
    for (std::size_t k = 0; k < r.true_labels.size(); ++k) {
      CHECK(r.shown_labels[k] == (r.assignment == "identity" ? r.true_labels[k] : 1 - r.true_labels[k]));
    }
    // The four conditions of a trial share their draw.
    if (i % 4) CHECK(r.example_ids == a.records[i - 1].example_ids);
  }
  // With no examples the assignment has nothing to act on: conditions that
  // name the same label see the same prompt.
  for (std::size_t i = 0; i < a.records.size(); i += 4) {
    if (a.records[i].n_examples != 0) continue;
    CHECK(a.records[i + 1].scores == a.records[i].scores);
    CHECK(a.records[i + 3].scores == a.records[i + 2].scores);
  }

  ExperimentConfig parallel = c;
  parallel.workers = 4;
  const auto b = run_control_sweep(parallel, w.backend, w.axes, w.pool);
  REQUIRE(b.records.size() == a.records.size());
  for (std::size_t i = 0; i < a.records.size(); ++i) CHECK(same_except_timestamp(a.records[i], b.records[i]));

  ExperimentConfig reseeded = c;
  reseeded.seed = 18;
  // Record 12 is the first trial with N = 2.
  REQUIRE(a.records[12].n_examples == 2);
  CHECK(run_control_sweep(reseeded, w.backend, w.axes, w.pool).records[12].example_ids != a.records[12].example_ids);

  for (const auto& cell : aggregate_control(a.records)) {
    REQUIRE(cell.effect);
    CHECK(cell.effect->n0 == 6);
    CHECK(cell.effect->n1 == 6);
  }
}

TEST_CASE("pool size limits N") {
  auto& w = world();
  auto c = small_config(Task::ImplicitControl);
  c.n_examples = {30};
  CHECK(code_of([&] { run_control_sweep(c, w.backend, w.axes, w.pool); }) == ErrorCode::ConfigTooLarge);
  c.task = Task::ExplicitControl;
  c.n_examples = {31};
  CHECK(code_of([&] { run_control_sweep(c, w.backend, w.axes, w.pool); }) == ErrorCode::ConfigTooLarge);
  c.n_examples = {2};
  c.axes = {"PC1", "PC40"};
  CHECK(code_of([&] { run_control_sweep(c, w.backend, w.axes, w.pool); }) == ErrorCode::BadConfig);
  c = small_config(Task::Report);
  CHECK(code_of([&] { run_control_sweep(c, w.backend, w.axes, w.pool); }) == ErrorCode::BadConfig);
}

TEST_CASE("reporting sweep records labels and logits") {
  auto& w = world();
  auto c = small_config(Task::Report);
  c.layers = {2};
  const auto res = run_reporting_sweep(c, w.backend, w.axes, w.pool);
  REQUIRE(res.records.size() == 3 * 3 * 3);
  for (const auto& r : res.records) {
    CHECK(r.status == "ok");
    CHECK(r.logits.size() == 2);
    REQUIRE(r.true_label);
    std::size_t q = 0;
    while (w.pool.sentences[q].id != r.query_id) ++q;
    const Axis& axis = w.axes.axis(2, r.target_axis);
    CHECK(*r.true_label == axis.thresholds->label(project(w.pool.at(2, q), axis), LabelMode::Binary));
  }
  const auto cells = aggregate_report(res.records);
  CHECK(cells.size() == 9);
  for (const auto& cell : cells) CHECK(cell.metrics.count == 3);

  c.label_mode = LabelMode::Ordinal8;
  c.n_examples = {2};
  const auto ord = run_reporting_sweep(c, w.backend, w.axes, w.pool);
  for (const auto& r : ord.records) {
    CHECK(r.logits.size() == 8);
    CHECK((*r.true_label >= 1 && *r.true_label <= 8));
  }
  CHECK(aggregate_report(ord.records).front().metrics.count == 3);
}

TEST_CASE("explicit control: accumulation diagonal equals the sweep, re-served or recorded") {
  auto& w = world();
  auto c = small_config(Task::ExplicitControl);
  c.n_examples = {2};
  c.repeats = 2;
  c.record_source_layers = true;
  const auto res = run_control_sweep(c, w.backend, w.axes, w.pool);
  REQUIRE(res.failed == 0);
  for (const auto& r : res.records) {
    CHECK(r.source_scores.size() == 2);
    CHECK(r.source_scores.at(r.layer) == r.scores.at(r.target_axis));
    REQUIRE(r.decode);
    CHECK(r.final_text);
  }
  const auto cells = aggregate_control(res.records);
  const auto acc = accumulation_analysis(res.records, w.axes);
  std::size_t diagonal = 0;
  for (const auto& a : acc) {
    if (a.source_layer != a.target_layer) continue;
    for (const auto& cell : cells) {
      if (cell.layer == a.target_layer && cell.target == a.target && cell.affected == a.target &&
          cell.n_examples == a.n_examples) {
        ++diagonal;
        REQUIRE(a.effect);
        CHECK(a.effect->d == cell.effect->d);
      }
    }
  }
  CHECK(diagonal == 2 * 3);

  std::vector<TrialRecord> stripped = res.records;
  for (auto& r : stripped) r.source_scores.clear();
  CHECK(code_of([&] { accumulation_analysis(stripped, w.axes); }) == ErrorCode::IncompleteActivations);
  const auto reserved = accumulation_analysis(stripped, w.axes, &w.backend, &w.texts, 2);
  REQUIRE(reserved.size() == acc.size());
  for (std::size_t i = 0; i < acc.size(); ++i) {
    CHECK(reserved[i].source_layer == acc[i].source_layer);
    CHECK(reserved[i].effect->d == acc[i].effect->d);
  }
}

TEST_CASE("transient failures are retried, span failures are recorded") {
  auto& w = world();
  auto c = small_config(Task::ImplicitControl);
  c.layers = {1};
  c.n_examples = {2};
  c.axes = {"PC1"};
  c.repeats = 1;
  c.retry_base_ms = 1.0;

  FlakyBackend retry(w.backend, false);
  const auto ok = run_control_sweep(c, retry, w.axes, w.pool);
  CHECK(ok.failed == 0);
  for (const auto& r : ok.records) CHECK(r.attempts == 2);

  FlakyBackend broken(w.backend, true);
  const auto bad = run_control_sweep(c, broken, w.axes, w.pool);
  CHECK(bad.failed == 4);
  for (const auto& r : bad.records) {
    CHECK(r.status == "failed");
    CHECK(r.error.rfind("EmptySpan", 0) == 0);
    CHECK(r.scores.empty());
  }
  const auto cells = aggregate_control(bad.records);
  CHECK(cells.empty());

  c.max_retries = 0;
  FlakyBackend no_retry(w.backend, false);
  const auto gave_up = run_control_sweep(c, no_retry, w.axes, w.pool);
  CHECK(gave_up.failed == 4);
  CHECK(gave_up.records[0].error.rfind("BackendUnavailable", 0) == 0);

  // Exhausting a script is not a trial-level failure. The one scripted reply
  // lacks the final-message span, which is.
  BackendRequest standalone;
  standalone.transcript = build_standalone_prompt("A sentence.");
  standalone.want_layers = {1};
  auto mock = script_mock(w.backend.model_info(), {w.backend.forward(standalone)});
  CHECK(code_of([&] { run_control_sweep(c, *mock, w.axes, w.pool); }) == ErrorCode::ScriptExhausted);
}

TEST_CASE("records round trip through JSON lines") {
  auto& w = world();
  auto c = small_config(Task::ExplicitControl);
  c.layers = {2};
  c.n_examples = {2};
  c.repeats = 1;
  const auto res = run_control_sweep(c, w.backend, w.axes, w.pool);
  std::string jsonl;
  for (const auto& r : res.records) {
    CHECK(trial_record_from_json(to_json(r)) == r);
    jsonl += to_json(r) + "\n";
  }
  CHECK(parse_records(jsonl) == res.records);
  TrialRecord later = res.records[0];
  later.timestamp = "2100-01-01T00:00:00.000Z";
  CHECK(same_except_timestamp(res.records[0], later));
  later.attempts += 1;
  CHECK_FALSE(same_except_timestamp(res.records[0], later));
  CHECK_THROWS_AS(trial_record_from_json("{\"task\": 3}"), Error);
}

TEST_CASE("config hash separates every coordinate") {
  std::set<std::string> hashes;
  for (int layer : {1, 2})
    for (std::size_t n : {0u, 2u})
      for (const char* t : {"PC1", "LR"})
        for (int rep : {0, 1})
          for (int cond : {1, 2})
            hashes.insert(config_hash(Task::ImplicitControl, layer, n, t, rep, cond, LabelMode::Binary, 0));
  CHECK(hashes.size() == 32);
  CHECK(config_hash(Task::Report, 1, 0, "PC1", 0, 0, LabelMode::Binary, 0) !=
        config_hash(Task::Report, 1, 0, "PC1", 0, 0, LabelMode::Binary, 1));
}

TEST_CASE("plan") {
  auto c = small_config(Task::ExplicitControl);
  const auto cells = plan(c, {1, 2});
  CHECK(cells.size() == 18);
  CHECK(cells[0].records == 12);
  const auto text = plan_text(c, cells);
  CHECK(text.find("total: 18 cells, 216 records") != std::string::npos);
  c.task = Task::Report;
  CHECK(plan(c, {1})[0].records == 3);
}

TEST_CASE("baseline scores") {
  auto& w = world();
  const auto b = baseline_scores(w.axes, w.pool, {1, 2}, {"PC1", "LR"});
  CHECK(b.at(2).at("LR").size() == 30);
  CHECK(baseline_from_json(to_json(b)) == b);
  CHECK_THROWS_AS(baseline_from_json("[{\"layer\": 1}]"), Error);
}

TEST_CASE("embedding requires layers and matches standalone forward") {
  auto& w = world();
  CHECK_THROWS_AS(embed_sentences(w.backend, {w.pool.sentences[0]}, {}), Error);
  const auto one = embed_sentences(w.backend, {w.pool.sentences[3]}, {2});
  CHECK(one.at(2, 0).vector == w.pool.at(2, 3).vector);
  CHECK_THROWS_AS(one.at(1, 0), Error);
}
