// nfb: command-line driver for neurofeedback experiments.

#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "nfb/conformance.hpp"
#include "nfb/error.hpp"
#include "nfb/figures.hpp"
#include "nfb/http_backend.hpp"
#include "nfb/orchestrator.hpp"

namespace fs = std::filesystem;
using namespace nfb;

namespace {

enum Exit { kOk = 0, kUsage = 1, kBackend = 2, kData = 3 };

struct Shared {
  std::string config_path;
  std::string backend_url;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
  std::string out_dir = "out";
  std::string layers;
  std::string label_mode;
  bool dry_run = false;
  double timeout_s = 120.0;
  int toy_layers = 2;
  std::size_t toy_width = 16;
  std::uint64_t toy_seed = 0;

  std::string data;
  std::size_t synthetic = 0;
  std::string axes_path;
};

int exit_code(const Error& e) {
  switch (e.code()) {
    case ErrorCode::BadConfig:
      return kUsage;
    case ErrorCode::BackendUnavailable:
    case ErrorCode::ScriptExhausted:
    case ErrorCode::BadLogits:
    case ErrorCode::BadToken:
    case ErrorCode::IncompleteActivations:
      return kBackend;
    default:
      return kData;
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::BadConfig, "cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::BadConfig, "cannot write '" + path.string() + "'");
  out << text;
}

std::unique_ptr<Backend> backend_for(const Shared& s) {
  ToyModelSpec toy;
  toy.layer_count = s.toy_layers;
  toy.width = s.toy_width;
  toy.seed = s.toy_seed;
  return make_backend(s.backend_url, s.timeout_s, toy);
}

std::vector<Sentence> corpus_for(const Shared& s, std::uint64_t seed) {
  if (!s.data.empty()) return load_corpus(s.data);
  if (s.synthetic > 0) return synthetic_corpus(s.synthetic, seed);
  throw Error(ErrorCode::BadConfig, "give a corpus with --data or --synthetic N");
}

ExperimentConfig config_for(const Shared& s) {
  ExperimentConfig c = s.config_path.empty() ? ExperimentConfig{} : load_config(s.config_path);
  if (s.seed) c.seed = *s.seed;
  if (s.workers) c.workers = *s.workers;
  if (!s.label_mode.empty()) {
    try {
      c.label_mode = label_mode_from_string(s.label_mode);
    } catch (const Error& e) {
      throw Error(ErrorCode::BadConfig, e.what());
    }
  }
  if (!s.layers.empty() && s.layers != "auto") {
    c.layers.clear();
    std::stringstream ss(s.layers);
    for (std::string item; std::getline(ss, item, ',');) {
      try {
        c.layers.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw Error(ErrorCode::BadConfig, "bad layer '" + item + "'");
      }
    }
  } else if (s.layers == "auto") {
    c.layers.clear();
  }
  return c;
}

std::string fmt(double v, int digits = 4) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::map<std::string, std::string> sentence_texts(const std::vector<Sentence>& corpus) {
  std::map<std::string, std::string> out;
  for (const auto& s : corpus) out[s.id] = s.text;
  return out;
}

// ---------------------------------------------------------------- commands

int cmd_fit_axes(const Shared& s, const std::string& out_path, int max_pcs) {
  const std::uint64_t seed = s.seed.value_or(0);
  const auto corpus = corpus_for(s, seed);
  const auto split = split_dataset(corpus, seed);
  auto backend = backend_for(s);
  const ModelInfo info = backend->model_info();
  const auto layers = parse_layers(s.layers, info.layer_count);
  if (s.dry_run) {
    std::cout << "would embed " << split.axis_fit.size() << " axis-fit sentences at layers";
    for (int l : layers) std::cout << ' ' << l;
    std::cout << " of " << info.model_id << "\n";
    return kOk;
  }
  std::vector<Sentence> fit;
  for (auto i : split.axis_fit) fit.push_back(corpus[i]);
  const auto table = embed_sentences(*backend, fit, layers, s.workers.value_or(1));
  AxisFitOptions opts;
  opts.max_pcs = max_pcs;
  const AxisStore store = fit_axes(table, info, seed, opts);

  const fs::path path = out_path.empty() ? fs::path(s.out_dir) / "axes.json" : fs::path(out_path);
  write_file(path, to_json(store));
  std::cout << "model " << store.model_id << ", " << store.fit_sentence_count << " axis-fit sentences, "
            << split.experiment.size() << " held for experiments"
            << (split.odd_count ? " (odd corpus size: axis-fit half rounded down)" : "") << "\n";
  for (const auto& b : store.layers) {
    std::cout << "layer " << b.layer << ": " << b.pcs.size() << " PCs, explained variance";
    double cumulative = 0.0;
    for (std::size_t k = 0; k < b.pcs.size(); ++k) {
      cumulative += b.pcs[k].explained_variance_ratio;
      if (k < 5) std::cout << ' ' << b.pcs[k].id << '=' << fmt(b.pcs[k].explained_variance_ratio);
    }
    std::cout << " (total " << fmt(cumulative) << ")";
    if (b.lr) std::cout << ", LR fitted";
    std::cout << "\n";
  }
  std::cout << "wrote " << path.string() << "\n";
  return kOk;
}

int cmd_label(const Shared& s, const std::string& out_path) {
  if (s.axes_path.empty()) throw Error(ErrorCode::BadConfig, "--axes is required");
  const AxisStore store = axis_store_from_json(read_file(s.axes_path));
  const auto corpus = corpus_for(s, store.seed);
  const ExperimentConfig config = config_for(s);
  auto backend = backend_for(s);
  std::vector<int> layers;
  for (const auto& b : store.layers) layers.push_back(b.layer);
  if (!s.layers.empty() && s.layers != "auto") layers = parse_layers(s.layers, store.layer_count);
  if (s.dry_run) {
    std::cout << "would label " << corpus.size() << " sentences at " << layers.size() << " layers\n";
    return kOk;
  }
  const auto table = embed_sentences(*backend, corpus, layers, config.workers);
  std::ostringstream out;
  std::size_t count = 0;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    for (int layer : layers) {
      const AxisBasis& basis = store.basis(layer);
      std::vector<const Axis*> axes;
      for (const auto& a : basis.pcs) axes.push_back(&a);
      if (basis.lr) axes.push_back(&*basis.lr);
      for (const Axis* a : axes) {
        if (std::find(config.axes.begin(), config.axes.end(), a->id) == config.axes.end()) continue;
        const double score = project(table.at(layer, i), *a);
        out << "{\"id\":\"" << corpus[i].id << "\",\"layer\":" << layer << ",\"axis\":\"" << a->id
            << "\",\"score\":" << csv_number(score) << ",\"label\":"
            << (a->thresholds ? std::to_string(a->thresholds->label(score, config.label_mode)) : "null")
            << "}\n";
        ++count;
      }
    }
  }
  const fs::path path = out_path.empty() ? fs::path(s.out_dir) / "labels.jsonl" : fs::path(out_path);
  write_file(path, out.str());
  std::cout << "labeled " << corpus.size() << " sentences (" << count << " axis scores) -> " << path.string()
            << "\n";
  return kOk;
}

int cmd_run(const Shared& s, bool control, const std::string& mode) {
  if (s.axes_path.empty()) throw Error(ErrorCode::BadConfig, "--axes is required");
  ExperimentConfig config = config_for(s);
  if (control) {
    if (mode == "explicit") config.task = Task::ExplicitControl;
    else if (mode == "implicit") config.task = Task::ImplicitControl;
    else if (!is_control(config.task)) config.task = Task::ExplicitControl;
  } else {
    config.task = Task::Report;
  }
  const AxisStore store = axis_store_from_json(read_file(s.axes_path));
  const auto layers = resolve_layers(config, store.layer_count);
  if (s.dry_run) {
    std::cout << plan_text(config, plan(config, layers));
    return kOk;
  }
  const auto corpus = corpus_for(s, store.seed);
  const auto split = split_dataset(corpus, store.seed);
  std::vector<Sentence> pool_sentences;
  for (auto i : split.experiment) pool_sentences.push_back(corpus[i]);

  auto backend = backend_for(s);
  const ModelInfo info = backend->model_info();
  if (info.layer_count != store.layer_count || info.width != store.width) {
    throw Error(ErrorCode::BadConfig, "axes file was fitted on a model of a different shape");
  }
  const auto pool = embed_sentences(*backend, pool_sentences, layers, config.workers);

  const fs::path dir(s.out_dir);
  fs::create_directories(dir);
  write_file(dir / ("config_" + std::string(to_string(config.task)) + ".txt"), config_to_text(config));
  const fs::path records_path = dir / ("records_" + std::string(to_string(config.task)) + ".jsonl");
  std::ofstream records(records_path, std::ios::binary | std::ios::trunc);
  if (!records) throw Error(ErrorCode::BadConfig, "cannot write '" + records_path.string() + "'");
  const auto result = run_sweep(config, *backend, store, pool, [&](const TrialRecord& r) {
    records << to_json(r) << '\n';
    records.flush();
  });
  std::cout << result.records.size() << " records (" << result.failed << " failed) -> " << records_path.string()
            << "\n";

  if (control) {
    write_file(dir / "baseline.json", to_json(baseline_scores(store, pool, layers, config.axes)));
    for (const auto& c : aggregate_control(result.records)) {
      if (c.affected != c.target) continue;
      std::cout << "layer " << c.layer << " " << c.target << " N=" << c.n_examples << ": d="
                << (c.effect ? fmt(c.effect->d, 3) + " [" + fmt(c.effect->ci_lo, 3) + ", " + fmt(c.effect->ci_hi, 3) + "]"
                             : "n/a (" + c.note + ")")
                << "\n";
    }
  } else {
    for (const auto& c : aggregate_report(result.records)) {
      std::cout << "layer " << c.layer << " " << c.axis << " N=" << c.n_examples << ": accuracy "
                << fmt(c.metrics.accuracy, 3) << ", cross-entropy " << fmt(c.metrics.cross_entropy, 3)
                << " nats\n";
    }
  }
  return kOk;
}

std::vector<TrialRecord> read_records(const std::vector<std::string>& paths) {
  if (paths.empty()) throw Error(ErrorCode::BadConfig, "--records is required");
  std::vector<TrialRecord> all;
  for (const auto& p : paths) {
    auto r = load_records(p);
    all.insert(all.end(), std::make_move_iterator(r.begin()), std::make_move_iterator(r.end()));
  }
  return all;
}

int cmd_analyze(const Shared& s, const std::vector<std::string>& paths) {
  const auto records = read_records(paths);
  const fs::path dir(s.out_dir);
  FigureInputs in{records, nullptr, nullptr};
  std::size_t report = 0;
  std::size_t control = 0;
  bool sources = false;
  for (const auto& r : records) {
    (is_control(r.task) ? control : report) += 1;
    sources = sources || !r.source_scores.empty();
  }
  if (report) {
    write_file(dir / "report_metrics.csv", export_figure("fig2c", in).at("fig2c.csv"));
    for (const auto& c : aggregate_report(records)) {
      std::cout << "report layer " << c.layer << " " << c.axis << " N=" << c.n_examples << ": accuracy "
                << fmt(c.metrics.accuracy, 3) << ", CE " << fmt(c.metrics.cross_entropy, 3) << " nats ("
                << c.metrics.count << " trials, " << c.failed << " failed)\n";
    }
  }
  if (control) {
    const auto cells = aggregate_control(records);
    write_file(dir / "control_effects.csv", export_figure("fig3f", in).at("fig3f.csv"));
    write_file(dir / "control_precision.csv", export_figure("fig3d", in).at("fig3d.csv"));
    for (const auto& c : cells) {
      if (c.affected != c.target) continue;
      std::cout << to_string(c.task) << " layer " << c.layer << " " << c.target << " N=" << c.n_examples << ": d="
                << (c.effect ? fmt(c.effect->d, 3) : std::string("n/a")) << " (" << c.failed << " failed)\n";
    }
    for (const auto& p : control_precisions(cells)) {
      if (p.precision) {
        std::cout << "precision layer " << p.layer << " " << p.target << " N=" << p.n_examples << ": "
                  << fmt(*p.precision, 3) << "\n";
      }
    }
  }
  if (sources && !s.axes_path.empty()) {
    const AxisStore store = axis_store_from_json(read_file(s.axes_path));
    const auto acc = accumulation_analysis(records, store);
    FigureInputs with_acc{records, nullptr, &acc};
    write_file(dir / "accumulation.csv", export_figure("fig5", with_acc).at("fig5.csv"));
    std::cout << acc.size() << " accumulation cells\n";
  }
  std::cout << "wrote tables to " << dir.string() << "\n";
  return kOk;
}

int cmd_export(const Shared& s, const std::vector<std::string>& paths, const std::vector<std::string>& figs,
               const std::string& baseline_path) {
  const auto records = read_records(paths);
  std::optional<BaselineScores> baseline;
  if (!baseline_path.empty()) baseline = baseline_from_json(read_file(baseline_path));
  std::optional<std::vector<AccumulationCell>> acc;
  std::vector<std::string> wanted;
  for (const auto& f : figs) {
    for (auto& name : expand_figures(f)) wanted.push_back(std::move(name));
  }
  if (wanted.empty()) throw Error(ErrorCode::BadConfig, "--fig is required");
  if (std::find(wanted.begin(), wanted.end(), "fig5") != wanted.end()) {
    if (s.axes_path.empty()) throw Error(ErrorCode::BadConfig, "fig5 needs --axes");
    const AxisStore store = axis_store_from_json(read_file(s.axes_path));
    bool complete = true;
    for (const auto& r : records) complete = complete && (!is_control(r.task) || !r.source_scores.empty());
    if (complete) {
      acc = accumulation_analysis(records, store);
    } else {
      auto backend = backend_for(s);
      const auto texts = sentence_texts(corpus_for(s, store.seed));
      acc = accumulation_analysis(records, store, backend.get(), &texts, s.workers.value_or(1));
    }
  }
  FigureInputs in{records, baseline ? &*baseline : nullptr, acc ? &*acc : nullptr};
  for (const auto& fig : wanted) {
    for (const auto& [file, csv] : export_figure(fig, in)) {
      const fs::path path = fs::path(s.out_dir) / file;
      write_file(path, csv);
      std::cout << "wrote " << path.string() << "\n";
    }
  }
  return kOk;
}

BackendServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

int cmd_serve_toy(const Shared& s, const std::string& host, int port) {
  ToyModelSpec spec;
  spec.layer_count = s.toy_layers;
  spec.width = s.toy_width;
  spec.seed = s.toy_seed;
  ToyBackend backend(spec);
  BackendServer server(backend);
  g_server = &server;
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  std::cout << "serving " << backend.model_info().model_id << " on http://" << host << ":" << port << std::endl;
  const bool ok = server.listen(host, port);
  g_server = nullptr;
  if (!ok) {
    std::cerr << "could not listen on " << host << ":" << port << "\n";
    return kBackend;
  }
  return kOk;
}

int cmd_conformance(const Shared& s, const std::string& backend_flag) {
  Shared local = s;
  if (!backend_flag.empty()) local.backend_url = backend_flag;
  auto backend = backend_for(local);
  const auto results = run_conformance(*backend);
  for (const auto& r : results) {
    std::cout << (r.passed ? "PASS " : "FAIL ") << r.name;
    if (!r.detail.empty()) std::cout << ": " << r.detail;
    std::cout << "\n";
  }
  const bool ok = all_passed(results);
  std::cout << (ok ? "all protocol checks passed" : "protocol checks failed") << "\n";
  return ok ? kOk : kBackend;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Neurofeedback experiments on language-model activations"};
  app.require_subcommand(1);
  app.fallthrough();

  Shared s;
  app.add_option("--config", s.config_path, "Experiment config file (key = value)");
  app.add_option("--backend-url", s.backend_url, "http://host:port or 'toy' (default: $NFB_BACKEND_URL, then toy)");
  app.add_option("--seed", s.seed, "Seed for splits, sampling and decoding");
  app.add_option("--workers", s.workers, "Concurrent trials")->check(CLI::PositiveNumber);
  app.add_option("--out-dir", s.out_dir, "Directory for artifacts")->capture_default_str();
  app.add_option("--layers", s.layers, "Comma-separated layers or 'auto' (depth percentiles)");
  app.add_option("--label-mode", s.label_mode, "binary or ordinal8")->check(CLI::IsMember({"binary", "ordinal8"}));
  app.add_flag("--dry-run", s.dry_run, "Print the plan without calling the backend");
  app.add_option("--backend-timeout-s", s.timeout_s, "Per-request timeout")->capture_default_str();
  app.add_option("--toy-layers", s.toy_layers, "In-process toy model depth")->capture_default_str();
  app.add_option("--toy-width", s.toy_width, "In-process toy model width")->capture_default_str();
  app.add_option("--toy-seed", s.toy_seed, "In-process toy model weight seed")->capture_default_str();

  auto add_corpus = [&](CLI::App* sub) {
    sub->add_option("--data", s.data, "Corpus JSONL with {id, text, label?}");
    sub->add_option("--synthetic", s.synthetic, "Use N template sentences instead of --data");
  };

  std::string out_path;
  int max_pcs = 512;
  auto* fit = app.add_subcommand("fit-axes", "Fit PCA and logistic-regression axes on the axis-fit split");
  add_corpus(fit);
  fit->add_option("--out", out_path, "Axes file (default <out-dir>/axes.json)");
  fit->add_option("--max-pcs", max_pcs, "Principal components kept per layer")->capture_default_str();

  auto* label = app.add_subcommand("label", "Score and label every corpus sentence on the fitted axes");
  add_corpus(label);
  label->add_option("--axes", s.axes_path, "Axes file")->required();
  label->add_option("--out", out_path, "Output JSONL (default <out-dir>/labels.jsonl)");

  auto* report = app.add_subcommand("run-report", "Run the reporting sweep");
  add_corpus(report);
  report->add_option("--axes", s.axes_path, "Axes file")->required();

  std::string mode;
  auto* control = app.add_subcommand("run-control", "Run the explicit or implicit control sweep");
  add_corpus(control);
  control->add_option("--axes", s.axes_path, "Axes file")->required();
  control->add_option("--mode", mode, "explicit or implicit (default: config task)")
      ->check(CLI::IsMember({"explicit", "implicit"}));

  std::vector<std::string> record_paths;
  auto* analyze = app.add_subcommand("analyze", "Aggregate trial records into metric tables");
  analyze->add_option("--records", record_paths, "Trial record JSONL files")->required();
  analyze->add_option("--axes", s.axes_path, "Axes file (enables accumulation tables)");

  std::vector<std::string> figs;
  std::string baseline_path;
  auto* exportf = app.add_subcommand("export-figures", "Write figure data as CSV");
  add_corpus(exportf);
  exportf->add_option("--records", record_paths, "Trial record JSONL files")->required();
  exportf->add_option("--fig", figs, "fig2c, fig3b..fig3f, fig3b-f, fig4a, fig4b, fig5 or all")->required();
  exportf->add_option("--baseline", baseline_path, "Uncontrolled scores (baseline.json) for fig4b");
  exportf->add_option("--axes", s.axes_path, "Axes file, for fig5");

  std::string host = "127.0.0.1";
  int port = 8000;
  auto* serve = app.add_subcommand("serve-toy", "Serve the toy transformer over the wire protocol");
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--port", port)->capture_default_str();

  std::string backend_flag;
  auto* conf = app.add_subcommand("conformance", "Check a backend against the wire protocol");
  conf->add_option("--backend", backend_flag, "Backend url or 'toy' (default --backend-url)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*fit) return cmd_fit_axes(s, out_path, max_pcs);
    if (*label) return cmd_label(s, out_path);
    if (*report) return cmd_run(s, false, mode);
    if (*control) return cmd_run(s, true, mode);
    if (*analyze) return cmd_analyze(s, record_paths);
    if (*exportf) return cmd_export(s, record_paths, figs, baseline_path);
    if (*serve) return cmd_serve_toy(s, host, port);
    if (*conf) return cmd_conformance(s, backend_flag);
  } catch (const Error& e) {
    std::cerr << "error [" << to_string(e.code()) << "]: " << e.what() << "\n";
    return exit_code(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}
