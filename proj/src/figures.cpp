#include "nfb/figures.hpp"

#include <cctype>
#include <cstdio>
#include <set>
#include <sstream>

#include "nfb/error.hpp"

namespace nfb {

namespace {

constexpr std::string_view kFigures[] = {"fig2c", "fig3b", "fig3c", "fig3d", "fig3e",
                                         "fig3f", "fig4a", "fig4b", "fig5"};

std::string effect_columns(const std::optional<EffectSize>& e) {
  if (!e) return ",,,,,,";
  return csv_number(e->d) + "," + csv_number(e->se) + "," + csv_number(e->ci_lo) + "," + csv_number(e->ci_hi) +
         "," + std::to_string(e->n0) + "," + std::to_string(e->n1) + "," + csv_number(e->pooled_sd);
}

constexpr std::string_view kEffectHeader = "d,se,ci_lo,ci_hi,n0,n1,pooled_sd";

std::string quote(std::string_view s) {
  if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string fig2c(const FigureInputs& in) {
  std::ostringstream out;
  out << "layer,axis,n_examples,count,accuracy,cross_entropy_nats,failed\n";
  for (const auto& c : aggregate_report(in.records)) {
    out << c.layer << ',' << c.axis << ',' << c.n_examples << ',' << c.metrics.count << ','
        << csv_number(c.metrics.accuracy) << ',' << csv_number(c.metrics.cross_entropy) << ',' << c.failed << '\n';
  }
  return out.str();
}

std::string fig3b(const std::vector<ControlCell>& cells) {
  std::ostringstream out;
  out << "task,layer,target_axis,n_examples," << kEffectHeader << ",failed\n";
  for (const auto& c : cells) {
    if (c.affected != c.target) continue;
    out << to_string(c.task) << ',' << c.layer << ',' << c.target << ',' << c.n_examples << ','
        << effect_columns(c.effect) << ',' << c.failed << '\n';
  }
  return out.str();
}

std::string fig3c(const std::vector<ControlCell>& cells) {
  struct Acc {
    double total = 0.0;
    std::size_t count = 0;
  };
  std::map<std::tuple<Task, int, std::string, std::size_t>, Acc> rows;
  for (const auto& c : cells) {
    if (c.affected == c.target || !c.effect) continue;
    auto& a = rows[{c.task, c.layer, c.target, c.n_examples}];
    a.total += std::abs(c.effect->d);
    ++a.count;
  }
  std::ostringstream out;
  out << "task,layer,target_axis,n_examples,off_target_axes,mean_abs_d\n";
  for (const auto& [k, a] : rows) {
    out << to_string(std::get<0>(k)) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k)
        << ',' << a.count << ',' << csv_number(a.total / static_cast<double>(a.count)) << '\n';
  }
  return out.str();
}

std::string fig3d(const std::vector<ControlCell>& cells) {
  std::ostringstream out;
  out << "task,layer,target_axis,n_examples,axis_count,target_abs_d,mean_abs_d,control_precision\n";
  for (const auto& p : control_precisions(cells)) {
    out << to_string(p.task) << ',' << p.layer << ',' << p.target << ',' << p.n_examples << ',' << p.axis_count
        << ',' << csv_number(p.target_abs_d) << ',' << csv_number(p.mean_abs_d) << ','
        << (p.precision ? csv_number(*p.precision) : std::string()) << '\n';
  }
  return out.str();
}

int axis_order(const std::string& id) {
  const int g = parse_axis_id(id);
  return g == 0 ? 1 << 30 : g;
}

std::string fig3e(const std::vector<ControlCell>& cells) {
  auto by_axis = [](const std::string& a, const std::string& b) {
    return axis_order(a) != axis_order(b) ? axis_order(a) < axis_order(b) : a < b;
  };
  std::set<std::string, decltype(by_axis)> affected(by_axis);
  std::map<std::tuple<Task, int, std::size_t>, std::set<std::string, decltype(by_axis)>> targets;
  std::map<std::tuple<Task, int, std::size_t, std::string, std::string>, double> d;
  for (const auto& c : cells) {
    affected.insert(c.affected);
    targets.try_emplace({c.task, c.layer, c.n_examples}, by_axis).first->second.insert(c.target);
    if (c.effect) d[{c.task, c.layer, c.n_examples, c.target, c.affected}] = c.effect->d;
  }
  std::ostringstream out;
  out << "task,layer,n_examples,target_axis";
  for (const auto& a : affected) out << ',' << a;
  out << '\n';
  for (const auto& [k, rows] : targets) {
    for (const auto& t : rows) {
      out << to_string(std::get<0>(k)) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << t;
      for (const auto& a : affected) {
        const auto it = d.find({std::get<0>(k), std::get<1>(k), std::get<2>(k), t, a});
        out << ',' << (it == d.end() ? std::string() : csv_number(it->second));
      }
      out << '\n';
    }
  }
  return out.str();
}

std::string fig3f(const std::vector<ControlCell>& cells) {
  std::ostringstream out;
  out << "task,target_axis,affected_axis,layer,n_examples," << kEffectHeader << ",failed,note\n";
  for (const auto& c : cells) {
    out << to_string(c.task) << ',' << c.target << ',' << c.affected << ',' << c.layer << ',' << c.n_examples << ','
        << effect_columns(c.effect) << ',' << c.failed << ',' << quote(c.note) << '\n';
  }
  return out.str();
}

std::string fig4a(const FigureInputs& in) {
  std::ostringstream out;
  out << "task,layer,target_axis,n_examples,repeat,condition,imitate_label,imitated_side,score\n";
  for (const auto& r : in.records) {
    if (!is_control(r.task) || r.status != "ok") continue;
    const auto it = r.scores.find(r.target_axis);
    if (it == r.scores.end()) continue;
    out << to_string(r.task) << ',' << r.layer << ',' << r.target_axis << ',' << r.n_examples << ',' << r.repeat
        << ',' << r.condition << ',' << r.imitate_label.value_or(-1) << ',' << r.imitated_side.value_or(-1) << ','
        << csv_number(it->second) << '\n';
  }
  return out.str();
}

std::string fig4b(const FigureInputs& in) {
  if (!in.baseline) throw Error(ErrorCode::BadConfig, "fig4b needs the uncontrolled baseline scores");
  std::map<std::tuple<Task, int, std::string, std::size_t>, std::vector<double>> groups[2];
  for (const auto& r : in.records) {
    if (!is_control(r.task) || r.status != "ok" || !r.imitated_side) continue;
    const auto it = r.scores.find(r.target_axis);
    if (it == r.scores.end()) continue;
    groups[*r.imitated_side != 0][{r.task, r.layer, r.target_axis, r.n_examples}].push_back(it->second);
  }
  std::ostringstream out;
  out << "task,layer,target_axis,n_examples,imitated_side,count,frac_below_baseline_min,frac_above_baseline_max\n";
  for (int side = 0; side < 2; ++side) {
    for (const auto& [k, scores] : groups[side]) {
      const auto layer_it = in.baseline->find(std::get<1>(k));
      if (layer_it == in.baseline->end()) continue;
      const auto axis_it = layer_it->second.find(std::get<2>(k));
      if (axis_it == layer_it->second.end()) continue;
      const auto f = extremity_fraction(scores, axis_it->second);
      out << to_string(std::get<0>(k)) << ',' << std::get<1>(k) << ',' << std::get<2>(k) << ',' << std::get<3>(k)
          << ',' << side << ',' << scores.size() << ',' << csv_number(f.below_min) << ','
          << csv_number(f.above_max) << '\n';
    }
  }
  return out.str();
}

std::string fig5(const FigureInputs& in) {
  if (!in.accumulation) throw Error(ErrorCode::BadConfig, "fig5 needs accumulation results");
  std::ostringstream out;
  out << "task,target_axis,target_layer,source_layer,n_examples," << kEffectHeader << '\n';
  for (const auto& c : *in.accumulation) {
    out << to_string(c.task) << ',' << c.target << ',' << c.target_layer << ',' << c.source_layer << ','
        << c.n_examples << ',' << effect_columns(c.effect) << '\n';
  }
  return out.str();
}

}  // namespace

std::string csv_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string figure_name(std::string_view name) {
  std::string s;
  for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s.rfind("fig", 0) != 0) s = "fig" + s;
  for (auto f : kFigures) {
    if (s == f) return s;
  }
  throw Error(ErrorCode::BadConfig, "unknown figure '" + std::string(name) + "'");
}

std::vector<std::string> expand_figures(std::string_view name) {
  std::string s;
  for (char c : name) s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (s == "all") return {std::begin(kFigures), std::end(kFigures)};
  if (s == "fig3b-f" || s == "3b-f") return {"fig3b", "fig3c", "fig3d", "fig3e", "fig3f"};
  return {figure_name(name)};
}

std::map<std::string, std::string> export_figure(std::string_view name, const FigureInputs& inputs) {
  std::map<std::string, std::string> files;
  std::optional<std::vector<ControlCell>> cells;
  auto control = [&]() -> const std::vector<ControlCell>& {
    if (!cells) cells = aggregate_control(inputs.records);
    return *cells;
  };
  for (const auto& fig : expand_figures(name)) {
    std::string csv;
    if (fig == "fig2c") csv = fig2c(inputs);
    else if (fig == "fig3b") csv = fig3b(control());
    else if (fig == "fig3c") csv = fig3c(control());
    else if (fig == "fig3d") csv = fig3d(control());
    else if (fig == "fig3e") csv = fig3e(control());
    else if (fig == "fig3f") csv = fig3f(control());
    else if (fig == "fig4a") csv = fig4a(inputs);
    else if (fig == "fig4b") csv = fig4b(inputs);
    else csv = fig5(inputs);
    files[fig + ".csv"] = std::move(csv);
  }
  return files;
}

}  // namespace nfb
