#include <doctest.h>

#include <cmath>
#include <sstream>

#include "nfb/error.hpp"
#include "nfb/figures.hpp"

using namespace nfb;

namespace {

// Two records per imitated side. The target axis gets scores {0, 2} vs
// {2, 4} (d = sqrt 2); every other axis {0, 2} on both sides (d = 0).
std::vector<TrialRecord> control_records(const std::vector<std::string>& targets,
                                         const std::vector<std::string>& affected) {
  std::vector<TrialRecord> out;
  for (const auto& t : targets) {
    for (int side : {0, 1}) {
      for (int k : {0, 1}) {
        TrialRecord r;
        r.task = Task::ImplicitControl;
        r.layer = 3;
        r.n_examples = 4;
        r.target_axis = t;
        r.repeat = k;
        r.condition = side ? 2 : 1;
        r.imitate_label = 0;
        r.imitated_side = side;
        for (const auto& a : affected) r.scores[a] = (a == t ? 2.0 * side : 0.0) + 2.0 * k;
        out.push_back(std::move(r));
      }
    }
  }
  return out;
}

std::vector<std::string> lines(const std::string& csv) {
  std::vector<std::string> out;
  std::istringstream in(csv);
  for (std::string line; std::getline(in, line);) out.push_back(line);
  return out;
}

}  // namespace

TEST_CASE("figure names") {
  CHECK(figure_name("3e") == "fig3e");
  CHECK(figure_name("FIG3E") == "fig3e");
  CHECK(figure_name("fig5") == "fig5");
  CHECK_THROWS_AS(figure_name("fig9"), Error);
  CHECK(expand_figures("fig3b-f") == std::vector<std::string>{"fig3b", "fig3c", "fig3d", "fig3e", "fig3f"});
  CHECK(expand_figures("all").size() == 9);
  CHECK(expand_figures("2c") == std::vector<std::string>{"fig2c"});
}

TEST_CASE("fig3e heatmap: targets as rows, PCs by index then LR as columns") {
  FigureInputs in;
  in.records = control_records({"LR", "PC10", "PC2", "PC1"}, {"PC10", "LR", "PC1", "PC2"});
  const auto files = export_figure("3e", in);
  REQUIRE(files.count("fig3e.csv"));
  const auto rows = lines(files.at("fig3e.csv"));
  REQUIRE(rows.size() == 5);
  CHECK(rows[0] == "task,layer,n_examples,target_axis,PC1,PC2,PC10,LR");
  CHECK(rows[1] == "implicit_control,3,4,PC1,1.414213562,0,0,0");
  CHECK(rows[2] == "implicit_control,3,4,PC2,0,1.414213562,0,0");
  CHECK(rows[3] == "implicit_control,3,4,PC10,0,0,1.414213562,0");
  CHECK(rows[4] == "implicit_control,3,4,LR,0,0,0,1.414213562");
}

TEST_CASE("fig3b to fig3f from one set of records") {
  FigureInputs in;
  in.records = control_records({"PC1", "PC2"}, {"PC1", "PC2", "PC4", "LR"});
  const auto files = export_figure("fig3b-f", in);
  CHECK(files.size() == 5);

  const auto b = lines(files.at("fig3b.csv"));
  REQUIRE(b.size() == 3);
  CHECK(b[0] == "task,layer,target_axis,n_examples,d,se,ci_lo,ci_hi,n0,n1,pooled_sd,failed");
  const double se = std::sqrt(1.0 + 2.0 / 8.0);
  char expect[256];
  std::snprintf(expect, sizeof expect, "implicit_control,3,PC1,4,%s,%s,%s,%s,2,2,%s,0", csv_number(std::sqrt(2.0)).c_str(),
                csv_number(se).c_str(), csv_number(std::sqrt(2.0) - 1.96 * se).c_str(),
                csv_number(std::sqrt(2.0) + 1.96 * se).c_str(), csv_number(std::sqrt(2.0)).c_str());
  CHECK(b[1] == expect);

  const auto c = lines(files.at("fig3c.csv"));
  REQUIRE(c.size() == 3);
  CHECK(c[1] == "implicit_control,3,PC1,4,3,0");

  // Precision over the three PC columns: sqrt2 / (sqrt2 / 3) = 3.
  const auto d = lines(files.at("fig3d.csv"));
  REQUIRE(d.size() == 3);
  CHECK(d[1] == "implicit_control,3,PC1,4,3,1.414213562,0.4714045208,3");

  const auto f = lines(files.at("fig3f.csv"));
  CHECK(f.size() == 1 + 2 * 4);
}

TEST_CASE("degenerate cells are noted, not dropped") {
  FigureInputs in;
  in.records = control_records({"PC1"}, {"PC1"});
  for (auto& r : in.records) r.scores["PC1"] = 1.0;
  const auto f = lines(export_figure("3f", in).at("fig3f.csv"));
  REQUIRE(f.size() == 2);
  CHECK(f[1].find("implicit_control,PC1,PC1,3,4,,,,,,,,0,") == 0);
  CHECK(f[1].find("DegenerateVariance") != std::string::npos);
}

TEST_CASE("fig4 and fig5 inputs") {
  FigureInputs in;
  in.records = control_records({"PC1"}, {"PC1", "PC2"});
  const auto a = lines(export_figure("4a", in).at("fig4a.csv"));
  CHECK(a.size() == 5);
  CHECK(a[1] == "implicit_control,3,PC1,4,0,1,0,0,0");

  CHECK_THROWS_AS(export_figure("4b", in), Error);
  BaselineScores base;
  base[3]["PC1"] = {0.5, 3.0};
  in.baseline = &base;
  const auto b = lines(export_figure("4b", in).at("fig4b.csv"));
  REQUIRE(b.size() == 3);
  CHECK(b[1] == "implicit_control,3,PC1,4,0,2,0.5,0");
  CHECK(b[2] == "implicit_control,3,PC1,4,1,2,0,0.5");

  CHECK_THROWS_AS(export_figure("5", in), Error);
  std::vector<AccumulationCell> acc{{Task::ExplicitControl, 3, 1, "PC1", 4, std::nullopt}};
  in.accumulation = &acc;
  const auto five = lines(export_figure("5", in).at("fig5.csv"));
  REQUIRE(five.size() == 2);
  CHECK(five[1] == "explicit_control,PC1,3,1,4,,,,,,,");
}

TEST_CASE("fig2c from report records") {
  FigureInputs in;
  for (int k = 0; k < 4; ++k) {
    TrialRecord r;
    r.task = Task::Report;
    r.layer = 1;
    r.target_axis = "PC2";
    r.n_examples = 8;
    r.true_label = k % 2;
    r.logits = {{"1", k % 2 ? 1.0 : 0.0}, {"0", 0.0}};
    in.records.push_back(r);
  }
  in.records[3].status = "failed";
  const auto rows = lines(export_figure("2c", in).at("fig2c.csv"));
  REQUIRE(rows.size() == 2);
  // Trials 0 and 2 tie (predicted 1, wrong), trial 1 is right.
  const double ce = (2 * std::log(2.0) + std::log(1.0 + std::exp(-1.0))) / 3.0;
  CHECK(rows[1] == "1,PC2,8,3," + csv_number(1.0 / 3.0) + "," + csv_number(ce) + ",1");
}
