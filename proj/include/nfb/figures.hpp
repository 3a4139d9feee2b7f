#pragma once

#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/orchestrator.hpp"

namespace nfb {

// CSV tables behind the plots. Names:
//   fig2c  reporting accuracy and cross-entropy per (layer, axis, N)
//   fig3b  target-axis control effect per (layer, target, N)
//   fig3c  mean off-target |d| per (layer, target, N)
//   fig3d  control precision per (layer, target, N)
//   fig3e  heatmap: one row per target axis, one column per affected axis
//   fig3f  every (target, affected, layer, N) effect with its CI
//   fig4a  controlled score per record on the target axis
//   fig4b  fraction of controlled scores beyond the uncontrolled range
//   fig5   accumulation: source layer effect on each target layer's axis
struct FigureInputs {
  std::vector<TrialRecord> records;
  const BaselineScores* baseline = nullptr;                 // fig4b
  const std::vector<AccumulationCell>* accumulation = nullptr;  // fig5
};

// Canonical name ("fig3e") for "3e", "fig3e" or "FIG3E"; throws BadConfig.
std::string figure_name(std::string_view name);
// "fig3b-f" expands to fig3b..fig3f; "all" to every figure.
std::vector<std::string> expand_figures(std::string_view name);

// Map from file name to CSV content.
std::map<std::string, std::string> export_figure(std::string_view name, const FigureInputs& inputs);

std::string csv_number(double v);

}  // namespace nfb
