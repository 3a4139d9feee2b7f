#pragma once

#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

namespace nfb {

enum class LabelMode { Binary, Ordinal8 };

std::string_view to_string(LabelMode mode);
LabelMode label_mode_from_string(std::string_view name);

struct BinaryThreshold {
  double theta = 0.0;
};

// Quantile thresholds for an n-level Likert label centered at zero.
// gammas_neg = [gamma^-_0 .. gamma^-_{n/2}] with the last entry 0,
// gammas_pos = [gamma^+_0 .. gamma^+_{n/2}] with the first entry 0.
// gamma^-_0 and gamma^+_{n/2} are the fit-set extremes; scores beyond them
// clamp into bins 1 and n.
struct OrdinalThresholds {
  int n = 8;
  std::vector<double> gammas_neg;
  std::vector<double> gammas_pos;
};

using ThresholdSpec = std::variant<BinaryThreshold, OrdinalThresholds>;

struct NeurofeedbackLabel {
  int value = 0;
  std::string axis_id;
  double raw_score = 0.0;
};

// Sample median; even counts average the two middle order statistics.
double median_threshold(std::span<const double> scores);

// Heaviside step of (score - theta), with H(0) = 1.
int binarize(double score, double theta);

// Inclusive linear interpolation between order statistics of an ascending
// sample (p in [0, 1]).
double quantile_sorted(std::span<const double> sorted, double p);

OrdinalThresholds quantile_bins(std::span<const double> scores, int n = 8);

// Throws BadFormat when the invariants on the threshold lists do not hold.
void validate(const OrdinalThresholds& spec);

int ordinal_bin(double score, const OrdinalThresholds& spec);

int apply(const ThresholdSpec& spec, double score);

// Per-axis labeling rule used by the harness. Binary labels threshold at the
// fit-set median; ordinal labels bin the median-centered score.
struct AxisThresholds {
  double theta = 0.0;
  std::optional<OrdinalThresholds> ordinal;

  int label(double score, LabelMode mode) const;
  int level_count(LabelMode mode) const { return mode == LabelMode::Binary ? 2 : ordinal ? ordinal->n : 8; }
};

AxisThresholds fit_thresholds(std::span<const double> fit_scores, int ordinal_levels = 8);

// Label shown to the model under a flipped assignment.
int flip_label(int label, LabelMode mode, int levels);

}  // namespace nfb
