#include "nfb/labeling.hpp"

#include <algorithm>
#include <cmath>

#include "nfb/error.hpp"

namespace nfb {

std::string_view to_string(LabelMode mode) {
  return mode == LabelMode::Binary ? "binary" : "ordinal8";
}

LabelMode label_mode_from_string(std::string_view name) {
  if (name == "binary") return LabelMode::Binary;
  if (name == "ordinal8") return LabelMode::Ordinal8;
  throw Error(ErrorCode::BadConfig, "label mode must be binary or ordinal8, got '" +
                                        std::string(name) + "'");
}

double median_threshold(std::span<const double> scores) {
  if (scores.empty()) throw Error(ErrorCode::EmptyInput, "median of an empty score list");
  std::vector<double> v(scores.begin(), scores.end());
  const std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + mid, v.end());
  const double upper = v[mid];
  if (v.size() % 2 == 1) return upper;
  const double lower = *std::max_element(v.begin(), v.begin() + mid);
  return 0.5 * (lower + upper);
}

int binarize(double score, double theta) { return score - theta >= 0.0 ? 1 : 0; }

double quantile_sorted(std::span<const double> sorted, double p) {
  if (sorted.empty()) throw Error(ErrorCode::EmptyInput, "quantile of an empty sample");
  const double pos = std::clamp(p, 0.0, 1.0) * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

OrdinalThresholds quantile_bins(std::span<const double> scores, int n) {
  if (n < 2 || n % 2 != 0) {
    throw Error(ErrorCode::BadParams, "ordinal level count must be even and >= 2, got " +
                                          std::to_string(n));
  }
  std::vector<double> neg;
  std::vector<double> pos;
  for (double s : scores) (s < 0.0 ? neg : pos).push_back(s);
  if (neg.empty() || pos.empty()) {
    throw Error(ErrorCode::OneSidedData, "ordinal bins need both negative and non-negative scores");
  }
  std::sort(neg.begin(), neg.end());
  std::sort(pos.begin(), pos.end());

  const int half = n / 2;
  OrdinalThresholds spec;
  spec.n = n;
  spec.gammas_neg.resize(half + 1);
  spec.gammas_pos.resize(half + 1);
  spec.gammas_neg.front() = neg.front();
  spec.gammas_neg.back() = 0.0;
  spec.gammas_pos.front() = 0.0;
  spec.gammas_pos.back() = pos.back();
  for (int k = 1; k < half; ++k) {
    const double p = static_cast<double>(k) / half;
    spec.gammas_neg[k] = quantile_sorted(neg, p);
    spec.gammas_pos[k] = quantile_sorted(pos, p);
  }
  try {
    validate(spec);
  } catch (const Error& e) {
    throw Error(ErrorCode::DegenerateData,
                std::string("too few distinct scores per side for ") + std::to_string(n) +
                    " levels (" + e.what() + ")");
  }
  return spec;
}

void validate(const OrdinalThresholds& spec) {
  const std::size_t len = static_cast<std::size_t>(spec.n / 2 + 1);
  if (spec.n < 2 || spec.n % 2 != 0 || spec.gammas_neg.size() != len ||
      spec.gammas_pos.size() != len) {
    throw Error(ErrorCode::BadFormat, "threshold lists must hold n/2 + 1 entries for even n");
  }
  if (spec.gammas_neg.back() != 0.0 || spec.gammas_pos.front() != 0.0) {
    throw Error(ErrorCode::BadFormat, "threshold lists must meet at zero");
  }
  const auto strictly = [](const std::vector<double>& g) {
    return std::adjacent_find(g.begin(), g.end(), std::greater_equal<>()) == g.end();
  };
  if (!strictly(spec.gammas_neg) || !strictly(spec.gammas_pos)) {
    throw Error(ErrorCode::BadFormat, "threshold lists must be strictly increasing");
  }
}

int ordinal_bin(double score, const OrdinalThresholds& spec) {
  const int half = spec.n / 2;
  if (score < 0.0) {
    for (int k = 1; k <= half; ++k) {
      if (score <= spec.gammas_neg[k]) return k;
    }
    return half;
  }
  for (int j = 1; j <= half; ++j) {
    if (score <= spec.gammas_pos[j]) return half + j;
  }
  return spec.n;
}

int apply(const ThresholdSpec& spec, double score) {
  if (const auto* b = std::get_if<BinaryThreshold>(&spec)) return binarize(score, b->theta);
  return ordinal_bin(score, std::get<OrdinalThresholds>(spec));
}

int AxisThresholds::label(double score, LabelMode mode) const {
  if (mode == LabelMode::Binary) return binarize(score, theta);
  if (!ordinal) {
    throw Error(ErrorCode::DegenerateData, "axis has no ordinal thresholds (fit data too small)");
  }
  return ordinal_bin(score - theta, *ordinal);
}

AxisThresholds fit_thresholds(std::span<const double> fit_scores, int ordinal_levels) {
  AxisThresholds out;
  out.theta = median_threshold(fit_scores);
  std::vector<double> centered;
  centered.reserve(fit_scores.size());
  for (double s : fit_scores) centered.push_back(s - out.theta);
  try {
    out.ordinal = quantile_bins(centered, ordinal_levels);
  } catch (const Error&) {
    out.ordinal.reset();
  }
  return out;
}

int flip_label(int label, LabelMode mode, int levels) {
  return mode == LabelMode::Binary ? 1 - label : levels + 1 - label;
}

}  // namespace nfb
