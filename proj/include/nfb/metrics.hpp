#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "nfb/axes.hpp"

namespace nfb {

inline constexpr double kCi95Z = 1.96;

// Standardized mean difference between the imitate-1 (high) and imitate-0
// (low) score groups, with the large-sample standard error of d.
struct EffectSize {
  double d = 0.0;
  double pooled_sd = 0.0;
  double se = 0.0;
  double ci_lo = 0.0;
  double ci_hi = 0.0;
  std::size_t n0 = 0;
  std::size_t n1 = 0;
  double mean0 = 0.0;
  double mean1 = 0.0;
};

struct ReportTrial {
  int true_label = 0;
  double logit_1 = 0.0;
  double logit_0 = 0.0;

  double logit_diff() const noexcept { return logit_1 - logit_0; }
};

struct ReportMetrics {
  double accuracy = 0.0;
  double cross_entropy = 0.0;  // nats
  std::size_t count = 0;
};

int predicted_label(const ReportTrial& trial);

ReportMetrics report_metrics(std::span<const ReportTrial> trials);

// n-way variant for ordinal labels: logits[k] scores label k + 1; prediction is
// the argmax (first on ties) and cross-entropy uses the full softmax.
struct OrdinalReportTrial {
  int true_label = 1;
  std::vector<double> logits;
};

ReportMetrics ordinal_report_metrics(std::span<const OrdinalReportTrial> trials);

EffectSize cohens_d(std::span<const double> scores_0, std::span<const double> scores_1);

// |d_target| over the mean |d| across all K affected axes (target included).
double control_precision(std::span<const double> d_by_axis, std::size_t target_index);
double control_precision(std::span<const EffectSize> d_by_axis, std::size_t target_index);

struct IdealObserverResult {
  double training_accuracy = 0.0;
  std::optional<double> heldout_accuracy;
  bool converged = false;
};

// Logistic regression on the full embeddings: an upper bound for how well any
// reader of the activations could report the labels. The default penalty is
// close to zero so shrinkage cannot cost training accuracy on separable labels.
inline LogisticOptions ideal_observer_options() {
  LogisticOptions o;
  o.l2 = 1e-8;
  return o;
}

IdealObserverResult ideal_observer(std::span<const SentenceEmbedding> embeddings,
                                   std::span<const int> labels,
                                   std::span<const SentenceEmbedding> heldout_embeddings = {},
                                   std::span<const int> heldout_labels = {},
                                   const LogisticOptions& options = ideal_observer_options());

struct ExtremityFraction {
  double below_min = 0.0;
  double above_max = 0.0;
};

ExtremityFraction extremity_fraction(std::span<const double> controlled,
                                     std::span<const double> baseline);

}  // namespace nfb
