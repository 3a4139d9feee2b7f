#include "nfb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "nfb/error.hpp"

namespace nfb {

namespace {

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct Moments {
  double mean = 0.0;
  double var = 0.0;  // unbiased
};

Moments moments(std::span<const double> x) {
  Moments m;
  for (double v : x) m.mean += v;
  m.mean /= static_cast<double>(x.size());
  double ss = 0.0;
  double comp = 0.0;
  for (double v : x) {
    ss += (v - m.mean) * (v - m.mean);
    comp += v - m.mean;
  }
  const double n = static_cast<double>(x.size());
  m.var = (ss - comp * comp / n) / (n - 1.0);
  return m;
}

}  // namespace

int predicted_label(const ReportTrial& trial) {
  if (!std::isfinite(trial.logit_1) || !std::isfinite(trial.logit_0)) {
    throw Error(ErrorCode::BadLogits, "non-finite label logits");
  }
  return trial.logit_diff() >= 0.0 ? 1 : 0;
}

ReportMetrics report_metrics(std::span<const ReportTrial> trials) {
  if (trials.empty()) throw Error(ErrorCode::EmptyInput, "no report trials");
  ReportMetrics m;
  m.count = trials.size();
  std::size_t correct = 0;
  double ce = 0.0;
  for (const auto& t : trials) {
    correct += predicted_label(t) == t.true_label ? 1 : 0;
    // -log sigmoid(diff) for label 1, -log(1 - sigmoid(diff)) for label 0
    ce += t.true_label == 1 ? softplus(-t.logit_diff()) : softplus(t.logit_diff());
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(trials.size());
  m.cross_entropy = ce / static_cast<double>(trials.size());
  return m;
}

ReportMetrics ordinal_report_metrics(std::span<const OrdinalReportTrial> trials) {
  if (trials.empty()) throw Error(ErrorCode::EmptyInput, "no report trials");
  ReportMetrics m;
  m.count = trials.size();
  std::size_t correct = 0;
  double ce = 0.0;
  for (const auto& t : trials) {
    if (t.logits.empty() || t.true_label < 1 ||
        t.true_label > static_cast<int>(t.logits.size())) {
      throw Error(ErrorCode::BadLogits, "ordinal trial label outside logit range");
    }
    for (double v : t.logits) {
      if (!std::isfinite(v)) throw Error(ErrorCode::BadLogits, "non-finite label logits");
    }
    const auto best = std::max_element(t.logits.begin(), t.logits.end());
    const int predicted = static_cast<int>(best - t.logits.begin()) + 1;
    correct += predicted == t.true_label ? 1 : 0;
    double sum = 0.0;
    for (double v : t.logits) sum += std::exp(v - *best);
    ce += std::log(sum) + *best - t.logits[static_cast<std::size_t>(t.true_label - 1)];
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(trials.size());
  m.cross_entropy = ce / static_cast<double>(trials.size());
  return m;
}

EffectSize cohens_d(std::span<const double> scores_0, std::span<const double> scores_1) {
  if (scores_0.size() < 2 || scores_1.size() < 2) {
    throw Error(ErrorCode::TooFewSamples, "each group needs at least two scores (got " +
                                              std::to_string(scores_0.size()) + " and " +
                                              std::to_string(scores_1.size()) + ")");
  }
  const Moments m0 = moments(scores_0);
  const Moments m1 = moments(scores_1);
  const double n0 = static_cast<double>(scores_0.size());
  const double n1 = static_cast<double>(scores_1.size());
  const double pooled_var = ((n1 - 1.0) * m1.var + (n0 - 1.0) * m0.var) / (n0 + n1 - 2.0);
  const double pooled_sd = std::sqrt(std::max(0.0, pooled_var));
  if (!(pooled_sd > 0.0)) {
    throw Error(ErrorCode::DegenerateVariance, "pooled standard deviation is zero");
  }
  EffectSize e;
  e.n0 = scores_0.size();
  e.n1 = scores_1.size();
  e.mean0 = m0.mean;
  e.mean1 = m1.mean;
  e.pooled_sd = pooled_sd;
  e.d = (m1.mean - m0.mean) / pooled_sd;
  e.se = std::sqrt((n0 + n1) / (n0 * n1) + e.d * e.d / (2.0 * (n0 + n1)));
  e.ci_lo = e.d - kCi95Z * e.se;
  e.ci_hi = e.d + kCi95Z * e.se;
  return e;
}

double control_precision(std::span<const double> d_by_axis, std::size_t target_index) {
  if (d_by_axis.empty()) throw Error(ErrorCode::EmptyInput, "no affected axes");
  if (target_index >= d_by_axis.size()) {
    throw Error(ErrorCode::BadParams, "target index outside affected axes");
  }
  double sum = 0.0;
  for (double d : d_by_axis) sum += std::abs(d);
  const double mean = sum / static_cast<double>(d_by_axis.size());
  if (!(mean > 0.0)) throw Error(ErrorCode::DegenerateDenominator, "all effects are zero");
  return std::abs(d_by_axis[target_index]) / mean;
}

double control_precision(std::span<const EffectSize> d_by_axis, std::size_t target_index) {
  std::vector<double> d;
  d.reserve(d_by_axis.size());
  for (const auto& e : d_by_axis) d.push_back(e.d);
  return control_precision(d, target_index);
}

IdealObserverResult ideal_observer(std::span<const SentenceEmbedding> embeddings,
                                   std::span<const int> labels,
                                   std::span<const SentenceEmbedding> heldout_embeddings,
                                   std::span<const int> heldout_labels,
                                   const LogisticOptions& options) {
  const LogisticFit fit = fit_logistic(embeddings, labels, options);
  IdealObserverResult r;
  r.training_accuracy = fit.training_accuracy;
  r.converged = fit.converged;
  if (!heldout_embeddings.empty()) {
    if (heldout_embeddings.size() != heldout_labels.size()) {
      throw Error(ErrorCode::DimensionMismatch, "held-out labels do not match embeddings");
    }
    std::size_t correct = 0;
    for (std::size_t i = 0; i < heldout_embeddings.size(); ++i) {
      correct += fit.predict(heldout_embeddings[i].vector) == heldout_labels[i] ? 1 : 0;
    }
    r.heldout_accuracy = static_cast<double>(correct) / static_cast<double>(heldout_labels.size());
  }
  return r;
}

ExtremityFraction extremity_fraction(std::span<const double> controlled,
                                     std::span<const double> baseline) {
  if (baseline.empty()) throw Error(ErrorCode::EmptyInput, "empty baseline distribution");
  ExtremityFraction f;
  if (controlled.empty()) return f;
  const auto [lo, hi] = std::minmax_element(baseline.begin(), baseline.end());
  std::size_t below = 0;
  std::size_t above = 0;
  for (double s : controlled) {
    below += s < *lo ? 1 : 0;
    above += s > *hi ? 1 : 0;
  }
  f.below_min = static_cast<double>(below) / static_cast<double>(controlled.size());
  f.above_max = static_cast<double>(above) / static_cast<double>(controlled.size());
  return f;
}

}  // namespace nfb
