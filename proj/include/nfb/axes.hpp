#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/activations.hpp"
#include "nfb/labeling.hpp"

namespace nfb {

enum class AxisKind { PC, LR };

// A unit direction in one layer's residual space. `direction` is stored in its
// canonical sign; `orientation_sign` is applied on top of it whenever scores
// are computed.
struct Axis {
  std::string id;
  int layer = 0;
  AxisKind kind = AxisKind::PC;
  int pc_index = 0;  // g for PC_g, 0 for LR
  std::vector<double> direction;
  int orientation_sign = 1;
  double explained_variance_ratio = 0.0;  // PC only
  double eigenvalue = 0.0;                // PC only
  double bias = 0.0;                      // LR only, in the unnormalized weight scale
  std::optional<AxisThresholds> thresholds;

  std::vector<double> oriented() const;
  std::size_t dim() const noexcept { return direction.size(); }
};

std::string pc_axis_id(int g);
inline constexpr std::string_view kLrAxisId = "LR";

// Parses "PC7" / "LR"; returns 0 for LR, g for PC_g.
int parse_axis_id(std::string_view id);

struct PcaResult {
  std::vector<Axis> pcs;
  std::vector<double> data_mean;
  double total_variance = 0.0;
};

// Dense covariance route up to this width, SVD of the centered data above it.
inline constexpr std::size_t kCovarianceWidthLimit = 4096;

PcaResult fit_pca(std::span<const SentenceEmbedding> embeddings, int k);

struct LogisticOptions {
  double l2 = 1e-3;
  double tol = 1e-8;
  int max_iter = 10000;
};

struct LogisticFit {
  Axis axis;
  std::vector<double> weights;  // unnormalized
  bool converged = false;
  int iterations = 0;
  std::vector<double> loss_history;
  double training_accuracy = 0.0;

  int predict(std::span<const double> x) const;
};

LogisticFit fit_logistic(std::span<const SentenceEmbedding> embeddings, std::span<const int> labels,
                         const LogisticOptions& options = {});

// Regularized logistic loss (mean log-loss + l2/2 |w|^2) for given parameters.
double logistic_loss(std::span<const SentenceEmbedding> embeddings, std::span<const int> labels,
                     std::span<const double> weights, double bias, double l2);

Axis orient_axis(Axis axis, std::span<const SentenceEmbedding> embeddings,
                 std::span<const int> labels);

double axis_overlap(const Axis& a, const Axis& b);

struct AxisBasis {
  int layer = 0;
  std::vector<Axis> pcs;
  std::optional<Axis> lr;
  std::vector<double> data_mean;
  double total_variance = 0.0;

  const Axis* find(std::string_view id) const;
  Axis* find(std::string_view id);
};

struct AxisStore {
  static constexpr int kFormatVersion = 1;

  std::string model_id;
  int layer_count = 0;
  std::size_t width = 0;
  std::uint64_t seed = 0;
  std::size_t fit_sentence_count = 0;
  std::vector<AxisBasis> layers;

  const AxisBasis& basis(int layer) const;
  const Axis& axis(int layer, std::string_view id) const;
  bool has(int layer, std::string_view id) const;
};

std::string to_json(const AxisStore& store);
AxisStore axis_store_from_json(std::string_view text);

}  // namespace nfb
