#include "nfb/activations.hpp"

#include <cmath>
#include <string>

#include "nfb/axes.hpp"
#include "nfb/error.hpp"

namespace nfb {

LayerActivations::LayerActivations(int layer, std::size_t dim) : layer_(layer), dim_(dim) {
  if (dim == 0) throw Error(ErrorCode::DimensionMismatch, "activation width must be positive");
}

LayerActivations::LayerActivations(int layer, std::size_t dim, std::vector<double> data)
    : layer_(layer), dim_(dim), data_(std::move(data)) {
  if (dim == 0) throw Error(ErrorCode::DimensionMismatch, "activation width must be positive");
  if (data_.size() % dim != 0) {
    throw Error(ErrorCode::DimensionMismatch,
                "activation buffer of " + std::to_string(data_.size()) +
                    " values is not a multiple of width " + std::to_string(dim));
  }
}

std::span<const double> LayerActivations::row(std::size_t token) const {
  return {data_.data() + token * dim_, dim_};
}

std::span<double> LayerActivations::row(std::size_t token) {
  return {data_.data() + token * dim_, dim_};
}

void LayerActivations::append_row(std::span<const double> values) {
  if (values.size() != dim_) {
    throw Error(ErrorCode::DimensionMismatch, "row width " + std::to_string(values.size()) +
                                                  " != " + std::to_string(dim_));
  }
  data_.insert(data_.end(), values.begin(), values.end());
}

SentenceEmbedding mean_pool(const LayerActivations& acts, TokenSpan span) {
  if (span.empty()) throw Error(ErrorCode::EmptySpan, "cannot pool an empty token span");
  if (span.end > acts.token_count()) {
    throw Error(ErrorCode::EmptySpan, "span [" + std::to_string(span.begin) + ", " +
                                          std::to_string(span.end) + ") exceeds " +
                                          std::to_string(acts.token_count()) + " tokens");
  }
  SentenceEmbedding out;
  out.vector.assign(acts.dim(), 0.0);
  out.source_layer = acts.layer();
  out.token_count = span.size();
  for (std::size_t t = span.begin; t < span.end; ++t) {
    const auto r = acts.row(t);
    for (std::size_t j = 0; j < r.size(); ++j) out.vector[j] += r[j];
  }
  const double inv = 1.0 / static_cast<double>(span.size());
  for (double& v : out.vector) v *= inv;
  return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double project(const SentenceEmbedding& embedding, const Axis& axis, LayerPolicy policy) {
  if (policy == LayerPolicy::SameLayer && embedding.source_layer != axis.layer) {
    throw Error(ErrorCode::BadLayer,
                "embedding from layer " + std::to_string(embedding.source_layer) +
                    " projected onto axis of layer " + std::to_string(axis.layer) +
                    " without cross-layer policy");
  }
  return axis.orientation_sign * dot(embedding.vector, axis.direction);
}

}  // namespace nfb
