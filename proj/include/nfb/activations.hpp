#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace nfb {

struct Axis;

// Half-open token index range [begin, end).
struct TokenSpan {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const noexcept { return end > begin ? end - begin : 0; }
  bool empty() const noexcept { return size() == 0; }
  friend bool operator==(const TokenSpan&, const TokenSpan&) = default;
};

// Residual-stream vectors for every token of one transcript at one layer.
// Stored row-major, one row of `dim` doubles per token. Backends may compute
// in lower precision; values are widened on the way in.
class LayerActivations {
 public:
  LayerActivations() = default;
  LayerActivations(int layer, std::size_t dim);
  LayerActivations(int layer, std::size_t dim, std::vector<double> data);

  int layer() const noexcept { return layer_; }
  std::size_t dim() const noexcept { return dim_; }
  std::size_t token_count() const noexcept { return dim_ == 0 ? 0 : data_.size() / dim_; }

  std::span<const double> row(std::size_t token) const;
  std::span<double> row(std::size_t token);
  void append_row(std::span<const double> values);

  const std::vector<double>& data() const noexcept { return data_; }

  // Message index each token belongs to (-1 for template/control tokens).
  const std::vector<int>& token_tags() const noexcept { return tags_; }
  void set_token_tags(std::vector<int> tags) { tags_ = std::move(tags); }

  friend bool operator==(const LayerActivations&, const LayerActivations&) = default;

 private:
  int layer_ = 0;
  std::size_t dim_ = 0;
  std::vector<double> data_;
  std::vector<int> tags_;
};

struct SentenceEmbedding {
  std::vector<double> vector;
  int source_layer = 0;
  std::size_t token_count = 0;
};

enum class LayerPolicy { SameLayer, CrossLayer };

SentenceEmbedding mean_pool(const LayerActivations& acts, TokenSpan span);

double dot(std::span<const double> a, std::span<const double> b);
double norm2(std::span<const double> a);

// Inner product of the embedding with the axis's oriented direction. Cross-layer
// projection is only legal when explicitly requested (accumulation curves).
double project(const SentenceEmbedding& embedding, const Axis& axis,
               LayerPolicy policy = LayerPolicy::SameLayer);

}  // namespace nfb
