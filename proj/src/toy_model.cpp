#include "nfb/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "nfb/error.hpp"
#include "nfb/random.hpp"

namespace nfb {

namespace {

constexpr std::string_view kMarkerNames[] = {"<|system|>", "<|user|>", "<|assistant|>", "<|eot|>"};

int role_marker(Role role) {
  switch (role) {
    case Role::System: return ToyTokenizer::kSystem;
    case Role::User: return ToyTokenizer::kUser;
    case Role::Assistant: return ToyTokenizer::kAssistant;
  }
  return ToyTokenizer::kUser;
}

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double bound) {
  Matrix m{rows, cols, std::vector<double>(rows * cols)};
  for (double& v : m.values) v = rng.uniform(-bound, bound);
  return m;
}

std::vector<double> random_vector(Rng& rng, std::size_t n, double bound) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-bound, bound);
  return v;
}

void matvec_add(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = m.values.data() + r * m.cols;
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += row[c] * x[c];
    out[r] += s;
  }
}

}  // namespace

ToyTokenizer::Encoded ToyTokenizer::encode(const ChatTranscript& transcript) {
  Encoded out;
  const auto& msgs = transcript.messages;
  for (std::size_t i = 0; i < msgs.size(); ++i) {
    const Message& m = msgs[i];
    out.ids.push_back(role_marker(m.role));
    out.token_message.push_back(-1);
    const std::size_t text_start = out.ids.size();
    for (unsigned char c : m.text) {
      out.ids.push_back(c);
      out.token_message.push_back(static_cast<int>(i));
    }
    if (m.sentence) {
      out.spans.push_back(
          {i, TokenSpan{text_start + m.sentence->begin, text_start + m.sentence->end}});
    }
    const bool last = i + 1 == msgs.size();
    if (!(last && transcript.final_open)) {
      out.ids.push_back(kEndOfTurn);
      out.token_message.push_back(-1);
    }
  }
  return out;
}

std::string ToyTokenizer::token_text(int id) {
  if (id >= kSystem && id < kVocabSize) return std::string(kMarkerNames[id - kSystem]);
  if (id < 0 || id >= kVocabSize) throw Error(ErrorCode::BadToken, "token id out of range");
  if (id >= 0x80) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "<0x%02X>", id);
    return buf;
  }
  return std::string(1, static_cast<char>(id));
}

int ToyTokenizer::token_id(std::string_view text) {
  if (text.size() == 1) return static_cast<unsigned char>(text[0]);
  for (int i = 0; i < 4; ++i) {
    if (text == kMarkerNames[i]) return kSystem + i;
  }
  if (text.size() == 6 && text.starts_with("<0x") && text.back() == '>') {
    unsigned value = 0;
    if (std::sscanf(std::string(text.substr(3, 2)).c_str(), "%2x", &value) == 1) {
      return static_cast<int>(value);
    }
  }
  throw Error(ErrorCode::BadToken, "token '" + std::string(text) + "' is not in the toy vocabulary");
}

ToyModel::ToyModel(ToyModelSpec spec) : spec_(spec) {
  if (spec_.layer_count < 1) throw Error(ErrorCode::BadParams, "toy model needs at least one layer");
  if (spec_.width == 0 || spec_.head_count < 1 ||
      spec_.width % static_cast<std::size_t>(spec_.head_count) != 0) {
    throw Error(ErrorCode::BadParams, "toy width must be a positive multiple of the head count");
  }
  Rng rng(mix_seed({spec_.seed, 0x746f79ULL}));
  const auto d = spec_.width;
  const auto f = spec_.mlp_width;
  const double proj = std::sqrt(3.0 / static_cast<double>(d));
  weights_.embed = random_matrix(rng, ToyTokenizer::kVocabSize, d, 1.0);
  for (int l = 0; l < spec_.layer_count; ++l) {
    ToyLayerWeights w;
    w.wq = random_matrix(rng, d, d, proj);
    w.wk = random_matrix(rng, d, d, proj);
    w.wv = random_matrix(rng, d, d, proj);
    w.wo = random_matrix(rng, d, d, 0.5 * proj);
    w.w_in = random_matrix(rng, f, d, proj);
    w.b_in = random_vector(rng, f, 0.1);
    w.w_out = random_matrix(rng, d, f, 0.5 * std::sqrt(3.0 / static_cast<double>(f)));
    w.b_out = random_vector(rng, d, 0.1);
    weights_.layers.push_back(std::move(w));
  }
}

std::vector<double> ToyModel::position_encoding(std::size_t position, std::size_t width) {
  std::vector<double> pe(width, 0.0);
  const double p = static_cast<double>(position);
  for (std::size_t i = 0; i < width; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(width));
    pe[i] = 0.5 * std::sin(p * freq);
    if (i + 1 < width) pe[i + 1] = 0.5 * std::cos(p * freq);
  }
  return pe;
}

void ToyModel::rms_normalize(std::vector<double>& x) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double inv = 1.0 / std::sqrt(ss / static_cast<double>(x.size()) + 1e-6);
  for (double& v : x) v *= inv;
}

ToyModel::Session::Session(const ToyModel& model)
    : model_(&model),
      residual_(static_cast<std::size_t>(model.spec_.layer_count) + 1),
      keys_(static_cast<std::size_t>(model.spec_.layer_count)),
      values_(static_cast<std::size_t>(model.spec_.layer_count)) {}

void ToyModel::Session::append(int token) {
  if (token < 0 || token >= ToyTokenizer::kVocabSize) {
    throw Error(ErrorCode::BadToken, "token id " + std::to_string(token) + " out of range");
  }
  const auto& spec = model_->spec_;
  const auto& weights = model_->weights_;
  const std::size_t d = spec.width;
  const std::size_t heads = static_cast<std::size_t>(spec.head_count);
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const std::size_t pos = length_;

  std::vector<double> h = position_encoding(pos, d);
  for (std::size_t j = 0; j < d; ++j) h[j] += weights.embed(static_cast<std::size_t>(token), j);
  residual_[0].insert(residual_[0].end(), h.begin(), h.end());

  std::vector<double> normed(d);
  std::vector<double> q(d);
  std::vector<double> mixed(d);
  std::vector<double> hidden(spec.mlp_width);
  std::vector<double> scores(pos + 1);
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const ToyLayerWeights& w = weights.layers[l];

    normed = h;
    rms_normalize(normed);
    std::fill(q.begin(), q.end(), 0.0);
    matvec_add(w.wq, normed, q);
    auto& keys = keys_[l];
    auto& vals = values_[l];
    keys.resize(keys.size() + d, 0.0);
    vals.resize(vals.size() + d, 0.0);
    matvec_add(w.wk, normed, std::span<double>(keys.data() + pos * d, d));
    matvec_add(w.wv, normed, std::span<double>(vals.data() + pos * d, d));

    std::fill(mixed.begin(), mixed.end(), 0.0);
    for (std::size_t head = 0; head < heads; ++head) {
      const std::size_t off = head * hd;
      double best = -INFINITY;
      for (std::size_t j = 0; j <= pos; ++j) {
        double s = 0.0;
        for (std::size_t c = 0; c < hd; ++c) s += q[off + c] * keys[j * d + off + c];
        scores[j] = s * scale;
        best = std::max(best, scores[j]);
      }
      double total = 0.0;
      for (std::size_t j = 0; j <= pos; ++j) {
        scores[j] = std::exp(scores[j] - best);
        total += scores[j];
      }
      for (std::size_t j = 0; j <= pos; ++j) {
        const double a = scores[j] / total;
        for (std::size_t c = 0; c < hd; ++c) mixed[off + c] += a * vals[j * d + off + c];
      }
    }
    matvec_add(w.wo, mixed, h);

    normed = h;
    rms_normalize(normed);
    hidden = w.b_in;
    matvec_add(w.w_in, normed, hidden);
    for (double& v : hidden) v = std::max(0.0, v);
    for (std::size_t j = 0; j < d; ++j) h[j] += w.b_out[j];
    matvec_add(w.w_out, hidden, h);

    residual_[l + 1].insert(residual_[l + 1].end(), h.begin(), h.end());
  }
  ++length_;
}

void ToyModel::Session::truncate(std::size_t length) {
  if (length >= length_) return;
  const std::size_t d = model_->spec_.width;
  for (auto& r : residual_) r.resize(length * d);
  for (auto& k : keys_) k.resize(length * d);
  for (auto& v : values_) v.resize(length * d);
  length_ = length;
}

std::span<const double> ToyModel::Session::residual(int layer, std::size_t position) const {
  const std::size_t d = model_->spec_.width;
  const auto& r = residual_.at(static_cast<std::size_t>(layer));
  return {r.data() + position * d, d};
}

std::vector<double> ToyModel::Session::next_logits() const {
  if (length_ == 0) throw Error(ErrorCode::BadParams, "no tokens appended");
  const auto last = residual(model_->spec_.layer_count, length_ - 1);
  std::vector<double> z(last.begin(), last.end());
  rms_normalize(z);
  const Matrix& e = model_->weights_.embed;
  std::vector<double> logits(e.rows, 0.0);
  for (std::size_t v = 0; v < e.rows; ++v) {
    double s = 0.0;
    for (std::size_t j = 0; j < e.cols; ++j) s += e(v, j) * z[j];
    logits[v] = s;
  }
  return logits;
}

}  // namespace nfb
