#include <algorithm>
#include <cmath>
#include <cstdio>

#include "nfb/backend.hpp"
#include "nfb/error.hpp"
#include "nfb/random.hpp"

namespace nfb {

namespace {

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

BackendResponse toy_response(const ToyModel::Session& session, const ToyTokenizer::Encoded& enc,
                             const BackendRequest& request, std::size_t width) {
  BackendResponse r;
  r.id = request.id;
  r.token_message = enc.token_message;
  r.spans = enc.spans;
  r.tokens.reserve(enc.ids.size());
  for (int id : enc.ids) r.tokens.push_back(ToyTokenizer::token_text(id));
  for (int layer : request.want_layers) {
    LayerActivations acts(layer, width);
    for (std::size_t t = 0; t < session.length(); ++t) acts.append_row(session.residual(layer, t));
    acts.set_token_tags(enc.token_message);
    r.activations.insert_or_assign(layer, std::move(acts));
  }
  if (!request.want_logit_tokens.empty()) {
    const auto logits = session.next_logits();
    for (const auto& tok : request.want_logit_tokens) {
      r.logits[tok] = logits[static_cast<std::size_t>(ToyTokenizer::token_id(tok))];
    }
  }
  return r;
}

// Replaces the final (open) assistant message with prefix + generated text and
// marks the generated part as its sentence.
ChatTranscript with_generated(const ChatTranscript& transcript, const std::string& generated) {
  ChatTranscript out = transcript;
  Message& last = out.messages.back();
  const std::size_t begin = last.text.size();
  last.text += generated;
  if (!generated.empty()) last.sentence = TextRange{begin, last.text.size()};
  return out;
}

// Trims the first stop string that the text now ends with; true if one matched.
bool apply_stop(std::string& text, const std::vector<std::string>& stop) {
  for (const auto& s : stop) {
    if (!s.empty() && ends_with(text, s)) {
      text.erase(text.size() - s.size());
      return true;
    }
  }
  return false;
}

}  // namespace

// ---------------------------------------------------------------- toy

ToyBackend::ToyBackend(ToyModelSpec spec) : model_(spec) {}

ModelInfo ToyBackend::model_info() {
  const auto& s = model_.spec();
  ModelInfo info;
  info.model_id = "toy-L" + std::to_string(s.layer_count) + "-D" + std::to_string(s.width) +
                  "-seed" + std::to_string(s.seed);
  info.layer_count = s.layer_count;
  info.width = s.width;
  info.vocab_size = ToyTokenizer::kVocabSize;
  info.tokenizer = "byte+4markers";
  info.max_in_flight = 4;
  return info;
}

namespace {
constexpr std::size_t kToyCacheEntries = 8;
}

ToyModel::Session ToyBackend::session_for(const std::vector<int>& ids) {
  std::shared_ptr<const ToyModel::Session> best;
  std::size_t best_len = 0;
  {
    std::lock_guard lock(cache_mutex_);
    for (const auto& e : cache_) {
      const std::size_t limit = std::min(e.ids.size(), ids.size());
      std::size_t k = 0;
      while (k < limit && e.ids[k] == ids[k]) ++k;
      if (k > best_len) {
        best_len = k;
        best = e.session;
      }
    }
  }
  ToyModel::Session session = best ? *best : ToyModel::Session(model_);
  session.truncate(best_len);
  for (std::size_t i = best_len; i < ids.size(); ++i) session.append(ids[i]);
  return session;
}

void ToyBackend::remember(const std::vector<int>& ids, const ToyModel::Session& session) {
  auto copy = std::make_shared<const ToyModel::Session>(session);
  std::lock_guard lock(cache_mutex_);
  for (auto it = cache_.begin(); it != cache_.end(); ++it) {
    if (it->ids == ids) {
      cache_.erase(it);
      break;
    }
  }
  cache_.push_back({ids, std::move(copy)});
  if (cache_.size() > kToyCacheEntries) cache_.erase(cache_.begin());
}

BackendResponse ToyBackend::forward(const BackendRequest& request) {
  validate_request(request, model_info());
  for (const auto& tok : request.want_logit_tokens) ToyTokenizer::token_id(tok);
  const auto enc = ToyTokenizer::encode(request.transcript);
  ToyModel::Session session = session_for(enc.ids);
  remember(enc.ids, session);
  return toy_response(session, enc, request, model_.spec().width);
}

BackendResponse ToyBackend::generate(const BackendRequest& request) {
  if (!request.generate) throw Error(ErrorCode::BadParams, "generate request without parameters");
  validate_request(request, model_info());
  for (const auto& tok : request.want_logit_tokens) ToyTokenizer::token_id(tok);
  const GenerateParams& g = *request.generate;

  const auto enc = ToyTokenizer::encode(request.transcript);
  ToyModel::Session session = session_for(enc.ids);
  remember(enc.ids, session);

  // Decoding is restricted to printable ASCII plus end-of-turn, and at least
  // one byte is produced.
  Rng rng(mix_seed({g.seed, 0x67656eULL}));
  std::string text;
  std::vector<double> probs;
  for (int step = 0; step < g.max_new_tokens; ++step) {
    const auto logits = session.next_logits();
    std::vector<int> allowed;
    for (int c = 0x20; c < 0x7f; ++c) allowed.push_back(c);
    if (step > 0) allowed.push_back(ToyTokenizer::kEndOfTurn);
    int choice = allowed.front();
    if (g.mode == DecodeMode::Greedy) {
      for (int c : allowed) {
        if (logits[static_cast<std::size_t>(c)] > logits[static_cast<std::size_t>(choice)]) choice = c;
      }
    } else {
      double best = -INFINITY;
      for (int c : allowed) best = std::max(best, logits[static_cast<std::size_t>(c)] / g.temperature);
      probs.assign(allowed.size(), 0.0);
      double total = 0.0;
      for (std::size_t i = 0; i < allowed.size(); ++i) {
        probs[i] = std::exp(logits[static_cast<std::size_t>(allowed[i])] / g.temperature - best);
        total += probs[i];
      }
      double u = rng.uniform() * total;
      choice = allowed.back();
      for (std::size_t i = 0; i < allowed.size(); ++i) {
        u -= probs[i];
        if (u < 0.0) {
          choice = allowed[i];
          break;
        }
      }
    }
    if (choice == ToyTokenizer::kEndOfTurn) break;
    text.push_back(static_cast<char>(choice));
    if (apply_stop(text, g.stop)) break;
    session.append(choice);
  }

  // The decoding session already holds the continuation; cut it back to the
  // kept text (a matched stop string was partly appended) and finish it.
  BackendRequest final_request = request;
  final_request.transcript = with_generated(request.transcript, text);
  final_request.generate.reset();
  const auto final_enc = ToyTokenizer::encode(final_request.transcript);
  session.truncate(enc.ids.size() + std::min(session.length() - enc.ids.size(), text.size()));
  for (std::size_t i = session.length(); i < final_enc.ids.size(); ++i) session.append(final_enc.ids[i]);
  BackendResponse r = toy_response(session, final_enc, final_request, model_.spec().width);
  r.generated_text = text;
  return r;
}

// ---------------------------------------------------------------- scripted

ScriptedBackend::ScriptedBackend(ModelInfo info, std::vector<BackendResponse> script, Gain gain)
    : info_(std::move(info)), script_(std::move(script)), gain_(std::move(gain)) {
  if (script_.empty()) throw Error(ErrorCode::EmptyInput, "mock script is empty");
}

ModelInfo ScriptedBackend::model_info() { return info_; }

std::size_t ScriptedBackend::replay_count() const {
  std::lock_guard lock(mutex_);
  return cursor_;
}

BackendResponse ScriptedBackend::next(const BackendRequest& request) {
  BackendResponse r;
  {
    std::lock_guard lock(mutex_);
    if (cursor_ >= script_.size()) {
      throw Error(ErrorCode::ScriptExhausted,
                  "mock script of " + std::to_string(script_.size()) + " responses exhausted");
    }
    r = script_[cursor_++];
  }
  r.id = request.id;
  if (gain_.delta == 0.0 || request.transcript.messages.empty()) return r;
  const auto parsed = parse_transcript(request.transcript);
  if (!parsed.imitate_label) return r;
  const SentenceSpan* span = r.span_for_message(request.transcript.messages.size() - 1);
  if (!span) return r;
  bool high = *parsed.imitate_label == 1;
  if (!gain_.sentence_labels.empty()) {
    std::size_t identity = 0;
    std::size_t flipped = 0;
    for (const auto& [sentence, shown] : parsed.examples) {
      const auto it = gain_.sentence_labels.find(sentence);
      if (it == gain_.sentence_labels.end()) continue;
      (shown == it->second ? identity : flipped) += 1;
    }
    if (identity == 0 && flipped == 0) return r;
    high = high != (flipped > identity);
  }
  const double shift = (high ? 0.5 : -0.5) * gain_.delta;
  for (auto& [layer, acts] : r.activations) {
    if (gain_.direction.size() != acts.dim()) {
      throw Error(ErrorCode::DimensionMismatch, "gain direction width differs from activations");
    }
    for (std::size_t t = span->tokens.begin; t < span->tokens.end; ++t) {
      auto row = acts.row(t);
      for (std::size_t j = 0; j < row.size(); ++j) row[j] += shift * gain_.direction[j];
    }
  }
  return r;
}

BackendResponse ScriptedBackend::forward(const BackendRequest& request) { return next(request); }

BackendResponse ScriptedBackend::generate(const BackendRequest& request) {
  if (request.generate && request.generate->max_new_tokens <= 0) {
    throw Error(ErrorCode::BadParams, "max_new_tokens must be positive");
  }
  return next(request);
}

std::unique_ptr<ScriptedBackend> script_mock(ModelInfo info, std::vector<BackendResponse> script,
                                             ScriptedBackend::Gain gain) {
  return std::make_unique<ScriptedBackend>(std::move(info), std::move(script), std::move(gain));
}

// ---------------------------------------------------------------- simulated

std::function<double(std::size_t)> saturating_gain(double max_gain, double half_n) {
  return [max_gain, half_n](std::size_t n) {
    const double x = static_cast<double>(n);
    return max_gain * x / (x + half_n);
  };
}

std::function<double(std::size_t)> constant_gain(double gain) {
  return [gain](std::size_t) { return gain; };
}

SimulatedBackend::SimulatedBackend(Config config) : config_(std::move(config)) {
  if (config_.layer_count < 1 || config_.width == 0) {
    throw Error(ErrorCode::BadParams, "simulated model needs positive depth and width");
  }
  if (config_.scales.empty()) {
    for (std::size_t j = 0; j < config_.width; ++j) {
      config_.scales.push_back(3.0 * std::pow(0.85, static_cast<double>(j)));
    }
  }
  if (config_.scales.size() != config_.width || config_.label_dim >= config_.width) {
    throw Error(ErrorCode::DimensionMismatch, "simulated model scales/label_dim do not fit width");
  }
}

void SimulatedBackend::set_targets(std::vector<Target> targets) {
  for (const auto& t : targets) {
    if (t.direction.size() != config_.width) {
      throw Error(ErrorCode::DimensionMismatch, "target direction width differs from model");
    }
  }
  std::lock_guard lock(mutex_);
  targets_ = std::move(targets);
}

ModelInfo SimulatedBackend::model_info() {
  ModelInfo info;
  info.model_id = "simulated-L" + std::to_string(config_.layer_count) + "-D" +
                  std::to_string(config_.width) + "-seed" + std::to_string(config_.seed);
  info.layer_count = config_.layer_count;
  info.width = config_.width;
  info.vocab_size = ToyTokenizer::kVocabSize;
  info.tokenizer = "byte+4markers";
  info.max_in_flight = 8;
  return info;
}

std::vector<double> SimulatedBackend::sentence_embedding(std::string_view text) const {
  Rng rng(mix_seed({config_.seed, fnv1a64(text)}));
  std::vector<double> v(config_.width);
  for (std::size_t j = 0; j < v.size(); ++j) v[j] = config_.scales[j] * rng.normal();
  const auto it = config_.sentence_labels.find(std::string(text));
  if (it != config_.sentence_labels.end()) {
    v[config_.label_dim] += (it->second == 1 ? 1.0 : -1.0) * config_.label_strength;
  }
  return v;
}

SimulatedBackend::Reading SimulatedBackend::read_examples(const ParsedTranscript& parsed) const {
  Reading best;
  if (parsed.examples.empty()) return best;
  const int levels = config_.label_mode == LabelMode::Binary ? 2 : 8;
  std::size_t best_count = 0;
  for (const auto& target : targets_) {
    std::size_t identity = 0;
    std::size_t flipped = 0;
    for (const auto& [sentence, shown] : parsed.examples) {
      const int y = target.thresholds.label(dot(target.direction, sentence_embedding(sentence)),
                                            config_.label_mode);
      identity += shown == y ? 1 : 0;
      flipped += shown == flip_label(y, config_.label_mode, levels) ? 1 : 0;
    }
    const std::size_t count = std::max(identity, flipped);
    if (best.target == nullptr || count > best_count) {
      best.target = &target;
      best.flipped = flipped > identity;
      best_count = count;
    }
  }
  return best;
}

BackendResponse SimulatedBackend::respond(const BackendRequest& request,
                                          const ChatTranscript& transcript) {
  std::lock_guard lock(mutex_);
  const auto enc = ToyTokenizer::encode(transcript);
  const std::size_t width = config_.width;
  const std::size_t count = enc.ids.size();

  // Sentence tokens carry their sentence embedding; template tokens are zero.
  std::vector<double> base(count * width, 0.0);
  for (const auto& span : enc.spans) {
    const Message& m = transcript.messages[span.message];
    const auto emb = sentence_embedding(
        std::string_view(m.text).substr(m.sentence->begin, m.sentence->end - m.sentence->begin));
    for (std::size_t t = span.tokens.begin; t < span.tokens.end; ++t) {
      std::copy(emb.begin(), emb.end(), base.begin() + static_cast<std::ptrdiff_t>(t * width));
    }
  }

  const auto parsed = parse_transcript(transcript);
  const Reading reading = read_examples(parsed);
  std::vector<double> shift(width, 0.0);
  const SentenceSpan* final_span = nullptr;
  for (const auto& s : enc.spans) {
    if (s.message + 1 == transcript.messages.size()) final_span = &s;
  }
  if (parsed.imitate_label && reading.target && final_span) {
    const int levels = config_.label_mode == LabelMode::Binary ? 2 : 8;
    const bool shown_high = config_.label_mode == LabelMode::Binary ? *parsed.imitate_label == 1
                                                                    : *parsed.imitate_label > levels / 2;
    const bool high = shown_high != reading.flipped;
    const double magnitude =
        0.5 * config_.gain(parsed.examples.size()) * reading.target->score_sd * (high ? 1.0 : -1.0);
    for (std::size_t j = 0; j < width; ++j) shift[j] = magnitude * reading.target->direction[j];
  }

  BackendResponse r;
  r.id = request.id;
  r.token_message = enc.token_message;
  r.spans = enc.spans;
  for (int id : enc.ids) r.tokens.push_back(ToyTokenizer::token_text(id));
  for (int layer : request.want_layers) {
    std::vector<double> data = base;
    if (final_span && layer >= config_.onset_layer) {
      for (std::size_t t = final_span->tokens.begin; t < final_span->tokens.end; ++t) {
        for (std::size_t j = 0; j < width; ++j) data[t * width + j] += shift[j];
      }
    }
    LayerActivations acts(layer, width, std::move(data));
    acts.set_token_tags(enc.token_message);
    r.activations.insert_or_assign(layer, std::move(acts));
  }

  if (!request.want_logit_tokens.empty()) {
    std::optional<std::string> shown;
    if (config_.report_mode == ReportMode::Oracle && reading.target && parsed.query_sentence) {
      const int levels = config_.label_mode == LabelMode::Binary ? 2 : 8;
      const int y = reading.target->thresholds.label(
          dot(reading.target->direction, sentence_embedding(*parsed.query_sentence)),
          config_.label_mode);
      shown = std::to_string(reading.flipped ? flip_label(y, config_.label_mode, levels) : y);
    }
    const std::string key = parsed.query_sentence.value_or(transcript.messages.back().text);
    for (const auto& tok : request.want_logit_tokens) {
      if (shown) {
        r.logits[tok] = tok == *shown ? 0.5 * config_.report_margin : -0.5 * config_.report_margin;
      } else {
        Rng rng(mix_seed({config_.seed, fnv1a64(key), fnv1a64(tok)}));
        r.logits[tok] = rng.uniform(-1.0, 1.0);
      }
    }
  }
  return r;
}

BackendResponse SimulatedBackend::forward(const BackendRequest& request) {
  validate_request(request, model_info());
  return respond(request, request.transcript);
}

BackendResponse SimulatedBackend::generate(const BackendRequest& request) {
  if (!request.generate) throw Error(ErrorCode::BadParams, "generate request without parameters");
  validate_request(request, model_info());
  const auto tag = mix_seed({config_.seed, fnv1a64(to_json(request.transcript)),
                             request.generate->seed});
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08llx", static_cast<unsigned long long>(tag & 0xffffffffULL));
  std::string text = "I would say something like reply " + std::string(buf) + ".";
  if (text.size() > static_cast<std::size_t>(request.generate->max_new_tokens)) {
    text.resize(static_cast<std::size_t>(request.generate->max_new_tokens));
  }
  apply_stop(text, request.generate->stop);
  BackendResponse r = respond(request, with_generated(request.transcript, text));
  r.generated_text = text;
  return r;
}

}  // namespace nfb
