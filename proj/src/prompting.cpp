#include "nfb/prompting.hpp"

#include <algorithm>
#include <map>

#include "json_internal.hpp"
#include "nfb/error.hpp"
#include "nfb/random.hpp"

namespace nfb {

namespace {

constexpr std::string_view kReportSystem =
    "You are a helpful assistant. You will perform a classification task. In each iteration, I "
    "will give you an instruction. Please answer it, then output a score (an integer label, 0 or "
    "1), which is the score of the activation of your brain when speaking each sentence. Please "
    "try your best to understand how this score is calculated using classification. Only output "
    "0 or 1.";

constexpr std::string_view kControlSystem =
    "You are a helpful assistant. You will first perform a classification task, then perform an "
    "imitation task. In each classification iteration, I will give you an instruction. Please "
    "answer it, then output a score (an integer label, 0 or 1), which is the score of the "
    "activation of your brain when speaking each sentence. Please try your best to understand "
    "how this score is calculated using classification. Only output 0 or 1 for the "
    "classification.";

constexpr std::string_view kImitationPrefix =
    "Say something. Now you are performing the imitation task. You must imitate the behavior of "
    "label ";
constexpr std::string_view kImitationSuffix = " in your reply but cannot copy existing examples.";

void replace_once(std::string& s, std::string_view from, const std::string& to) {
  const auto pos = s.find(from);
  if (pos != std::string::npos) s.replace(pos, from.size(), to);
}

// Ordinal prompts reuse the binary templates with the label range generalized.
std::string generalize(std::string_view base, LabelMode mode, int levels) {
  std::string s(base);
  if (mode == LabelMode::Binary) return s;
  const std::string range = std::to_string(levels);
  replace_once(s, "(an integer label, 0 or 1)", "(an integer label, 1 to " + range + ")");
  replace_once(s, "Only output 0 or 1", "Only output an integer from 1 to " + range);
  return s;
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

Message user(std::string_view text) { return {Role::User, std::string(text), std::nullopt}; }

Message assistant_example(std::string_view sentence, int label) {
  Message m{Role::Assistant, std::string(sentence), TextRange{0, sentence.size()}};
  m.text += prompts::kScorePrefix;
  m.text += std::to_string(label);
  m.text += prompts::kScoreSuffix;
  return m;
}

void append_examples(ChatTranscript& t, const ExampleSet& examples) {
  for (std::size_t i = 0; i < examples.pairs.size(); ++i) {
    const auto& p = examples.pairs[i];
    if (p.sentence.empty()) throw Error(ErrorCode::BadParams, "empty example sentence");
    t.messages.push_back(user(prompts::kSaySomething));
    t.messages.push_back(assistant_example(p.sentence, examples.shown_label(i)));
  }
}

std::optional<int> parse_int(std::string_view s) {
  if (s.empty() || s.size() > 3) return std::nullopt;
  int v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') return std::nullopt;
    v = v * 10 + (c - '0');
  }
  return v;
}

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::System: return "system";
    case Role::User: return "user";
    case Role::Assistant: return "assistant";
  }
  return "user";
}

Role role_from_string(std::string_view name) {
  if (name == "system") return Role::System;
  if (name == "user") return Role::User;
  if (name == "assistant") return Role::Assistant;
  throw Error(ErrorCode::BadFormat, "unknown role '" + std::string(name) + "'");
}

std::string_view to_string(LabelAssignment a) {
  return a == LabelAssignment::Identity ? "identity" : "flipped";
}

std::string_view to_string(ControlMode m) { return m == ControlMode::Explicit ? "explicit" : "implicit"; }

int ExampleSet::shown_label(std::size_t i) const {
  const int label = pairs.at(i).label;
  return assignment == LabelAssignment::Identity ? label : flip_label(label, mode, levels);
}

namespace prompts {

std::string report_system(LabelMode mode, int levels) { return generalize(kReportSystem, mode, levels); }

std::string control_system(LabelMode mode, int levels) {
  return generalize(kControlSystem, mode, levels);
}

std::string imitation_instruction(int imitate_label) {
  std::string s(kImitationPrefix);
  s += std::to_string(imitate_label);
  s += kImitationSuffix;
  return s;
}

}  // namespace prompts

ChatTranscript build_standalone_prompt(std::string_view sentence) {
  if (sentence.empty()) throw Error(ErrorCode::BadParams, "empty sentence");
  ChatTranscript t;
  t.messages.push_back({Role::System, prompts::report_system(LabelMode::Binary, 2), std::nullopt});
  t.messages.push_back(user(prompts::kSaySomething));
  t.messages.push_back({Role::Assistant, std::string(sentence), TextRange{0, sentence.size()}});
  return t;
}

ChatTranscript build_report_prompt(const ExampleSet& examples, std::string_view query_sentence) {
  if (query_sentence.empty()) throw Error(ErrorCode::BadParams, "empty query sentence");
  ChatTranscript t;
  t.messages.push_back(
      {Role::System, prompts::report_system(examples.mode, examples.levels), std::nullopt});
  append_examples(t, examples);
  t.messages.push_back(user(prompts::kSaySomething));
  Message query{Role::Assistant, std::string(query_sentence), TextRange{0, query_sentence.size()}};
  query.text += prompts::kScorePrefix;
  t.messages.push_back(std::move(query));
  t.final_open = true;
  t.score_readout = true;
  return t;
}

ChatTranscript build_control_prompt(const ExampleSet& examples, int imitate_label, ControlMode mode,
                                    std::optional<std::string_view> provided_sentence) {
  if (mode == ControlMode::Explicit && provided_sentence) {
    throw Error(ErrorCode::ModeMismatch, "explicit control generates its own sentence");
  }
  if (mode == ControlMode::Implicit && (!provided_sentence || provided_sentence->empty())) {
    throw Error(ErrorCode::ModeMismatch, "implicit control needs a provided sentence");
  }
  if (mode == ControlMode::Implicit) {
    for (const auto& p : examples.pairs) {
      if (p.sentence == *provided_sentence) {
        throw Error(ErrorCode::BadParams, "provided sentence duplicates an in-context example");
      }
    }
  }
  ChatTranscript t;
  t.messages.push_back(
      {Role::System, prompts::control_system(examples.mode, examples.levels), std::nullopt});
  append_examples(t, examples);
  t.messages.push_back(user(prompts::imitation_instruction(imitate_label)));
  if (mode == ControlMode::Explicit) {
    t.messages.push_back({Role::Assistant, "", std::nullopt});
  } else {
    t.messages.push_back({Role::Assistant, std::string(*provided_sentence),
                          TextRange{0, provided_sentence->size()}});
  }
  t.final_open = true;
  return t;
}

std::string_view ConditionSpec::roman() const {
  static constexpr std::array<std::string_view, 4> kRoman{"i", "ii", "iii", "iv"};
  return kRoman.at(static_cast<std::size_t>(index - 1));
}

std::array<ConditionSpec, 4> counterbalanced_conditions() {
  std::array<ConditionSpec, 4> c;
  c[0].index = 1;
  c[0].assignment = LabelAssignment::Identity;
  c[0].imitate_label = 0;
  c[0].imitated_group = SentenceGroup::A;
  c[1].index = 2;
  c[1].assignment = LabelAssignment::Flipped;
  c[1].imitate_label = 0;
  c[1].imitated_group = SentenceGroup::B;
  c[2].index = 3;
  c[2].assignment = LabelAssignment::Identity;
  c[2].imitate_label = 1;
  c[2].imitated_group = SentenceGroup::B;
  c[3].index = 4;
  c[3].assignment = LabelAssignment::Flipped;
  c[3].imitate_label = 1;
  c[3].imitated_group = SentenceGroup::A;
  return c;
}

std::array<ConditionSpec, 4> counterbalance(const std::vector<std::string>& group_a,
                                            const std::vector<std::string>& group_b) {
  if (group_a.empty() || group_b.empty()) {
    throw Error(ErrorCode::EmptyGroup, "counterbalancing needs two non-empty sentence groups");
  }
  auto c = counterbalanced_conditions();
  for (auto& spec : c) {
    spec.group_a = group_a;
    spec.group_b = group_b;
  }
  return c;
}

ParsedTranscript parse_transcript(const ChatTranscript& transcript) {
  ParsedTranscript out;
  const auto& msgs = transcript.messages;
  bool after_instruction = false;
  for (std::size_t i = 0; i < msgs.size(); ++i) {
    const Message& m = msgs[i];
    const bool last = i + 1 == msgs.size();
    if (m.role == Role::User) {
      if (m.text.starts_with(kImitationPrefix) && ends_with(m.text, kImitationSuffix)) {
        const std::string_view body = std::string_view(m.text).substr(
            kImitationPrefix.size(), m.text.size() - kImitationPrefix.size() - kImitationSuffix.size());
        out.imitate_label = parse_int(body);
        after_instruction = true;
      }
      continue;
    }
    if (m.role != Role::Assistant) continue;
    const std::string_view text = m.text;
    if (last && transcript.score_readout && ends_with(text, prompts::kScorePrefix)) {
      out.query_sentence = std::string(text.substr(0, text.size() - prompts::kScorePrefix.size()));
      continue;
    }
    if (after_instruction && last) {
      if (!text.empty()) out.final_sentence = std::string(text);
      continue;
    }
    if (ends_with(text, prompts::kScoreSuffix)) {
      const auto pos = text.rfind(prompts::kScorePrefix);
      if (pos == std::string_view::npos) continue;
      const auto start = pos + prompts::kScorePrefix.size();
      const auto label =
          parse_int(text.substr(start, text.size() - prompts::kScoreSuffix.size() - start));
      if (!label) continue;
      out.examples.emplace_back(std::string(text.substr(0, pos)), *label);
    }
  }
  return out;
}

std::vector<std::size_t> balanced_interleave(const std::vector<int>& labels, std::uint64_t seed) {
  std::map<int, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < labels.size(); ++i) groups[labels[i]].push_back(i);
  Rng rng(seed);
  std::vector<std::vector<std::size_t>> order;
  for (auto& [label, idx] : groups) {
    rng.shuffle(idx);
    order.push_back(std::move(idx));
  }
  rng.shuffle(order);
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  std::vector<std::size_t> cursor(order.size(), 0);
  while (out.size() < labels.size()) {
    for (std::size_t g = 0; g < order.size(); ++g) {
      if (cursor[g] < order[g].size()) out.push_back(order[g][cursor[g]++]);
    }
  }
  return out;
}

namespace detail {

ojson transcript_to_json(const ChatTranscript& t) {
  ojson msgs = ojson::array();
  for (const auto& m : t.messages) {
    ojson mj;
    mj["role"] = to_string(m.role);
    mj["text"] = m.text;
    if (m.sentence) mj["sentence"] = {m.sentence->begin, m.sentence->end};
    msgs.push_back(std::move(mj));
  }
  ojson j;
  j["messages"] = std::move(msgs);
  j["final_open"] = t.final_open;
  j["score_readout"] = t.score_readout;
  return j;
}

ChatTranscript transcript_from_json(const json& j) {
  try {
    ChatTranscript t;
    for (const auto& mj : j.at("messages")) {
      Message m;
      m.role = role_from_string(mj.at("role").get<std::string>());
      m.text = mj.at("text").get<std::string>();
      if (mj.contains("sentence") && !mj.at("sentence").is_null()) {
        const auto& s = mj.at("sentence");
        m.sentence = TextRange{s.at(0).get<std::size_t>(), s.at(1).get<std::size_t>()};
        if (m.sentence->begin > m.sentence->end || m.sentence->end > m.text.size()) {
          throw Error(ErrorCode::BadFormat, "sentence range outside message text");
        }
      }
      t.messages.push_back(std::move(m));
    }
    t.final_open = j.value("final_open", false);
    t.score_readout = j.value("score_readout", false);
    return t;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("malformed transcript: ") + e.what());
  }
}

json parse_json(std::string_view text, std::string_view what) {
  try {
    return json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string(what) + " is not valid JSON: " + e.what());
  }
}

}  // namespace detail

std::string render_plain(const ChatTranscript& transcript) {
  std::string out;
  for (const auto& m : transcript.messages) {
    switch (m.role) {
      case Role::System: out += "<System>"; break;
      case Role::User: out += "<User>"; break;
      case Role::Assistant: out += "<Assistant>"; break;
    }
    out += m.text;
    out += '\n';
  }
  return out;
}

std::string to_json(const ChatTranscript& transcript) {
  return detail::transcript_to_json(transcript).dump(1) + "\n";
}

ChatTranscript transcript_from_json(std::string_view text) {
  return detail::transcript_from_json(detail::parse_json(text, "transcript"));
}

}  // namespace nfb
