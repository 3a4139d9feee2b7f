#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "nfb/labeling.hpp"

namespace nfb {

enum class Role { System, User, Assistant };

std::string_view to_string(Role role);
Role role_from_string(std::string_view name);

// Byte range [begin, end) inside a message's text.
struct TextRange {
  std::size_t begin = 0;
  std::size_t end = 0;
  friend bool operator==(const TextRange&, const TextRange&) = default;
};

struct Message {
  Role role = Role::User;
  std::string text;
  // Assistant messages that carry a dataset or generated sentence mark it here;
  // the " [Score:{L}]" suffix is never part of the range.
  std::optional<TextRange> sentence;

  friend bool operator==(const Message&, const Message&) = default;
};

// `final_open` means the last message is unterminated and the model continues
// it (report readout after "[Score:{", or an explicit-control reply). When
// `score_readout` is set, label logits are read at the final token.
struct ChatTranscript {
  std::vector<Message> messages;
  bool final_open = false;
  bool score_readout = false;

  friend bool operator==(const ChatTranscript&, const ChatTranscript&) = default;
};

enum class LabelAssignment { Identity, Flipped };
enum class ControlMode { Explicit, Implicit };

std::string_view to_string(LabelAssignment a);
std::string_view to_string(ControlMode m);

struct ExamplePair {
  std::string sentence;
  int label = 0;  // true label on the axis; the assignment is applied when rendering
};

struct ExampleSet {
  std::vector<ExamplePair> pairs;
  std::string axis_id;
  LabelAssignment assignment = LabelAssignment::Identity;
  LabelMode mode = LabelMode::Binary;
  int levels = 2;

  int shown_label(std::size_t i) const;
};

namespace prompts {
inline constexpr std::string_view kSaySomething = "Say something.";
inline constexpr std::string_view kScorePrefix = " [Score:{";
inline constexpr std::string_view kScoreSuffix = "}]";
inline constexpr std::string_view kStopScore = " [Score";

std::string report_system(LabelMode mode, int levels);
std::string control_system(LabelMode mode, int levels);
std::string imitation_instruction(int imitate_label);
}  // namespace prompts

// system + "Say something." + the bare sentence; used to compute each
// sentence's own label outside any multi-turn context.
ChatTranscript build_standalone_prompt(std::string_view sentence);

ChatTranscript build_report_prompt(const ExampleSet& examples, std::string_view query_sentence);

ChatTranscript build_control_prompt(const ExampleSet& examples, int imitate_label, ControlMode mode,
                                    std::optional<std::string_view> provided_sentence = std::nullopt);

enum class SentenceGroup { A, B };

// One cell of the counterbalanced 2x2 design. Group A carries true label 0
// and group B true label 1 under the identity assignment.
struct ConditionSpec {
  int index = 1;  // 1..4 for (i)..(iv)
  LabelAssignment assignment = LabelAssignment::Identity;
  int imitate_label = 0;
  SentenceGroup imitated_group = SentenceGroup::A;
  std::vector<std::string> group_a;
  std::vector<std::string> group_b;

  std::string_view roman() const;
  // 1 when the imitated group is the high-score group B.
  int imitated_side() const { return imitated_group == SentenceGroup::B ? 1 : 0; }
};

// The four (assignment, imitate) cells without sentence groups attached.
std::array<ConditionSpec, 4> counterbalanced_conditions();

std::array<ConditionSpec, 4> counterbalance(const std::vector<std::string>& group_a,
                                            const std::vector<std::string>& group_b);

struct ParsedTranscript {
  std::vector<std::pair<std::string, int>> examples;  // (sentence, shown label)
  std::optional<std::string> query_sentence;          // report prompts
  std::optional<int> imitate_label;                   // control prompts
  std::optional<std::string> final_sentence;          // implicit / generated reply
};

// Recovers the example pairs and task inputs from a rendered transcript.
ParsedTranscript parse_transcript(const ChatTranscript& transcript);

// Orders examples so that labels alternate as far as counts allow; each label
// group is shuffled with the given seed and the starting label is seeded too.
std::vector<std::size_t> balanced_interleave(const std::vector<int>& labels, std::uint64_t seed);

// One line per message, "<System>text", "<User>text", "<Assistant>text".
std::string render_plain(const ChatTranscript& transcript);

std::string to_json(const ChatTranscript& transcript);
ChatTranscript transcript_from_json(std::string_view text);

}  // namespace nfb
