#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace nfb {

// Every failure the harness reports carries one of these codes. The names are
// part of the wire protocol (error bodies) and of the CLI exit-code mapping.
enum class ErrorCode {
  EmptySpan,
  DimensionMismatch,
  BadRank,
  DegenerateData,
  SingleClass,
  EmptyInput,
  OneSidedData,
  ModeMismatch,
  EmptyGroup,
  BadLayer,
  BadToken,
  BadParams,
  BackendUnavailable,
  ScriptExhausted,
  BadLogits,
  TooFewSamples,
  DegenerateVariance,
  DegenerateDenominator,
  ConfigTooLarge,
  IncompleteActivations,
  BadFormat,
  BadConfig,
};

std::string_view to_string(ErrorCode code);
ErrorCode error_code_from_string(std::string_view name);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // Transport-level failures may be retried; everything else is deterministic.
  bool retriable() const noexcept { return code_ == ErrorCode::BackendUnavailable; }

 private:
  ErrorCode code_;
};

}  // namespace nfb
