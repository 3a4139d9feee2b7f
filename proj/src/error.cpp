#include "nfb/error.hpp"

#include <array>
#include <utility>

namespace nfb {

namespace {

constexpr std::array<std::pair<ErrorCode, std::string_view>, 22> kNames{{
    {ErrorCode::EmptySpan, "EmptySpan"},
    {ErrorCode::DimensionMismatch, "DimensionMismatch"},
    {ErrorCode::BadRank, "BadRank"},
    {ErrorCode::DegenerateData, "DegenerateData"},
    {ErrorCode::SingleClass, "SingleClass"},
    {ErrorCode::EmptyInput, "EmptyInput"},
    {ErrorCode::OneSidedData, "OneSidedData"},
    {ErrorCode::ModeMismatch, "ModeMismatch"},
    {ErrorCode::EmptyGroup, "EmptyGroup"},
    {ErrorCode::BadLayer, "BadLayer"},
    {ErrorCode::BadToken, "BadToken"},
    {ErrorCode::BadParams, "BadParams"},
    {ErrorCode::BackendUnavailable, "BackendUnavailable"},
    {ErrorCode::ScriptExhausted, "ScriptExhausted"},
    {ErrorCode::BadLogits, "BadLogits"},
    {ErrorCode::TooFewSamples, "TooFewSamples"},
    {ErrorCode::DegenerateVariance, "DegenerateVariance"},
    {ErrorCode::DegenerateDenominator, "DegenerateDenominator"},
    {ErrorCode::ConfigTooLarge, "ConfigTooLarge"},
    {ErrorCode::IncompleteActivations, "IncompleteActivations"},
    {ErrorCode::BadFormat, "BadFormat"},
    {ErrorCode::BadConfig, "BadConfig"},
}};

}  // namespace

std::string_view to_string(ErrorCode code) {
  for (const auto& [c, name] : kNames) {
    if (c == code) return name;
  }
  return "Unknown";
}

ErrorCode error_code_from_string(std::string_view name) {
  for (const auto& [c, n] : kNames) {
    if (n == name) return c;
  }
  throw Error(ErrorCode::BadFormat, "unknown error code '" + std::string(name) + "'");
}

}  // namespace nfb
