#pragma once

// Shared JSON conversions for types that appear nested in several documents
// (axes files, protocol bodies, trial records).

#include "json.hpp"
#include "nfb/error.hpp"
#include "nfb/prompting.hpp"

namespace nfb::detail {

using ojson = nlohmann::ordered_json;
using json = nlohmann::json;

ojson transcript_to_json(const ChatTranscript& t);
ChatTranscript transcript_from_json(const json& j);

json parse_json(std::string_view text, std::string_view what);

// Compact dump; invalid UTF-8 is replaced rather than thrown on.
inline std::string dump(const ojson& j) {
  return j.dump(-1, ' ', false, nlohmann::ordered_json::error_handler_t::replace);
}

}  // namespace nfb::detail
