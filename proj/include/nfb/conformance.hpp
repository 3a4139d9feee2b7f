#pragma once

#include <string>
#include <vector>

#include "nfb/backend.hpp"

namespace nfb {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Exercises a backend against the wire-protocol invariants: metadata, request
// and response round-trip byte stability, layer/width coverage, span
// coverage, determinism, logits, greedy generation, stop sequences and the
// structured error codes. Works on any Backend, HTTP or in-process.
std::vector<CheckResult> run_conformance(Backend& backend);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace nfb
