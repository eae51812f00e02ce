#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mimo/config.hpp"

namespace mimo {

struct PropertyResult {
  std::string suite;
  std::string name;
  bool passed = false;
  std::string detail;
};

struct VerifyOptions {
  ModelConfig config;  // toy model used by the model-level oracles
  std::uint64_t seed = 0;
  std::vector<std::string> only;  // suite names; empty runs all
  std::size_t trials = 8;
  // Test fixture: checks run against a sink softmax that leaves the sink term
  // out of the denominator.
  bool inject_sink_normalization_bug = false;
};

std::vector<std::string> suite_names();

/// Throws std::invalid_argument for an unknown suite name in `only`.
std::vector<PropertyResult> run_verify_suite(const VerifyOptions& options);

std::string format_results(const std::vector<PropertyResult>& results);

}  // namespace mimo
