#pragma once

// Validation suites. Each one checks a single acceptance criterion against
// the oracle and reports the individual checks it ran.

#include <string>
#include <vector>

#include "json.hpp"

namespace smcsteer::suites {

struct Check {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteResult {
  int criterion = 0;
  std::string suite;
  std::string title;
  std::vector<Check> checks;
  double seconds = 0.0;

  bool pass() const;
};

struct SuiteOptions {
  /// Worker threads for the many-seed harnesses. Results do not depend on it.
  std::size_t threads = 1;
};

/// Suite names in criterion order (exact-recovery is 1, determinism is 10).
const std::vector<std::string>& suite_names();

/// Runs one suite by name. Throws std::invalid_argument for unknown names.
SuiteResult run_suite(const std::string& name, const SuiteOptions& opts = {});

/// Runs `name`, or every suite for "all".
std::vector<SuiteResult> run_suites(const std::string& name, const SuiteOptions& opts = {});

nlohmann::json to_json(const std::vector<SuiteResult>& results);

}  // namespace smcsteer::suites
