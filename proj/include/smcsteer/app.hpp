#pragma once

// Run configuration and the work behind the command-line tool: building
// backends and models from JSON specs, running SMC into output documents,
// and formulation comparisons.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "smcsteer/backend.hpp"
#include "smcsteer/smc.hpp"
#include "smcsteer/zoo.hpp"

namespace smcsteer::app {

using nlohmann::json;

/// Bad configuration. `where` is a field path ("model.constraint.kind") or a
/// "line L, column C" position for syntax errors.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string where, const std::string& what)
      : std::runtime_error(where.empty() ? what : where + ": " + what), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitPosteriorUnreachable = 3,
  kExitStepCap = 4,
};

struct RunConfig {
  json model = json::object();
  json backend = json::object();
  std::size_t particles = 4;
  std::size_t factor = 3;
  std::uint64_t seed = 0;
  int max_steps = 256;
  std::size_t threads = 1;
  bool cache = true;
  std::string out;

  /// Rejects unknown fields and wrongly typed values.
  static RunConfig from_json(const json& doc);
  json to_json() const;
  SmcConfig smc() const;
};

/// Parses JSON text; syntax errors carry line and column.
json parse_json_text(const std::string& text, const std::string& source);
json load_json_file(const std::string& path);

Vocab build_vocab(const json& spec, const std::string& where);
std::shared_ptr<const LogitsBackend> build_backend(const json& spec);
zoo::ModelPtr build_model(const json& spec, const Vocab& vocab);

struct RunOutput {
  std::string particles_jsonl;
  std::string summary_json;
  int exit_code = kExitOk;
  std::string message;
  SmcResult result;
};

/// Runs the configured model. Errors after configuration (unreachable
/// posterior, step cap) still produce outputs, with a status in the summary.
/// Wall time is reported only when `timing` is set, so that outputs are
/// otherwise byte-identical across runs.
RunOutput execute_run(const RunConfig& cfg, bool timing = false);

struct CompareRow {
  std::size_t n = 0;
  double mean_a = 0.0, se_a = 0.0;
  double mean_b = 0.0, se_b = 0.0;
  /// "A", "B", or "tie" (difference within 2 SE).
  std::string better;
};

struct CompareOptions {
  std::vector<std::size_t> ns{1, 2, 4, 8, 16, 32};
  std::size_t runs = 100;
  std::size_t factor = 3;
  std::uint64_t seed = 0;
  int max_steps = 256;
  std::size_t threads = 1;
};

/// Mean log Z-hat (and SE) per N for two models over the same backend. When
/// the vocabulary is small enough to enumerate, first checks that the models
/// share a posterior and throws ConfigError if not.
std::vector<CompareRow> compare_models(const FkModel& a, const FkModel& b, const LogitsBackend& backend,
                                       const CompareOptions& opts);
std::string format_compare_table(const std::vector<CompareRow>& rows);

/// Formats a double for reports; infinities become "inf" / "-inf".
std::string fmt(double x, int precision = 6);

}  // namespace smcsteer::app
