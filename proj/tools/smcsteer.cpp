#include <cstdio>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "smcsteer/app.hpp"
#include "smcsteer/backend.hpp"
#include "smcsteer/suites.hpp"

using namespace smcsteer;
using app::json;

namespace {

// Inline JSON when it looks like an object, otherwise a path to a JSON file.
json spec_arg(const std::string& arg, const std::string& what) {
  if (!arg.empty() && arg.front() == '{') return app::parse_json_text(arg, what);
  return app::load_json_file(arg);
}

void write_file(const std::string& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  out << data;
}

struct RunArgs {
  std::string config, model, backend, out;
  std::optional<std::size_t> particles, factor, threads;
  std::optional<std::uint64_t> seed;
  std::optional<int> max_steps;
  bool no_cache = false;
  bool timing = false;
};

int cmd_run(const RunArgs& a) {
  json doc = a.config.empty() ? json::object() : app::load_json_file(a.config);
  app::RunConfig cfg = app::RunConfig::from_json(doc);
  // Flags given on the command line win over the file.
  if (!a.model.empty()) cfg.model = spec_arg(a.model, "--model");
  if (!a.backend.empty()) cfg.backend = spec_arg(a.backend, "--backend");
  if (a.particles) cfg.particles = *a.particles;
  if (a.factor) cfg.factor = *a.factor;
  if (a.seed) cfg.seed = *a.seed;
  if (a.max_steps) cfg.max_steps = *a.max_steps;
  if (a.threads) cfg.threads = *a.threads;
  if (a.no_cache) cfg.cache = false;
  if (!a.out.empty()) cfg.out = a.out;
  cfg = app::RunConfig::from_json(cfg.to_json());

  const auto result = app::execute_run(cfg, a.timing);
  if (cfg.out.empty()) {
    std::cout << result.particles_jsonl << result.summary_json;
  } else {
    write_file(cfg.out + ".particles.jsonl", result.particles_jsonl);
    write_file(cfg.out + ".summary.json", result.summary_json);
  }
  if (!result.message.empty()) std::cerr << "smcsteer: " << result.message << "\n";
  return result.exit_code;
}

int cmd_validate(const std::string& suite, std::size_t threads, const std::string& report) {
  suites::SuiteOptions opts;
  opts.threads = threads;
  const auto names = suites::suite_names();
  if (suite != "all" && std::find(names.begin(), names.end(), suite) == names.end())
    throw app::ConfigError("--suite", "unknown suite '" + suite + "'");
  std::vector<suites::SuiteResult> results;
  const std::vector<std::string> todo = suite == "all" ? names : std::vector<std::string>{suite};
  for (const auto& name : todo) {
    results.push_back(suites::run_suite(name, opts));
    const auto& r = results.back();
    for (const auto& c : r.checks)
      std::cerr << "  [" << (c.pass ? "ok" : "FAIL") << "] " << c.name << (c.detail.empty() ? "" : ": " + c.detail) << "\n";
    std::cerr << (r.pass() ? "PASS " : "FAIL ") << r.suite << " (" << app::fmt(r.seconds, 3) << " s)\n";
  }
  const json doc = suites::to_json(results);
  if (report.empty()) {
    std::cout << doc.dump(2) << "\n";
  } else {
    write_file(report, doc.dump(2) + "\n");
  }
  return doc.at("pass").get<bool>() ? app::kExitOk : app::kExitFailure;
}

int cmd_compare(const std::vector<std::string>& models, const std::string& backend_arg, const app::CompareOptions& opts) {
  if (models.size() != 2) throw app::ConfigError("--model", "compare needs exactly two --model specs");
  const auto backend = app::build_backend(spec_arg(backend_arg, "--backend"));
  const auto a = app::build_model(spec_arg(models[0], "--model"), backend->vocab());
  const auto b = app::build_model(spec_arg(models[1], "--model"), backend->vocab());
  std::cout << app::format_compare_table(app::compare_models(*a, *b, *backend, opts));
  return app::kExitOk;
}

int cmd_train(const std::string& corpus_path, int order, double alpha, const std::string& eos, const std::string& out) {
  std::ifstream in(corpus_path, std::ios::binary);
  if (!in) throw app::ConfigError("--corpus", "cannot read '" + corpus_path + "'");
  const std::string corpus((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  NGramBackend model = [&] {
    try {
      return train_ngram(corpus, order, alpha, eos);
    } catch (const std::invalid_argument& e) {
      throw app::ConfigError("train-ngram", e.what());
    }
  }();
  write_file(out, model.to_json().dump() + "\n");
  std::cerr << "wrote " << out << ": order " << order << ", vocab " << model.vocab().size() << "\n";
  return app::kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"SMC steering for constrained generation from token models"};
  cli.require_subcommand(1);

  RunArgs run;
  auto* run_cmd = cli.add_subcommand("run", "run SMC steering for one configured model");
  run_cmd->add_option("-c,--config", run.config, "JSON run configuration");
  run_cmd->add_option("--model", run.model, "model spec (inline JSON or file)");
  run_cmd->add_option("--backend", run.backend, "backend spec (inline JSON or file)");
  run_cmd->add_option("-n,--particles", run.particles, "number of particles N")->check(CLI::PositiveNumber);
  run_cmd->add_option("-k,--factor", run.factor, "expansion factor K")->check(CLI::PositiveNumber);
  run_cmd->add_option("--seed", run.seed, "random seed");
  run_cmd->add_option("--max-steps", run.max_steps, "step cap")->check(CLI::PositiveNumber);
  run_cmd->add_option("--threads", run.threads, "worker threads")->check(CLI::PositiveNumber);
  run_cmd->add_flag("--no-cache", run.no_cache, "evaluate the backend on every query");
  run_cmd->add_option("--out", run.out, "output prefix (writes PREFIX.particles.jsonl and PREFIX.summary.json)");
  run_cmd->add_flag("--timing", run.timing, "add wall time to the summary");

  std::string suite = "all", report;
  std::size_t vthreads = 1;
  auto* val_cmd = cli.add_subcommand("validate", "run validation suites against the exact oracle");
  val_cmd->add_option("--suite", suite, "suite name or 'all'");
  val_cmd->add_option("--threads", vthreads, "worker threads for many-seed harnesses")->check(CLI::PositiveNumber);
  val_cmd->add_option("--report", report, "write the JSON report here instead of stdout");

  std::vector<std::string> cmp_models;
  std::string cmp_backend;
  app::CompareOptions cmp;
  auto* cmp_cmd = cli.add_subcommand("compare", "mean log Z-hat per N for two formulations");
  cmp_cmd->add_option("--model", cmp_models, "model spec, given twice (A then B)")->required();
  cmp_cmd->add_option("--backend", cmp_backend, "backend spec")->required();
  cmp_cmd->add_option("--n", cmp.ns, "particle counts")->delimiter(',');
  cmp_cmd->add_option("--runs", cmp.runs, "runs per N")->check(CLI::PositiveNumber);
  cmp_cmd->add_option("-k,--factor", cmp.factor, "expansion factor K")->check(CLI::PositiveNumber);
  cmp_cmd->add_option("--seed", cmp.seed, "first seed");
  cmp_cmd->add_option("--max-steps", cmp.max_steps, "step cap")->check(CLI::PositiveNumber);
  cmp_cmd->add_option("--threads", cmp.threads, "worker threads")->check(CLI::PositiveNumber);

  std::string corpus, train_out, eos = "<eos>";
  int order = 3;
  double alpha = 0.1;
  auto* train_cmd = cli.add_subcommand("train-ngram", "train a smoothed character n-gram backend");
  train_cmd->add_option("--corpus", corpus, "text file, one example per line")->required();
  train_cmd->add_option("--order", order, "n-gram order")->check(CLI::PositiveNumber);
  train_cmd->add_option("--alpha", alpha, "additive smoothing")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--eos", eos, "EOS label");
  train_cmd->add_option("--out", train_out, "output JSON model")->required();

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? app::kExitOk : app::kExitConfig;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*val_cmd) return cmd_validate(suite, vthreads, report);
    if (*cmp_cmd) return cmd_compare(cmp_models, cmp_backend, cmp);
    if (*train_cmd) return cmd_train(corpus, order, alpha, eos, train_out);
  } catch (const app::ConfigError& e) {
    std::cerr << "smcsteer: config error: " << e.what() << "\n";
    return app::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "smcsteer: " << e.what() << "\n";
    return app::kExitFailure;
  }
  return app::kExitFailure;
}
