// Acceptance criteria 1-10, one PASS/FAIL line each.

#include <cstdio>
#include <thread>

#include "smcsteer/suites.hpp"

int main() {
  smcsteer::suites::SuiteOptions opts;
  opts.threads = std::max(1u, std::thread::hardware_concurrency());
  bool all = true;
  for (const auto& name : smcsteer::suites::suite_names()) {
    const auto r = smcsteer::suites::run_suite(name, opts);
    for (const auto& c : r.checks)
      std::printf("    [%s] %s%s%s\n", c.pass ? "ok" : "FAIL", c.name.c_str(), c.detail.empty() ? "" : ": ", c.detail.c_str());
    std::printf("%s criterion %d: %s (%.1f s)\n", r.pass() ? "PASS" : "FAIL", r.criterion, r.title.c_str(), r.seconds);
    std::fflush(stdout);
    all = all && r.pass();
  }
  return all ? 0 : 1;
}
