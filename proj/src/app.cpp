#include "smcsteer/app.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include "smcsteer/cache.hpp"
#include "smcsteer/oracle.hpp"

namespace smcsteer::app {

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where, "expected an object");
}

void check_keys(const json& obj, const std::string& where, std::initializer_list<const char*> allowed) {
  require_object(obj, where);
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : obj.items())
    if (!ok.count(key)) throw ConfigError(join(where, key), "unknown field");
}

template <class T>
T get(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key)) throw ConfigError(join(where, key), "missing required field");
  try {
    return obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(join(where, key), std::string("wrong type (") + obj.at(key).type_name() + ")");
  }
}

template <class T>
T get_or(const json& obj, const char* key, const std::string& where, T fallback) {
  return obj.contains(key) ? get<T>(obj, key, where) : fallback;
}

std::size_t get_count(const json& obj, const char* key, const std::string& where, std::size_t fallback, std::size_t min) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer() || v.get<long long>() < static_cast<long long>(min))
    throw ConfigError(join(where, key), "expected an integer >= " + std::to_string(min));
  return v.get<std::size_t>();
}

std::string read_file(const std::string& path, const std::string& where) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(where, "cannot read file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// A string (one token per character) or an array of token labels.
Seq build_seq(const json& spec, const Vocab& vocab, const std::string& where) {
  try {
    if (spec.is_string()) return Seq::from_text(vocab, spec.get<std::string>());
    if (spec.is_array()) {
      std::vector<std::string> labels;
      for (const auto& l : spec) {
        if (!l.is_string()) throw ConfigError(where, "token labels must be strings");
        labels.push_back(l.get<std::string>());
      }
      return Seq::from_labels(vocab, labels);
    }
  } catch (const std::out_of_range& e) {
    throw ConfigError(where, e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where, e.what());
  }
  throw ConfigError(where, "expected a string or an array of token labels");
}

zoo::PrefixConstraint build_constraint(const json& spec, const Vocab& vocab, const std::string& where) {
  require_object(spec, where);
  const auto kind = get<std::string>(spec, "kind", where);
  try {
    if (kind == "none") {
      check_keys(spec, where, {"kind"});
      return zoo::PrefixConstraint::none(vocab);
    }
    if (kind == "forbid") {
      check_keys(spec, where, {"kind", "tokens"});
      std::set<TokenId> ids;
      for (const auto& l : get<std::vector<std::string>>(spec, "tokens", where)) {
        if (!vocab.contains(l)) throw ConfigError(join(where, "tokens"), "unknown token '" + l + "'");
        ids.insert(vocab.id(l));
      }
      return zoo::PrefixConstraint::forbid_tokens(vocab, std::move(ids));
    }
    if (kind == "max-word-length") {
      check_keys(spec, where, {"kind", "max", "separator"});
      return zoo::PrefixConstraint::max_word_length(vocab, get<int>(spec, "max", where),
                                                    get_or<std::string>(spec, "separator", where, " "));
    }
    if (kind == "dfa") {
      check_keys(spec, where, {"kind", "states", "start", "accepting", "transitions"});
      zoo::Dfa dfa;
      const auto n_states = get<int>(spec, "states", where);
      if (n_states < 1) throw ConfigError(join(where, "states"), "expected at least one state");
      dfa.transitions.resize(static_cast<std::size_t>(n_states));
      dfa.start = get<int>(spec, "start", where);
      for (int a : get<std::vector<int>>(spec, "accepting", where)) dfa.accepting.insert(a);
      const std::string twhere = join(where, "transitions");
      const json& ts = spec.at("transitions");
      if (!ts.is_array()) throw ConfigError(twhere, "expected an array of [from, token, to]");
      for (std::size_t i = 0; i < ts.size(); ++i) {
        const std::string w = twhere + "[" + std::to_string(i) + "]";
        const json& t = ts[i];
        if (!t.is_array() || t.size() != 3 || !t[0].is_number_integer() || !t[1].is_string() || !t[2].is_number_integer())
          throw ConfigError(w, "expected [from, token, to]");
        const int from = t[0].get<int>(), to = t[2].get<int>();
        if (from < 0 || from >= n_states || to < 0 || to >= n_states) throw ConfigError(w, "state out of range");
        const auto label = t[1].get<std::string>();
        if (!vocab.contains(label)) throw ConfigError(w, "unknown token '" + label + "'");
        dfa.transitions[static_cast<std::size_t>(from)][vocab.id(label)] = to;
      }
      return zoo::PrefixConstraint::regular(vocab, std::move(dfa));
    }
  } catch (const zoo::NotPrefixClosed& e) {
    throw ConfigError(where, e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where, e.what());
  }
  throw ConfigError(join(where, "kind"), "unknown constraint kind '" + kind + "'");
}

bool use_program(const json& spec, const std::string& where) {
  const auto f = get_or<std::string>(spec, "formulation", where, "hand");
  if (f == "hand") return false;
  if (f == "program") return true;
  throw ConfigError(join(where, "formulation"), "expected \"hand\" or \"program\"");
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig RunConfig::from_json(const json& doc) {
  check_keys(doc, "", {"model", "backend", "particles", "factor", "seed", "max_steps", "threads", "cache", "out"});
  RunConfig c;
  if (doc.contains("model")) {
    require_object(doc.at("model"), "model");
    c.model = doc.at("model");
  }
  if (doc.contains("backend")) {
    require_object(doc.at("backend"), "backend");
    c.backend = doc.at("backend");
  }
  c.particles = get_count(doc, "particles", "", c.particles, 1);
  c.factor = get_count(doc, "factor", "", c.factor, 1);
  c.seed = get_count(doc, "seed", "", c.seed, 0);
  c.max_steps = static_cast<int>(get_count(doc, "max_steps", "", static_cast<std::size_t>(c.max_steps), 1));
  c.threads = get_count(doc, "threads", "", c.threads, 1);
  c.cache = get_or<bool>(doc, "cache", "", c.cache);
  c.out = get_or<std::string>(doc, "out", "", c.out);
  return c;
}

json RunConfig::to_json() const {
  return json{{"model", model},       {"backend", backend}, {"particles", particles}, {"factor", factor},
              {"seed", seed},         {"max_steps", max_steps}, {"threads", threads}, {"cache", cache},
              {"out", out}};
}

SmcConfig RunConfig::smc() const {
  SmcConfig s;
  s.n_particles = particles;
  s.expansion_factor = factor;
  s.seed = seed;
  s.max_steps = max_steps;
  s.threads = threads;
  s.cache_mode = cache ? CacheMode::kEnabled : CacheMode::kDisabled;
  return s;
}

json parse_json_text(const std::string& text, const std::string& source) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    // Translate the byte offset into a line and column.
    std::size_t line = 1, col = 1;
    const std::size_t end = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    for (std::size_t i = 0; i < end; ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(source + ": line " + std::to_string(line) + ", column " + std::to_string(col), "JSON syntax error");
  }
}

json load_json_file(const std::string& path) { return parse_json_text(read_file(path, path), path); }

Vocab build_vocab(const json& spec, const std::string& where) {
  check_keys(spec, where, {"chars", "tokens", "eos"});
  const auto eos = get_or<std::string>(spec, "eos", where, "<eos>");
  try {
    if (spec.contains("chars") == spec.contains("tokens")) throw ConfigError(where, "give exactly one of chars or tokens");
    if (spec.contains("chars")) return Vocab::from_characters(get<std::string>(spec, "chars", where), eos);
    return Vocab(get<std::vector<std::string>>(spec, "tokens", where), eos);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(where, e.what());
  }
}

std::shared_ptr<const LogitsBackend> build_backend(const json& spec) {
  const std::string where = "backend";
  require_object(spec, where);
  const auto kind = get<std::string>(spec, "kind", where);
  if (kind == "uniform") {
    check_keys(spec, where, {"kind", "vocab"});
    return std::make_shared<UniformBackend>(build_vocab(get<json>(spec, "vocab", where), join(where, "vocab")));
  }
  if (kind == "table") {
    check_keys(spec, where, {"kind", "vocab", "rows", "default"});
    Vocab vocab = build_vocab(get<json>(spec, "vocab", where), join(where, "vocab"));
    std::map<std::vector<TokenId>, std::vector<double>> rows;
    const json rs = get_or<json>(spec, "rows", where, json::array());
    if (!rs.is_array()) throw ConfigError(join(where, "rows"), "expected an array");
    for (std::size_t i = 0; i < rs.size(); ++i) {
      const std::string w = join(where, "rows") + "[" + std::to_string(i) + "]";
      check_keys(rs[i], w, {"context", "probs"});
      const Seq ctx = build_seq(get<json>(rs[i], "context", w), vocab, join(w, "context"));
      auto ids = std::vector<TokenId>(ctx.ids().begin(), ctx.ids().end());
      rows[ids] = get<std::vector<double>>(rs[i], "probs", w);
    }
    std::optional<std::vector<double>> def;
    if (spec.contains("default")) def = get<std::vector<double>>(spec, "default", where);
    try {
      return std::make_shared<TableBackend>(TableBackend::from_probabilities(std::move(vocab), rows, def));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where, e.what());
    }
  }
  if (kind == "ngram") {
    check_keys(spec, where, {"kind", "path", "corpus", "order", "alpha", "eos"});
    try {
      if (spec.contains("path")) {
        const auto path = get<std::string>(spec, "path", where);
        return std::make_shared<NGramBackend>(NGramBackend::from_json(load_json_file(path)));
      }
      const auto corpus = read_file(get<std::string>(spec, "corpus", where), join(where, "corpus"));
      return std::make_shared<NGramBackend>(train_ngram(corpus, get_or<int>(spec, "order", where, 3),
                                                        get_or<double>(spec, "alpha", where, 0.1),
                                                        get_or<std::string>(spec, "eos", where, "<eos>")));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where, e.what());
    } catch (const BackendError& e) {
      throw ConfigError(where, e.what());
    }
  }
  if (kind == "remote") {
    check_keys(spec, where, {"kind", "vocab", "endpoint", "timeout_ms"});
    Vocab vocab = build_vocab(get<json>(spec, "vocab", where), join(where, "vocab"));
    std::string endpoint = get_or<std::string>(spec, "endpoint", where, "");
    if (endpoint.empty()) {
      const char* env = std::getenv(kRemoteEndpointEnv);
      if (env == nullptr || *env == '\0')
        throw ConfigError(join(where, "endpoint"), std::string("no endpoint given and ") + kRemoteEndpointEnv + " is unset");
      endpoint = env;
    }
    const auto timeout = get_count(spec, "timeout_ms", where, 10000, 1);
    try {
      return std::make_shared<RemoteBackend>(std::move(vocab), endpoint, std::chrono::milliseconds(timeout));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(join(where, "endpoint"), e.what());
    }
  }
  throw ConfigError(join(where, "kind"), "unknown backend kind '" + kind + "'");
}

zoo::ModelPtr build_model(const json& spec, const Vocab& vocab) {
  const std::string where = "model";
  require_object(spec, where);
  const auto kind = get<std::string>(spec, "kind", where);
  if (kind == "hard-constraint") {
    check_keys(spec, where, {"kind", "variant", "prompt", "constraint", "formulation"});
    const auto variant = get_or<std::string>(spec, "variant", where, "plain");
    if (variant != "plain" && variant != "masked") throw ConfigError(join(where, "variant"), "expected \"plain\" or \"masked\"");
    const bool masked = variant == "masked";
    Seq prompt = build_seq(get_or<json>(spec, "prompt", where, ""), vocab, join(where, "prompt"));
    if (prompt.terminated()) throw ConfigError(join(where, "prompt"), "prompt must not end in EOS");
    auto c = build_constraint(get<json>(spec, "constraint", where), vocab, join(where, "constraint"));
    if (use_program(spec, where)) return ppl::compile_program(zoo::hard_constraint_program(std::move(prompt), std::move(c), masked));
    return masked ? zoo::hard_constraint_masked(std::move(prompt), std::move(c))
                  : zoo::hard_constraint_plain(std::move(prompt), std::move(c));
  }
  if (kind == "infill") {
    check_keys(spec, where, {"kind", "fragments", "p", "length_correction", "formulation"});
    const json frags = get<json>(spec, "fragments", where);
    if (!frags.is_array() || frags.size() < 2) throw ConfigError(join(where, "fragments"), "expected at least two fragments");
    zoo::InfillTemplate tmpl;
    tmpl.p = get_or<double>(spec, "p", where, 0.5);
    for (std::size_t i = 0; i < frags.size(); ++i) {
      const std::string w = join(where, "fragments") + "[" + std::to_string(i) + "]";
      Seq s = build_seq(frags[i], vocab, w);
      if (std::find(s.ids().begin(), s.ids().end(), vocab.eos()) != s.ids().end())
        throw ConfigError(w, "fragments must not contain EOS; it is appended to the last one");
      if (i + 1 == frags.size()) s = s.appended(vocab.eos());
      tmpl.fragments.push_back(std::move(s));
    }
    const bool corr = get_or<bool>(spec, "length_correction", where, true);
    try {
      tmpl.validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(where, e.what());
    }
    if (use_program(spec, where)) {
      const double tail = corr && tmpl.fragments.size() > 2 ? std::numeric_limits<double>::infinity() : 1.0;
      return ppl::compile_program(zoo::infill_program(std::move(tmpl), corr), tail);
    }
    return zoo::infill(std::move(tmpl), corr);
  }
  if (kind == "intersect") {
    check_keys(spec, where, {"kind", "prompts", "locally_optimal", "formulation"});
    const json ps = get<json>(spec, "prompts", where);
    if (!ps.is_array() || ps.empty()) throw ConfigError(join(where, "prompts"), "expected a non-empty array of prompts");
    std::vector<Seq> prompts;
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const std::string w = join(where, "prompts") + "[" + std::to_string(i) + "]";
      prompts.push_back(build_seq(ps[i], vocab, w));
      if (prompts.back().terminated()) throw ConfigError(w, "prompt must not end in EOS");
    }
    const bool lo = get_or<bool>(spec, "locally_optimal", where, false);
    if (use_program(spec, where)) return ppl::compile_program(zoo::intersect_program(std::move(prompts), lo));
    return zoo::intersect(std::move(prompts), lo);
  }
  throw ConfigError(join(where, "kind"), "unknown model kind '" + kind + "'");
}

// ---------------------------------------------------------------------------

std::string fmt(double x, int precision) {
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  if (std::isnan(x)) return "nan";
  std::ostringstream ss;
  ss << std::setprecision(precision) << x;
  return ss.str();
}

namespace {

json weight_json(double log_w) { return std::isfinite(log_w) ? json(log_w) : json(nullptr); }

void write_outputs(RunOutput& out, const RunConfig& cfg, const Vocab& vocab, const SmcResult& r, const std::string& status,
                   std::optional<double> wall) {
  std::string lines;
  for (std::size_t i = 0; i < r.particles.size(); ++i) {
    const auto& p = r.particles[i];
    json rec{{"index", i},
             {"labels", p.state.seq.labels(vocab)},
             {"ids", std::vector<TokenId>(p.state.seq.ids().begin(), p.state.seq.ids().end())},
             {"log_weight", weight_json(p.log_weight)}};
    lines += rec.dump() + "\n";
  }
  // The thread count cannot change results, so it is left out of the echo to
  // keep outputs byte-identical across thread counts.
  json echo = cfg.to_json();
  echo.erase("threads");
  json summary{{"status", status},
               {"log_zhat", weight_json(r.log_zhat)},
               {"zhat", std::exp(r.log_zhat)},
               {"steps", r.steps_taken},
               {"particles", r.particles.size()},
               {"cache",
                {{"hits", r.cache_stats.hits},
                 {"misses", r.cache_stats.misses},
                 {"backend_evals", r.cache_stats.backend_evals},
                 {"nodes", r.cache_stats.nodes}}},
               {"config", echo}};
  if (wall) summary["wall_time_s"] = *wall;
  out.particles_jsonl = std::move(lines);
  out.summary_json = summary.dump(2) + "\n";
  out.result = r;
}

}  // namespace

RunOutput execute_run(const RunConfig& cfg, bool timing) {
  RunOutput out;
  if (cfg.model.empty()) throw ConfigError("model", "missing model spec");
  if (cfg.backend.empty()) throw ConfigError("backend", "missing backend spec");
  const auto backend = build_backend(cfg.backend);
  const auto model = build_model(cfg.model, backend->vocab());
  const SmcConfig smc = cfg.smc();

  const auto start = std::chrono::steady_clock::now();
  auto elapsed = [&]() -> std::optional<double> {
    if (!timing) return std::nullopt;
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };
  try {
    const SmcResult r = smc_run(*model, smc, *backend);
    write_outputs(out, cfg, backend->vocab(), r, "ok", elapsed());
  } catch (const PosteriorUnreachable& e) {
    write_outputs(out, cfg, backend->vocab(), e.partial(), "posterior-unreachable", elapsed());
    out.exit_code = kExitPosteriorUnreachable;
    out.message = e.what();
  } catch (const StepCapExceeded& e) {
    write_outputs(out, cfg, backend->vocab(), e.partial(), "step-cap-exceeded", elapsed());
    out.exit_code = kExitStepCap;
    out.message = e.what();
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<CompareRow> compare_models(const FkModel& a, const FkModel& b, const LogitsBackend& backend,
                                       const CompareOptions& opts) {
  if (backend.vocab().size() <= 5 && a.enumerable() && b.enumerable()) {
    oracle::EnumerationLimits lim;
    lim.length_cap = 8;
    TrieCache ca(backend), cb(backend);
    const auto pa = oracle::enumerate_posterior(a, ca, lim);
    const auto pb = oracle::enumerate_posterior(b, cb, lim);
    if (pa.null_posterior() != pb.null_posterior() ||
        (!pa.null_posterior() && oracle::tv_distance(pa.normalized(), pb.normalized()) > 1e-6))
      throw ConfigError("", "the two models do not target the same posterior");
  }
  std::vector<CompareRow> rows;
  for (std::size_t n : opts.ns) {
    SmcConfig cfg;
    cfg.n_particles = n;
    cfg.expansion_factor = opts.factor;
    cfg.seed = opts.seed;
    cfg.max_steps = opts.max_steps;
    auto stats = [&](const FkModel& m) {
      const auto results = oracle::run_seeds(m, backend, cfg, opts.runs, opts.threads);
      std::vector<double> logs;
      for (const auto& r : results) logs.push_back(r.log_zhat);
      return oracle::mean_se(logs);
    };
    const auto sa = stats(a);
    const auto sb = stats(b);
    CompareRow row{n, sa.mean, sa.se, sb.mean, sb.se, "tie"};
    const double se = std::sqrt(sa.se * sa.se + sb.se * sb.se);
    if (sa.mean == sb.mean) {
      row.better = "tie";
    } else if (!std::isfinite(sa.mean) || !std::isfinite(sb.mean)) {
      row.better = sa.mean > sb.mean ? "A" : "B";
    } else if (std::abs(sa.mean - sb.mean) > 2.0 * se) {
      row.better = sa.mean > sb.mean ? "A" : "B";
    }
    rows.push_back(row);
  }
  return rows;
}

std::string format_compare_table(const std::vector<CompareRow>& rows) {
  std::string out = "n\tmean_log_zhat_a\tse_a\tmean_log_zhat_b\tse_b\tbetter\n";
  for (const auto& r : rows)
    out += std::to_string(r.n) + "\t" + fmt(r.mean_a) + "\t" + fmt(r.se_a) + "\t" + fmt(r.mean_b) + "\t" + fmt(r.se_b) +
           "\t" + r.better + "\n";
  return out;
}

}  // namespace smcsteer::app
