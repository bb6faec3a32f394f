#include "smcsteer/backend.hpp"

#include <set>
#include <sstream>

#include "httplib.h"

namespace smcsteer {

std::vector<double> softmax_logprobs(std::span<const double> logits) {
  if (logits.empty()) throw ContractViolation("softmax of an empty vector");
  double m = kNegInf;
  for (double x : logits) {
    if (std::isnan(x) || x == std::numeric_limits<double>::infinity())
      throw ContractViolation("softmax input must be finite or -inf");
    m = std::max(m, x);
  }
  if (m == kNegInf) throw ContractViolation("softmax: every token is masked");
  double acc = 0.0;
  for (double x : logits) acc += std::exp(x - m);
  const double log_norm = m + std::log(acc);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] == kNegInf ? kNegInf : logits[i] - log_norm;
  return out;
}

std::vector<double> next_logprobs(const LogitsBackend& backend, const Seq& context) {
  if (context.terminated()) throw ContractViolation("next_logprobs on an EOS-terminated context");
  auto logits = backend.logits(context.ids());
  if (logits.size() != backend.vocab().size()) throw ProtocolError("backend returned wrong number of logits");
  return softmax_logprobs(logits);
}

// ---------------------------------------------------------------------------

Evaluation UniformBackend::evaluate(std::span<const TokenId>, const BackendState*) const {
  return {std::vector<double>(vocab_.size(), 0.0), nullptr};
}

// ---------------------------------------------------------------------------

TableBackend::TableBackend(Vocab vocab, std::map<std::vector<TokenId>, std::vector<double>> rows,
                           std::optional<std::vector<double>> default_row)
    : vocab_(std::move(vocab)), rows_(std::move(rows)), default_row_(std::move(default_row)) {
  auto check = [&](const std::vector<double>& row) {
    if (row.size() != vocab_.size()) throw std::invalid_argument("table row length differs from vocab size");
  };
  for (const auto& [ctx, row] : rows_) check(row);
  if (default_row_) check(*default_row_);
}

TableBackend TableBackend::from_probabilities(Vocab vocab,
                                              const std::map<std::vector<TokenId>, std::vector<double>>& rows,
                                              std::optional<std::vector<double>> default_probs) {
  auto to_log = [](const std::vector<double>& p) {
    std::vector<double> out(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i] > 0.0 ? std::log(p[i]) : kNegInf;
    return out;
  };
  std::map<std::vector<TokenId>, std::vector<double>> logits;
  for (const auto& [ctx, p] : rows) logits.emplace(ctx, to_log(p));
  std::optional<std::vector<double>> def;
  if (default_probs) def = to_log(*default_probs);
  return TableBackend(std::move(vocab), std::move(logits), std::move(def));
}

Evaluation TableBackend::evaluate(std::span<const TokenId> context, const BackendState*) const {
  auto it = rows_.find(std::vector<TokenId>(context.begin(), context.end()));
  if (it != rows_.end()) return {it->second, nullptr};
  if (default_row_) return {*default_row_, nullptr};
  throw BackendError("table backend has no row for this context");
}

// ---------------------------------------------------------------------------

namespace {

struct NGramHistory final : BackendState {
  std::vector<TokenId> key;
};

}  // namespace

NGramBackend::NGramBackend(Vocab vocab, int order, double alpha,
                           std::map<std::vector<TokenId>, std::vector<double>> counts)
    : vocab_(std::move(vocab)), order_(order), alpha_(alpha), counts_(std::move(counts)) {
  if (order_ < 1) throw std::invalid_argument("n-gram order must be >= 1");
  if (!(alpha_ > 0.0)) throw std::invalid_argument("smoothing alpha must be > 0");
  for (const auto& [key, row] : counts_) {
    if (key.size() != static_cast<std::size_t>(order_ - 1)) throw std::invalid_argument("n-gram history has wrong length");
    if (row.size() != vocab_.size()) throw std::invalid_argument("n-gram count row length differs from vocab size");
  }
}

std::vector<TokenId> NGramBackend::history_key(std::span<const TokenId> context) const {
  const auto h = static_cast<std::size_t>(order_ - 1);
  std::vector<TokenId> key(h, kBegin);
  const std::size_t take = std::min(h, context.size());
  std::copy(context.end() - static_cast<std::ptrdiff_t>(take), context.end(), key.end() - static_cast<std::ptrdiff_t>(take));
  return key;
}

std::vector<double> NGramBackend::probabilities(std::span<const TokenId> context) const {
  return probabilities_for_key(history_key(context));
}

std::vector<double> NGramBackend::probabilities_for_key(const std::vector<TokenId>& key) const {
  const double v = static_cast<double>(vocab_.size());
  std::vector<double> p(vocab_.size(), 1.0 / v);
  auto it = counts_.find(key);
  if (it == counts_.end()) return p;
  double total = 0.0;
  for (double c : it->second) total += c;
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = (it->second[i] + alpha_) / (total + alpha_ * v);
  return p;
}

Evaluation NGramBackend::evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const {
  auto next = std::make_shared<NGramHistory>();
  const auto* prev = dynamic_cast<const NGramHistory*>(prefix_state);
  if (prev != nullptr && !context.empty()) {
    // Slide the parent's window by the newly appended token.
    next->key = prev->key;
    if (!next->key.empty()) {
      next->key.erase(next->key.begin());
      next->key.push_back(context.back());
    }
  } else {
    next->key = history_key(context);
  }
  auto p = probabilities_for_key(next->key);
  std::vector<double> logits(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) logits[i] = std::log(p[i]);
  return {std::move(logits), std::move(next)};
}

nlohmann::json NGramBackend::to_json() const {
  nlohmann::json counts = nlohmann::json::array();
  for (const auto& [key, row] : counts_) counts.push_back({{"context", key}, {"counts", row}});
  return {{"order", order_},
          {"alpha", alpha_},
          {"vocab", {{"tokens", vocab_.labels()}, {"eos", vocab_.label(vocab_.eos())}}},
          {"counts", std::move(counts)}};
}

NGramBackend NGramBackend::from_json(const nlohmann::json& doc) {
  Vocab vocab(doc.at("vocab").at("tokens").get<std::vector<std::string>>(), doc.at("vocab").at("eos").get<std::string>());
  std::map<std::vector<TokenId>, std::vector<double>> counts;
  for (const auto& entry : doc.at("counts"))
    counts.emplace(entry.at("context").get<std::vector<TokenId>>(), entry.at("counts").get<std::vector<double>>());
  return NGramBackend(std::move(vocab), doc.at("order").get<int>(), doc.at("alpha").get<double>(), std::move(counts));
}

NGramBackend train_ngram(std::string_view corpus, int order, double alpha, std::string_view eos_label) {
  if (order < 1) throw std::invalid_argument("n-gram order must be >= 1");
  std::vector<std::vector<std::string>> lines;
  std::size_t longest = 0;
  std::set<std::string> chars;
  std::size_t start = 0;
  while (start <= corpus.size()) {
    std::size_t end = corpus.find('\n', start);
    if (end == std::string_view::npos) end = corpus.size();
    std::string_view line = corpus.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) {
      auto split = split_characters(line);
      longest = std::max(longest, split.size());
      chars.insert(split.begin(), split.end());
      lines.push_back(std::move(split));
    }
    start = end + 1;
  }
  if (lines.empty()) throw std::invalid_argument("corpus is empty");
  if (static_cast<std::size_t>(order) > longest)
    throw std::invalid_argument("n-gram order " + std::to_string(order) + " exceeds the longest line (" +
                                std::to_string(longest) + " characters)");
  if (chars.count(std::string(eos_label))) throw std::invalid_argument("EOS label collides with a corpus character");

  std::vector<std::string> tokens(chars.begin(), chars.end());
  tokens.emplace_back(eos_label);
  Vocab vocab(tokens, eos_label);

  const auto h = static_cast<std::size_t>(order - 1);
  std::map<std::vector<TokenId>, std::vector<double>> counts;
  for (const auto& line : lines) {
    std::vector<TokenId> ids(h, NGramBackend::kBegin);
    for (const auto& c : line) ids.push_back(vocab.id(c));
    ids.push_back(vocab.eos());
    for (std::size_t i = h; i < ids.size(); ++i) {
      std::vector<TokenId> key(ids.begin() + static_cast<std::ptrdiff_t>(i - h), ids.begin() + static_cast<std::ptrdiff_t>(i));
      auto [it, inserted] = counts.try_emplace(std::move(key), vocab.size(), 0.0);
      it->second[static_cast<std::size_t>(ids[i])] += 1.0;
    }
  }
  return NGramBackend(std::move(vocab), order, alpha, std::move(counts));
}

// ---------------------------------------------------------------------------

RemoteBackend::RemoteBackend(Vocab vocab, std::string endpoint, std::chrono::milliseconds timeout)
    : vocab_(std::move(vocab)), endpoint_(std::move(endpoint)), timeout_(timeout) {
  const auto scheme = endpoint_.find("://");
  if (scheme == std::string::npos) throw std::invalid_argument("remote endpoint must look like http://host:port/path");
  const auto path_start = endpoint_.find('/', scheme + 3);
  host_ = endpoint_.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : endpoint_.substr(path_start);
}

Evaluation RemoteBackend::evaluate(std::span<const TokenId> context, const BackendState*) const {
  httplib::Client client(host_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout_);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(timeout_ - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  nlohmann::json request = {{"context", std::vector<TokenId>(context.begin(), context.end())}};
  auto res = client.Post(path_, request.dump(), "application/json");
  if (!res) throw RemoteTransportError("remote backend " + endpoint_ + ": " + httplib::to_string(res.error()));
  if (res->status >= 500) throw RemoteTransportError("remote backend " + endpoint_ + ": HTTP " + std::to_string(res->status));
  if (res->status != 200) throw ProtocolError("remote backend " + endpoint_ + ": HTTP " + std::to_string(res->status));

  nlohmann::json body;
  try {
    body = nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    throw ProtocolError(std::string("remote backend: malformed response: ") + e.what());
  }
  if (!body.is_object() || !body.contains("logits") || !body["logits"].is_array())
    throw ProtocolError("remote backend: response lacks a 'logits' array");
  std::vector<double> logits;
  logits.reserve(body["logits"].size());
  for (const auto& v : body["logits"]) {
    if (v.is_number()) logits.push_back(v.get<double>());
    else if (v.is_null()) logits.push_back(kNegInf);  // JSON has no -inf
    else throw ProtocolError("remote backend: non-numeric logit");
  }
  if (logits.size() != vocab_.size())
    throw ProtocolError("remote backend: expected " + std::to_string(vocab_.size()) + " logits, got " +
                        std::to_string(logits.size()));
  return {std::move(logits), nullptr};
}

}  // namespace smcsteer
