#pragma once

// Autoregressive next-token models. Backends produce raw logits; softmax is
// applied once, centrally, by next_logprobs / the trie cache.

#include <chrono>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "smcsteer/seqcore.hpp"

namespace smcsteer {

class BackendError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Transport-level failure talking to a remote model server. Retriable.
class RemoteTransportError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// The server answered, but not according to the wire protocol.
class ProtocolError : public BackendError {
 public:
  using BackendError::BackendError;
};

/// Opaque incremental state a backend may attach to a trie node (the analog
/// of per-token key/value activations).
class BackendState {
 public:
  virtual ~BackendState() = default;
};

struct Evaluation {
  std::vector<double> logits;
  std::shared_ptr<const BackendState> state;
};

class LogitsBackend {
 public:
  virtual ~LogitsBackend() = default;

  virtual const Vocab& vocab() const = 0;
  virtual std::string kind() const = 0;

  /// Logits for the token following `context`. `prefix_state`, when non-null,
  /// is the state this backend returned for context minus its last token.
  virtual Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const = 0;

  std::vector<double> logits(std::span<const TokenId> context) const { return evaluate(context, nullptr).logits; }
};

/// Log-softmax with max subtraction. -inf entries stay -inf.
std::vector<double> softmax_logprobs(std::span<const double> logits);

/// softmax(backend(context)); context must not be EOS-terminated.
std::vector<double> next_logprobs(const LogitsBackend& backend, const Seq& context);

class UniformBackend final : public LogitsBackend {
 public:
  explicit UniformBackend(Vocab vocab) : vocab_(std::move(vocab)) {}
  const Vocab& vocab() const override { return vocab_; }
  std::string kind() const override { return "uniform"; }
  Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const override;

 private:
  Vocab vocab_;
};

/// Explicit logits rows keyed by exact context, with an optional default row.
/// May emit -inf for structurally impossible tokens.
class TableBackend final : public LogitsBackend {
 public:
  TableBackend(Vocab vocab, std::map<std::vector<TokenId>, std::vector<double>> rows,
               std::optional<std::vector<double>> default_row = std::nullopt);

  /// Builds rows from per-context probabilities (log is taken; zeros become -inf).
  static TableBackend from_probabilities(Vocab vocab, const std::map<std::vector<TokenId>, std::vector<double>>& rows,
                                         std::optional<std::vector<double>> default_probs = std::nullopt);

  const Vocab& vocab() const override { return vocab_; }
  std::string kind() const override { return "table"; }
  Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const override;

  const std::map<std::vector<TokenId>, std::vector<double>>& rows() const { return rows_; }
  const std::optional<std::vector<double>>& default_row() const { return default_row_; }

 private:
  Vocab vocab_;
  std::map<std::vector<TokenId>, std::vector<double>> rows_;
  std::optional<std::vector<double>> default_row_;
};

/// Character n-gram with add-alpha smoothing. Contexts shorter than order-1
/// are left-padded with a begin marker (id -1) that is not part of the vocab.
class NGramBackend final : public LogitsBackend {
 public:
  static constexpr TokenId kBegin = -1;

  NGramBackend(Vocab vocab, int order, double alpha, std::map<std::vector<TokenId>, std::vector<double>> counts);

  const Vocab& vocab() const override { return vocab_; }
  std::string kind() const override { return "ngram"; }
  Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const override;

  int order() const { return order_; }
  double alpha() const { return alpha_; }
  const std::map<std::vector<TokenId>, std::vector<double>>& counts() const { return counts_; }
  /// Smoothed conditional probabilities for a context.
  std::vector<double> probabilities(std::span<const TokenId> context) const;

  nlohmann::json to_json() const;
  static NGramBackend from_json(const nlohmann::json& doc);

 private:
  std::vector<TokenId> history_key(std::span<const TokenId> context) const;
  std::vector<double> probabilities_for_key(const std::vector<TokenId>& key) const;

  Vocab vocab_;
  int order_;
  double alpha_;
  std::map<std::vector<TokenId>, std::vector<double>> counts_;
};

/// Trains a character n-gram on one-sequence-per-line text. EOS closes every line.
NGramBackend train_ngram(std::string_view corpus, int order, double alpha, std::string_view eos_label = "<eos>");

/// HTTP client for a model server. POST {"context": [ids]} -> {"logits": [|V| reals]}.
/// A null logit on the wire is read as -inf.
class RemoteBackend final : public LogitsBackend {
 public:
  RemoteBackend(Vocab vocab, std::string endpoint, std::chrono::milliseconds timeout = std::chrono::seconds(10));

  const Vocab& vocab() const override { return vocab_; }
  std::string kind() const override { return "remote"; }
  Evaluation evaluate(std::span<const TokenId> context, const BackendState* prefix_state) const override;

  const std::string& endpoint() const { return endpoint_; }

 private:
  Vocab vocab_;
  std::string endpoint_;
  std::string host_;
  std::string path_;
  std::chrono::milliseconds timeout_;
};

/// Environment variable consulted for the remote endpoint when none is configured.
inline constexpr const char* kRemoteEndpointEnv = "SMCSTEER_REMOTE_ENDPOINT";

}  // namespace smcsteer
