#pragma once

// Token-trie cache in front of a LogitsBackend. Every distinct (prompt,
// continuation) context is evaluated at most once, no matter how many
// particles or steps ask for it.

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <shared_mutex>

#include "smcsteer/backend.hpp"
#include "smcsteer/seqcore.hpp"

namespace smcsteer {

struct CacheStats {
  std::uint64_t hits = 0;
  std::uint64_t misses = 0;
  std::uint64_t backend_evals = 0;
  std::uint64_t nodes = 0;

  bool operator==(const CacheStats&) const = default;
};

enum class CacheMode { kEnabled, kDisabled };

/// Thread-safe. Concurrent first requests for one context block on a single
/// evaluation; a failed evaluation leaves the node empty so it can be retried.
/// Each prompt gets its own root; all roots share one stats counter.
class TrieCache final : public NextTokenSource {
 public:
  explicit TrieCache(const LogitsBackend& backend, CacheMode mode = CacheMode::kEnabled);
  ~TrieCache() override;

  TrieCache(const TrieCache&) = delete;
  TrieCache& operator=(const TrieCache&) = delete;

  const Vocab& vocab() const override { return backend_.vocab(); }
  using NextTokenSource::next_logprobs;
  LogProbs next_logprobs(std::span<const TokenId> prompt, std::span<const TokenId> continuation) override;

  /// Drops every node not on a path to one of `live` (continuations, applied
  /// under every root). Roots are kept. Returns the number of nodes freed.
  std::size_t prune(std::span<const Seq> live);

  CacheStats stats() const;
  std::size_t node_count() const;
  /// Nodes currently holding log-probabilities.
  std::size_t cached_node_count() const;
  CacheMode mode() const { return mode_; }

 private:
  struct Node;

  LogProbs evaluate(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                    const BackendState* prefix_state, std::shared_ptr<const BackendState>* state_out);

  const LogitsBackend& backend_;
  CacheMode mode_;
  mutable std::shared_mutex structure_mu_;
  std::mutex roots_mu_;
  std::map<std::vector<TokenId>, std::unique_ptr<Node>> roots_;
  std::atomic<std::uint64_t> hits_{0};
  std::atomic<std::uint64_t> misses_{0};
  std::atomic<std::uint64_t> evals_{0};
};

}  // namespace smcsteer
