#include "smcsteer/cache.hpp"

#include <functional>

namespace smcsteer {

struct TrieCache::Node {
  std::mutex compute_mu;
  LogProbs logprobs;
  std::shared_ptr<const BackendState> state;

  std::mutex children_mu;
  std::map<TokenId, std::unique_ptr<Node>> children;

  Node* child(TokenId tok) {
    std::lock_guard lock(children_mu);
    auto& slot = children[tok];
    if (!slot) slot = std::make_unique<Node>();
    return slot.get();
  }
};

TrieCache::TrieCache(const LogitsBackend& backend, CacheMode mode) : backend_(backend), mode_(mode) {}

TrieCache::~TrieCache() = default;

LogProbs TrieCache::evaluate(std::span<const TokenId> prompt, std::span<const TokenId> continuation,
                             const BackendState* prefix_state, std::shared_ptr<const BackendState>* state_out) {
  std::vector<TokenId> context;
  context.reserve(prompt.size() + continuation.size());
  context.insert(context.end(), prompt.begin(), prompt.end());
  context.insert(context.end(), continuation.begin(), continuation.end());

  misses_.fetch_add(1, std::memory_order_relaxed);
  Evaluation ev = backend_.evaluate(context, prefix_state);
  evals_.fetch_add(1, std::memory_order_relaxed);
  if (ev.logits.size() != backend_.vocab().size())
    throw ProtocolError("backend returned " + std::to_string(ev.logits.size()) + " logits for a vocab of " +
                        std::to_string(backend_.vocab().size()));
  if (state_out != nullptr) *state_out = std::move(ev.state);
  return std::make_shared<const std::vector<double>>(softmax_logprobs(ev.logits));
}

LogProbs TrieCache::next_logprobs(std::span<const TokenId> prompt, std::span<const TokenId> continuation) {
  const TokenId eos = vocab().eos();
  if ((!continuation.empty() && continuation.back() == eos) || (continuation.empty() && !prompt.empty() && prompt.back() == eos))
    throw ContractViolation("next_logprobs on an EOS-terminated context");

  if (mode_ == CacheMode::kDisabled) return evaluate(prompt, continuation, nullptr, nullptr);

  std::shared_lock structure(structure_mu_);
  Node* node = nullptr;
  {
    std::lock_guard lock(roots_mu_);
    auto& slot = roots_[std::vector<TokenId>(prompt.begin(), prompt.end())];
    if (!slot) slot = std::make_unique<Node>();
    node = slot.get();
  }
  Node* parent = nullptr;
  for (TokenId tok : continuation) {
    parent = node;
    node = node->child(tok);
  }

  std::shared_ptr<const BackendState> prefix_state;
  if (parent != nullptr) {
    std::lock_guard lock(parent->compute_mu);
    prefix_state = parent->state;
  }

  std::lock_guard lock(node->compute_mu);
  if (node->logprobs) {
    hits_.fetch_add(1, std::memory_order_relaxed);
    return node->logprobs;
  }
  std::shared_ptr<const BackendState> state;
  LogProbs lp = evaluate(prompt, continuation, prefix_state.get(), &state);
  node->state = std::move(state);
  node->logprobs = lp;
  return lp;
}

std::size_t TrieCache::prune(std::span<const Seq> live) {
  std::unique_lock structure(structure_mu_);

  // Trie of live paths; an empty map at a key marks "keep, but no children needed".
  struct Keep {
    std::map<TokenId, Keep> next;
  };
  Keep keep;
  for (const Seq& s : live) {
    Keep* k = &keep;
    for (TokenId t : s.ids()) k = &k->next[t];
  }

  std::function<std::size_t(const Node&)> count = [&](const Node& n) {
    std::size_t c = 1;
    for (const auto& [tok, child] : n.children) c += count(*child);
    return c;
  };
  std::function<std::size_t(Node&, const Keep&)> sweep = [&](Node& n, const Keep& k) {
    std::size_t freed = 0;
    for (auto it = n.children.begin(); it != n.children.end();) {
      auto kit = k.next.find(it->first);
      if (kit == k.next.end()) {
        freed += count(*it->second);
        it = n.children.erase(it);
      } else {
        freed += sweep(*it->second, kit->second);
        ++it;
      }
    }
    return freed;
  };

  std::size_t freed = 0;
  for (auto& [prompt, root] : roots_) freed += sweep(*root, keep);
  return freed;
}

CacheStats TrieCache::stats() const {
  CacheStats s;
  s.hits = hits_.load();
  s.misses = misses_.load();
  s.backend_evals = evals_.load();
  s.nodes = node_count();
  return s;
}

std::size_t TrieCache::node_count() const {
  std::unique_lock structure(structure_mu_);
  std::function<std::size_t(const Node&)> count = [&](const Node& n) {
    std::size_t c = 1;
    for (const auto& [tok, child] : n.children) c += count(*child);
    return c;
  };
  std::size_t total = 0;
  for (const auto& [prompt, root] : roots_) total += count(*root);
  return total;
}

std::size_t TrieCache::cached_node_count() const {
  std::unique_lock structure(structure_mu_);
  std::function<std::size_t(const Node&)> count = [&](const Node& n) {
    std::size_t c = n.logprobs ? 1 : 0;
    for (const auto& [tok, child] : n.children) c += count(*child);
    return c;
  };
  std::size_t total = 0;
  for (const auto& [prompt, root] : roots_) total += count(*root);
  return total;
}

}  // namespace smcsteer
