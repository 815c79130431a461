#pragma once

#include <functional>
#include <vector>

#include "visid/codemetrics.hpp"
#include "visid/corpus.hpp"
#include "visid/genmodel.hpp"
#include "visid/quantize.hpp"

namespace visid {

// Prefix tree over full-length code sequences; terminals carry the item ids
// sharing that sequence.
struct SidTrie {
  struct Node {
    std::vector<std::pair<int, int>> children;  // (code, node index), sorted by code
    std::vector<std::int64_t> items;            // non-empty only at depth L
  };
  std::vector<Node> nodes;
  int depth = 0;

  const Node& root() const { return nodes[0]; }
  // node index for a prefix, -1 if the path leaves the tree
  int find(std::span<const int> prefix) const;
  bool contains(const SemanticId& sid) const;
  std::size_t terminal_count() const;
};

SidTrie trie_build(const SidTable& table);

struct BeamItem {
  SemanticId sid;
  double logprob = 0.0;
};

// distribution over codes at level prefix.size(), before trie masking
using StepScorer = std::function<Vec(std::span<const int>)>;

std::vector<BeamItem> beam_search_core(const StepScorer& step,
                                       const std::vector<int>& level_sizes, const SidTrie& trie,
                                       int beam);

std::vector<BeamItem> beam_search(const ScorerParams& params, const ScorerInput& base,
                                  const SidTrie& trie, int beam);

struct ConvWeights {
  double w1 = 1.0;    // clicks
  double w2 = 0.001;  // gmv
  double w3 = 5.0;    // orders
};

double s_conv(const Item& item, const ConvWeights& w);

// descending conversion score, ties by item id ascending
std::vector<std::int64_t> rank_within_code(std::vector<std::int64_t> ids, const Catalog& cat,
                                           const ConvWeights& w);

struct ConfidenceFlag {
  bool low = false;
  double similarity = 0.0;
};

struct ConfidenceReport {
  std::vector<ConfidenceFlag> flags;
  double max_similarity = -1.0;  // among the first top_k entries
};

ConfidenceReport confidence_check(std::span<const double> query_fused,
                                  const std::vector<Vec>& recons, double threshold, int top_k);

struct RetrievedItem {
  std::int64_t item_id = 0;
  SemanticId sid;
  double logprob = 0.0;
  double s_conv = 0.0;
  double similarity = 0.0;
  bool low_confidence = false;
};

struct RetrieveOptions {
  int beam = 10;
  int top_n = 10;
  ConvWeights weights;
  double conf_threshold = -1.0;
  bool use_query_codes = true;  // feed the query's own codes to the scorer
};

using QueryEncodeFn = std::function<SemanticId(std::span<const double>)>;

// Bundles the frozen artifacts needed to serve queries. Item representations
// for the confidence check are cached at construction.
struct Retriever {
  const Catalog* cat = nullptr;
  FusionParams fusion;
  CodebookStack stack;  // empty when custom hooks drive encoding
  ScorerParams scorer;
  SidTable table;
  SidTrie trie;
  std::vector<Vec> item_recon;  // by catalog position
  QueryEncodeFn query_encode;

  static Retriever make(const Catalog& cat, FusionParams fusion, CodebookStack stack,
                        ScorerParams scorer, SidTable table);
  // baseline hook: recon drives the cached item representations, query_encode
  // maps a fused query to its codes
  static Retriever make_custom(const Catalog& cat, FusionParams fusion, ScorerParams scorer,
                               SidTable table, const ReconFn& recon, QueryEncodeFn query_encode);
  Vec query_fused(const TokenMatrix& query) const;
};

std::vector<RetrievedItem> retrieve(const Retriever& r, const TokenMatrix& query,
                                    const UserContext* user, const RetrieveOptions& opt);

}  // namespace visid
