#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "visid/corpus.hpp"
#include "visid/fusion.hpp"
#include "visid/nn.hpp"
#include "visid/quantize.hpp"

namespace visid {

struct UserContext {
  SemanticId long_term;  // empty codes = no history
  std::vector<SemanticId> short_term;
  int scene_id = 0;
};

struct ScorerInput {
  const TokenMatrix* query = nullptr;
  const SemanticId* query_sid = nullptr;  // query item's own codes, appended after a separator
  const UserContext* user = nullptr;      // null disables personalization terms
  std::vector<int> prefix;
};

// Compact autoregressive scorer over code levels. Context is a sum of a
// begin marker, per-token projected query embeddings, optional query-code
// embeddings and optional user terms; each level adds its positional
// embedding plus the chosen prefix code embeddings and applies its own head.
struct ScorerParams {
  std::vector<int> level_sizes;
  int query_dim = 0;
  int d_s = 64;
  int h_s = 128;
  int n_categories = 0;

  std::vector<Mat> code_emb;  // per level: K_l x d_s
  Mat level_pos;              // L x d_s
  Affine query_proj;          // query_dim -> d_s
  Mat scene_emb;              // 2 x d_s
  Mat markers;                // 3 x d_s: begin, end, separator
  Vec no_hist;                // stands in for absent history
  std::vector<Mlp2> heads;    // d_s -> h_s -> K_l
  Affine cat_head;            // d_s -> n_categories

  int levels() const { return static_cast<int>(level_sizes.size()); }

  template <class F>
  void for_each_span(F&& f) {
    for (auto& m : code_emb) f(std::span<double>(m.a));
    f(std::span<double>(level_pos.a));
    f(std::span<double>(query_proj.w.a));
    f(std::span<double>(query_proj.b));
    f(std::span<double>(scene_emb.a));
    f(std::span<double>(markers.a));
    f(std::span<double>(no_hist));
    for (auto& h : heads) {
      f(std::span<double>(h.l1.w.a));
      f(std::span<double>(h.l1.b));
      f(std::span<double>(h.l2.w.a));
      f(std::span<double>(h.l2.b));
    }
    f(std::span<double>(cat_head.w.a));
    f(std::span<double>(cat_head.b));
  }
};

ScorerParams make_scorer(const std::vector<int>& level_sizes, int query_dim, int n_categories,
                         int d_s, int h_s, std::uint64_t seed);
ScorerParams zero_like(const ScorerParams& p);

Vec scorer_context(const ScorerParams& p, const ScorerInput& in);

// probability vector over K_l where l = prefix length
Vec score_next(const ScorerParams& p, const ScorerInput& in);

double seq_logprob(const ScorerParams& p, const ScorerInput& in, const SemanticId& target);

// per-level output distributions teacher-forced on the given codes
std::vector<Vec> level_distributions(const ScorerParams& p, const ScorerInput& in,
                                     const std::vector<int>& forced);

// pushes caller-supplied per-level logit gradients through heads, prefix
// embeddings, positions and context; accumulates into grads
void levels_backward(const ScorerParams& p, const ScorerInput& in,
                     const std::vector<int>& forced, const std::vector<Vec>& dlogits,
                     ScorerParams& grads);

// accumulates coef * d(log prob of target sequence)/d(params) into grads
double seq_logprob_backward(const ScorerParams& p, const ScorerInput& in, const SemanticId& target,
                            double coef, ScorerParams& grads);

struct ScalarLoss {
  double value = 0.0;
};

// per-level cross entropy against the target codes, teacher forced
double ntp_loss(const ScorerParams& p, const ScorerInput& in, const SemanticId& target,
                ScorerParams* grads);

// category prediction from the query context
double category_loss(const ScorerParams& p, const ScorerInput& in, int category_id,
                     ScorerParams* grads);

SemanticId aggregate_long_term(const UserHistory& hist, const Catalog& cat,
                               const FusionParams& fusion, const CodebookStack& stack);

std::map<std::int64_t, UserContext> build_user_contexts(const Catalog& cat,
                                                        const FusionParams& fusion,
                                                        const CodebookStack& stack,
                                                        const SidTable& table);

struct GrTrainOptions {
  int epochs = 5;
  double lr = 0.05;
  int batch_size = 32;
  std::uint64_t seed = 7;
  double dpo_beta = 0.1;
};

struct GrTrace {
  std::vector<double> epoch_loss;
};

// stage 1: code sequence prediction from each view, alternated with the
// category task, no user terms
ScorerParams train_pretrain(const Catalog& cat, const SidTable& table, ScorerParams params,
                            const GrTrainOptions& opt, GrTrace* trace = nullptr);

// stage 2: paired-view to item codes, the query's own codes appended;
// query_sids (indexed by pair) replace the table rows so training can
// condition on exactly what the serving-time query encoder produces
ScorerParams train_sft(const Catalog& cat, const SidTable& table, ScorerParams params,
                       const GrTrainOptions& opt, GrTrace* trace = nullptr,
                       const std::vector<SemanticId>* query_sids = nullptr);

// stage 3: session query plus user context to purchased item codes;
// query_sids (indexed by session) optionally inject the query's own codes
ScorerParams train_personalized_sft(const Catalog& cat, const SidTable& table,
                                    const std::map<std::int64_t, UserContext>& users,
                                    ScorerParams params, const GrTrainOptions& opt,
                                    GrTrace* trace = nullptr,
                                    const std::vector<SemanticId>* query_sids = nullptr);

struct DpoResult {
  double value = 0.0;
  ScorerParams grads;
};

// list-wise preference loss: ln(1 + sum_j exp(beta * delta_j)) with delta_j
// the policy-vs-reference log-ratio gap between negative j and the positive
DpoResult dpo_loss(const ScorerParams& policy, const ScorerParams& ref, const ScorerInput& base,
                   const SemanticId& positive, const std::vector<SemanticId>& negatives,
                   double beta);

// stage 4: list-wise preference on sessions, reference frozen at entry
ScorerParams train_dpo(const Catalog& cat, const SidTable& table,
                       const std::map<std::int64_t, UserContext>& users, ScorerParams params,
                       const GrTrainOptions& opt, GrTrace* trace = nullptr,
                       const std::vector<SemanticId>* query_sids = nullptr);

struct ScorerCheckpoint {
  ScorerParams params;
  std::string stage;
  std::string parent_hash;
};

void save_scorer(const std::filesystem::path& path, const ScorerParams& p,
                 const std::string& stage, const std::string& parent_hash);
ScorerCheckpoint load_scorer(const std::filesystem::path& path);
std::string scorer_blob_hash(const std::filesystem::path& path);

}  // namespace visid
