#pragma once

#include <vector>

#include "visid/corpus.hpp"
#include "visid/genmodel.hpp"

namespace visid {

struct CurriculumSchedule {
  int v_max = 48;
  int v_sub = 12;
  int total_epochs = 4;
};

// retained token budget for 1-based epoch e; linear decay landing on v_sub
int curriculum_tokens(int e, const CurriculumSchedule& s);

// cluster the tokens and keep, per cluster, the member nearest its center;
// indices come back in original positional order
std::vector<int> select_tokens(const TokenMatrix& tokens, int v_sub, std::uint64_t seed);

TokenMatrix prune_tokens(const TokenMatrix& tokens, const std::vector<int>& keep);

// per-level KL from the reference distribution to the student's, teacher
// forced on the reference model's greedy codes; grads accumulate into
// student-shaped storage scaled by coef
double distill_loss(const ScorerParams& ref, const ScorerParams& student,
                    const ScorerInput& ref_input, const ScorerInput& student_input,
                    ScorerParams* grads, double coef = 1.0);

struct PruneTrainOptions {
  double lr = 0.05;
  int batch_size = 32;
  std::uint64_t seed = 7;
  std::uint64_t select_seed = 0;  // token selection stays on one seed
};

// distillation + code prediction at the scheduled token budget; the student
// starts from the frozen reference; query_sids (indexed by session) pin the
// query's own codes so teacher and student see the serving-time input
ScorerParams train_pruned(const Catalog& cat, const SidTable& table,
                          const std::map<std::int64_t, UserContext>& users,
                          const ScorerParams& ref, const CurriculumSchedule& schedule,
                          const PruneTrainOptions& opt, GrTrace* trace = nullptr,
                          const std::vector<SemanticId>* query_sids = nullptr);

}  // namespace visid
