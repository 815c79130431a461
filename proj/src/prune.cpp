#include "visid/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "visid/quantize.hpp"

namespace visid {

int curriculum_tokens(int e, const CurriculumSchedule& s) {
  if (s.v_sub < 1 || s.v_sub > s.v_max || s.total_epochs < 1)
    fail(errc::invalid_config, "bad curriculum schedule");
  if (e < 1 || e > s.total_epochs) fail(errc::invalid_config, "epoch index out of range");
  double v = s.v_max - (static_cast<double>(e) / s.total_epochs) * (s.v_max - s.v_sub);
  return static_cast<int>(std::floor(v));
}

std::vector<int> select_tokens(const TokenMatrix& tokens, int v_sub, std::uint64_t seed) {
  int n = static_cast<int>(tokens.count());
  if (v_sub < 1 || v_sub > n) fail(errc::infeasible_config, "token budget out of range");
  if (v_sub == n) {
    std::vector<int> all(n);
    for (int i = 0; i < n; ++i) all[i] = i;
    return all;
  }
  Mat pts(n, tokens.dim);
  for (int i = 0; i < n; ++i) {
    auto t = tokens.token(i);
    for (int j = 0; j < tokens.dim; ++j) pts.at(i, j) = t[j];
  }
  KmeansResult km = kmeans(pts, v_sub, seed, KmeansOptions{});

  std::vector<bool> kept(n, false);
  std::vector<int> keep;
  for (int c = 0; c < v_sub; ++c) {
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int i = 0; i < n; ++i) {
      if (km.assign[i] != c) continue;
      double d = sq_dist(km.centroids.rspan(c), pts.rspan(i));
      if (d < best_d) {
        best_d = d;
        best = i;
      }
    }
    if (best < 0) {
      // cluster with no members: take the nearest still-free token
      for (int i = 0; i < n; ++i) {
        if (kept[i]) continue;
        double d = sq_dist(km.centroids.rspan(c), pts.rspan(i));
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
    }
    kept[best] = true;
    keep.push_back(best);
  }
  std::sort(keep.begin(), keep.end());
  return keep;
}

TokenMatrix prune_tokens(const TokenMatrix& tokens, const std::vector<int>& keep) {
  TokenMatrix out;
  out.dim = tokens.dim;
  out.tokens.reserve(keep.size() * tokens.dim);
  for (int i : keep) {
    if (i < 0 || i >= tokens.count()) fail(errc::invalid_config, "kept index out of range");
    auto t = tokens.token(i);
    out.tokens.insert(out.tokens.end(), t.begin(), t.end());
  }
  out.recompute_pooled();
  return out;
}

double distill_loss(const ScorerParams& ref, const ScorerParams& student,
                    const ScorerInput& ref_input, const ScorerInput& student_input,
                    ScorerParams* grads, double coef) {
  if (ref.level_sizes != student.level_sizes)
    fail(errc::shape_mismatch, "reference and student level layouts differ");
  // greedy reference decode fixes the forced path
  std::vector<int> greedy;
  ScorerInput rin = ref_input;
  for (int l = 0; l < ref.levels(); ++l) {
    rin.prefix = greedy;
    Vec p = score_next(ref, rin);
    greedy.push_back(static_cast<int>(std::max_element(p.begin(), p.end()) - p.begin()));
  }

  std::vector<Vec> pr = level_distributions(ref, ref_input, greedy);
  std::vector<Vec> ps = level_distributions(student, student_input, greedy);
  double total = 0.0;
  for (int l = 0; l < ref.levels(); ++l)
    for (std::size_t i = 0; i < pr[l].size(); ++i)
      if (pr[l][i] > 0.0)
        total += pr[l][i] * (std::log(pr[l][i]) - std::log(std::max(ps[l][i], 1e-300)));

  if (grads != nullptr) {
    std::vector<Vec> dlogits(ref.levels());
    for (int l = 0; l < ref.levels(); ++l) {
      dlogits[l].resize(pr[l].size());
      for (std::size_t i = 0; i < pr[l].size(); ++i)
        dlogits[l][i] = coef * (ps[l][i] - pr[l][i]);
    }
    levels_backward(student, student_input, greedy, dlogits, *grads);
  }
  return total;
}

ScorerParams train_pruned(const Catalog& cat, const SidTable& table,
                          const std::map<std::int64_t, UserContext>& users,
                          const ScorerParams& ref, const CurriculumSchedule& schedule,
                          const PruneTrainOptions& opt, GrTrace* trace,
                          const std::vector<SemanticId>* query_sids) {
  if (opt.batch_size < 1) fail(errc::invalid_config, "bad batch size");
  if (query_sids != nullptr && query_sids->size() != cat.sessions.size())
    fail(errc::shape_mismatch, "query code list does not cover the sessions");
  struct Sample {
    const TokenMatrix* tokens;
    UserContext user;
    SemanticId target;
    const SemanticId* qsid;
  };
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < cat.sessions.size(); ++i) {
    if (is_eval_session(i)) continue;
    const Session& s = cat.sessions[i];
    auto uit = users.find(s.user_id);
    if (uit == users.end()) fail(errc::missing_file, "session user has no context");
    UserContext u = uit->second;
    u.scene_id = s.scene_id;
    auto cit = table.canonical.find(s.purchased);
    if (cit == table.canonical.end()) fail(errc::missing_file, "purchased item not in table");
    samples.push_back(
        {&s.query, std::move(u), cit->second, query_sids ? &(*query_sids)[i] : nullptr});
  }
  if (samples.empty()) fail(errc::empty_input, "no pruning samples");

  ScorerParams student = ref;  // warm start from the teacher
  ScorerParams grads = zero_like(student);
  Rng rng(opt.seed);
  std::vector<std::size_t> order(samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 1; epoch <= schedule.total_epochs; ++epoch) {
    int budget = curriculum_tokens(epoch, schedule);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
      std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
      std::size_t bn = end - start;
      grads.for_each_span([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
      double batch_loss = 0.0;
      for (std::size_t k = start; k < end; ++k) {
        const Sample& sm = samples[order[k]];
        int v = std::min<int>(budget, static_cast<int>(sm.tokens->count()));
        TokenMatrix pruned =
            prune_tokens(*sm.tokens, select_tokens(*sm.tokens, v, opt.select_seed));
        ScorerInput full;
        full.query = sm.tokens;
        full.user = &sm.user;
        full.query_sid = sm.qsid;
        ScorerInput cut = full;
        cut.query = &pruned;
        double w = 1.0 / bn;
        batch_loss += distill_loss(ref, student, full, cut, &grads, w) / bn;
        batch_loss += ntp_loss(student, cut, sm.target, nullptr) / bn;
        // analytic NTP grads, same weight as distillation
        seq_logprob_backward(student, cut, sm.target, -w, grads);
      }
      if (!std::isfinite(batch_loss))
        fail(errc::training_diverged, "pruning loss diverged at epoch " + std::to_string(epoch));
      sgd_step(student, grads, opt.lr, 5.0);
      if (!params_finite(student))
        fail(errc::training_diverged,
             "pruned params non-finite at epoch " + std::to_string(epoch));
      epoch_loss += batch_loss;
      ++batches;
    }
    if (trace) trace->epoch_loss.push_back(batches ? epoch_loss / batches : 0.0);
  }
  return student;
}

}  // namespace visid
