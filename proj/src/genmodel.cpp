#include "visid/genmodel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

ScorerParams make_scorer(const std::vector<int>& level_sizes, int query_dim, int n_categories,
                         int d_s, int h_s, std::uint64_t seed) {
  if (level_sizes.empty()) fail(errc::invalid_config, "scorer needs at least one level");
  for (int k : level_sizes)
    if (k < 1) fail(errc::invalid_config, "level sizes must be >= 1");
  if (query_dim < 1 || d_s < 1 || h_s < 1 || n_categories < 1)
    fail(errc::invalid_config, "scorer dims must be positive");
  ScorerParams p;
  p.level_sizes = level_sizes;
  p.query_dim = query_dim;
  p.d_s = d_s;
  p.h_s = h_s;
  p.n_categories = n_categories;
  Rng rng(seed);
  double s = 1.0 / std::sqrt(static_cast<double>(d_s));
  auto fill_table = [&](Mat& m) {
    for (double& x : m.a) x = s * (2.0 * rng.uniform() - 1.0);
  };
  int L = p.levels();
  for (int l = 0; l < L; ++l) {
    Mat t(level_sizes[l], d_s);
    fill_table(t);
    p.code_emb.push_back(std::move(t));
  }
  p.level_pos = Mat(L, d_s);
  fill_table(p.level_pos);
  p.query_proj = make_affine(d_s, query_dim);
  init_affine(p.query_proj, rng);
  p.scene_emb = Mat(2, d_s);
  fill_table(p.scene_emb);
  p.markers = Mat(3, d_s);
  fill_table(p.markers);
  p.no_hist.assign(d_s, 0.0);
  for (double& x : p.no_hist) x = s * (2.0 * rng.uniform() - 1.0);
  for (int l = 0; l < L; ++l) {
    Mlp2 h = make_mlp2(level_sizes[l], h_s, d_s);
    init_mlp2(h, rng);
    p.heads.push_back(std::move(h));
  }
  p.cat_head = make_affine(n_categories, d_s);
  init_affine(p.cat_head, rng);
  return p;
}

ScorerParams zero_like(const ScorerParams& p) {
  ScorerParams z = p;
  z.for_each_span([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
  return z;
}

namespace {

void check_sid(const ScorerParams& p, const SemanticId& sid, const char* what) {
  if (static_cast<int>(sid.codes.size()) != p.levels())
    fail(errc::shape_mismatch, std::string(what) + " code count mismatch");
  for (int l = 0; l < p.levels(); ++l)
    if (sid.codes[l] < 0 || sid.codes[l] >= p.level_sizes[l])
      fail(errc::invalid_config, std::string(what) + " code out of range");
}

std::vector<const SemanticId*> sorted_short(const UserContext& u) {
  std::vector<const SemanticId*> out;
  for (const auto& s : u.short_term) out.push_back(&s);
  std::sort(out.begin(), out.end(),
            [](const SemanticId* a, const SemanticId* b) { return a->codes < b->codes; });
  return out;
}

void add_sid_embs(const ScorerParams& p, const SemanticId& sid, double w, Vec& acc) {
  for (int l = 0; l < p.levels(); ++l) axpy(w, p.code_emb[l].rspan(sid.codes[l]), acc);
}

Vec context_forward(const ScorerParams& p, const ScorerInput& in, Vec* mean_tok_out) {
  Vec ctx(p.d_s, 0.0);
  axpy(1.0, p.markers.rspan(0), ctx);
  if (in.query != nullptr && in.query->count() > 0) {
    if (static_cast<int>(in.query->dim) != p.query_dim)
      fail(errc::shape_mismatch, "query token dim mismatch");
    std::size_t v_count = in.query->count();
    Vec proj(p.d_s);
    Vec tok(p.query_dim);
    Vec mean_tok(p.query_dim, 0.0);
    for (std::size_t v = 0; v < v_count; ++v) {
      auto t = in.query->token(v);
      for (int j = 0; j < p.query_dim; ++j) tok[j] = t[j];
      affine_apply(p.query_proj, tok, proj);
      axpy(1.0 / v_count, proj, ctx);
      axpy(1.0 / v_count, tok, mean_tok);
    }
    if (mean_tok_out) *mean_tok_out = std::move(mean_tok);
  }
  if (in.query_sid != nullptr) {
    check_sid(p, *in.query_sid, "query sid");
    axpy(1.0, p.markers.rspan(2), ctx);
    add_sid_embs(p, *in.query_sid, 1.0, ctx);
  }
  if (in.user != nullptr) {
    const UserContext& u = *in.user;
    if (u.scene_id < 0 || u.scene_id >= static_cast<int>(p.scene_emb.rows))
      fail(errc::invalid_config, "scene id out of range");
    axpy(1.0, p.markers.rspan(2), ctx);
    if (u.long_term.codes.empty()) {
      axpy(1.0, p.no_hist, ctx);
    } else {
      check_sid(p, u.long_term, "long-term sid");
      add_sid_embs(p, u.long_term, 1.0, ctx);
    }
    if (u.short_term.empty()) {
      axpy(1.0, p.no_hist, ctx);
    } else {
      auto sorted = sorted_short(u);
      for (const SemanticId* s : sorted) {
        check_sid(p, *s, "short-term sid");
        add_sid_embs(p, *s, 1.0 / sorted.size(), ctx);
      }
    }
    axpy(1.0, p.scene_emb.rspan(u.scene_id), ctx);
  }
  return ctx;
}

void context_backward(const ScorerParams& p, const ScorerInput& in, const Vec& mean_tok,
                      const Vec& d_ctx, ScorerParams& g) {
  axpy(1.0, d_ctx, g.markers.rspan(0));
  if (in.query != nullptr && in.query->count() > 0) {
    affine_backward(p.query_proj, mean_tok, d_ctx, g.query_proj, {});
  }
  auto add_sid_grads = [&](const SemanticId& sid, double w) {
    for (int l = 0; l < p.levels(); ++l) axpy(w, d_ctx, g.code_emb[l].rspan(sid.codes[l]));
  };
  if (in.query_sid != nullptr) {
    axpy(1.0, d_ctx, g.markers.rspan(2));
    add_sid_grads(*in.query_sid, 1.0);
  }
  if (in.user != nullptr) {
    const UserContext& u = *in.user;
    axpy(1.0, d_ctx, g.markers.rspan(2));
    if (u.long_term.codes.empty())
      axpy(1.0, d_ctx, g.no_hist);
    else
      add_sid_grads(u.long_term, 1.0);
    if (u.short_term.empty()) {
      axpy(1.0, d_ctx, g.no_hist);
    } else {
      auto sorted = sorted_short(u);
      for (const SemanticId* s : sorted) add_sid_grads(*s, 1.0 / sorted.size());
    }
    axpy(1.0, d_ctx, g.scene_emb.rspan(u.scene_id));
  }
}

Vec softmax_stable(const Vec& logits) {
  double mx = *std::max_element(logits.begin(), logits.end());
  Vec p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

void check_prefix(const ScorerParams& p, const std::vector<int>& prefix) {
  if (static_cast<int>(prefix.size()) >= p.levels())
    fail(errc::invalid_config, "prefix length must be below level count");
  for (std::size_t i = 0; i < prefix.size(); ++i)
    if (prefix[i] < 0 || prefix[i] >= p.level_sizes[i])
      fail(errc::invalid_config, "prefix code out of range");
}

// teacher-forced pass over all levels; accumulates coef * d(log prob)/d(params)
// when grads != nullptr; returns sum of log probs
double seq_core(const ScorerParams& p, const ScorerInput& in, const SemanticId& target,
                ScorerParams* grads, double coef) {
  check_sid(p, target, "target");
  Vec mean_tok;
  Vec ctx = context_forward(p, in, &mean_tok);
  int L = p.levels();
  Vec prefix_sum(p.d_s, 0.0);
  Vec state(p.d_s);
  Vec d_ctx(p.d_s, 0.0);
  double lp = 0.0;
  for (int l = 0; l < L; ++l) {
    for (int j = 0; j < p.d_s; ++j) state[j] = ctx[j] + prefix_sum[j] + p.level_pos.at(l, j);
    Vec hidden;
    Vec logits = mlp2_apply(p.heads[l], state, hidden);
    Vec prob = softmax_stable(logits);
    int t = target.codes[l];
    lp += std::log(std::max(prob[t], 1e-300));
    if (grads != nullptr) {
      Vec dlogits(prob.size());
      for (std::size_t i = 0; i < prob.size(); ++i)
        dlogits[i] = coef * ((static_cast<int>(i) == t ? 1.0 : 0.0) - prob[i]);
      Vec d_state(p.d_s, 0.0);
      mlp2_backward(p.heads[l], state, hidden, dlogits, grads->heads[l], d_state);
      axpy(1.0, d_state, grads->level_pos.rspan(l));
      for (int i = 0; i < l; ++i)
        axpy(1.0, d_state, grads->code_emb[i].rspan(target.codes[i]));
      axpy(1.0, d_state, d_ctx);
    }
    axpy(1.0, p.code_emb[l].rspan(t), prefix_sum);
  }
  if (grads != nullptr) context_backward(p, in, mean_tok, d_ctx, *grads);
  return lp;
}

double cat_core(const ScorerParams& p, const ScorerInput& in, int category_id,
                ScorerParams* grads, double coef) {
  if (category_id < 0 || category_id >= p.n_categories)
    fail(errc::invalid_config, "category id out of range");
  Vec mean_tok;
  Vec ctx = context_forward(p, in, &mean_tok);
  Vec logits = affine_apply(p.cat_head, ctx);
  Vec prob = softmax_stable(logits);
  double loss = -std::log(std::max(prob[category_id], 1e-300));
  if (grads != nullptr) {
    Vec dlogits(prob.size());
    for (std::size_t i = 0; i < prob.size(); ++i)
      dlogits[i] = coef * (prob[i] - (static_cast<int>(i) == category_id ? 1.0 : 0.0));
    Vec d_ctx(p.d_s, 0.0);
    affine_backward(p.cat_head, ctx, dlogits, grads->cat_head, d_ctx);
    context_backward(p, in, mean_tok, d_ctx, *grads);
  }
  return loss;
}

}  // namespace

Vec scorer_context(const ScorerParams& p, const ScorerInput& in) {
  return context_forward(p, in, nullptr);
}

std::vector<Vec> level_distributions(const ScorerParams& p, const ScorerInput& in,
                                     const std::vector<int>& forced) {
  SemanticId sid{forced};
  check_sid(p, sid, "forced");
  Vec ctx = context_forward(p, in, nullptr);
  std::vector<Vec> out;
  Vec prefix_sum(p.d_s, 0.0);
  Vec state(p.d_s);
  for (int l = 0; l < p.levels(); ++l) {
    for (int j = 0; j < p.d_s; ++j) state[j] = ctx[j] + prefix_sum[j] + p.level_pos.at(l, j);
    Vec hidden;
    out.push_back(softmax_stable(mlp2_apply(p.heads[l], state, hidden)));
    axpy(1.0, p.code_emb[l].rspan(forced[l]), prefix_sum);
  }
  return out;
}

void levels_backward(const ScorerParams& p, const ScorerInput& in,
                     const std::vector<int>& forced, const std::vector<Vec>& dlogits,
                     ScorerParams& grads) {
  SemanticId sid{forced};
  check_sid(p, sid, "forced");
  if (static_cast<int>(dlogits.size()) != p.levels())
    fail(errc::shape_mismatch, "need one logit gradient per level");
  Vec mean_tok;
  Vec ctx = context_forward(p, in, &mean_tok);
  Vec prefix_sum(p.d_s, 0.0);
  Vec state(p.d_s);
  Vec d_ctx(p.d_s, 0.0);
  for (int l = 0; l < p.levels(); ++l) {
    for (int j = 0; j < p.d_s; ++j) state[j] = ctx[j] + prefix_sum[j] + p.level_pos.at(l, j);
    Vec hidden;
    mlp2_apply(p.heads[l], state, hidden);
    Vec d_state(p.d_s, 0.0);
    mlp2_backward(p.heads[l], state, hidden, dlogits[l], grads.heads[l], d_state);
    axpy(1.0, d_state, grads.level_pos.rspan(l));
    for (int i = 0; i < l; ++i) axpy(1.0, d_state, grads.code_emb[i].rspan(forced[i]));
    axpy(1.0, d_state, d_ctx);
    axpy(1.0, p.code_emb[l].rspan(forced[l]), prefix_sum);
  }
  context_backward(p, in, mean_tok, d_ctx, grads);
}

Vec score_next(const ScorerParams& p, const ScorerInput& in) {
  check_prefix(p, in.prefix);
  int l = static_cast<int>(in.prefix.size());
  Vec ctx = context_forward(p, in, nullptr);
  Vec state(p.d_s);
  for (int j = 0; j < p.d_s; ++j) state[j] = ctx[j] + p.level_pos.at(l, j);
  for (std::size_t i = 0; i < in.prefix.size(); ++i)
    axpy(1.0, p.code_emb[i].rspan(in.prefix[i]), state);
  Vec hidden;
  return softmax_stable(mlp2_apply(p.heads[l], state, hidden));
}

double seq_logprob(const ScorerParams& p, const ScorerInput& in, const SemanticId& target) {
  return seq_core(p, in, target, nullptr, 0.0);
}

double seq_logprob_backward(const ScorerParams& p, const ScorerInput& in,
                            const SemanticId& target, double coef, ScorerParams& grads) {
  return seq_core(p, in, target, &grads, coef);
}

double ntp_loss(const ScorerParams& p, const ScorerInput& in, const SemanticId& target,
                ScorerParams* grads) {
  return -seq_core(p, in, target, grads, -1.0);
}

double category_loss(const ScorerParams& p, const ScorerInput& in, int category_id,
                     ScorerParams* grads) {
  return cat_core(p, in, category_id, grads, 1.0);
}

SemanticId aggregate_long_term(const UserHistory& hist, const Catalog& cat,
                               const FusionParams& fusion, const CodebookStack& stack) {
  if (hist.long_term.empty()) return SemanticId{};
  int d = fusion.latent_dim();
  Vec mean_f(d, 0.0);
  double clicks = 0.0, orders = 0.0, price = 0.0, gmv = 0.0;
  for (std::int64_t id : hist.long_term) {
    const Item& it = cat.item(id);
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    Vec f = fuse(fusion, it.views[0].pooled, y).f;
    axpy(1.0 / hist.long_term.size(), f, mean_f);
    clicks += static_cast<double>(it.biz.clicks_30d) / hist.long_term.size();
    orders += static_cast<double>(it.biz.orders_30d) / hist.long_term.size();
    price += it.biz.price / hist.long_term.size();
    gmv += it.biz.gmv_30d / hist.long_term.size();
  }
  if (stack.total_levels() > stack.shallow_levels) {
    BizStats biz;
    biz.clicks_30d = std::llround(clicks);
    biz.orders_30d = std::llround(orders);
    biz.price = price;
    biz.gmv_30d = gmv;
    return vrq_encode(mean_f, biz, stack).sid;
  }
  return rq_encode(mean_f, stack).sid;
}

std::map<std::int64_t, UserContext> build_user_contexts(const Catalog& cat,
                                                        const FusionParams& fusion,
                                                        const CodebookStack& stack,
                                                        const SidTable& table) {
  std::map<std::int64_t, UserContext> out;
  for (const auto& [user_id, hist] : cat.histories) {
    UserContext u;
    u.long_term = aggregate_long_term(hist, cat, fusion, stack);
    for (std::int64_t id : hist.short_term) {
      auto it = table.canonical.find(id);
      if (it == table.canonical.end()) fail(errc::missing_file, "history item missing from table");
      u.short_term.push_back(it->second);
    }
    out[user_id] = std::move(u);
  }
  return out;
}

namespace {

struct StageLoop {
  const GrTrainOptions& opt;
  Rng rng;
  explicit StageLoop(const GrTrainOptions& o) : opt(o), rng(o.seed) {
    if (o.epochs < 0 || o.batch_size < 1) fail(errc::invalid_config, "bad training options");
  }

  // runs the epoch/batch skeleton; per_sample accumulates grads for one
  // sample index with the given weight and returns its loss value
  template <class F>
  std::vector<double> run(ScorerParams& params, std::size_t n_samples, F&& per_sample) {
    if (n_samples == 0) fail(errc::empty_input, "no training samples");
    std::vector<std::size_t> order(n_samples);
    for (std::size_t i = 0; i < n_samples; ++i) order[i] = i;
    ScorerParams grads = zero_like(params);
    std::vector<double> trace;
    for (int epoch = 0; epoch < opt.epochs; ++epoch) {
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);
      double epoch_loss = 0.0;
      std::size_t batches = 0;
      for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
        std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
        std::size_t bn = end - start;
        grads.for_each_span([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
        double batch_loss = 0.0;
        for (std::size_t k = start; k < end; ++k)
          batch_loss += per_sample(order[k], 1.0 / bn, grads, batches) / bn;
        if (!std::isfinite(batch_loss))
          fail(errc::training_diverged, "loss diverged at epoch " + std::to_string(epoch));
        sgd_step(params, grads, opt.lr, 5.0);
        if (!params_finite(params))
          fail(errc::training_diverged, "params non-finite at epoch " + std::to_string(epoch));
        epoch_loss += batch_loss;
        ++batches;
      }
      trace.push_back(batches ? epoch_loss / batches : 0.0);
    }
    return trace;
  }
};

const SemanticId& row_sid(const SidTable& table, const Catalog& cat, std::int64_t item_id,
                          int view) {
  // rows are emitted per item in view order
  std::size_t idx = cat.item_index(item_id) * cat.cfg.n_views + static_cast<std::size_t>(view);
  if (idx >= table.rows.size() || table.rows[idx].item_id != item_id ||
      table.rows[idx].view != view)
    fail(errc::shape_mismatch, "sid table layout mismatch");
  return table.rows[idx].sid;
}

const SemanticId& canon_sid(const SidTable& table, std::int64_t item_id) {
  auto it = table.canonical.find(item_id);
  if (it == table.canonical.end()) fail(errc::missing_file, "item missing from sid table");
  return it->second;
}

}  // namespace

ScorerParams train_pretrain(const Catalog& cat, const SidTable& table, ScorerParams params,
                            const GrTrainOptions& opt, GrTrace* trace) {
  struct Sample {
    const TokenMatrix* tokens;
    const SemanticId* sid;
    int category;
  };
  std::vector<Sample> samples;
  for (const Item& it : cat.items)
    for (std::size_t w = 0; w < it.views.size(); ++w)
      samples.push_back({&it.views[w], &row_sid(table, cat, it.item_id, static_cast<int>(w)),
                         it.category_id});

  StageLoop loop(opt);
  auto tr = loop.run(params, samples.size(),
                     [&](std::size_t i, double w, ScorerParams& g, std::size_t batch_idx) {
                       ScorerInput in;
                       in.query = samples[i].tokens;
                       // alternate the two pretraining tasks across batches
                       if (batch_idx % 2 == 0)
                         return -seq_core(params, in, *samples[i].sid, &g, -w);
                       return cat_core(params, in, samples[i].category, &g, w);
                     });
  if (trace) trace->epoch_loss = std::move(tr);
  return params;
}

ScorerParams train_sft(const Catalog& cat, const SidTable& table, ScorerParams params,
                       const GrTrainOptions& opt, GrTrace* trace,
                       const std::vector<SemanticId>* query_sids) {
  if (query_sids != nullptr && query_sids->size() != cat.pairs.pairs.size())
    fail(errc::shape_mismatch, "need one query code sequence per pair");
  struct Sample {
    const TokenMatrix* tokens;
    const SemanticId* own;
    const SemanticId* target;
  };
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < cat.pairs.pairs.size(); ++i) {
    if (is_eval_pair(i)) continue;
    const auto& pr = cat.pairs.pairs[i];
    const SemanticId* own =
        query_sids != nullptr ? &(*query_sids)[i] : &row_sid(table, cat, pr.a, pr.view_a);
    samples.push_back({&cat.item(pr.a).views[pr.view_a], own, &canon_sid(table, pr.b)});
  }
  StageLoop loop(opt);
  auto tr = loop.run(params, samples.size(),
                     [&](std::size_t i, double w, ScorerParams& g, std::size_t) {
                       ScorerInput in;
                       in.query = samples[i].tokens;
                       in.query_sid = samples[i].own;
                       return -seq_core(params, in, *samples[i].target, &g, -w);
                     });
  if (trace) trace->epoch_loss = std::move(tr);
  return params;
}

ScorerParams train_personalized_sft(const Catalog& cat, const SidTable& table,
                                    const std::map<std::int64_t, UserContext>& users,
                                    ScorerParams params, const GrTrainOptions& opt,
                                    GrTrace* trace, const std::vector<SemanticId>* query_sids) {
  if (query_sids != nullptr && query_sids->size() != cat.sessions.size())
    fail(errc::shape_mismatch, "need one query code sequence per session");
  struct Sample {
    const TokenMatrix* tokens;
    UserContext user;
    const SemanticId* target;
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
    samples.push_back({&s.query, std::move(u), &canon_sid(table, s.purchased),
                       query_sids ? &(*query_sids)[i] : nullptr});
  }
  StageLoop loop(opt);
  auto tr = loop.run(params, samples.size(),
                     [&](std::size_t i, double w, ScorerParams& g, std::size_t) {
                       ScorerInput in;
                       in.query = samples[i].tokens;
                       in.query_sid = samples[i].qsid;
                       in.user = &samples[i].user;
                       return -seq_core(params, in, *samples[i].target, &g, -w);
                     });
  if (trace) trace->epoch_loss = std::move(tr);
  return params;
}

namespace {

double dpo_core(const ScorerParams& policy, const ScorerParams& ref, const ScorerInput& base,
                const SemanticId& positive, const std::vector<SemanticId>& negatives, double beta,
                ScorerParams* grads, double coef) {
  if (negatives.empty()) fail(errc::empty_input, "preference loss needs negatives");
  if (beta <= 0.0) fail(errc::invalid_config, "beta must be positive");
  ScorerInput in = base;
  in.prefix.clear();
  double pos_gap = seq_logprob(policy, in, positive) - seq_logprob(ref, in, positive);
  std::vector<double> deltas(negatives.size());
  for (std::size_t j = 0; j < negatives.size(); ++j) {
    double neg_gap = seq_logprob(policy, in, negatives[j]) - seq_logprob(ref, in, negatives[j]);
    deltas[j] = neg_gap - pos_gap;
  }
  double a = 0.0;
  for (double d : deltas) a += std::exp(beta * d);
  double value = std::log1p(a);
  if (grads != nullptr) {
    double wsum = 0.0;
    for (std::size_t j = 0; j < negatives.size(); ++j) {
      double wj = beta * std::exp(beta * deltas[j]) / (1.0 + a);
      wsum += wj;
      seq_logprob_backward(policy, in, negatives[j], coef * wj, *grads);
    }
    seq_logprob_backward(policy, in, positive, -coef * wsum, *grads);
  }
  return value;
}

}  // namespace

DpoResult dpo_loss(const ScorerParams& policy, const ScorerParams& ref, const ScorerInput& base,
                   const SemanticId& positive, const std::vector<SemanticId>& negatives,
                   double beta) {
  DpoResult r;
  r.grads = zero_like(policy);
  r.value = dpo_core(policy, ref, base, positive, negatives, beta, &r.grads, 1.0);
  return r;
}

ScorerParams train_dpo(const Catalog& cat, const SidTable& table,
                       const std::map<std::int64_t, UserContext>& users, ScorerParams params,
                       const GrTrainOptions& opt, GrTrace* trace,
                       const std::vector<SemanticId>* query_sids) {
  if (query_sids != nullptr && query_sids->size() != cat.sessions.size())
    fail(errc::shape_mismatch, "need one query code sequence per session");
  struct Sample {
    const TokenMatrix* tokens;
    UserContext user;
    SemanticId positive;
    std::vector<SemanticId> negatives;
    const SemanticId* qsid;
  };
  std::vector<Sample> samples;
  for (std::size_t i = 0; i < cat.sessions.size(); ++i) {
    if (is_eval_session(i)) continue;
    const Session& s = cat.sessions[i];
    Sample sm;
    sm.tokens = &s.query;
    auto uit = users.find(s.user_id);
    if (uit == users.end()) fail(errc::missing_file, "session user has no context");
    sm.user = uit->second;
    sm.user.scene_id = s.scene_id;
    sm.positive = canon_sid(table, s.purchased);
    for (std::int64_t id : s.clicked_not_purchased) sm.negatives.push_back(canon_sid(table, id));
    for (std::int64_t id : s.exposed_not_clicked) sm.negatives.push_back(canon_sid(table, id));
    sm.qsid = query_sids ? &(*query_sids)[i] : nullptr;
    if (sm.negatives.empty()) continue;
    samples.push_back(std::move(sm));
  }
  ScorerParams ref = params;  // frozen reference
  StageLoop loop(opt);
  auto tr = loop.run(params, samples.size(),
                     [&](std::size_t i, double w, ScorerParams& g, std::size_t) {
                       ScorerInput in;
                       in.query = samples[i].tokens;
                       in.query_sid = samples[i].qsid;
                       in.user = &samples[i].user;
                       return dpo_core(params, ref, in, samples[i].positive,
                                       samples[i].negatives, opt.dpo_beta, &g, w);
                     });
  if (trace) trace->epoch_loss = std::move(tr);
  return params;
}

void save_scorer(const std::filesystem::path& path, const ScorerParams& p,
                 const std::string& stage, const std::string& parent_hash) {
  ScorerParams copy = p;
  Vec flat = flatten_params(copy);
  write_blob_f64(path, flat, 1);
  json j{{"level_sizes", p.level_sizes}, {"query_dim", p.query_dim},
         {"d_s", p.d_s},                {"h_s", p.h_s},
         {"n_categories", p.n_categories}, {"stage", stage},
         {"parent", parent_hash}};
  write_lines(path.string() + ".json", {j.dump()});
}

ScorerCheckpoint load_scorer(const std::filesystem::path& path) {
  auto side = read_lines(path.string() + ".json");
  if (side.empty()) fail(errc::io_failure, "empty scorer sidecar");
  json j = json::parse(side[0]);
  ScorerCheckpoint ck;
  ck.params = make_scorer(j.at("level_sizes").get<std::vector<int>>(),
                          j.at("query_dim").get<int>(), j.at("n_categories").get<int>(),
                          j.at("d_s").get<int>(), j.at("h_s").get<int>(), 0);
  std::uint32_t dim = 0;
  Vec flat = read_blob_f64(path, &dim);
  unflatten_params(ck.params, flat);
  ck.stage = j.at("stage").get<std::string>();
  ck.parent_hash = j.at("parent").get<std::string>();
  return ck;
}

std::string scorer_blob_hash(const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::hex << fnv1a64_file(path);
  return os.str();
}

}  // namespace visid
