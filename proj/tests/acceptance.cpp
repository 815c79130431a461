// End-to-end acceptance gate. Each check prints exactly one line; the binary
// exits nonzero if any check fails. Heavier checks report their wall time
// next to the budget they must stay under.
#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "visid/codemetrics.hpp"
#include "visid/corpus.hpp"
#include "visid/decode.hpp"
#include "visid/fusion.hpp"
#include "visid/genmodel.hpp"
#include "visid/pipeline.hpp"
#include "visid/prune.hpp"
#include "visid/quantize.hpp"

using namespace visid;

namespace {

struct Timer {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }
};

void report(int idx, bool ok, const std::string& what) {
  std::printf("[%s] %2d %s\n", ok ? "PASS" : "FAIL", idx, what.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

double max_abs(const Vec& v) {
  double m = 0.0;
  for (double x : v) m = std::max(m, std::abs(x));
  return m;
}

double rel_err(const Vec& analytic, const Vec& numeric) {
  if (analytic.size() != numeric.size()) return 1e300;
  double diff = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i)
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
  return diff / std::max(1e-8, max_abs(numeric));
}

Mat random_mat(Rng& rng, std::size_t rows, std::size_t cols, double scale = 1.0) {
  Mat m(rows, cols);
  for (double& x : m.a) x = scale * (2.0 * rng.uniform() - 1.0);
  return m;
}

FusedBatch random_batch(Rng& rng, std::size_t n, std::size_t d, double scale = 1.0) {
  FusedBatch b;
  b.f1 = random_mat(rng, n, d, scale);
  b.f2 = random_mat(rng, n, d, scale);
  b.v1 = random_mat(rng, n, d, scale);
  b.v2 = random_mat(rng, n, d, scale);
  return b;
}

Vec pack_batch(const FusedBatch& b) {
  Vec x;
  for (const Mat* m : {&b.f1, &b.f2, &b.v1, &b.v2})
    x.insert(x.end(), m->a.begin(), m->a.end());
  return x;
}

FusedBatch unpack_batch(const Vec& x, std::size_t n, std::size_t d) {
  FusedBatch b;
  b.f1 = Mat(n, d);
  b.f2 = Mat(n, d);
  b.v1 = Mat(n, d);
  b.v2 = Mat(n, d);
  std::size_t off = 0;
  for (Mat* m : {&b.f1, &b.f2, &b.v1, &b.v2}) {
    std::copy(x.begin() + off, x.begin() + off + n * d, m->a.begin());
    off += n * d;
  }
  return b;
}

Vec pack_grads(const BatchLoss& r) {
  Vec g;
  for (const Mat* m : {&r.g_f1, &r.g_f2, &r.g_v1, &r.g_v2})
    g.insert(g.end(), m->a.begin(), m->a.end());
  return g;
}

TokenMatrix random_tokens(Rng& rng, int count, int dim) {
  TokenMatrix tm;
  tm.dim = dim;
  tm.tokens.resize(static_cast<std::size_t>(count) * dim);
  for (float& x : tm.tokens) x = static_cast<float>(2.0 * rng.uniform() - 1.0);
  tm.recompute_pooled();
  return tm;
}

SemanticId random_sid(Rng& rng, const std::vector<int>& level_sizes) {
  SemanticId s;
  for (int k : level_sizes) s.codes.push_back(rng.uniform_int(k));
  return s;
}

ScorerParams toy_scorer(std::uint64_t seed, const std::vector<int>& levels = {3, 2},
                        int query_dim = 3, int n_cat = 3) {
  ScorerParams p = make_scorer(levels, query_dim, n_cat, 4, 5, seed);
  p.for_each_span([](std::span<double> s) {
    for (double& x : s) x *= 0.7;
  });
  return p;
}

// distance from f to its nearest shallow assignment boundary, walked through
// the residual chain; used to keep numgrad bumps inside fixed cells
bool voronoi_safe(std::span<const double> f, const CodebookStack& s, double margin) {
  Vec r(f.begin(), f.end());
  for (int l = 0; l < s.shallow_levels; ++l) {
    double best = 1e300, second = 1e300;
    std::size_t bi = 0;
    for (std::size_t k = 0; k < s.shallow[l].rows; ++k) {
      double dist = 0.0;
      for (std::size_t j = 0; j < r.size(); ++j) {
        double t = r[j] - s.shallow[l].at(k, j);
        dist += t * t;
      }
      if (dist < best) {
        second = best;
        best = dist;
        bi = k;
      } else if (dist < second) {
        second = dist;
      }
    }
    if (std::sqrt(second) - std::sqrt(best) < margin) return false;
    for (std::size_t j = 0; j < r.size(); ++j) r[j] -= s.shallow[l].at(bi, j);
  }
  return true;
}

bool margin_kink_free(const FusedBatch& b, double gamma) {
  std::size_t n = b.size();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double hinge = -gamma + dot(b.f1.rspan(i), b.f2.rspan(j)) -
                     dot(b.v1.rspan(i), b.f2.rspan(j));
      if (std::abs(hinge) < 1e-3) return false;
    }
  return true;
}

bool align_kink_free(const FusedBatch& b, const FusionHyper& h) {
  std::size_t n = b.size();
  std::size_t rows = 2 * n;
  auto row_of = [&](std::size_t rr) { return rr < n ? b.f1.rspan(rr) : b.f2.rspan(rr - n); };
  for (std::size_t a = 0; a < rows; ++a)
    for (std::size_t q = 0; q < rows; ++q) {
      if (q == a) continue;
      double s = dot(row_of(a), row_of(q));
      std::size_t partner = a < n ? a + n : a - n;
      double gap = q == partner ? (1.0 + h.circle_margin - s) : (s + h.circle_margin);
      if (std::abs(gap) < 1e-3) return false;
    }
  return true;
}

// ---------------------------------------------------------------------------

bool check_gradients() {
  Timer timer;
  const double tol = 1e-4;
  double worst = 0.0;
  int suites = 0;
  auto note = [&](double e) { worst = std::max(worst, e); };

  // multi-view consistency
  {
    Rng rng(61);
    for (int t = 0; t < 20; ++t) {
      std::size_t n = 2 + rng.uniform_int(5), d = 2 + rng.uniform_int(7);
      FusedBatch b = random_batch(rng, n, d);
      double tau = 0.15 + 0.5 * rng.uniform();
      BatchLoss r = loss_cons(b, tau);
      Vec gn = numgrad(
          [&](std::span<const double> p) {
            return loss_cons(unpack_batch(Vec(p.begin(), p.end()), n, d), tau).value;
          },
          pack_batch(b));
      note(rel_err(pack_grads(r), gn));
    }
    ++suites;
  }

  // margin hinge
  {
    Rng rng(67);
    int done = 0;
    while (done < 20) {
      std::size_t n = 2 + rng.uniform_int(5), d = 2 + rng.uniform_int(7);
      FusedBatch b = random_batch(rng, n, d);
      double gamma = 0.3 * rng.uniform();
      if (!margin_kink_free(b, gamma)) continue;
      BatchLoss r = loss_margin(b, gamma);
      Vec gn = numgrad(
          [&](std::span<const double> p) {
            return loss_margin(unpack_batch(Vec(p.begin(), p.end()), n, d), gamma).value;
          },
          pack_batch(b));
      note(rel_err(pack_grads(r), gn));
      ++done;
    }
    ++suites;
  }

  // pair alignment (infonce plus circle weighting)
  {
    Rng rng(71);
    FusionHyper h;
    h.lambda1 = 0.7;
    h.lambda2 = 0.3;
    h.tau = 0.3;
    h.circle_scale = 4.0;
    h.circle_margin = 0.25;
    int done = 0;
    while (done < 20) {
      std::size_t n = 2 + rng.uniform_int(4), d = 2 + rng.uniform_int(6);
      FusedBatch b = random_batch(rng, n, d);
      for (Mat* m : {&b.f1, &b.f2})
        for (double& v : m->a) v *= 0.4;
      if (!align_kink_free(b, h)) continue;
      BatchLoss r = loss_align(b, h);
      Vec gn = numgrad(
          [&](std::span<const double> p) {
            return loss_align(unpack_batch(Vec(p.begin(), p.end()), n, d), h).value;
          },
          pack_batch(b));
      note(rel_err(pack_grads(r), gn));
      ++done;
    }
    ++suites;
  }

  // codebook commitment, gradient through the encoder side only
  {
    Rng rng(23);
    int done = 0;
    while (done < 20) {
      std::size_t d = 2 + rng.uniform_int(5);
      Mat pts = random_mat(rng, 24, d);
      CodebookStack s = rq_kmeans_fit(pts, {3, 2}, {}, 40 + done);
      Vec f(d);
      for (double& x : f) x = 2.0 * rng.uniform() - 1.0;
      if (!voronoi_safe(f, s, 1e-3)) continue;
      auto [value, g] = loss_commit(rq_encode(f, s), s);
      (void)value;
      Vec gn = numgrad(
          [&](std::span<const double> p) {
            return loss_commit(rq_encode(Vec(p.begin(), p.end()), s), s).first;
          },
          f);
      note(rel_err(g, gn));
      ++done;
    }
    ++suites;
  }

  // hierarchy consistency, straight-through convention: the reconstructions
  // move one-for-one with the embedding at frozen code assignments, so the
  // numerical side differentiates that frozen surrogate
  auto hc_surrogate_check = [&](const CodebookStack& s, const Vec& fa, const Vec& fb) {
    QuantResult qa = rq_encode(fa, s);
    QuantResult qb = rq_encode(fb, s);
    HcLoss h = loss_hc(qa, qb);
    std::size_t d = fa.size();
    std::vector<Vec> ka(qa.recon_levels), kb(qb.recon_levels);
    for (auto& k : ka)
      for (std::size_t j = 0; j < d; ++j) k[j] -= fa[j];
    for (auto& k : kb)
      for (std::size_t j = 0; j < d; ++j) k[j] -= fb[j];
    auto surrogate = [&](std::span<const double> a, std::span<const double> b) {
      double v = 0.0;
      for (std::size_t l = 0; l < ka.size(); ++l)
        for (std::size_t j = 0; j < d; ++j) {
          double diff = (a[j] + ka[l][j]) - (b[j] + kb[l][j]);
          v += diff * diff;
        }
      return v;
    };
    Vec gna = numgrad([&](std::span<const double> p) { return surrogate(p, fb); }, fa);
    Vec gnb = numgrad([&](std::span<const double> p) { return surrogate(fa, p); }, fb);
    note(rel_err(h.g_a, gna));
    note(rel_err(h.g_b, gnb));
  };
  {
    Rng rng(31);
    for (int t = 0; t < 20; ++t) {
      std::size_t d = 2 + rng.uniform_int(5);
      Mat pts = random_mat(rng, 24, d);
      CodebookStack s = rq_kmeans_fit(pts, {3, 2}, {}, 60 + t);
      Vec fa(d), fb(d);
      for (double& x : fa) x = 2.0 * rng.uniform() - 1.0;
      for (double& x : fb) x = 2.0 * rng.uniform() - 1.0;
      hc_surrogate_check(s, fa, fb);
    }
    ++suites;
  }

  // the joint objective the quantizer trains on: weighted consistency,
  // margin, commitment and hierarchy terms over a batch of pairs
  {
    Rng rng(83);
    const std::array<double, 4> betas{1.0, 0.25, 1.0, 0.5};
    double gamma = 0.1, tau = 0.3;
    int done = 0;
    while (done < 20) {
      std::size_t n = 2 + rng.uniform_int(2), d = 3 + rng.uniform_int(3);
      Mat pts = random_mat(rng, 24, d);
      CodebookStack s = rq_kmeans_fit(pts, {3, 2}, {}, 90 + done);
      FusedBatch b = random_batch(rng, n, d);
      if (!margin_kink_free(b, gamma)) continue;
      bool safe = true;
      for (std::size_t i = 0; i < n && safe; ++i)
        safe = voronoi_safe(b.f1.rspan(i), s, 1e-3) && voronoi_safe(b.f2.rspan(i), s, 1e-3);
      if (!safe) continue;

      // frozen per-pair reconstruction offsets for the hierarchy surrogate
      std::vector<std::vector<Vec>> ka(n), kb(n);
      for (std::size_t i = 0; i < n; ++i) {
        QuantResult qa = rq_encode(b.f1.rspan(i), s);
        QuantResult qb = rq_encode(b.f2.rspan(i), s);
        ka[i] = qa.recon_levels;
        kb[i] = qb.recon_levels;
        for (auto& k : ka[i])
          for (std::size_t j = 0; j < d; ++j) k[j] -= b.f1.at(i, j);
        for (auto& k : kb[i])
          for (std::size_t j = 0; j < d; ++j) k[j] -= b.f2.at(i, j);
      }
      auto composite = [&](const FusedBatch& batch, bool frozen_hc) {
        double v = betas[0] * loss_cons(batch, tau).value +
                   betas[1] * loss_margin(batch, gamma).value;
        for (std::size_t i = 0; i < n; ++i) {
          v += betas[2] * loss_commit(rq_encode(batch.f1.rspan(i), s), s).first;
          v += betas[2] * loss_commit(rq_encode(batch.f2.rspan(i), s), s).first;
          if (frozen_hc) {
            for (std::size_t l = 0; l < ka[i].size(); ++l)
              for (std::size_t j = 0; j < d; ++j) {
                double diff = (batch.f1.at(i, j) + ka[i][l][j]) -
                              (batch.f2.at(i, j) + kb[i][l][j]);
                v += betas[3] * diff * diff;
              }
          } else {
            v += betas[3] *
                 loss_hc(rq_encode(batch.f1.rspan(i), s), rq_encode(batch.f2.rspan(i), s)).value;
          }
        }
        return v;
      };
      // analytic gradient assembled the way the training loop assembles it
      BatchLoss c = loss_cons(b, tau);
      BatchLoss m = loss_margin(b, gamma);
      Vec ga(4 * n * d, 0.0);
      {
        Vec gc = pack_grads(c), gm = pack_grads(m);
        for (std::size_t i = 0; i < ga.size(); ++i)
          ga[i] = betas[0] * gc[i] + betas[1] * gm[i];
      }
      for (std::size_t i = 0; i < n; ++i) {
        QuantResult qa = rq_encode(b.f1.rspan(i), s);
        QuantResult qb = rq_encode(b.f2.rspan(i), s);
        Vec gca = loss_commit(qa, s).second;
        Vec gcb = loss_commit(qb, s).second;
        HcLoss h = loss_hc(qa, qb);
        for (std::size_t j = 0; j < d; ++j) {
          ga[i * d + j] += betas[2] * gca[j] + betas[3] * h.g_a[j];
          ga[n * d + i * d + j] += betas[2] * gcb[j] + betas[3] * h.g_b[j];
        }
      }
      // sanity: frozen surrogate value agrees with the live value here
      if (std::abs(composite(b, true) - composite(b, false)) > 1e-9) continue;
      Vec gn = numgrad(
          [&](std::span<const double> p) {
            return composite(unpack_batch(Vec(p.begin(), p.end()), n, d), true);
          },
          pack_batch(b));
      note(rel_err(ga, gn));
      ++done;
    }
    ++suites;
  }

  // next-code sequence loss, gradient over every scorer parameter
  {
    Rng rng(113);
    for (int t = 0; t < 20; ++t) {
      ScorerParams p = toy_scorer(300 + t);
      TokenMatrix tm = random_tokens(rng, 2 + rng.uniform_int(2), 3);
      SemanticId qsid = random_sid(rng, p.level_sizes);
      ScorerInput in;
      in.query = &tm;
      if (t % 2 == 0) in.query_sid = &qsid;
      SemanticId target = random_sid(rng, p.level_sizes);
      ScorerParams grads = zero_like(p);
      (void)ntp_loss(p, in, target, &grads);
      Vec ga = flatten_params(grads);
      Vec gn = numgrad(
          [&](std::span<const double> flat) {
            ScorerParams q = p;
            unflatten_params(q, Vec(flat.begin(), flat.end()));
            return ntp_loss(q, in, target, nullptr);
          },
          flatten_params(p));
      note(rel_err(ga, gn));
    }
    ++suites;
  }

  // category auxiliary loss
  {
    Rng rng(127);
    for (int t = 0; t < 20; ++t) {
      ScorerParams p = toy_scorer(500 + t);
      TokenMatrix tm = random_tokens(rng, 2 + rng.uniform_int(2), 3);
      ScorerInput in;
      in.query = &tm;
      int cat_id = rng.uniform_int(3);
      ScorerParams grads = zero_like(p);
      (void)category_loss(p, in, cat_id, &grads);
      Vec ga = flatten_params(grads);
      Vec gn = numgrad(
          [&](std::span<const double> flat) {
            ScorerParams q = p;
            unflatten_params(q, Vec(flat.begin(), flat.end()));
            return category_loss(q, in, cat_id, nullptr);
          },
          flatten_params(p));
      note(rel_err(ga, gn));
    }
    ++suites;
  }

  // list-wise preference loss, policy gradient off the reference point
  {
    Rng rng(139);
    for (int t = 0; t < 20; ++t) {
      ScorerParams ref = toy_scorer(700 + t);
      ScorerParams policy = ref;
      policy.for_each_span([&](std::span<double> s) {
        for (double& x : s) x += 0.05 * (2.0 * rng.uniform() - 1.0);
      });
      TokenMatrix tm = random_tokens(rng, 2, 3);
      ScorerInput in;
      in.query = &tm;
      SemanticId pos = random_sid(rng, ref.level_sizes);
      std::vector<SemanticId> negs;
      int m = 1 + rng.uniform_int(3);
      for (int i = 0; i < m; ++i) negs.push_back(random_sid(rng, ref.level_sizes));
      DpoResult r = dpo_loss(policy, ref, in, pos, negs, 0.25);
      Vec ga = flatten_params(r.grads);
      Vec gn = numgrad(
          [&](std::span<const double> flat) {
            ScorerParams q = policy;
            unflatten_params(q, Vec(flat.begin(), flat.end()));
            return dpo_loss(q, ref, in, pos, negs, 0.25).value;
          },
          flatten_params(policy));
      note(rel_err(ga, gn));
    }
    ++suites;
  }

  // teacher-to-student distribution matching, gradient over the student
  {
    Rng rng(149);
    for (int t = 0; t < 20; ++t) {
      ScorerParams ref = toy_scorer(900 + t);
      ScorerParams student = toy_scorer(1100 + t);
      TokenMatrix full = random_tokens(rng, 4, 3);
      TokenMatrix cut = prune_tokens(full, select_tokens(full, 3, 0));
      ScorerInput rin;
      rin.query = &full;
      ScorerInput sin;
      sin.query = &cut;
      ScorerParams grads = zero_like(student);
      (void)distill_loss(ref, student, rin, sin, &grads);
      Vec ga = flatten_params(grads);
      Vec gn = numgrad(
          [&](std::span<const double> flat) {
            ScorerParams q = student;
            unflatten_params(q, Vec(flat.begin(), flat.end()));
            return distill_loss(ref, q, rin, sin, nullptr);
          },
          flatten_params(student));
      note(rel_err(ga, gn));
    }
    ++suites;
  }

  double secs = timer.seconds();
  bool ok = worst < tol && secs < 60.0;
  report(1, ok,
         fmt("gradient oracles: %d losses x 20 instances, max rel err %.2e (tol 1e-4), "
             "%.1fs (limit 60s)",
             suites, worst, secs));
  return ok;
}

// ---------------------------------------------------------------------------

SidTable table_from(const std::vector<std::vector<int>>& sids, std::vector<int> level_sizes) {
  SidTable t;
  t.level_sizes = std::move(level_sizes);
  for (std::size_t i = 0; i < sids.size(); ++i) {
    SemanticId sid;
    sid.codes = sids[i];
    t.rows.push_back({static_cast<std::int64_t>(i), 0, sid});
    t.canonical[static_cast<std::int64_t>(i)] = sid;
  }
  return t;
}

std::vector<BeamItem> exhaustive_rank(const StepScorer& step, const SidTrie& trie,
                                      const SidTable& table) {
  std::vector<BeamItem> out;
  std::set<std::vector<int>> seen;
  for (const auto& [id, sid] : table.canonical) {
    if (!seen.insert(sid.codes).second) continue;
    double lp = 0.0;
    int node = 0;
    std::vector<int> prefix;
    for (int code : sid.codes) {
      Vec p = step(prefix);
      const auto& ch = trie.nodes[node].children;
      double mass = 0.0;
      for (const auto& [c, nn] : ch) mass += p[c];
      double pr = mass > 0.0 ? p[code] / mass : 1.0 / ch.size();
      lp = lp + std::log(pr);
      for (const auto& [c, nn] : ch)
        if (c == code) node = nn;
      prefix.push_back(code);
    }
    out.push_back({sid, lp});
  }
  std::sort(out.begin(), out.end(), [](const BeamItem& a, const BeamItem& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.sid.codes < b.sid.codes;
  });
  return out;
}

bool check_beam_oracle() {
  Timer timer;
  Rng rng(401);
  int trials = 0, mismatches = 0;
  std::size_t largest = 0;

  for (int trial = 0; trial < 50; ++trial) {
    std::vector<int> sizes;
    if (trial == 0) {
      sizes = {8, 8, 8};  // the full 512-sequence case
    } else {
      int levels = 2 + rng.uniform_int(2);
      std::size_t total = 1;
      for (int l = 0; l < levels; ++l) {
        int k = 2 + rng.uniform_int(7);
        while (total * k > 512) k = std::max(2, k / 2);
        if (total * k > 512) k = 2;
        sizes.push_back(k);
        total *= k;
      }
    }
    std::size_t total = 1;
    for (int k : sizes) total *= k;

    // enumerate the space, keep a random subset (or everything on tie trials)
    std::vector<std::vector<int>> space;
    space.emplace_back();
    for (std::size_t l = 0; l < sizes.size(); ++l) {
      std::vector<std::vector<int>> next;
      for (const auto& p : space)
        for (int c = 0; c < sizes[l]; ++c) {
          next.push_back(p);
          next.back().push_back(c);
        }
      space = std::move(next);
    }
    bool tie_trial = trial % 5 == 4;
    if (!tie_trial && trial != 0) {
      for (std::size_t i = space.size(); i > 1; --i)
        std::swap(space[i - 1], space[rng.uniform_int(static_cast<int>(i))]);
      std::size_t keep =
          2 + rng.uniform_int(static_cast<int>(std::min<std::size_t>(510, total - 1)));
      space.resize(keep);
    }
    SidTable table = table_from(space, sizes);
    SidTrie trie = trie_build(table);
    largest = std::max(largest, space.size());
    int beam = static_cast<int>(space.size());

    std::vector<BeamItem> got, expected;
    if (trial % 2 == 0) {
      // scorer-driven path, through the production wrapper
      ScorerParams p = toy_scorer(2000 + trial, sizes);
      if (tie_trial)
        p.for_each_span([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
      TokenMatrix tm = random_tokens(rng, 3, 3);
      ScorerInput base;
      base.query = &tm;
      got = beam_search(p, base, trie, beam);
      StepScorer step = [&](std::span<const int> prefix) {
        ScorerInput in = base;
        in.prefix.assign(prefix.begin(), prefix.end());
        return score_next(p, in);
      };
      expected = exhaustive_rank(step, trie, table);
    } else {
      std::uint64_t salt = 3000 + trial;
      StepScorer step = [&sizes, salt](std::span<const int> prefix) {
        std::uint64_t h = salt;
        for (int c : prefix) h = h * 1099511628211ULL + static_cast<std::uint64_t>(c) + 1;
        Rng r2(h);
        int k = sizes[prefix.size()];
        Vec logits(k);
        for (double& x : logits) x = 2.0 * r2.uniform() - 1.0;
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (double& x : logits) {
          x = std::exp(x - mx);
          z += x;
        }
        for (double& x : logits) x /= z;
        return logits;
      };
      got = beam_search_core(step, sizes, trie, beam);
      expected = exhaustive_rank(step, trie, table);
    }

    ++trials;
    if (got.size() != expected.size()) {
      ++mismatches;
      continue;
    }
    for (std::size_t i = 0; i < got.size(); ++i) {
      if (got[i].sid.codes != expected[i].sid.codes ||
          std::abs(got[i].logprob - expected[i].logprob) >
              1e-12 * std::max(1.0, std::abs(expected[i].logprob))) {
        ++mismatches;
        break;
      }
    }
  }

  double secs = timer.seconds();
  bool ok = mismatches == 0 && trials >= 50 && secs < 30.0;
  report(2, ok,
         fmt("constrained search equals exhaustive enumeration: %d/%d trials exact "
             "(largest %zu sequences), %.1fs (limit 30s)",
             trials - mismatches, trials, largest, secs));
  return ok;
}

// ---------------------------------------------------------------------------

bool check_dpo_closed_form() {
  Rng rng(577);
  ScorerParams p = toy_scorer(42);
  TokenMatrix tm = random_tokens(rng, 3, 3);
  ScorerInput in;
  in.query = &tm;
  double worst = 0.0;
  for (int m = 1; m <= 10; ++m) {
    SemanticId pos = random_sid(rng, p.level_sizes);
    std::vector<SemanticId> negs;
    for (int i = 0; i < m; ++i) negs.push_back(random_sid(rng, p.level_sizes));
    for (double beta : {0.1, 0.7}) {
      DpoResult r = dpo_loss(p, p, in, pos, negs, beta);
      worst = std::max(worst, std::abs(r.value - std::log1p(static_cast<double>(m))));
    }
  }
  bool ok = worst < 1e-12;
  report(3, ok,
         fmt("preference loss at policy=reference equals ln(1+m), m=1..10: "
             "max |dev| %.2e (tol 1e-12)",
             worst));
  return ok;
}

// ---------------------------------------------------------------------------

bool check_quantizer_invariants() {
  bool ok = true;
  std::string detail;

  // residual chaining is exact arithmetic
  {
    Rng rng(17);
    Mat pts = random_mat(rng, 40, 5);
    CodebookStack s = rq_kmeans_fit(pts, {4, 3}, {}, 7);
    double worst = 0.0;
    for (std::size_t i = 0; i < pts.rows; ++i) {
      QuantResult q = rq_encode(pts.rspan(i), s);
      for (int l = 0; l < 2; ++l) {
        auto e = s.shallow[l].rspan(q.sid.codes[l]);
        for (std::size_t j = 0; j < 5; ++j)
          worst = std::max(worst, std::abs(q.residuals[l + 1][j] - (q.residuals[l][j] - e[j])));
      }
    }
    if (worst != 0.0) {
      ok = false;
      detail += " residual-identity";
    }
  }

  // residual energy shrinks level by level under the k-means fit
  {
    Rng rng(19);
    Mat pts = random_mat(rng, 400, 16);
    CodebookStack s = rq_kmeans_fit(pts, {8, 8, 8}, {}, 7);
    Vec energy(4, 0.0);
    for (std::size_t i = 0; i < pts.rows; ++i) {
      QuantResult q = rq_encode(pts.rspan(i), s);
      for (int l = 0; l < 4; ++l) {
        double e = 0.0;
        for (double x : q.residuals[l]) e += x * x;
        energy[l] += e / pts.rows;
      }
    }
    for (int l = 0; l < 3; ++l)
      if (energy[l + 1] > energy[l]) {
        ok = false;
        detail += " residual-energy";
        break;
      }
  }

  // rotation stays orthogonal and the alternation objective never rises
  {
    Rng rng(29);
    Mat pts = random_mat(rng, 300, 12);
    OpqFitResult r = opq_fit(pts, Mat(0, 0), 3, 8, 10, 7);
    const Mat& R = r.params.rotation;
    double worst = 0.0;
    for (std::size_t i = 0; i < R.rows; ++i)
      for (std::size_t j = 0; j < R.rows; ++j) {
        double v = 0.0;
        for (std::size_t k = 0; k < R.rows; ++k) v += R.at(k, i) * R.at(k, j);
        worst = std::max(worst, std::abs(v - (i == j ? 1.0 : 0.0)));
      }
    if (worst >= 1e-6) {
      ok = false;
      detail += " rotation-orthogonality";
    }
    for (std::size_t i = 0; i + 1 < r.objective_trace.size(); ++i)
      if (r.objective_trace[i + 1] > r.objective_trace[i] + 1e-9) {
        ok = false;
        detail += " opq-monotonicity";
        break;
      }
  }

  // moving-average convergence: a single entry fed one constant assignment
  // per step for n steps sits within rho^n of the data point
  {
    Catalog cat;
    cat.cfg.n_items = 2;
    cat.cfg.n_views = 2;
    cat.cfg.v_max = 1;
    cat.cfg.dim = 6;
    cat.cfg.d_cat = 4;
    cat.cfg.n_categories = 1;
    cat.cfg.n_users = 1;
    cat.cfg.n_sessions = 0;
    cat.cfg.seed = 7;
    Rng rng(99);
    Vec pooled(6);
    for (double& x : pooled) x = 2.0 * rng.uniform() - 1.0;
    double nn = norm2(pooled);
    for (double& x : pooled) x /= nn;
    for (int i = 0; i < 2; ++i) {
      Item it;
      it.item_id = i;
      it.category_id = 0;
      for (int v = 0; v < 2; ++v) {
        TokenMatrix tm;
        tm.dim = 6;
        tm.tokens.assign(pooled.begin(), pooled.end());
        tm.pooled = pooled;
        it.views.push_back(tm);
      }
      cat.items.push_back(std::move(it));
    }
    cat.category_vecs.assign(4, static_cast<float>(0.5));
    cat.pairs.pairs.push_back({0, 0, 0, 1});
    cat.pairs.pairs.push_back({1, 0, 1, 1});

    FusionParams fusion = make_fusion_params(6, 4, 6, 8, 7);
    auto cv = cat.category_vec(0);
    Vec y(cv.begin(), cv.end());
    Vec target = fuse(fusion, cat.items[0].views[0].pooled, y).f;

    double delta = 2e-3, rho = 0.99;
    int n_updates = 100;
    CodebookStack init;
    init.level_sizes = {1};
    init.shallow_levels = 1;
    Mat entry(1, 6);
    for (int j = 0; j < 6; ++j) entry.at(0, j) = target[j];
    entry.at(0, 0) += delta;
    init.shallow.push_back(entry);
    init.ema_sums.push_back(entry);
    init.ema_counts.push_back(Vec(1, 1.0));

    VrqTrainResult r =
        train_vrq(cat, fusion, init, {0.0, 0.0, 1.0, 0.0}, n_updates, 0.0, rho, 7, {0, 1});
    Vec err(6);
    for (int j = 0; j < 6; ++j) err[j] = r.stack.shallow[0].at(0, j) - target[j];
    double bound = std::pow(rho, n_updates) * delta;
    if (!(norm2(err) <= bound * (1.0 + 1e-9) && norm2(err) > 0.0)) {
      ok = false;
      detail += " ema-bound";
    }
  }

  report(4, ok,
         ok ? "quantizer invariants: residual identity exact, level energy non-increasing, "
              "rotation orthogonal with monotone objective, moving-average bound at "
              "n=100 rho=0.99"
            : "quantizer invariants failed:" + detail);
  return ok;
}

// ---------------------------------------------------------------------------

bool check_metric_fixtures() {
  bool ok = true;
  std::string detail;

  {
    std::vector<RankedList> lists;
    lists.push_back({0, {3, 1, 2}, 1});
    if (hr_at_k(lists, 1) != 0.0) ok = false, detail += " hr@1";
    if (hr_at_k(lists, 2) != 1.0) ok = false, detail += " hr@2";
    if (mrr_at_k(lists, 4) != 0.5) ok = false, detail += " mrr@4";
    lists.push_back({1, {3, 1, 2}, 9});  // absent target contributes zero
    if (hr_at_k(lists, 2) != 0.5) ok = false, detail += " hr@2-mean";
    if (mrr_at_k(lists, 4) != 0.25) ok = false, detail += " mrr@4-mean";
  }

  {
    // six items over code groups of sizes 2, 1, 3 average to two per group
    SidTable t =
        table_from({{0, 0}, {0, 0}, {1, 0}, {1, 1}, {1, 1}, {1, 1}}, {2, 2});
    if (ico(t) != 2.0) ok = false, detail += " ico";
    SidTable u = table_from({{0, 0}, {0, 1}, {1, 0}}, {2, 2});
    if (ico(u) != 1.0) ok = false, detail += " ico-distinct";
  }

  {
    Catalog cat;
    cat.cfg.n_items = 3;
    cat.cfg.n_views = 1;
    cat.cfg.v_max = 1;
    cat.cfg.dim = 4;
    cat.cfg.d_cat = 2;
    cat.cfg.n_categories = 1;
    cat.cfg.n_users = 1;
    cat.cfg.n_sessions = 0;
    cat.cfg.seed = 7;
    Rng rng(11);
    for (int i = 0; i < 3; ++i) {
      Item it;
      it.item_id = i;
      it.category_id = 0;
      TokenMatrix tm;
      tm.dim = 4;
      Vec pooled(4);
      for (double& x : pooled) x = 2.0 * rng.uniform() - 1.0;
      double n = norm2(pooled);
      for (double& x : pooled) x /= n;
      tm.tokens.assign(pooled.begin(), pooled.end());
      tm.pooled = pooled;
      it.views.push_back(tm);
      cat.items.push_back(std::move(it));
    }
    cat.category_vecs.assign(2, 0.70710678f);
    cat.pairs.pairs.push_back({0, 0, 1, 0});
    cat.pairs.pairs.push_back({1, 0, 2, 0});
    cat.pairs.pairs.push_back({2, 0, 0, 0});
    FusionParams fusion = make_fusion_params(4, 2, 4, 6, 7);
    // pinned representations make every cosine a hand constant:
    // item 0 -> (1,0), item 1 -> (0,1), item 2 -> (0.6,0.8)
    ReconFn hook = [](std::span<const double>, const Item& it) {
      switch (it.item_id) {
        case 0: return Vec{1.0, 0.0};
        case 1: return Vec{0.0, 1.0};
        default: return Vec{0.6, 0.8};
      }
    };
    QasResult r = qas_with(cat, fusion, hook, {0, 1, 2}, {1, 2, 3});
    auto close = [](double a, double b) { return std::abs(a - b) <= 1e-15; };
    if (r.hr[1] != 0.0) ok = false, detail += " qas-hr@1";
    if (!close(r.hr[2], 1.0 / 3.0)) ok = false, detail += " qas-hr@2";
    if (r.hr[3] != 1.0) ok = false, detail += " qas-hr@3";
    if (r.mrr[1] != 0.0) ok = false, detail += " qas-mrr@1";
    if (!close(r.mrr[2], 1.0 / 6.0)) ok = false, detail += " qas-mrr@2";
    if (!close(r.mrr[3], 7.0 / 18.0)) ok = false, detail += " qas-mrr@3";
  }

  report(5, ok,
         ok ? "metric hand fixtures: hit rate, reciprocal rank, code occupancy and "
              "quantized-search scores match enumeration"
            : "metric hand fixtures failed:" + detail);
  return ok;
}

// ---------------------------------------------------------------------------

StageBudgets study_budgets() {
  StageBudgets b;
  b.d_s = 32;
  b.h_s = 64;
  b.pretrain.epochs = 2;
  b.pretrain.lr = 0.05;
  b.pretrain.batch_size = 64;
  b.pretrain.seed = 7;
  b.sft.epochs = 2;
  b.sft.lr = 0.05;
  b.sft.batch_size = 64;
  b.sft.seed = 7;
  return b;
}

bool check_encode_study() {
  Timer timer;
  CatalogConfig cfg;  // full-scale defaults: 2000 items, 4 views, seed 7
  Catalog cat = generate_catalog(cfg);
  Splits splits = make_splits(cat);

  FusionParams base = make_fusion_params(cfg.dim, cfg.d_cat, cfg.dim, 64, cfg.seed);
  base = train_fusion(cat, std::move(base), 1, 0.05, 32, cfg.seed, splits.train_pairs);

  EncodeBudget budget;  // shallow 8,8,8 deep 4,4 for every stacked method
  RetrieveOptions ropt;
  ropt.beam = 8;
  ropt.top_n = 10;
  std::vector<EncodeStudyRow> rows =
      run_encode_study(cat, base, budget, study_budgets(), ropt, 8);

  const EncodeStudyRow* rqk = nullptr;
  const EncodeStudyRow* fsq = nullptr;
  const EncodeStudyRow* vrq = nullptr;
  for (const auto& r : rows) {
    if (r.method == "rq-kmeans") rqk = &r;
    if (r.method == "fsq") fsq = &r;
    if (r.method == "vrq") vrq = &r;
  }
  bool found = rqk && fsq && vrq && rows.size() == 5;
  bool a = found && vrq->gr_hr4 > rqk->gr_hr4;
  bool b = found;
  bool c = found && vrq->ico < rqk->ico;
  if (found)
    for (const auto& r : rows) {
      if (r.method == "fsq") continue;
      if (!(fsq->qas_hr4 > r.qas_hr4)) b = false;
      if (!(fsq->gr_hr4 < r.gr_hr4)) b = false;
    }
  double secs = timer.seconds();
  bool ok = a && b && c && secs < 600.0;
  std::string line = fmt(
      "encoding method study at 2000x4:");
  for (const auto& r : rows)
    line += fmt(" %s(gr %.3f qas %.3f ico %.2f)", r.method.c_str(), r.gr_hr4, r.qas_hr4, r.ico);
  line += fmt(" | joint>kmeans %s, scalar best-qas/worst-gr %s, joint-ico<kmeans %s, "
              "%.0fs (limit 600s)",
              a ? "yes" : "NO", b ? "yes" : "NO", c ? "yes" : "NO", secs);
  report(6, ok, line);
  return ok;
}

// ---------------------------------------------------------------------------

bool check_capacity_sweep() {
  Timer timer;
  CatalogConfig cfg;
  cfg.n_items = 600;
  cfg.n_views = 4;
  cfg.v_max = 16;
  cfg.n_users = 60;
  cfg.n_sessions = 600;
  Catalog cat = generate_catalog(cfg);
  Splits splits = make_splits(cat);
  FusionParams base = make_fusion_params(cfg.dim, cfg.d_cat, cfg.dim, 64, cfg.seed);
  base = train_fusion(cat, std::move(base), 1, 0.05, 32, cfg.seed, splits.train_pairs);

  EncodeBudget budget;
  RetrieveOptions ropt;
  ropt.beam = 8;
  ropt.top_n = 10;
  std::vector<SweepConfig> configs = {
      {{8}, {4, 4}},        {{8, 8}, {4, 4}},     {{8, 8, 8}, {4, 4}},   // depth 1 -> 3
      {{4, 8, 8}, {4, 4}},  {{8, 8, 8}, {4, 4}},  {{16, 8, 8}, {4, 4}},  // first level 4 -> 16
  };
  std::vector<SweepRow> rows = run_sweep(cat, base, configs, budget, study_budgets(), ropt, 4);

  auto non_decreasing = [&](std::size_t i0) {
    for (std::size_t i = i0; i + 1 < i0 + 3; ++i)
      if (rows[i + 1].gr_hr4 < rows[i].gr_hr4 - 0.01 - 1e-12) return false;
    return true;
  };
  bool depth_ok = non_decreasing(0);
  bool width_ok = non_decreasing(3);
  double secs = timer.seconds();
  bool ok = rows.size() == 6 && depth_ok && width_ok;
  std::string line = "capacity sweep:";
  for (const auto& r : rows) line += fmt(" [%s]=%.3f", r.levels.c_str(), r.gr_hr4);
  line += fmt(" | depth 1->3 within 1pt of monotone %s, first level 4->16 %s, %.0fs",
              depth_ok ? "yes" : "NO", width_ok ? "yes" : "NO", secs);
  report(7, ok, line);
  return ok;
}

// ---------------------------------------------------------------------------

bool check_stage_gains() {
  Timer timer;
  CatalogConfig cfg;
  cfg.n_items = 600;
  cfg.n_views = 4;
  cfg.v_max = 16;
  cfg.n_users = 100;
  cfg.n_sessions = 1000;
  Catalog cat = generate_catalog(cfg);
  Splits splits = make_splits(cat);
  FusionParams base = make_fusion_params(cfg.dim, cfg.d_cat, cfg.dim, 64, cfg.seed);
  base = train_fusion(cat, std::move(base), 1, 0.05, 32, cfg.seed, splits.train_pairs);

  EncodeBudget budget;
  MethodSetup m = fit_method(MethodKind::vrq, cat, base, budget, splits);

  StageBudgets b = study_budgets();
  b.psft = b.sft;
  b.psft.epochs = 2;
  b.dpo.epochs = 1;
  b.dpo.lr = 0.02;
  b.dpo.batch_size = 32;
  b.dpo.seed = 7;
  b.dpo.dpo_beta = 0.1;
  StageArtifacts stages = train_all_stages(cat, m, b);

  RetrieveOptions ropt;
  ropt.beam = 8;
  ropt.top_n = 10;
  std::vector<int> ks{10};
  auto eval = [&](const ScorerParams& p) {
    return eval_session_retrieval(cat, m, p, stages.users, &stages.qsids,
                                  splits.eval_sessions, ropt, ks)
        .mrr.at(10);
  };
  double pre = eval(stages.pretrain);
  double sft = eval(stages.sft);
  double psft = eval(stages.psft);
  double dpo = eval(stages.dpo);
  double secs = timer.seconds();
  bool ok = sft > pre && psft > sft && dpo > psft;
  report(8, ok,
         fmt("held-out session mrr@10 rises per training stage: %.4f -> %.4f -> %.4f -> "
             "%.4f (%s, %s, %s), %.0fs",
             pre, sft, psft, dpo, sft > pre ? "up" : "DOWN", psft > sft ? "up" : "DOWN",
             dpo > psft ? "up" : "DOWN", secs));
  return ok;
}

// ---------------------------------------------------------------------------

bool check_prune_study() {
  Timer timer;
  CatalogConfig cfg;
  cfg.n_items = 320;
  cfg.n_views = 2;
  cfg.v_max = 48;  // full token budget per view
  cfg.n_users = 40;
  cfg.n_sessions = 600;
  Catalog cat = generate_catalog(cfg);
  Splits splits = make_splits(cat);
  FusionParams base = make_fusion_params(cfg.dim, cfg.d_cat, cfg.dim, 64, cfg.seed);
  base = train_fusion(cat, std::move(base), 1, 0.05, 32, cfg.seed, splits.train_pairs);

  EncodeBudget budget;
  MethodSetup m = fit_method(MethodKind::vrq, cat, base, budget, splits);
  StageBudgets b;  // default widths keep the query projection dominant
  b.pretrain.epochs = 2;
  b.pretrain.batch_size = 64;
  b.sft.epochs = 2;
  b.psft.epochs = 1;
  b.dpo.epochs = 1;
  b.dpo.lr = 0.02;
  StageArtifacts stages = train_all_stages(cat, m, b);

  PruneTrainOptions popt;
  popt.lr = 0.01;
  popt.batch_size = 32;
  RetrieveOptions ropt;
  ropt.beam = 8;
  ropt.top_n = 10;
  std::vector<PruneRow> rows =
      run_prune_study(cat, m, stages, {48, 12}, 4, popt, ropt, 48, splits);

  bool endpoint = curriculum_tokens(4, CurriculumSchedule{48, 12, 4}) == 12;
  bool shape = rows.size() == 2 && rows[0].v_sub == 48 && rows[1].v_sub == 12;
  double drop = shape ? rows[0].hr4 - rows[1].hr4 : 1.0;
  double speedup = shape && rows[0].mean_ms > 0.0
                       ? 1.0 - rows[1].mean_ms / rows[0].mean_ms
                       : 0.0;
  bool ok = endpoint && shape && drop <= 0.02 + 1e-12 && speedup >= 0.15;
  double secs = timer.seconds();
  report(9, ok,
         fmt("token pruning 48->12: hr@4 %.3f -> %.3f (drop %.3f, allowed 0.020), decode "
             "%.2fms -> %.2fms (%.0f%% faster, need 15%%), schedule endpoint %s, %.0fs",
             shape ? rows[0].hr4 : 0.0, shape ? rows[1].hr4 : 0.0, drop,
             shape ? rows[0].mean_ms : 0.0, shape ? rows[1].mean_ms : 0.0, 100.0 * speedup,
             endpoint ? "exact" : "WRONG", secs));
  return ok;
}

// ---------------------------------------------------------------------------

bool check_determinism() {
  Timer timer;
  namespace fs = std::filesystem;
  PipelineConfig cfg;
  cfg.catalog.n_items = 240;
  cfg.catalog.n_views = 2;
  cfg.catalog.v_max = 8;
  cfg.catalog.dim = 32;
  cfg.catalog.d_cat = 16;
  cfg.catalog.n_categories = 8;
  cfg.catalog.n_users = 30;
  cfg.catalog.n_sessions = 300;
  cfg.catalog.seed = 7;
  cfg.fusion_epochs = 1;
  cfg.encode.shallow = {8, 8};
  cfg.encode.deep = {4};
  cfg.encode.vrq_epochs = 1;
  cfg.encode.rqvae_epochs = 1;
  cfg.encode.opq_iters = 4;
  cfg.stages = study_budgets();
  cfg.stages.pretrain.epochs = 1;
  cfg.stages.sft.epochs = 1;
  cfg.stages.psft.epochs = 1;
  cfg.stages.dpo.epochs = 1;
  cfg.retrieve.beam = 4;
  cfg.retrieve.top_n = 10;
  cfg.eval_stride = 2;

  fs::path scratch = fs::path("acceptance_scratch");
  fs::remove_all(scratch);
  PipelineOutcome a = run_full_pipeline(scratch / "run_a", cfg);
  PipelineOutcome b = run_full_pipeline(scratch / "run_b", cfg);

  std::size_t compared = 0, differing = 0;
  bool same_keys = a.artifact_hashes.size() == b.artifact_hashes.size();
  for (const auto& [name, hash] : a.artifact_hashes) {
    auto it = b.artifact_hashes.find(name);
    if (it == b.artifact_hashes.end()) {
      same_keys = false;
      continue;
    }
    ++compared;
    if (it->second != hash) ++differing;
  }
  fs::remove_all(scratch);
  double secs = timer.seconds();
  bool ok = same_keys && compared > 0 && differing == 0;
  report(10, ok,
         fmt("two identically seeded end-to-end runs: %zu artifacts compared, %zu differ, "
             "%.0fs",
             compared, differing, secs));
  return ok;
}

}  // namespace

int main() {
  bool all = true;
  all &= check_gradients();
  all &= check_beam_oracle();
  all &= check_dpo_closed_form();
  all &= check_quantizer_invariants();
  all &= check_metric_fixtures();
  all &= check_encode_study();
  all &= check_capacity_sweep();
  all &= check_stage_gains();
  all &= check_prune_study();
  all &= check_determinism();
  std::printf("%s\n", all ? "acceptance: all checks passed" : "acceptance: FAILURES present");
  return all ? 0 : 1;
}
