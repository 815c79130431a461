#include "visid/quantize.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

std::string SemanticId::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < codes.size(); ++i) {
    if (i) os << ',';
    os << codes[i];
  }
  return os.str();
}

namespace {

int nearest_row(const Mat& centroids, std::span<const double> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centroids.rows; ++k) {
    double d = sq_dist(centroids.rspan(k), x);
    if (d < best_d) {  // strict: ties keep the lowest index
      best_d = d;
      best = static_cast<int>(k);
    }
  }
  return best;
}

double assign_all(const Mat& points, const Mat& centroids, std::vector<int>& assign) {
  double sse = 0.0;
  for (std::size_t i = 0; i < points.rows; ++i) {
    int k = nearest_row(centroids, points.rspan(i));
    assign[i] = k;
    sse += sq_dist(centroids.rspan(k), points.rspan(i));
  }
  return sse;
}

}  // namespace

KmeansResult kmeans(const Mat& points, int k, std::uint64_t seed, const KmeansOptions& opt) {
  std::size_t n = points.rows;
  if (n == 0) fail(errc::empty_input, "kmeans on empty input");
  if (k < 1 || static_cast<std::size_t>(k) > n)
    fail(errc::infeasible_config, "kmeans needs 1 <= k <= n");
  std::size_t d = points.cols;
  Rng rng(seed);

  Mat cent(k, d);
  int placed = 0;
  if (opt.seed_mean_first) {
    for (std::size_t i = 0; i < n; ++i) axpy(1.0 / n, points.rspan(i), cent.rspan(0));
    placed = 1;
  } else {
    std::size_t first = static_cast<std::size_t>(rng.uniform_int(static_cast<int>(n)));
    std::copy(points.row(first), points.row(first) + d, cent.row(0));
    placed = 1;
  }
  // k-means++ distance sampling for the remaining centers.
  Vec d2(n);
  while (placed < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int c = 0; c < placed; ++c) best = std::min(best, sq_dist(cent.rspan(c), points.rspan(i)));
      d2[i] = best;
      total += best;
    }
    std::size_t pick = 0;
    if (total > 0.0) {
      double target = rng.uniform() * total;
      double run = 0.0;
      pick = n - 1;
      for (std::size_t i = 0; i < n; ++i) {
        run += d2[i];
        if (run >= target) {
          pick = i;
          break;
        }
      }
    } else {
      pick = static_cast<std::size_t>(placed) % n;  // degenerate: duplicated points
    }
    std::copy(points.row(pick), points.row(pick) + d, cent.row(placed));
    ++placed;
  }

  std::vector<int> assign(n, 0);
  double sse = assign_all(points, cent, assign);
  for (int it = 0; it < opt.max_iter; ++it) {
    // mean update
    Mat sums(k, d);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      axpy(1.0, points.rspan(i), sums.rspan(assign[i]));
      ++counts[assign[i]];
    }
    for (int c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      for (std::size_t j = 0; j < d; ++j) cent.at(c, j) = sums.at(c, j) / counts[c];
    }
    // empty clusters grab the farthest point from its current centroid
    for (int c = 0; c < k; ++c) {
      if (counts[c] != 0) continue;
      double far_d = -1.0;
      std::size_t far_i = 0;
      for (std::size_t i = 0; i < n; ++i) {
        double dist = sq_dist(cent.rspan(assign[i]), points.rspan(i));
        if (dist > far_d) {
          far_d = dist;
          far_i = i;
        }
      }
      std::copy(points.row(far_i), points.row(far_i) + d, cent.row(c));
    }
    double new_sse = assign_all(points, cent, assign);
    bool converged = sse - new_sse <= opt.tol * std::max(sse, 1e-300);
    sse = new_sse;
    if (converged) break;
  }
  return {std::move(cent), std::move(assign), sse};
}

std::pair<std::vector<int>, std::vector<int>> parse_levels(const std::string& spec) {
  auto parse_list = [](const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      if (tok.empty()) continue;
      int v = 0;
      try {
        v = std::stoi(tok);
      } catch (...) {
        fail(errc::invalid_config, "bad level size: " + tok);
      }
      if (v < 1) fail(errc::invalid_config, "level sizes must be >= 1");
      out.push_back(v);
    }
    return out;
  };
  auto bar = spec.find('|');
  std::vector<int> shallow = parse_list(bar == std::string::npos ? spec : spec.substr(0, bar));
  std::vector<int> deep =
      bar == std::string::npos ? std::vector<int>{} : parse_list(spec.substr(bar + 1));
  if (shallow.empty()) fail(errc::invalid_config, "need at least one shallow level");
  return {shallow, deep};
}

CodebookStack rq_kmeans_fit(const Mat& vectors, const std::vector<int>& shallow_sizes,
                            const std::vector<int>& deep_sizes, std::uint64_t seed) {
  if (shallow_sizes.empty()) fail(errc::invalid_config, "no shallow levels");
  if (vectors.rows == 0) fail(errc::empty_input, "no vectors to fit");
  CodebookStack s;
  s.level_sizes = shallow_sizes;
  s.level_sizes.insert(s.level_sizes.end(), deep_sizes.begin(), deep_sizes.end());
  s.shallow_levels = static_cast<int>(shallow_sizes.size());

  Mat residual = vectors;
  KmeansOptions opt;
  opt.seed_mean_first = true;  // keeps per-level residual energy non-increasing
  for (int l = 0; l < s.shallow_levels; ++l) {
    KmeansResult km = kmeans(residual, shallow_sizes[l], seed + l, opt);
    for (std::size_t i = 0; i < residual.rows; ++i)
      axpy(-1.0, km.centroids.rspan(km.assign[i]), residual.rspan(i));
    s.shallow.push_back(km.centroids);
    // warm-start EMA state at the cluster masses kmeans found; cold counts would let
    // the first few batches drag centroids toward noisy batch means and merge prefixes
    Vec cnt(shallow_sizes[l], 0.0);
    for (int a : km.assign) cnt[a] += 1.0;
    Mat sums = km.centroids;
    for (int c = 0; c < shallow_sizes[l]; ++c) {
      cnt[c] = std::max(cnt[c], 1.0);
      for (std::size_t j = 0; j < sums.cols; ++j) sums.at(c, j) *= cnt[c];
    }
    s.ema_sums.push_back(std::move(sums));
    s.ema_counts.push_back(std::move(cnt));
  }
  return s;
}

QuantResult rq_encode(std::span<const double> f, const CodebookStack& s) {
  if (s.shallow.empty()) fail(errc::unfitted, "stack has no shallow codebooks");
  if (static_cast<int>(f.size()) != s.dim()) fail(errc::shape_mismatch, "rq_encode dim mismatch");
  QuantResult q;
  q.residuals.emplace_back(f.begin(), f.end());
  Vec recon(f.size(), 0.0);
  for (int l = 0; l < s.shallow_levels; ++l) {
    const Vec& r = q.residuals.back();
    int c = nearest_row(s.shallow[l], r);
    q.sid.codes.push_back(c);
    Vec next(r.size());
    auto e = s.shallow[l].rspan(c);
    for (std::size_t j = 0; j < r.size(); ++j) next[j] = r[j] - e[j];
    axpy(1.0, e, recon);
    q.recon_levels.push_back(recon);
    q.residuals.push_back(std::move(next));
  }
  q.full_recon = recon;
  return q;
}

QuantResult vrq_encode(std::span<const double> f, const BizStats& biz, const CodebookStack& s) {
  QuantResult q = rq_encode(f, s);
  if (s.total_levels() > s.shallow_levels) {
    if (!s.has_deep()) fail(errc::unfitted, "deep levels not fitted");
    std::vector<int> deep = opq_encode(s.deep, q.residuals.back(), biz);
    Vec back = opq_reconstruct(s.deep, deep);
    for (int c : deep) q.sid.codes.push_back(c);
    for (int j = 0; j < s.dim(); ++j) q.full_recon[j] += back[j];
  }
  return q;
}

std::pair<double, Vec> loss_commit(const QuantResult& q, const CodebookStack& s) {
  (void)s;
  if (q.residuals.size() < 2) fail(errc::empty_input, "commit loss needs encoded levels");
  double value = 0.0;
  Vec g(q.residuals[0].size(), 0.0);
  for (std::size_t l = 1; l < q.residuals.size(); ++l) {
    const Vec& r = q.residuals[l];
    value += dot(r, r);
    axpy(2.0, r, g);
  }
  return {value, g};
}

HcLoss loss_hc(const QuantResult& qa, const QuantResult& qb) {
  if (qa.recon_levels.size() != qb.recon_levels.size() || qa.recon_levels.empty())
    fail(errc::shape_mismatch, "hc loss needs matching encoded levels");
  HcLoss r;
  std::size_t d = qa.recon_levels[0].size();
  r.g_a.assign(d, 0.0);
  r.g_b.assign(d, 0.0);
  for (std::size_t l = 0; l < qa.recon_levels.size(); ++l) {
    for (std::size_t j = 0; j < d; ++j) {
      double diff = qa.recon_levels[l][j] - qb.recon_levels[l][j];
      r.value += diff * diff;
      r.g_a[j] += 2.0 * diff;
      r.g_b[j] -= 2.0 * diff;
    }
  }
  return r;
}

double fused_share_rate(const Catalog& cat, const FusionParams& fusion, const CodebookStack& s,
                        const std::vector<std::size_t>& pair_indices) {
  std::size_t same = 0, shared = 0;
  for (std::size_t idx : pair_indices) {
    const auto& pr = cat.pairs.pairs[idx];
    if (pr.a != pr.b) continue;
    const Item& it = cat.item(pr.a);
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    Vec fa = fuse(fusion, it.views[pr.view_a].pooled, y).f;
    Vec fb = fuse(fusion, it.views[pr.view_b].pooled, y).f;
    ++same;
    if (rq_encode(fa, s).sid.codes[0] == rq_encode(fb, s).sid.codes[0]) ++shared;
  }
  return same == 0 ? 0.0 : static_cast<double>(shared) / same;
}

VrqTrainResult train_vrq(const Catalog& cat, FusionParams fusion, CodebookStack init,
                         std::array<double, 4> betas, int epochs, double lr, double decay,
                         std::uint64_t seed, const std::vector<std::size_t>& pair_indices,
                         int batch_size) {
  if (epochs < 0 || batch_size < 2 || decay <= 0.0 || decay > 1.0)
    fail(errc::invalid_config, "bad quantizer training config");
  if (pair_indices.empty()) fail(errc::empty_input, "no training pairs");
  VrqTrainResult out;
  out.stack = std::move(init);
  out.stack.decay = decay;
  out.stack.betas = betas;
  CodebookStack& s = out.stack;
  int d = s.dim();
  int L = s.shallow_levels;

  out.share_rate_init = fused_share_rate(cat, fusion, s, pair_indices);

  // EMA counts track per-batch assignment mass; a freshly fitted stack carries whole-corpus
  // cluster masses, so scale the state down to batch scale or the codebooks lag the data
  for (int l = 0; l < L; ++l) {
    double total = 0.0;
    for (double c : s.ema_counts[l]) total += c;
    if (total <= 2.0 * batch_size) continue;
    double alpha = 2.0 * batch_size / total;
    for (double& c : s.ema_counts[l]) c *= alpha;
    for (double& v : s.ema_sums[l].a) v *= alpha;
  }

  Rng rng(seed);
  std::vector<std::size_t> order = pair_indices;
  FusionParams grads = fusion;
  // last-seen residuals per level, used to re-seed starved entries
  std::vector<std::vector<Vec>> reservoir(L);

  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::size_t end = std::min(order.size(), start + batch_size);
      if (end - start < 2) continue;
      std::vector<PairSet::Pair> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(cat.pairs.pairs[order[k]]);
      std::size_t n = batch.size();

      std::vector<FuseCache> c1, c2;
      FusedBatch fb = fuse_pair_batch(cat, fusion, batch, &c1, &c2);
      std::vector<QuantResult> q1(n), q2(n);
      for (std::size_t i = 0; i < n; ++i) {
        q1[i] = rq_encode(fb.f1.rspan(i), s);
        q2[i] = rq_encode(fb.f2.rspan(i), s);
      }

      BatchLoss lc = loss_cons(fb, fusion.hyper.tau);
      BatchLoss lm = loss_margin(fb, fusion.hyper.gamma);
      double commit_mean = 0.0, hc_mean = 0.0;
      std::vector<Vec> commit_g1(n), commit_g2(n);
      std::vector<HcLoss> hc(n);
      for (std::size_t i = 0; i < n; ++i) {
        auto [cv1, cg1] = loss_commit(q1[i], s);
        auto [cv2, cg2] = loss_commit(q2[i], s);
        commit_mean += (cv1 + cv2) / (2.0 * n);
        commit_g1[i] = std::move(cg1);
        commit_g2[i] = std::move(cg2);
        hc[i] = loss_hc(q1[i], q2[i]);
        hc_mean += hc[i].value / n;
        (void)cv1;
        (void)cv2;
      }
      double total =
          betas[0] * lc.value + betas[1] * lm.value + betas[2] * commit_mean + betas[3] * hc_mean;
      if (!std::isfinite(total))
        fail(errc::training_diverged,
             "quantizer training diverged at epoch " + std::to_string(epoch));
      epoch_loss += total;
      ++n_batches;

      grads.for_each_span([](std::span<double> sp) { std::fill(sp.begin(), sp.end(), 0.0); });
      Vec df(d), dv(d);
      for (std::size_t i = 0; i < n; ++i) {
        for (int j = 0; j < d; ++j) {
          df[j] = betas[0] * lc.g_f1.at(i, j) + betas[1] * lm.g_f1.at(i, j) +
                  betas[2] * commit_g1[i][j] / (2.0 * n) + betas[3] * hc[i].g_a[j] / n;
          dv[j] = betas[0] * lc.g_v1.at(i, j) + betas[1] * lm.g_v1.at(i, j);
        }
        fuse_backward(fusion, c1[i], df, dv, grads);
        for (int j = 0; j < d; ++j) {
          df[j] = betas[0] * lc.g_f2.at(i, j) + betas[1] * lm.g_f2.at(i, j) +
                  betas[2] * commit_g2[i][j] / (2.0 * n) + betas[3] * hc[i].g_b[j] / n;
          dv[j] = betas[0] * lc.g_v2.at(i, j) + betas[1] * lm.g_v2.at(i, j);
        }
        fuse_backward(fusion, c2[i], df, dv, grads);
      }
      sgd_step(fusion, grads, lr, 5.0);
      if (!params_finite(fusion))
        fail(errc::training_diverged,
             "fusion params non-finite at epoch " + std::to_string(epoch));

      // EMA codebook update from this batch's assignments.
      for (int l = 0; l < L; ++l) {
        int K = s.level_sizes[l];
        Mat batch_sum(K, d);
        Vec batch_cnt(K, 0.0);
        reservoir[l].clear();
        for (std::size_t i = 0; i < n; ++i) {
          for (const QuantResult* q : {&q1[i], &q2[i]}) {
            int c = q->sid.codes[l];
            axpy(1.0, q->residuals[l], batch_sum.rspan(c));
            batch_cnt[c] += 1.0;
            reservoir[l].push_back(q->residuals[l]);
          }
        }
        for (int c = 0; c < K; ++c) {
          s.ema_counts[l][c] = decay * s.ema_counts[l][c] + (1.0 - decay) * batch_cnt[c];
          for (int j = 0; j < d; ++j)
            s.ema_sums[l].at(c, j) =
                decay * s.ema_sums[l].at(c, j) + (1.0 - decay) * batch_sum.at(c, j);
          double cnt = std::max(s.ema_counts[l][c], 1e-12);
          for (int j = 0; j < d; ++j) s.shallow[l].at(c, j) = s.ema_sums[l].at(c, j) / cnt;
        }
      }
    }
    // starved entries re-seed to a random residual seen in the last batch
    for (int l = 0; l < L; ++l) {
      if (reservoir[l].empty()) continue;
      for (int c = 0; c < s.level_sizes[l]; ++c) {
        if (s.ema_counts[l][c] >= 1e-3 * batch_size) continue;
        const Vec& r = reservoir[l][rng.uniform_int(static_cast<int>(reservoir[l].size()))];
        std::copy(r.begin(), r.end(), s.shallow[l].row(c));
        std::copy(r.begin(), r.end(), s.ema_sums[l].row(c));
        s.ema_counts[l][c] = 1.0;
      }
    }
    out.trace.epoch_loss.push_back(n_batches ? epoch_loss / n_batches : 0.0);
  }

  out.share_rate_final = fused_share_rate(cat, fusion, s, pair_indices);
  out.fusion = std::move(fusion);
  return out;
}

Vec biz_features_raw(const BizStats& biz) {
  return {std::log1p(static_cast<double>(biz.clicks_30d)), std::log1p(biz.price),
          std::log1p(static_cast<double>(biz.orders_30d))};
}

namespace {

Vec build_features(const OpqParams& p, std::span<const double> residual, const Vec& biz_log) {
  if (static_cast<int>(residual.size()) != p.residual_dim)
    fail(errc::shape_mismatch, "opq residual dim mismatch");
  if (static_cast<int>(biz_log.size()) != p.biz_dim)
    fail(errc::shape_mismatch, "opq biz dim mismatch");
  Vec z(p.feature_dim(), 0.0);
  std::copy(residual.begin(), residual.end(), z.begin());
  for (int j = 0; j < p.biz_dim; ++j)
    z[p.residual_dim + j] = (biz_log[j] - p.biz_mean[j]) / p.biz_std[j];
  return z;
}

Vec rotate(const Mat& r, const Vec& z) {
  Vec out(r.rows, 0.0);
  for (std::size_t i = 0; i < r.rows; ++i) out[i] = dot(r.rspan(i), z);
  return out;
}

Vec rotate_back(const Mat& r, const Vec& z) {
  Vec out(r.cols, 0.0);
  for (std::size_t i = 0; i < r.rows; ++i) axpy(z[i], r.rspan(i), out);
  return out;
}

double opq_objective(const Mat& rot_rows, const std::vector<Mat>& books,
                     const std::vector<std::vector<int>>& codes) {
  double sse = 0.0;
  std::size_t m_count = books.size();
  std::size_t chunk = rot_rows.cols / m_count;
  for (std::size_t i = 0; i < rot_rows.rows; ++i) {
    const double* row = rot_rows.row(i);
    for (std::size_t m = 0; m < m_count; ++m) {
      auto e = books[m].rspan(codes[m][i]);
      for (std::size_t j = 0; j < chunk; ++j) {
        double diff = row[m * chunk + j] - e[j];
        sse += diff * diff;
      }
    }
  }
  return sse / rot_rows.rows;
}

}  // namespace

OpqFitResult opq_fit_ex(const Mat& residuals, const Mat& biz_raw, std::vector<int> sub_sizes,
                        int iters, std::uint64_t seed, bool allow_pad) {
  std::size_t n = residuals.rows;
  if (n == 0) fail(errc::empty_input, "opq_fit on empty input");
  if (sub_sizes.empty()) fail(errc::invalid_config, "opq needs at least one subspace");
  if (biz_raw.rows != 0 && biz_raw.rows != n)
    fail(errc::shape_mismatch, "opq biz row count mismatch");
  int m_count = static_cast<int>(sub_sizes.size());
  int d = static_cast<int>(residuals.cols);
  int b = biz_raw.rows == 0 ? 0 : static_cast<int>(biz_raw.cols);
  int base = d + b;
  int pad = 0;
  if (base % m_count != 0) {
    if (!allow_pad)
      fail(errc::invalid_config, "feature dim not divisible by subspace count");
    pad = m_count - base % m_count;
  }
  for (int k : sub_sizes)
    if (k < 1 || static_cast<std::size_t>(k) > n)
      fail(errc::infeasible_config, "opq sub-codebook size out of range");

  OpqParams p;
  p.sub_sizes = sub_sizes;
  p.residual_dim = d;
  p.biz_dim = b;
  p.pad = pad;
  int dz = p.feature_dim();
  int chunk = dz / m_count;

  // log1p then standardize the business features
  p.biz_mean.assign(b, 0.0);
  p.biz_std.assign(b, 1.0);
  Mat biz_log(n, std::max(b, 1));
  if (b > 0) {
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < b; ++j) biz_log.at(i, j) = std::log1p(biz_raw.at(i, j));
    for (int j = 0; j < b; ++j) {
      double mean = 0.0;
      for (std::size_t i = 0; i < n; ++i) mean += biz_log.at(i, j);
      mean /= n;
      double var = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        double c = biz_log.at(i, j) - mean;
        var += c * c;
      }
      p.biz_mean[j] = mean;
      p.biz_std[j] = var > 0.0 ? std::sqrt(var / n) : 1.0;
    }
    // Balance: put each business dimension on the residual per-dim RMS scale
    // by folding the factor into the stored std. Unit z-scores would swamp
    // small late-level residuals and the deep codes would stop encoding
    // visual structure; on the residual scale the business dims act as a
    // tiebreak between visually identical vectors instead.
    if (d > 0) {
      double rms = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) rms += residuals.at(i, j) * residuals.at(i, j);
      rms = std::sqrt(rms / (static_cast<double>(n) * d));
      if (rms > 0.0)
        for (int j = 0; j < b; ++j) p.biz_std[j] /= rms;
    }
  }

  Mat z(n, dz);
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) z.at(i, j) = residuals.at(i, j);
    for (int j = 0; j < b; ++j)
      z.at(i, d + j) = (biz_log.at(i, j) - p.biz_mean[j]) / p.biz_std[j];
  }

  p.rotation = Mat(dz, dz);
  for (int i = 0; i < dz; ++i) p.rotation.at(i, i) = 1.0;

  // initial codebooks: per-subspace k-means on the unrotated chunks
  Mat rot_rows = z;
  std::vector<std::vector<int>> codes(m_count, std::vector<int>(n, 0));
  std::vector<Mat> books(m_count);
  KmeansOptions opt;
  opt.seed_mean_first = true;
  for (int m = 0; m < m_count; ++m) {
    Mat chunk_pts(n, chunk);
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < chunk; ++j) chunk_pts.at(i, j) = rot_rows.at(i, m * chunk + j);
    KmeansResult km = kmeans(chunk_pts, sub_sizes[m], seed + m, opt);
    books[m] = std::move(km.centroids);
    codes[m] = std::move(km.assign);
  }

  OpqFitResult out;
  out.objective_trace.push_back(opq_objective(rot_rows, books, codes));

  Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> zm(
      z.a.data(), static_cast<Eigen::Index>(n), dz);
  Eigen::MatrixXd rot = Eigen::MatrixXd::Identity(dz, dz);

  for (int it = 0; it < iters; ++it) {
    // rotation step: orthogonal Procrustes onto the current reconstructions
    Eigen::MatrixXd qm(n, dz);
    for (std::size_t i = 0; i < n; ++i)
      for (int m = 0; m < m_count; ++m) {
        auto e = books[m].rspan(codes[m][static_cast<std::size_t>(i)]);
        for (int j = 0; j < chunk; ++j) qm(static_cast<Eigen::Index>(i), m * chunk + j) = e[j];
      }
    Eigen::MatrixXd bmat = zm.transpose() * qm;  // dz x dz
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(bmat, Eigen::ComputeFullU | Eigen::ComputeFullV);
    rot = svd.matrixV() * svd.matrixU().transpose();

    Eigen::MatrixXd rotated = zm * rot.transpose();
    for (std::size_t i = 0; i < n; ++i)
      for (int j = 0; j < dz; ++j) rot_rows.at(i, j) = rotated(static_cast<Eigen::Index>(i), j);

    // codebook step: warm-started Lloyd refinement per subspace
    for (int m = 0; m < m_count; ++m) {
      for (int inner = 0; inner < 10; ++inner) {
        bool changed = false;
        for (std::size_t i = 0; i < n; ++i) {
          std::span<const double> x(rot_rows.row(i) + m * chunk, static_cast<std::size_t>(chunk));
          int best = nearest_row(books[m], x);
          if (best != codes[m][i]) {
            codes[m][i] = best;
            changed = true;
          }
        }
        Mat sums(sub_sizes[m], chunk);
        std::vector<std::size_t> counts(sub_sizes[m], 0);
        for (std::size_t i = 0; i < n; ++i) {
          std::span<const double> x(rot_rows.row(i) + m * chunk, static_cast<std::size_t>(chunk));
          axpy(1.0, x, sums.rspan(codes[m][i]));
          ++counts[codes[m][i]];
        }
        for (int c = 0; c < sub_sizes[m]; ++c) {
          if (counts[c] == 0) continue;  // empty keeps its entry
          for (int j = 0; j < chunk; ++j) books[m].at(c, j) = sums.at(c, j) / counts[c];
        }
        if (!changed && inner > 0) break;
      }
    }
    out.objective_trace.push_back(opq_objective(rot_rows, books, codes));
  }

  for (int i = 0; i < dz; ++i)
    for (int j = 0; j < dz; ++j) p.rotation.at(i, j) = rot(i, j);
  p.sub_codebooks = std::move(books);
  p.fitted = true;
  out.params = std::move(p);
  return out;
}

OpqFitResult opq_fit(const Mat& residuals, const Mat& biz_raw, int M, int K_sub, int iters,
                     std::uint64_t seed) {
  if (M < 1) fail(errc::invalid_config, "opq subspace count must be positive");
  return opq_fit_ex(residuals, biz_raw, std::vector<int>(M, K_sub), iters, seed, false);
}

Vec opq_features(const OpqParams& p, std::span<const double> residual, const BizStats& biz) {
  if (!p.fitted && p.rotation.rows == 0) fail(errc::unfitted, "opq params not fitted");
  Vec biz_log = biz_features_raw(biz);
  biz_log.resize(p.biz_dim);  // drop features the model was fitted without
  return build_features(p, residual, biz_log);
}

std::vector<int> opq_encode(const OpqParams& p, std::span<const double> residual,
                            const BizStats& biz) {
  if (!p.fitted) fail(errc::unfitted, "opq params not fitted");
  Vec z = opq_features(p, residual, biz);
  Vec rz = rotate(p.rotation, z);
  int m_count = static_cast<int>(p.sub_sizes.size());
  int chunk = p.chunk_dim();
  std::vector<int> codes(m_count);
  for (int m = 0; m < m_count; ++m) {
    std::span<const double> x(rz.data() + m * chunk, static_cast<std::size_t>(chunk));
    codes[m] = nearest_row(p.sub_codebooks[m], x);
  }
  return codes;
}

Vec opq_reconstruct(const OpqParams& p, std::span<const int> deep_codes) {
  if (!p.fitted) fail(errc::unfitted, "opq params not fitted");
  if (deep_codes.size() != p.sub_sizes.size())
    fail(errc::shape_mismatch, "deep code count mismatch");
  int chunk = p.chunk_dim();
  Vec q(p.feature_dim(), 0.0);
  for (std::size_t m = 0; m < p.sub_sizes.size(); ++m) {
    if (deep_codes[m] < 0 || deep_codes[m] >= p.sub_sizes[m])
      fail(errc::invalid_config, "deep code out of range");
    auto e = p.sub_codebooks[m].rspan(deep_codes[m]);
    std::copy(e.begin(), e.end(), q.begin() + m * chunk);
  }
  return rotate_back(p.rotation, q);
}

SidTable vrq_encode_catalog(const Catalog& cat, const FusionParams& fusion,
                            const CodebookStack& s) {
  if (s.shallow.empty()) fail(errc::unfitted, "stack not fitted");
  if (s.total_levels() > s.shallow_levels && !s.has_deep())
    fail(errc::unfitted, "deep levels not fitted");
  SidTable t;
  t.level_sizes = s.level_sizes;
  for (const Item& it : cat.items) {
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    for (std::size_t w = 0; w < it.views.size(); ++w) {
      Vec f = fuse(fusion, it.views[w].pooled, y).f;
      QuantResult q = s.total_levels() > s.shallow_levels ? vrq_encode(f, it.biz, s)
                                                          : rq_encode(f, s);
      t.rows.push_back({it.item_id, static_cast<int>(w), q.sid});
      if (w == 0) t.canonical[it.item_id] = q.sid;
    }
  }
  return t;
}

void save_sid_table(const std::filesystem::path& path, const SidTable& t) {
  std::vector<std::string> lines;
  lines.reserve(t.rows.size());
  for (const auto& r : t.rows) {
    std::ostringstream os;
    os << r.item_id << '\t' << r.view << '\t' << r.sid.str();
    lines.push_back(os.str());
  }
  write_lines(path, lines);
  json j{{"level_sizes", t.level_sizes}};
  write_lines(path.string() + ".json", {j.dump()});
}

SidTable load_sid_table(const std::filesystem::path& path) {
  SidTable t;
  auto side = read_lines(path.string() + ".json");
  if (side.empty()) fail(errc::io_failure, "empty sid table sidecar");
  t.level_sizes = json::parse(side[0]).at("level_sizes").get<std::vector<int>>();
  for (const auto& line : read_lines(path)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string item, view, codes;
    if (!std::getline(ss, item, '\t') || !std::getline(ss, view, '\t') ||
        !std::getline(ss, codes))
      fail(errc::io_failure, "bad sid table row");
    SidTable::Row r;
    r.item_id = std::stoll(item);
    r.view = std::stoi(view);
    std::stringstream cs(codes);
    std::string tok;
    while (std::getline(cs, tok, ',')) r.sid.codes.push_back(std::stoi(tok));
    if (r.sid.codes.size() != t.level_sizes.size())
      fail(errc::shape_mismatch, "sid length mismatch in table");
    if (r.view == 0) t.canonical[r.item_id] = r.sid;
    t.rows.push_back(std::move(r));
  }
  return t;
}

void save_stack(const std::filesystem::path& path, const CodebookStack& s) {
  Vec flat;
  for (int l = 0; l < s.shallow_levels; ++l) {
    flat.insert(flat.end(), s.shallow[l].a.begin(), s.shallow[l].a.end());
    flat.insert(flat.end(), s.ema_sums[l].a.begin(), s.ema_sums[l].a.end());
    flat.insert(flat.end(), s.ema_counts[l].begin(), s.ema_counts[l].end());
  }
  if (s.has_deep()) {
    flat.insert(flat.end(), s.deep.rotation.a.begin(), s.deep.rotation.a.end());
    for (const Mat& m : s.deep.sub_codebooks) flat.insert(flat.end(), m.a.begin(), m.a.end());
    flat.insert(flat.end(), s.deep.biz_mean.begin(), s.deep.biz_mean.end());
    flat.insert(flat.end(), s.deep.biz_std.begin(), s.deep.biz_std.end());
  }
  write_blob_f64(path, flat, 1);
  json j{{"dim", s.dim()},
         {"level_sizes", s.level_sizes},
         {"shallow_levels", s.shallow_levels},
         {"decay", s.decay},
         {"betas", std::vector<double>(s.betas.begin(), s.betas.end())},
         {"deep_fitted", s.has_deep()},
         {"deep_sub_sizes", s.deep.sub_sizes},
         {"deep_residual_dim", s.deep.residual_dim},
         {"deep_biz_dim", s.deep.biz_dim},
         {"deep_pad", s.deep.pad}};
  write_lines(path.string() + ".json", {j.dump()});
}

CodebookStack load_stack(const std::filesystem::path& path) {
  auto side = read_lines(path.string() + ".json");
  if (side.empty()) fail(errc::io_failure, "empty stack sidecar");
  json j = json::parse(side[0]);
  CodebookStack s;
  int d = j.at("dim").get<int>();
  s.level_sizes = j.at("level_sizes").get<std::vector<int>>();
  s.shallow_levels = j.at("shallow_levels").get<int>();
  s.decay = j.at("decay").get<double>();
  auto betas = j.at("betas").get<std::vector<double>>();
  if (betas.size() != 4) fail(errc::shape_mismatch, "bad beta count in stack sidecar");
  std::copy(betas.begin(), betas.end(), s.betas.begin());

  std::uint32_t dim = 0;
  Vec flat = read_blob_f64(path, &dim);
  std::size_t k = 0;
  auto take = [&](std::size_t count) {
    if (k + count > flat.size()) fail(errc::shape_mismatch, "stack payload too short");
    Vec v(flat.begin() + k, flat.begin() + k + count);
    k += count;
    return v;
  };
  for (int l = 0; l < s.shallow_levels; ++l) {
    int K = s.level_sizes[l];
    Mat cb(K, d);
    Vec v = take(static_cast<std::size_t>(K) * d);
    cb.a = std::move(v);
    s.shallow.push_back(std::move(cb));
    Mat sums(K, d);
    sums.a = take(static_cast<std::size_t>(K) * d);
    s.ema_sums.push_back(std::move(sums));
    s.ema_counts.push_back(take(K));
  }
  if (j.at("deep_fitted").get<bool>()) {
    OpqParams& p = s.deep;
    p.sub_sizes = j.at("deep_sub_sizes").get<std::vector<int>>();
    p.residual_dim = j.at("deep_residual_dim").get<int>();
    p.biz_dim = j.at("deep_biz_dim").get<int>();
    p.pad = j.at("deep_pad").get<int>();
    int dz = p.feature_dim();
    p.rotation = Mat(dz, dz);
    p.rotation.a = take(static_cast<std::size_t>(dz) * dz);
    int chunk = dz / static_cast<int>(p.sub_sizes.size());
    for (int sz : p.sub_sizes) {
      Mat m(sz, chunk);
      m.a = take(static_cast<std::size_t>(sz) * chunk);
      p.sub_codebooks.push_back(std::move(m));
    }
    p.biz_mean = take(p.biz_dim);
    p.biz_std = take(p.biz_dim);
    p.fitted = true;
  }
  if (k != flat.size()) fail(errc::shape_mismatch, "stack payload too long");
  return s;
}

std::vector<int> fsq_encode(std::span<const double> f, const std::vector<int>& levels) {
  if (levels.empty()) fail(errc::invalid_config, "fsq needs at least one level");
  if (levels.size() > f.size()) fail(errc::shape_mismatch, "fsq levels exceed input dims");
  std::vector<int> codes(levels.size());
  for (std::size_t i = 0; i < levels.size(); ++i) {
    if (levels[i] < 2) fail(errc::invalid_config, "fsq level must be >= 2");
    double x = std::clamp(f[i], -1.0, 1.0);
    double half = (levels[i] - 1) / 2.0;
    // ties round half away from zero on the signed offset; an odd level count
    // has an exact centre bucket so the shift stays integral
    long b = levels[i] % 2 == 1 ? std::llround(x * half) + (levels[i] - 1) / 2
                                : std::llround(x * half + half);
    codes[i] = static_cast<int>(std::clamp<long>(b, 0, levels[i] - 1));
  }
  return codes;
}

FsqModel fsq_fit(const Mat& embeddings, const std::vector<int>& levels) {
  std::size_t n = embeddings.rows;
  if (n == 0) fail(errc::empty_input, "fsq_fit on empty input");
  int d = static_cast<int>(embeddings.cols);
  int L = static_cast<int>(levels.size());
  if (L > d) fail(errc::invalid_config, "more fsq levels than dims");
  FsqModel m;
  m.levels = levels;
  m.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) axpy(1.0 / n, embeddings.rspan(i), m.mean);

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t i = 0; i < n; ++i) {
    Eigen::VectorXd c(d);
    for (int j = 0; j < d; ++j) c(j) = embeddings.at(i, j) - m.mean[j];
    cov += c * c.transpose();
  }
  cov /= static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  // eigenvalues ascending; take the top L directions
  m.dirs = Mat(L, d);
  for (int l = 0; l < L; ++l) {
    Eigen::VectorXd v = eig.eigenvectors().col(d - 1 - l);
    int argmax = 0;
    for (int j = 1; j < d; ++j)
      if (std::abs(v(j)) > std::abs(v(argmax))) argmax = j;
    if (v(argmax) < 0.0) v = -v;  // fix the sign convention
    for (int j = 0; j < d; ++j) m.dirs.at(l, j) = v(j);
  }

  // Per-direction scale calibrated on the training coordinates: pick the
  // scale whose bucket histogram is least concentrated (smallest sum of
  // squared bucket masses). A max-abs scale would park the bulk of the data
  // in the central buckets and collapse code diversity.
  m.scale.assign(L, 1e-12);
  Vec proj(n);
  for (int l = 0; l < L; ++l) {
    double sd = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double p = 0.0;
      for (int j = 0; j < d; ++j) p += (embeddings.at(i, j) - m.mean[j]) * m.dirs.at(l, j);
      proj[i] = p;
      sd += p * p;
    }
    sd = std::sqrt(sd / n);
    if (sd < 1e-12) {
      m.scale[l] = 1e-12;
      continue;
    }
    double best_scale = sd, best_conc = 2.0;
    std::vector<std::size_t> hist(levels[l]);
    for (int g = 0; g < 40; ++g) {
      double s = sd * (0.5 + 0.1 * g);
      std::fill(hist.begin(), hist.end(), 0);
      for (std::size_t i = 0; i < n; ++i) {
        Vec one{proj[i] / s};
        ++hist[fsq_encode(one, {levels[l]})[0]];
      }
      double conc = 0.0;
      for (std::size_t c : hist) {
        double p = static_cast<double>(c) / n;
        conc += p * p;
      }
      if (conc < best_conc) {
        best_conc = conc;
        best_scale = s;
      }
    }
    m.scale[l] = best_scale;
  }
  return m;
}

std::vector<int> fsq_encode_model(const FsqModel& m, std::span<const double> f) {
  int d = static_cast<int>(m.mean.size());
  if (static_cast<int>(f.size()) != d) fail(errc::shape_mismatch, "fsq input dim mismatch");
  Vec coords(m.levels.size());
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    double proj = 0.0;
    for (int j = 0; j < d; ++j) proj += (f[j] - m.mean[j]) * m.dirs.at(l, j);
    coords[l] = proj / m.scale[l];
  }
  return fsq_encode(coords, m.levels);
}

Vec fsq_reconstruct(const FsqModel& m, std::span<const int> codes) {
  if (codes.size() != m.levels.size()) fail(errc::shape_mismatch, "fsq code count mismatch");
  Vec out = m.mean;
  for (std::size_t l = 0; l < m.levels.size(); ++l) {
    double half = (m.levels[l] - 1) / 2.0;
    double val = (codes[l] - half) / half;
    axpy(val * m.scale[l], m.dirs.rspan(l), out);
  }
  return out;
}

}  // namespace visid
