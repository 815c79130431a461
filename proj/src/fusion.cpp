#include "visid/fusion.hpp"

#include <cmath>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

FusionParams make_fusion_params(int in_dim, int cat_dim, int latent_dim, int hidden_dim,
                                std::uint64_t seed) {
  if (in_dim < 1 || cat_dim < 1 || latent_dim < 1 || hidden_dim < 1)
    fail(errc::invalid_config, "fusion dims must be positive");
  Rng rng(seed);
  FusionParams p;
  p.enc_v = make_affine(latent_dim, in_dim);
  p.enc_t = make_affine(latent_dim, cat_dim);
  p.gate_net = make_mlp2(1, hidden_dim, 2 * latent_dim);
  p.cat_net = make_mlp2(latent_dim, hidden_dim, 2 * latent_dim);
  init_affine(p.enc_v, rng);
  init_affine(p.enc_t, rng);
  init_mlp2(p.gate_net, rng);
  init_mlp2(p.cat_net, rng);
  return p;
}

Vec encode_visual(const FusionParams& p, std::span<const double> x) {
  if (static_cast<int>(x.size()) != p.in_dim())
    fail(errc::shape_mismatch, "encode_visual input dim mismatch");
  Vec v = affine_apply(p.enc_v, x);
  for (double& h : v) h = h > 0.0 ? h : 0.0;
  return v;
}

Vec encode_text(const FusionParams& p, std::span<const double> y) {
  if (static_cast<int>(y.size()) != p.cat_dim())
    fail(errc::shape_mismatch, "encode_text input dim mismatch");
  return affine_apply(p.enc_t, y);
}

static Vec concat2(std::span<const double> a, std::span<const double> b) {
  Vec z;
  z.reserve(a.size() + b.size());
  z.insert(z.end(), a.begin(), a.end());
  z.insert(z.end(), b.begin(), b.end());
  return z;
}

double gate_alpha(const FusionParams& p, std::span<const double> v, std::span<const double> t) {
  Vec in = concat2(v, t);
  Vec hidden;
  Vec z = mlp2_apply(p.gate_net, in, hidden);
  return 1.0 / (1.0 + std::exp(-z[0]));
}

Vec category_feature(const FusionParams& p, std::span<const double> v,
                     std::span<const double> t) {
  Vec in = concat2(v, t);
  Vec hidden;
  return mlp2_apply(p.cat_net, in, hidden);
}

FuseResult fuse_cached(const FusionParams& p, std::span<const double> x,
                       std::span<const double> y, FuseCache& c) {
  if (static_cast<int>(x.size()) != p.in_dim() || static_cast<int>(y.size()) != p.cat_dim())
    fail(errc::shape_mismatch, "fuse input dim mismatch");
  int d = p.latent_dim();
  c.x.assign(x.begin(), x.end());
  c.y.assign(y.begin(), y.end());
  c.v_pre = affine_apply(p.enc_v, x);
  c.v = c.v_pre;
  for (double& h : c.v) h = h > 0.0 ? h : 0.0;
  c.t = affine_apply(p.enc_t, y);
  Vec in = concat2(c.v, c.t);
  Vec zv = mlp2_apply(p.gate_net, in, c.gate_hidden);
  c.z = zv[0];
  c.alpha = 1.0 / (1.0 + std::exp(-c.z));
  c.g = mlp2_apply(p.cat_net, in, c.cat_hidden);
  c.f_raw.assign(d, 0.0);
  for (int j = 0; j < d; ++j) c.f_raw[j] = (1.0 - c.alpha) * c.v[j] + c.alpha * c.t[j] + c.g[j];
  c.f_raw_norm = norm2(c.f_raw);
  c.v_norm = norm2(c.v);
  c.f = normalized(c.f_raw);
  c.vn = normalized(c.v);
  return {c.f, c.vn, c.alpha};
}

FuseResult fuse(const FusionParams& p, std::span<const double> x, std::span<const double> y) {
  FuseCache c;
  return fuse_cached(p, x, y, c);
}

// Backward of y = r/||r||: dr = (dy - y*(y.dy)) / ||r||.
static Vec norm_backward(const Vec& unit, double raw_norm, std::span<const double> dy) {
  Vec dr(unit.size(), 0.0);
  if (raw_norm < 1e-300) return dr;
  double proj = dot(unit, dy);
  for (std::size_t j = 0; j < unit.size(); ++j) dr[j] = (dy[j] - unit[j] * proj) / raw_norm;
  return dr;
}

void fuse_backward(const FusionParams& p, const FuseCache& c, std::span<const double> df,
                   std::span<const double> dv, FusionParams& g) {
  int d = p.latent_dim();
  Vec d_fraw = norm_backward(c.f, c.f_raw_norm, df);
  Vec d_v = norm_backward(c.vn, c.v_norm, dv);

  double d_alpha = 0.0;
  Vec d_t(d, 0.0);
  for (int j = 0; j < d; ++j) {
    d_alpha += d_fraw[j] * (c.t[j] - c.v[j]);
    d_v[j] += (1.0 - c.alpha) * d_fraw[j];
    d_t[j] += c.alpha * d_fraw[j];
  }

  Vec in = concat2(c.v, c.t);
  Vec d_in(2 * d, 0.0);
  // category feature path: d_g = d_fraw
  mlp2_backward(p.cat_net, in, c.cat_hidden, d_fraw, g.cat_net, d_in);
  // gate path
  double dz = d_alpha * c.alpha * (1.0 - c.alpha);
  Vec dzv{dz};
  mlp2_backward(p.gate_net, in, c.gate_hidden, dzv, g.gate_net, d_in);
  for (int j = 0; j < d; ++j) {
    d_v[j] += d_in[j];
    d_t[j] += d_in[d + j];
  }

  affine_backward(p.enc_t, c.y, d_t, g.enc_t, {});
  // relu gate on the visual latent
  for (int j = 0; j < d; ++j)
    if (c.v_pre[j] <= 0.0) d_v[j] = 0.0;
  affine_backward(p.enc_v, c.x, d_v, g.enc_v, {});
}

std::vector<int> FusedBatch::pair_index() const {
  int n = static_cast<int>(size());
  std::vector<int> idx(2 * n);
  for (int i = 0; i < n; ++i) {
    idx[i] = n + i;
    idx[n + i] = i;
  }
  return idx;
}

static void check_batch(const FusedBatch& b) {
  if (b.size() == 0) fail(errc::empty_input, "empty fused batch");
  if (b.f2.rows != b.size() || b.v1.rows != b.size() || b.v2.rows != b.size() ||
      b.f1.cols != b.f2.cols || b.f1.cols != b.v1.cols || b.f1.cols != b.v2.cols)
    fail(errc::shape_mismatch, "fused batch rows/cols mismatch");
}

static BatchLoss zero_loss(const FusedBatch& b) {
  BatchLoss r;
  r.g_f1 = Mat(b.size(), b.f1.cols);
  r.g_f2 = Mat(b.size(), b.f1.cols);
  r.g_v1 = Mat(b.size(), b.f1.cols);
  r.g_v2 = Mat(b.size(), b.f1.cols);
  return r;
}

BatchLoss loss_cons(const FusedBatch& b, double tau) {
  check_batch(b);
  if (tau <= 0.0) fail(errc::invalid_config, "tau must be positive");
  std::size_t n = b.size();
  std::size_t d = b.f1.cols;
  BatchLoss r = zero_loss(b);

  // Two anchor sets against the same candidate rows f2: fused and visual.
  for (int pass = 0; pass < 2; ++pass) {
    const Mat& anchors = pass == 0 ? b.f1 : b.v1;
    Mat& g_anchor = pass == 0 ? r.g_f1 : r.g_v1;
    for (std::size_t i = 0; i < n; ++i) {
      Vec s(n);
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = dot(anchors.rspan(i), b.f2.rspan(j)) / tau;
        mx = std::max(mx, s[j]);
      }
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(s[j] - mx);
      double lse = mx + std::log(z);
      r.value += -(s[i] - lse) / n;
      for (std::size_t j = 0; j < n; ++j) {
        double pj = std::exp(s[j] - mx) / z;
        double coef = (pj - (i == j ? 1.0 : 0.0)) / (n * tau);
        axpy(coef, b.f2.rspan(j), g_anchor.rspan(i));
        axpy(coef, anchors.rspan(i), r.g_f2.rspan(j));
      }
    }
  }
  (void)d;
  return r;
}

BatchLoss loss_margin(const FusedBatch& b, double gamma) {
  check_batch(b);
  std::size_t n = b.size();
  BatchLoss r = zero_loss(b);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double s_ff = dot(b.f1.rspan(i), b.f2.rspan(j));
      double s_vf = dot(b.v1.rspan(i), b.f2.rspan(j));
      double h = -gamma + s_ff - s_vf;
      if (h > 0.0) {
        r.value += h / n;
        axpy(1.0 / n, b.f2.rspan(j), r.g_f1.rspan(i));
        axpy(-1.0 / n, b.f2.rspan(j), r.g_v1.rspan(i));
        axpy(1.0 / n, b.f1.rspan(i), r.g_f2.rspan(j));
        axpy(-1.0 / n, b.v1.rspan(i), r.g_f2.rspan(j));
      }
    }
  }
  return r;
}

BatchLoss loss_align(const FusedBatch& b, const FusionHyper& h) {
  check_batch(b);
  std::size_t n = b.size();
  BatchLoss r = zero_loss(b);
  if (h.lambda1 == 0.0 && h.lambda2 == 0.0) return r;

  // Symmetric InfoNCE over fused rows.
  if (h.lambda1 != 0.0) {
    Mat s(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        s.at(i, j) = dot(b.f1.rspan(i), b.f2.rspan(j)) / h.tau;
    Mat ds(n, n);
    double cl = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      // direction 1: anchor f1_i over candidates f2_j (rows of s)
      double mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, s.at(i, j));
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(s.at(i, j) - mx);
      cl += -(s.at(i, i) - (mx + std::log(z))) / (2.0 * n);
      for (std::size_t j = 0; j < n; ++j) {
        double pj = std::exp(s.at(i, j) - mx) / z;
        ds.at(i, j) += (pj - (i == j ? 1.0 : 0.0)) / (2.0 * n);
      }
      // direction 2: anchor f2_i over candidates f1_j (columns of s)
      mx = -1e300;
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, s.at(j, i));
      z = 0.0;
      for (std::size_t j = 0; j < n; ++j) z += std::exp(s.at(j, i) - mx);
      cl += -(s.at(i, i) - (mx + std::log(z))) / (2.0 * n);
      for (std::size_t j = 0; j < n; ++j) {
        double pj = std::exp(s.at(j, i) - mx) / z;
        ds.at(j, i) += (pj - (i == j ? 1.0 : 0.0)) / (2.0 * n);
      }
    }
    r.value += h.lambda1 * cl;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double c = h.lambda1 * ds.at(i, j) / h.tau;
        axpy(c, b.f2.rspan(j), r.g_f1.rspan(i));
        axpy(c, b.f1.rspan(i), r.g_f2.rspan(j));
      }
  }

  // Circle loss over the 2N stacked fused rows; each row's positive is its
  // partner, all other rows are negatives.
  if (h.lambda2 != 0.0) {
    std::size_t rows = 2 * n;
    auto row_of = [&](std::size_t r_) {
      return r_ < n ? b.f1.rspan(r_) : b.f2.rspan(r_ - n);
    };
    auto grow_of = [&](std::size_t r_) -> std::span<double> {
      return r_ < n ? r.g_f1.rspan(r_) : r.g_f2.rspan(r_ - n);
    };
    double zeta = h.circle_scale, m = h.circle_margin;
    double circ = 0.0;
    for (std::size_t a = 0; a < rows; ++a) {
      std::size_t partner = a < n ? a + n : a - n;
      double sp = dot(row_of(a), row_of(partner));
      double ap = std::max(0.0, 1.0 + m - sp);
      double tp = std::exp(-zeta * ap * (sp - (1.0 - m)));
      double tn_sum = 0.0;
      std::vector<double> tn(rows, 0.0), sn(rows, 0.0);
      for (std::size_t q = 0; q < rows; ++q) {
        if (q == a || q == partner) continue;
        sn[q] = dot(row_of(a), row_of(q));
        double an = std::max(0.0, sn[q] + m);
        tn[q] = std::exp(zeta * an * (sn[q] - m));
        tn_sum += tn[q];
      }
      double u = tp * tn_sum;
      circ += std::log1p(u) / rows;
      if (tn_sum > 0.0) {
        double dsp = (1.0 / (1.0 + u)) * tn_sum * tp * (-zeta) *
                     (ap - (ap > 0.0 ? 1.0 : 0.0) * (sp - (1.0 - m)));
        double c = h.lambda2 * dsp / rows;
        axpy(c, row_of(partner), grow_of(a));
        axpy(c, row_of(a), grow_of(partner));
        for (std::size_t q = 0; q < rows; ++q) {
          if (q == a || q == partner || tn[q] == 0.0) continue;
          double an = std::max(0.0, sn[q] + m);
          double dsn = (1.0 / (1.0 + u)) * tp * tn[q] * zeta *
                       (an + (an > 0.0 ? 1.0 : 0.0) * (sn[q] - m));
          double cq = h.lambda2 * dsn / rows;
          axpy(cq, row_of(q), grow_of(a));
          axpy(cq, row_of(a), grow_of(q));
        }
      }
    }
    r.value += h.lambda2 * circ;
  }
  return r;
}

FusedBatch fuse_pair_batch(const Catalog& cat, const FusionParams& p,
                           const std::vector<PairSet::Pair>& pairs,
                           std::vector<FuseCache>* caches1, std::vector<FuseCache>* caches2) {
  if (pairs.empty()) fail(errc::empty_input, "empty pair batch");
  std::size_t n = pairs.size();
  int d = p.latent_dim();
  FusedBatch b;
  b.f1 = Mat(n, d);
  b.f2 = Mat(n, d);
  b.v1 = Mat(n, d);
  b.v2 = Mat(n, d);
  if (caches1) caches1->assign(n, FuseCache{});
  if (caches2) caches2->assign(n, FuseCache{});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& pr = pairs[i];
    for (int side = 0; side < 2; ++side) {
      const Item& it = cat.item(side == 0 ? pr.a : pr.b);
      int view = side == 0 ? pr.view_a : pr.view_b;
      if (view < 0 || view >= static_cast<int>(it.views.size()))
        fail(errc::invalid_config, "pair view out of range");
      auto cv = cat.category_vec(it.category_id);
      Vec y(cv.begin(), cv.end());
      FuseCache local;
      FuseCache& cache =
          side == 0 ? (caches1 ? (*caches1)[i] : local) : (caches2 ? (*caches2)[i] : local);
      FuseResult fr = fuse_cached(p, it.views[view].pooled, y, cache);
      Mat& fm = side == 0 ? b.f1 : b.f2;
      Mat& vm = side == 0 ? b.v1 : b.v2;
      std::copy(fr.f.begin(), fr.f.end(), fm.row(i));
      std::copy(fr.v.begin(), fr.v.end(), vm.row(i));
    }
  }
  return b;
}

FusionParams train_fusion(const Catalog& cat, FusionParams params, int epochs, double lr,
                          int batch_size, std::uint64_t seed,
                          const std::vector<std::size_t>& pair_indices, TrainTrace* trace,
                          double beta1, double beta2) {
  if (epochs < 0 || batch_size < 2) fail(errc::invalid_config, "bad fusion training config");
  if (pair_indices.empty()) fail(errc::empty_input, "no training pairs");
  Rng rng(seed);
  std::vector<std::size_t> order = pair_indices;

  FusionParams grads = params;  // same shapes; zeroed below
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(static_cast<int>(i))]);
    double epoch_loss = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += batch_size) {
      std::size_t end = std::min(order.size(), start + batch_size);
      if (end - start < 2) continue;  // contrastive losses need >= 2 pairs
      std::vector<PairSet::Pair> batch;
      for (std::size_t k = start; k < end; ++k) batch.push_back(cat.pairs.pairs[order[k]]);
      std::vector<FuseCache> c1, c2;
      FusedBatch fb = fuse_pair_batch(cat, params, batch, &c1, &c2);
      BatchLoss lc = loss_cons(fb, params.hyper.tau);
      BatchLoss lm = loss_margin(fb, params.hyper.gamma);
      double loss = beta1 * lc.value + beta2 * lm.value;
      if (!std::isfinite(loss))
        fail(errc::training_diverged,
             "fusion training diverged at epoch " + std::to_string(epoch));
      epoch_loss += loss;
      ++n_batches;

      grads.for_each_span([](std::span<double> s) { std::fill(s.begin(), s.end(), 0.0); });
      Vec df(params.latent_dim()), dv(params.latent_dim());
      for (std::size_t i = 0; i < fb.size(); ++i) {
        for (int j = 0; j < params.latent_dim(); ++j) {
          df[j] = beta1 * lc.g_f1.at(i, j) + beta2 * lm.g_f1.at(i, j);
          dv[j] = beta1 * lc.g_v1.at(i, j) + beta2 * lm.g_v1.at(i, j);
        }
        fuse_backward(params, c1[i], df, dv, grads);
        for (int j = 0; j < params.latent_dim(); ++j) {
          df[j] = beta1 * lc.g_f2.at(i, j) + beta2 * lm.g_f2.at(i, j);
          dv[j] = beta1 * lc.g_v2.at(i, j) + beta2 * lm.g_v2.at(i, j);
        }
        fuse_backward(params, c2[i], df, dv, grads);
      }
      sgd_step(params, grads, lr, 5.0);
      if (!params_finite(params))
        fail(errc::training_diverged,
             "fusion params non-finite at epoch " + std::to_string(epoch));
    }
    if (trace) trace->epoch_loss.push_back(n_batches ? epoch_loss / n_batches : 0.0);
  }
  return params;
}

void save_fusion(const std::filesystem::path& path, const FusionParams& p) {
  FusionParams copy = p;
  Vec flat = flatten_params(copy);
  write_blob_f64(path, flat, 1);
  json j{{"in_dim", p.in_dim()},
         {"cat_dim", p.cat_dim()},
         {"latent_dim", p.latent_dim()},
         {"hidden_dim", p.gate_net.l1.out_dim()},
         {"lambda1", p.hyper.lambda1},
         {"lambda2", p.hyper.lambda2},
         {"tau", p.hyper.tau},
         {"gamma", p.hyper.gamma},
         {"circle_scale", p.hyper.circle_scale},
         {"circle_margin", p.hyper.circle_margin}};
  write_lines(path.string() + ".json", {j.dump()});
}

FusionParams load_fusion(const std::filesystem::path& path) {
  auto lines = read_lines(path.string() + ".json");
  if (lines.empty()) fail(errc::io_failure, "empty fusion sidecar");
  json j = json::parse(lines[0]);
  FusionParams p = make_fusion_params(j.at("in_dim").get<int>(), j.at("cat_dim").get<int>(),
                                      j.at("latent_dim").get<int>(),
                                      j.at("hidden_dim").get<int>(), 0);
  p.hyper.lambda1 = j.at("lambda1").get<double>();
  p.hyper.lambda2 = j.at("lambda2").get<double>();
  p.hyper.tau = j.at("tau").get<double>();
  p.hyper.gamma = j.at("gamma").get<double>();
  p.hyper.circle_scale = j.at("circle_scale").get<double>();
  p.hyper.circle_margin = j.at("circle_margin").get<double>();
  std::uint32_t dim = 0;
  Vec flat = read_blob_f64(path, &dim);
  unflatten_params(p, flat);
  return p;
}

}  // namespace visid
