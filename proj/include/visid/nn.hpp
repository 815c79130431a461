// Affine and two-layer perceptron blocks with hand-written backward passes.
#pragma once

#include <span>

#include "visid/common.hpp"

namespace visid {

struct Affine {
  Mat w;  // out x in
  Vec b;  // out

  int in_dim() const { return static_cast<int>(w.cols); }
  int out_dim() const { return static_cast<int>(w.rows); }
};

inline Affine make_affine(int out, int in) {
  Affine a;
  a.w = Mat(out, in);
  a.b.assign(out, 0.0);
  return a;
}

// Xavier-style uniform init, bias zero.
inline void init_affine(Affine& a, Rng& rng) {
  double s = 1.0 / std::sqrt(static_cast<double>(std::max(1, a.in_dim())));
  for (double& x : a.w.a) x = s * (2.0 * rng.uniform() - 1.0);
  std::fill(a.b.begin(), a.b.end(), 0.0);
}

inline void affine_apply(const Affine& a, std::span<const double> x, std::span<double> y) {
  for (int i = 0; i < a.out_dim(); ++i) y[i] = a.b[i] + dot(a.w.rspan(i), x);
}

inline Vec affine_apply(const Affine& a, std::span<const double> x) {
  Vec y(a.out_dim());
  affine_apply(a, x, y);
  return y;
}

// Accumulates parameter grads into g and input grads into dx (dx may be empty).
inline void affine_backward(const Affine& a, std::span<const double> x,
                            std::span<const double> dy, Affine& g, std::span<double> dx) {
  for (int i = 0; i < a.out_dim(); ++i) {
    double d = dy[i];
    g.b[i] += d;
    double* gw = g.w.row(i);
    const double* w = a.w.row(i);
    for (int j = 0; j < a.in_dim(); ++j) {
      gw[j] += d * x[j];
      if (!dx.empty()) dx[j] += d * w[j];
    }
    (void)w;
  }
}

struct Mlp2 {
  Affine l1, l2;  // relu between
};

inline Mlp2 make_mlp2(int out, int hidden, int in) {
  return {make_affine(hidden, in), make_affine(out, hidden)};
}

inline void init_mlp2(Mlp2& m, Rng& rng) {
  init_affine(m.l1, rng);
  init_affine(m.l2, rng);
}

// hidden receives the post-relu activations, needed for the backward pass.
inline Vec mlp2_apply(const Mlp2& m, std::span<const double> x, Vec& hidden) {
  hidden = affine_apply(m.l1, x);
  for (double& h : hidden) h = h > 0.0 ? h : 0.0;
  return affine_apply(m.l2, hidden);
}

inline void mlp2_backward(const Mlp2& m, std::span<const double> x,
                          std::span<const double> hidden, std::span<const double> dy, Mlp2& g,
                          std::span<double> dx) {
  Vec dh(hidden.size(), 0.0);
  affine_backward(m.l2, hidden, dy, g.l2, dh);
  for (std::size_t i = 0; i < dh.size(); ++i)
    if (hidden[i] <= 0.0) dh[i] = 0.0;
  affine_backward(m.l1, x, dh, g.l1, dx);
}

// Flattening helpers shared by every params struct. P::for_each_span must
// enumerate spans in a fixed order.
template <class P>
Vec flatten_params(P& p) {
  Vec out;
  p.for_each_span([&](std::span<double> s) { out.insert(out.end(), s.begin(), s.end()); });
  return out;
}

template <class P>
void unflatten_params(P& p, const Vec& flat) {
  std::size_t k = 0;
  p.for_each_span([&](std::span<double> s) {
    if (k + s.size() > flat.size()) fail(errc::shape_mismatch, "flat param vector too short");
    std::copy(flat.begin() + k, flat.begin() + k + s.size(), s.begin());
    k += s.size();
  });
  if (k != flat.size()) fail(errc::shape_mismatch, "flat param vector size mismatch");
}

// SGD step with a global norm clip. Grads and params must share layout.
template <class P>
void sgd_step(P& params, P& grads, double lr, double clip) {
  double sq = 0.0;
  grads.for_each_span([&](std::span<double> s) {
    for (double v : s) sq += v * v;
  });
  double scale = 1.0;
  double n = std::sqrt(sq);
  if (clip > 0.0 && n > clip) scale = clip / n;
  std::vector<std::span<double>> gs;
  grads.for_each_span([&](std::span<double> s) { gs.push_back(s); });
  std::size_t idx = 0;
  params.for_each_span([&](std::span<double> s) {
    std::span<double> g = gs[idx++];
    for (std::size_t i = 0; i < s.size(); ++i) s[i] -= lr * scale * g[i];
  });
}

template <class P>
bool params_finite(P& p) {
  bool ok = true;
  p.for_each_span([&](std::span<double> s) {
    for (double v : s)
      if (!std::isfinite(v)) ok = false;
  });
  return ok;
}

}  // namespace visid
