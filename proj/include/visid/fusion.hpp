// Vision-text fusion: a gated combination of a visual latent and a category
// latent, trained with a multi-view consistency loss and a margin loss so
// that views of the same item land close together before quantization.
#pragma once

#include <filesystem>
#include <optional>

#include "visid/corpus.hpp"
#include "visid/nn.hpp"

namespace visid {

struct FusionHyper {
  double lambda1 = 1.0;   // weight of the contrastive term in the alignment loss
  double lambda2 = 0.25;  // weight of the circle term in the alignment loss
  double tau = 0.07;      // softmax temperature
  double gamma = 0.1;     // margin of the cross-similarity hinge
  double circle_scale = 32.0;
  double circle_margin = 0.25;
};

struct FusionParams {
  Affine enc_v;   // image pooled vector -> latent, relu
  Affine enc_t;   // category vector -> latent
  Mlp2 gate_net;  // concat(v, t) -> scalar gate logit
  Mlp2 cat_net;   // concat(v, t) -> combined feature
  FusionHyper hyper;

  int in_dim() const { return enc_v.in_dim(); }
  int cat_dim() const { return enc_t.in_dim(); }
  int latent_dim() const { return enc_v.out_dim(); }

  template <class F>
  void for_each_span(F&& f) {
    auto span_of = [](Vec& v) { return std::span<double>(v); };
    f(std::span<double>(enc_v.w.a));
    f(span_of(enc_v.b));
    f(std::span<double>(enc_t.w.a));
    f(span_of(enc_t.b));
    f(std::span<double>(gate_net.l1.w.a));
    f(span_of(gate_net.l1.b));
    f(std::span<double>(gate_net.l2.w.a));
    f(span_of(gate_net.l2.b));
    f(std::span<double>(cat_net.l1.w.a));
    f(span_of(cat_net.l1.b));
    f(std::span<double>(cat_net.l2.w.a));
    f(span_of(cat_net.l2.b));
  }
};

FusionParams make_fusion_params(int in_dim, int cat_dim, int latent_dim, int hidden_dim,
                                std::uint64_t seed);

struct FuseResult {
  Vec f;  // fused embedding, unit norm
  Vec v;  // visual latent, unit norm
  double alpha = 0.0;
};

FuseResult fuse(const FusionParams& p, std::span<const double> x, std::span<const double> y);

// Exposed sub-steps, used by tests to check the fused formula piecewise.
Vec encode_visual(const FusionParams& p, std::span<const double> x);
Vec encode_text(const FusionParams& p, std::span<const double> y);
double gate_alpha(const FusionParams& p, std::span<const double> v, std::span<const double> t);
Vec category_feature(const FusionParams& p, std::span<const double> v,
                     std::span<const double> t);

// A batch of N positive pairs; row i of (f1, v1) pairs with row i of (f2, v2).
struct FusedBatch {
  Mat f1, f2, v1, v2;
  std::size_t size() const { return f1.rows; }
  // Involution over the 2N stacked rows [f1; f2].
  std::vector<int> pair_index() const;
};

struct BatchLoss {
  double value = 0.0;
  Mat g_f1, g_f2, g_v1, g_v2;
};

// Multi-view consistency: fused-to-fused plus visual-to-fused InfoNCE.
BatchLoss loss_cons(const FusedBatch& b, double tau);
// Hinge on (fused-fused sim) exceeding (visual-fused sim) by more than gamma.
BatchLoss loss_margin(const FusedBatch& b, double gamma);
// Alignment loss: lambda1 * symmetric InfoNCE + lambda2 * circle loss.
BatchLoss loss_align(const FusedBatch& b, const FusionHyper& h);

struct TrainTrace {
  std::vector<double> epoch_loss;
};

// Gradient descent over pair mini-batches on beta1*loss_cons + beta2*loss_margin.
FusionParams train_fusion(const Catalog& cat, FusionParams params, int epochs, double lr,
                          int batch_size, std::uint64_t seed,
                          const std::vector<std::size_t>& pair_indices,
                          TrainTrace* trace = nullptr, double beta1 = 1.0, double beta2 = 0.25);

void save_fusion(const std::filesystem::path& path, const FusionParams& p);
FusionParams load_fusion(const std::filesystem::path& path);

// Internal forward cache, exposed for the joint quantizer training loop.
struct FuseCache {
  Vec x, y;
  Vec v_pre, v, t, gate_hidden, cat_hidden, g;
  Vec f_raw, f, vn;
  double z = 0.0, alpha = 0.0;
  double f_raw_norm = 0.0, v_norm = 0.0;
};

FuseResult fuse_cached(const FusionParams& p, std::span<const double> x,
                       std::span<const double> y, FuseCache& cache);
// df/dv are grads wrt the normalized outputs; parameter grads accumulate into g.
void fuse_backward(const FusionParams& p, const FuseCache& c, std::span<const double> df,
                   std::span<const double> dv, FusionParams& g);

FusedBatch fuse_pair_batch(const Catalog& cat, const FusionParams& p,
                           const std::vector<PairSet::Pair>& pairs,
                           std::vector<FuseCache>* caches1 = nullptr,
                           std::vector<FuseCache>* caches2 = nullptr);

}  // namespace visid
