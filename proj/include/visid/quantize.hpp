// Hierarchical residual quantization over fused embeddings: shallow residual
// k-means levels (EMA-trainable), deep subspace codes from a rotated
// residual+business-feature vector, and a bounded scalar quantizer baseline.
#pragma once

#include <array>
#include <filesystem>
#include <map>

#include "visid/fusion.hpp"

namespace visid {

struct SemanticId {
  std::vector<int> codes;

  bool operator==(const SemanticId& o) const { return codes == o.codes; }
  bool operator<(const SemanticId& o) const { return codes < o.codes; }
  std::string str() const;
};

struct KmeansOptions {
  int max_iter = 25;
  double tol = 1e-6;      // relative SSE improvement stop
  bool seed_mean_first = false;  // centroid 0 = data mean, rest k-means++
};

struct KmeansResult {
  Mat centroids;
  std::vector<int> assign;
  double sse = 0.0;
};

// K-means++ seeding then Lloyd. Ties in assignment break to the lowest
// centroid index; empty clusters re-seed to the farthest point.
KmeansResult kmeans(const Mat& points, int k, std::uint64_t seed,
                    const KmeansOptions& opt = {});

// Deep-level subspace quantizer with a learned orthogonal rotation. Input
// features are residual ++ standardized log1p business features ++ zero pad.
struct OpqParams {
  Mat rotation;                    // dz x dz
  std::vector<Mat> sub_codebooks;  // M entries, each sub_sizes[m] x (dz/M)
  std::vector<int> sub_sizes;
  Vec biz_mean, biz_std;  // over log1p features; std folds in a balance
                          // factor putting business dims on the residual scale
  int residual_dim = 0;
  int biz_dim = 0;
  int pad = 0;
  bool fitted = false;

  int feature_dim() const { return residual_dim + biz_dim + pad; }
  int chunk_dim() const {
    return sub_sizes.empty() ? 0 : feature_dim() / static_cast<int>(sub_sizes.size());
  }
};

struct OpqFitResult {
  OpqParams params;
  std::vector<double> objective_trace;  // mean squared error per alternation
};

// Strict interface: (residual_dim + biz_dim) must be divisible by M.
OpqFitResult opq_fit(const Mat& residuals, const Mat& biz_raw, int M, int K_sub, int iters,
                     std::uint64_t seed);
// General form with per-subspace sizes; pads the feature vector with zeros
// up to a multiple of the subspace count when allow_pad is set.
OpqFitResult opq_fit_ex(const Mat& residuals, const Mat& biz_raw, std::vector<int> sub_sizes,
                        int iters, std::uint64_t seed, bool allow_pad);

Vec opq_features(const OpqParams& p, std::span<const double> residual, const BizStats& biz);
std::vector<int> opq_encode(const OpqParams& p, std::span<const double> residual,
                            const BizStats& biz);
// Reconstruction rotated back to feature space; first residual_dim entries
// approximate the residual.
Vec opq_reconstruct(const OpqParams& p, std::span<const int> deep_codes);

Vec biz_features_raw(const BizStats& biz);  // log1p(clicks, price, orders)

struct CodebookStack {
  std::vector<int> level_sizes;    // all levels, shallow then deep
  int shallow_levels = 0;
  std::vector<Mat> shallow;        // per level: K_l x d
  std::vector<Mat> ema_sums;       // shadow accumulators for EMA updates
  std::vector<Vec> ema_counts;
  double decay = 0.99;
  std::array<double, 4> betas{1.0, 0.25, 1.0, 0.5};  // cons, margin, commit, hc
  OpqParams deep;

  int dim() const { return shallow.empty() ? 0 : static_cast<int>(shallow[0].cols); }
  int total_levels() const { return static_cast<int>(level_sizes.size()); }
  bool has_deep() const { return deep.fitted; }
};

// "K0,K1,K2|Ks0,Ks1" -> shallow sizes before '|', deep sizes after.
std::pair<std::vector<int>, std::vector<int>> parse_levels(const std::string& spec);

// One k-means per level on the running residuals; seeds each level with the
// residual mean first so per-level residual energy cannot increase.
CodebookStack rq_kmeans_fit(const Mat& vectors, const std::vector<int>& shallow_sizes,
                            const std::vector<int>& deep_sizes, std::uint64_t seed);

struct QuantResult {
  SemanticId sid;                // shallow codes, plus deep codes when fitted
  std::vector<Vec> residuals;    // r_0 = f .. r_shallow
  std::vector<Vec> recon_levels; // cumulative shallow reconstructions
  Vec full_recon;                // shallow recon + deep residual recon
};

QuantResult rq_encode(std::span<const double> f, const CodebookStack& s);
QuantResult vrq_encode(std::span<const double> f, const BizStats& biz, const CodebookStack& s);

// Commitment loss of one encoded vector; gradient wrt f flows through the
// residual chain with codebook entries held fixed.
std::pair<double, Vec> loss_commit(const QuantResult& q, const CodebookStack& s);
// Hierarchical consistency between two encoded vectors; straight-through
// gradients wrt both pre-quantization embeddings.
struct HcLoss {
  double value = 0.0;
  Vec g_a, g_b;
};
HcLoss loss_hc(const QuantResult& qa, const QuantResult& qb);

struct VrqTrainResult {
  CodebookStack stack;
  FusionParams fusion;
  TrainTrace trace;
  double share_rate_init = 0.0;   // same-item pairs sharing the level-0 code
  double share_rate_final = 0.0;
};

// Joint training: EMA codebook updates plus straight-through encoder grads
// on beta-weighted consistency + margin + commitment + hierarchy losses.
VrqTrainResult train_vrq(const Catalog& cat, FusionParams fusion, CodebookStack init,
                         std::array<double, 4> betas, int epochs, double lr, double decay,
                         std::uint64_t seed, const std::vector<std::size_t>& pair_indices,
                         int batch_size = 64);

struct SidTable {
  std::vector<int> level_sizes;
  struct Row {
    std::int64_t item_id;
    int view;
    SemanticId sid;
  };
  std::vector<Row> rows;
  std::map<std::int64_t, SemanticId> canonical;  // view-0 code per item
};

SidTable vrq_encode_catalog(const Catalog& cat, const FusionParams& fusion,
                            const CodebookStack& s);

void save_sid_table(const std::filesystem::path& path, const SidTable& t);
SidTable load_sid_table(const std::filesystem::path& path);

void save_stack(const std::filesystem::path& path, const CodebookStack& s);
CodebookStack load_stack(const std::filesystem::path& path);

// Bounded scalar quantization of the leading coordinates: clamp to [-1, 1],
// scale by (levels-1)/2 and round half away from zero.
std::vector<int> fsq_encode(std::span<const double> f, const std::vector<int>& levels);

// Scalar quantizer over the top principal directions of a training set.
struct FsqModel {
  Mat dirs;  // n_levels x dim, orthonormal rows
  Vec mean;
  Vec scale;  // per-direction coordinate scale
  std::vector<int> levels;
};

FsqModel fsq_fit(const Mat& embeddings, const std::vector<int>& levels);
std::vector<int> fsq_encode_model(const FsqModel& m, std::span<const double> f);
Vec fsq_reconstruct(const FsqModel& m, std::span<const int> codes);

double fused_share_rate(const Catalog& cat, const FusionParams& fusion, const CodebookStack& s,
                        const std::vector<std::size_t>& pair_indices);

}  // namespace visid
