#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "visid/codemetrics.hpp"
#include "visid/corpus.hpp"
#include "visid/decode.hpp"
#include "visid/fusion.hpp"
#include "visid/genmodel.hpp"
#include "visid/prune.hpp"
#include "visid/quantize.hpp"

namespace visid {

struct Splits {
  std::vector<std::size_t> train_pairs, eval_pairs;
  std::vector<std::size_t> train_sessions, eval_sessions;
};

Splits make_splits(const Catalog& cat);

enum class MethodKind { rq_kmeans, rq_vae, opq, fsq, vrq };

std::string method_name(MethodKind kind);

// Frozen artifacts of one encoding method. Closures derived from a setup
// reference it, so keep the setup alive and in place while they are used.
struct MethodSetup {
  MethodKind kind = MethodKind::vrq;
  std::string name;
  FusionParams fusion;
  CodebookStack stack;  // rq/vrq variants
  OpqParams opq;        // opq baseline
  FsqModel fsq;         // fsq baseline
  SidTable table;
};

ReconFn method_recon(const MethodSetup& m);
QueryEncodeFn method_query_encode(const MethodSetup& m);

struct EncodeBudget {
  std::vector<int> shallow{8, 8, 8};
  std::vector<int> deep{4, 4};
  int vrq_epochs = 40;
  double vrq_lr = 0.01;
  int vrq_batch = 256;
  int rqvae_epochs = 40;
  int opq_iters = 8;
  std::vector<int> fsq_levels{7, 7, 7, 5, 5};
  std::uint64_t seed = 7;
};

MethodSetup fit_method(MethodKind kind, const Catalog& cat, const FusionParams& base,
                       const EncodeBudget& budget, const Splits& splits);

// fused embeddings of every item view under the given fusion, view-major
Mat fused_all_views(const Catalog& cat, const FusionParams& fusion);

struct StageBudgets {
  GrTrainOptions pretrain;
  GrTrainOptions sft;
  GrTrainOptions psft;
  GrTrainOptions dpo;
  int d_s = 64;
  int h_s = 128;
};

// stages 1+2, shared by the method comparison and the sweep
ScorerParams gr_pretrain_sft(const Catalog& cat, const MethodSetup& m, const StageBudgets& b);

// the query's own codes for every session, via the method's encoder
std::vector<SemanticId> session_query_codes(const Catalog& cat, const MethodSetup& m);

struct StageArtifacts {
  ScorerParams pretrain, sft, psft, dpo;
  std::map<std::int64_t, UserContext> users;
  std::vector<SemanticId> qsids;
};

StageArtifacts train_all_stages(const Catalog& cat, const MethodSetup& m, const StageBudgets& b);

struct EvalScores {
  std::map<int, double> hr, mrr;
  double mean_ms = 0.0;
  std::size_t queries = 0;
};

// pair queries: side-a view tokens, no user terms, target side b
EvalScores eval_pair_retrieval(const Catalog& cat, const MethodSetup& m,
                               const ScorerParams& scorer,
                               const std::vector<std::size_t>& pair_idx,
                               const RetrieveOptions& opt, const std::vector<int>& ks,
                               std::size_t stride = 1);

// session queries with user context; token_budget < 0 keeps full queries
EvalScores eval_session_retrieval(const Catalog& cat, const MethodSetup& m,
                                  const ScorerParams& scorer,
                                  const std::map<std::int64_t, UserContext>& users,
                                  const std::vector<SemanticId>* qsids_override,
                                  const std::vector<std::size_t>& sess_idx,
                                  const RetrieveOptions& opt, const std::vector<int>& ks,
                                  int token_budget = -1, std::size_t stride = 1);

struct EncodeStudyRow {
  std::string method;
  double ico = 0.0;
  double qas_hr4 = 0.0, qas_mrr4 = 0.0;
  double gr_hr4 = 0.0, gr_mrr4 = 0.0;
};

std::vector<EncodeStudyRow> run_encode_study(const Catalog& cat, const FusionParams& base,
                                             const EncodeBudget& budget, const StageBudgets& gr,
                                             const RetrieveOptions& ropt,
                                             std::size_t eval_stride);

struct SweepRow {
  std::string levels;
  double gr_hr4 = 0.0;
};

struct SweepConfig {
  std::vector<int> shallow;
  std::vector<int> deep;
};

std::vector<SweepRow> run_sweep(const Catalog& cat, const FusionParams& base,
                                const std::vector<SweepConfig>& configs,
                                const EncodeBudget& budget, const StageBudgets& gr,
                                const RetrieveOptions& ropt, std::size_t eval_stride);

struct PruneRow {
  int v_sub = 0;
  double hr4 = 0.0, mrr4 = 0.0;
  double mean_ms = 0.0;
  double working_set_mb = 0.0;
};

std::vector<PruneRow> run_prune_study(const Catalog& cat, const MethodSetup& m,
                                      const StageArtifacts& stages,
                                      const std::vector<int>& subset_sizes, int epochs,
                                      const PruneTrainOptions& popt,
                                      const RetrieveOptions& ropt, int v_max,
                                      const Splits& splits);

std::string file_hash_hex(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::map<std::string, std::string> config;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> input_hashes;
  std::map<std::string, std::string> output_hashes;
  double wall_ms = 0.0;
  std::string tool_version = "0.1.0";
};

void write_manifest(const std::filesystem::path& path, const RunManifest& m);

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

struct PipelineConfig {
  CatalogConfig catalog;
  int fusion_epochs = 3;
  double fusion_lr = 0.05;
  int fusion_batch = 32;
  EncodeBudget encode;
  StageBudgets stages;
  RetrieveOptions retrieve;
  std::vector<int> eval_ks{1, 4, 10};
  std::size_t eval_stride = 1;
};

struct PipelineOutcome {
  // artifact name -> content hash, for rerun comparisons
  std::map<std::string, std::string> artifact_hashes;
  EvalScores final_eval;
};

// datagen, fusion training, quantizer fit, encoding, the four scorer stages
// and the held-out retrieval report, all written under dir
PipelineOutcome run_full_pipeline(const std::filesystem::path& dir, const PipelineConfig& cfg);

}  // namespace visid
