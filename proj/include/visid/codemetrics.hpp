#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <vector>

#include "visid/corpus.hpp"
#include "visid/fusion.hpp"
#include "visid/quantize.hpp"

namespace visid {

struct RankedList {
  std::int64_t query_id = 0;
  std::vector<std::int64_t> ranked_ids;
  std::int64_t target_id = 0;
};

double hr_at_k(const std::vector<RankedList>& lists, int k);
double mrr_at_k(const std::vector<RankedList>& lists, int k);

// average items sharing one canonical code sequence; 1 means all distinct
double ico(const SidTable& table);

std::vector<double> codebook_utilization(const SidTable& table);

struct QasResult {
  std::map<int, double> hr;
  std::map<int, double> mrr;
};

// Maps a fused embedding (plus its item, for business features) to the
// representation used for similarity search.
using ReconFn = std::function<Vec(std::span<const double>, const Item&)>;

// Similarity search over quantized reconstructions: each catalog item is
// represented by recon of its view-0 fused embedding, each eval pair
// contributes one query (side a) with side b as the target. Exact cosine
// ranking, ties by item id.
QasResult qas_with(const Catalog& cat, const FusionParams& fusion, const ReconFn& recon,
                   const std::vector<std::size_t>& eval_pairs, const std::vector<int>& k_list);

QasResult qas(const Catalog& cat, const FusionParams& fusion, const CodebookStack& stack,
              const std::vector<std::size_t>& eval_pairs, const std::vector<int>& k_list);

struct CodeReport {
  double ico = 0.0;
  std::map<int, double> qas_hr;
  std::map<int, double> qas_mrr;
  std::vector<double> utilization;
};

void save_code_report(const std::filesystem::path& path, const CodeReport& report);

}  // namespace visid
