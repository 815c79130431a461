#include "visid/codemetrics.hpp"

#include <algorithm>
#include <set>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

namespace {

// 1-based rank of target, 0 if absent
int rank_of(const RankedList& l) {
  for (std::size_t i = 0; i < l.ranked_ids.size(); ++i)
    if (l.ranked_ids[i] == l.target_id) return static_cast<int>(i) + 1;
  return 0;
}

}  // namespace

double hr_at_k(const std::vector<RankedList>& lists, int k) {
  if (lists.empty()) fail(errc::empty_input, "hr over no lists");
  if (k < 1) fail(errc::invalid_config, "k must be >= 1");
  double hit = 0.0;
  for (const auto& l : lists) {
    int r = rank_of(l);
    if (r >= 1 && r <= k) hit += 1.0;
  }
  return hit / lists.size();
}

double mrr_at_k(const std::vector<RankedList>& lists, int k) {
  if (lists.empty()) fail(errc::empty_input, "mrr over no lists");
  if (k < 1) fail(errc::invalid_config, "k must be >= 1");
  double sum = 0.0;
  for (const auto& l : lists) {
    int r = rank_of(l);
    if (r >= 1 && r <= k) sum += 1.0 / r;
  }
  return sum / lists.size();
}

double ico(const SidTable& table) {
  if (table.canonical.empty()) fail(errc::empty_input, "ico over empty table");
  std::set<std::vector<int>> distinct;
  for (const auto& [id, sid] : table.canonical) distinct.insert(sid.codes);
  return static_cast<double>(table.canonical.size()) / distinct.size();
}

std::vector<double> codebook_utilization(const SidTable& table) {
  if (table.rows.empty()) fail(errc::empty_input, "utilization over empty table");
  std::vector<std::set<int>> used(table.level_sizes.size());
  for (const auto& r : table.rows)
    for (std::size_t l = 0; l < r.sid.codes.size(); ++l) used[l].insert(r.sid.codes[l]);
  std::vector<double> out(table.level_sizes.size());
  for (std::size_t l = 0; l < out.size(); ++l)
    out[l] = static_cast<double>(used[l].size()) / table.level_sizes[l];
  return out;
}

QasResult qas_with(const Catalog& cat, const FusionParams& fusion, const ReconFn& recon,
                   const std::vector<std::size_t>& eval_pairs, const std::vector<int>& k_list) {
  if (eval_pairs.empty()) fail(errc::empty_input, "qas over no pairs");

  // item-level representations from the canonical view
  std::vector<Vec> reps(cat.items.size());
  for (std::size_t i = 0; i < cat.items.size(); ++i) {
    const Item& it = cat.items[i];
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    Vec f = fuse(fusion, it.views[0].pooled, y).f;
    reps[i] = recon(f, it);
  }

  std::vector<RankedList> lists;
  lists.reserve(eval_pairs.size());
  std::vector<std::pair<double, std::int64_t>> scored(cat.items.size());
  for (std::size_t idx : eval_pairs) {
    const auto& pr = cat.pairs.pairs[idx];
    const Item& qa = cat.item(pr.a);
    auto cv = cat.category_vec(qa.category_id);
    Vec y(cv.begin(), cv.end());
    Vec qf = fuse(fusion, qa.views[pr.view_a].pooled, y).f;
    Vec qrep = recon(qf, qa);

    for (std::size_t i = 0; i < cat.items.size(); ++i)
      scored[i] = {-cosine(qrep, reps[i]), cat.items[i].item_id};
    std::sort(scored.begin(), scored.end());

    RankedList l;
    l.query_id = static_cast<std::int64_t>(idx);
    l.target_id = pr.b;
    l.ranked_ids.reserve(scored.size());
    for (const auto& [neg_sim, id] : scored) l.ranked_ids.push_back(id);
    lists.push_back(std::move(l));
  }

  QasResult out;
  for (int k : k_list) {
    out.hr[k] = hr_at_k(lists, k);
    out.mrr[k] = mrr_at_k(lists, k);
  }
  return out;
}

QasResult qas(const Catalog& cat, const FusionParams& fusion, const CodebookStack& stack,
              const std::vector<std::size_t>& eval_pairs, const std::vector<int>& k_list) {
  if (stack.shallow.empty()) fail(errc::unfitted, "qas needs a fitted stack");
  ReconFn recon = [&stack](std::span<const double> f, const Item& it) {
    if (stack.total_levels() > stack.shallow_levels) return vrq_encode(f, it.biz, stack).full_recon;
    return rq_encode(f, stack).full_recon;
  };
  return qas_with(cat, fusion, recon, eval_pairs, k_list);
}

void save_code_report(const std::filesystem::path& path, const CodeReport& report) {
  json j;
  j["ico"] = report.ico;
  json hr = json::object(), mrr = json::object();
  for (const auto& [k, v] : report.qas_hr) hr[std::to_string(k)] = v;
  for (const auto& [k, v] : report.qas_mrr) mrr[std::to_string(k)] = v;
  j["qas_hr"] = hr;
  j["qas_mrr"] = mrr;
  j["codebook_utilization"] = report.utilization;
  write_lines(path, {j.dump(2)});
}

}  // namespace visid
