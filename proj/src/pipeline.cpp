#include "visid/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

Splits make_splits(const Catalog& cat) {
  Splits s;
  for (std::size_t i = 0; i < cat.pairs.pairs.size(); ++i)
    (is_eval_pair(i) ? s.eval_pairs : s.train_pairs).push_back(i);
  for (std::size_t i = 0; i < cat.sessions.size(); ++i)
    (is_eval_session(i) ? s.eval_sessions : s.train_sessions).push_back(i);
  return s;
}

std::string method_name(MethodKind kind) {
  switch (kind) {
    case MethodKind::rq_kmeans: return "rq-kmeans";
    case MethodKind::rq_vae: return "rq-vae";
    case MethodKind::opq: return "opq";
    case MethodKind::fsq: return "fsq";
    case MethodKind::vrq: return "vrq";
  }
  fail(errc::invalid_config, "unknown method kind");
}

Mat fused_all_views(const Catalog& cat, const FusionParams& fusion) {
  std::size_t rows = 0;
  for (const Item& it : cat.items) rows += it.views.size();
  Mat out(rows, fusion.latent_dim());
  std::size_t r = 0;
  for (const Item& it : cat.items) {
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    for (const TokenMatrix& view : it.views) {
      Vec f = fuse(fusion, view.pooled, y).f;
      std::copy(f.begin(), f.end(), out.row(r));
      ++r;
    }
  }
  return out;
}

ReconFn method_recon(const MethodSetup& m) {
  switch (m.kind) {
    case MethodKind::opq:
      return [&m](std::span<const double> f, const Item& it) {
        return opq_reconstruct(m.opq, opq_encode(m.opq, f, it.biz));
      };
    case MethodKind::fsq:
      return [&m](std::span<const double> f, const Item&) {
        return fsq_reconstruct(m.fsq, fsq_encode_model(m.fsq, f));
      };
    default:
      return [&m](std::span<const double> f, const Item& it) {
        return m.stack.total_levels() > m.stack.shallow_levels
                   ? vrq_encode(f, it.biz, m.stack).full_recon
                   : rq_encode(f, m.stack).full_recon;
      };
  }
}

QueryEncodeFn method_query_encode(const MethodSetup& m) {
  switch (m.kind) {
    case MethodKind::opq:
      return [&m](std::span<const double> f) {
        return SemanticId{opq_encode(m.opq, f, BizStats{})};
      };
    case MethodKind::fsq:
      return [&m](std::span<const double> f) { return SemanticId{fsq_encode_model(m.fsq, f)}; };
    default:
      return [&m](std::span<const double> f) {
        return m.stack.total_levels() > m.stack.shallow_levels
                   ? vrq_encode(f, BizStats{}, m.stack).sid
                   : rq_encode(f, m.stack).sid;
      };
  }
}

namespace {

// per-view business rows in the feature order used at encode time
Mat biz_rows(const Catalog& cat) {
  std::size_t rows = 0;
  for (const Item& it : cat.items) rows += it.views.size();
  Mat out(rows, 3);
  std::size_t r = 0;
  for (const Item& it : cat.items)
    for (std::size_t w = 0; w < it.views.size(); ++w) {
      out.at(r, 0) = static_cast<double>(it.biz.clicks_30d);
      out.at(r, 1) = it.biz.price;
      out.at(r, 2) = static_cast<double>(it.biz.orders_30d);
      ++r;
    }
  return out;
}

SidTable encode_catalog_custom(const Catalog& cat, const FusionParams& fusion,
                               const std::vector<int>& level_sizes,
                               const std::function<SemanticId(std::span<const double>,
                                                              const Item&)>& encode) {
  SidTable t;
  t.level_sizes = level_sizes;
  for (const Item& it : cat.items) {
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    for (std::size_t w = 0; w < it.views.size(); ++w) {
      Vec f = fuse(fusion, it.views[w].pooled, y).f;
      SemanticId sid = encode(f, it);
      t.rows.push_back({it.item_id, static_cast<int>(w), sid});
      if (w == 0) t.canonical[it.item_id] = sid;
    }
  }
  return t;
}

}  // namespace

MethodSetup fit_method(MethodKind kind, const Catalog& cat, const FusionParams& base,
                       const EncodeBudget& budget, const Splits& splits) {
  MethodSetup m;
  m.kind = kind;
  m.name = method_name(kind);
  m.fusion = base;
  std::vector<int> merged = budget.shallow;
  merged.insert(merged.end(), budget.deep.begin(), budget.deep.end());

  switch (kind) {
    case MethodKind::rq_kmeans: {
      Mat fused = fused_all_views(cat, base);
      m.stack = rq_kmeans_fit(fused, merged, {}, budget.seed);
      m.table = vrq_encode_catalog(cat, m.fusion, m.stack);
      break;
    }
    case MethodKind::rq_vae: {
      Mat fused = fused_all_views(cat, base);
      CodebookStack init = rq_kmeans_fit(fused, merged, {}, budget.seed);
      // codebooks move by moving averages and commitment only, encoder frozen
      VrqTrainResult r = train_vrq(cat, base, std::move(init), {0.0, 0.0, 1.0, 0.0},
                                   budget.rqvae_epochs, 0.0, 0.99, budget.seed,
                                   splits.train_pairs, budget.vrq_batch);
      m.stack = std::move(r.stack);
      m.table = vrq_encode_catalog(cat, m.fusion, m.stack);
      break;
    }
    case MethodKind::opq: {
      Mat fused = fused_all_views(cat, base);
      Mat no_biz(0, 0);
      OpqFitResult r =
          opq_fit_ex(fused, no_biz, merged, budget.opq_iters, budget.seed, true);
      m.opq = std::move(r.params);
      m.table = encode_catalog_custom(cat, m.fusion, merged,
                                      [&m](std::span<const double> f, const Item& it) {
                                        return SemanticId{opq_encode(m.opq, f, it.biz)};
                                      });
      break;
    }
    case MethodKind::fsq: {
      Mat fused = fused_all_views(cat, base);
      m.fsq = fsq_fit(fused, budget.fsq_levels);
      m.table = encode_catalog_custom(cat, m.fusion, budget.fsq_levels,
                                      [&m](std::span<const double> f, const Item&) {
                                        return SemanticId{fsq_encode_model(m.fsq, f)};
                                      });
      break;
    }
    case MethodKind::vrq: {
      Mat fused = fused_all_views(cat, base);
      CodebookStack init = rq_kmeans_fit(fused, budget.shallow, budget.deep, budget.seed);
      VrqTrainResult r = train_vrq(cat, base, std::move(init), {1.0, 0.25, 1.0, 0.5},
                                   budget.vrq_epochs, budget.vrq_lr, 0.99, budget.seed,
                                   splits.train_pairs, budget.vrq_batch);
      m.fusion = std::move(r.fusion);
      m.stack = std::move(r.stack);
      // deep codes on the post-shallow residuals plus business features
      Mat fused2 = fused_all_views(cat, m.fusion);
      Mat resid(fused2.rows, fused2.cols);
      for (std::size_t i = 0; i < fused2.rows; ++i) {
        QuantResult q = rq_encode(fused2.rspan(i), m.stack);
        std::copy(q.residuals.back().begin(), q.residuals.back().end(), resid.row(i));
      }
      OpqFitResult deep = opq_fit_ex(resid, biz_rows(cat), budget.deep, budget.opq_iters,
                                     budget.seed + 101, true);
      m.stack.deep = std::move(deep.params);
      m.table = vrq_encode_catalog(cat, m.fusion, m.stack);
      break;
    }
  }
  return m;
}

// Serving-path codes of every pair's query view (zero category vector, no
// business stats), so SFT conditions on what the retriever will feed it.
static std::vector<SemanticId> pair_query_codes(const Catalog& cat, const MethodSetup& m) {
  QueryEncodeFn enc = method_query_encode(m);
  Vec y(m.fusion.cat_dim(), 0.0);
  std::vector<SemanticId> out;
  out.reserve(cat.pairs.pairs.size());
  for (const auto& pr : cat.pairs.pairs)
    out.push_back(enc(fuse(m.fusion, cat.item(pr.a).views[pr.view_a].pooled, y).f));
  return out;
}

ScorerParams gr_pretrain_sft(const Catalog& cat, const MethodSetup& m, const StageBudgets& b) {
  ScorerParams p =
      make_scorer(m.table.level_sizes, static_cast<int>(cat.cfg.dim), cat.cfg.n_categories,
                  b.d_s, b.h_s, b.pretrain.seed);
  p = train_pretrain(cat, m.table, std::move(p), b.pretrain);
  std::vector<SemanticId> pq = pair_query_codes(cat, m);
  p = train_sft(cat, m.table, std::move(p), b.sft, nullptr, &pq);
  return p;
}

std::vector<SemanticId> session_query_codes(const Catalog& cat, const MethodSetup& m) {
  QueryEncodeFn enc = method_query_encode(m);
  Vec y(m.fusion.cat_dim(), 0.0);
  std::vector<SemanticId> out;
  out.reserve(cat.sessions.size());
  for (const Session& s : cat.sessions) out.push_back(enc(fuse(m.fusion, s.query.pooled, y).f));
  return out;
}

StageArtifacts train_all_stages(const Catalog& cat, const MethodSetup& m,
                                const StageBudgets& b) {
  StageArtifacts a;
  a.users = build_user_contexts(cat, m.fusion, m.stack, m.table);
  a.qsids = session_query_codes(cat, m);
  ScorerParams p =
      make_scorer(m.table.level_sizes, static_cast<int>(cat.cfg.dim), cat.cfg.n_categories,
                  b.d_s, b.h_s, b.pretrain.seed);
  a.pretrain = train_pretrain(cat, m.table, std::move(p), b.pretrain);
  std::vector<SemanticId> pq = pair_query_codes(cat, m);
  a.sft = train_sft(cat, m.table, a.pretrain, b.sft, nullptr, &pq);
  a.psft = train_personalized_sft(cat, m.table, a.users, a.sft, b.psft, nullptr, &a.qsids);
  a.dpo = train_dpo(cat, m.table, a.users, a.psft, b.dpo, nullptr, &a.qsids);
  return a;
}

namespace {

EvalScores score_lists(const std::vector<RankedList>& lists, const std::vector<int>& ks,
                       double total_ms) {
  EvalScores s;
  for (int k : ks) {
    s.hr[k] = hr_at_k(lists, k);
    s.mrr[k] = mrr_at_k(lists, k);
  }
  s.queries = lists.size();
  s.mean_ms = lists.empty() ? 0.0 : total_ms / lists.size();
  return s;
}

}  // namespace

EvalScores eval_pair_retrieval(const Catalog& cat, const MethodSetup& m,
                               const ScorerParams& scorer,
                               const std::vector<std::size_t>& pair_idx,
                               const RetrieveOptions& opt, const std::vector<int>& ks,
                               std::size_t stride) {
  if (stride < 1) fail(errc::invalid_config, "stride must be >= 1");
  Retriever r = Retriever::make_custom(cat, m.fusion, scorer, m.table, method_recon(m),
                                       method_query_encode(m));
  std::vector<RankedList> lists;
  double total_ms = 0.0;
  for (std::size_t k = 0; k < pair_idx.size(); k += stride) {
    const auto& pr = cat.pairs.pairs[pair_idx[k]];
    const TokenMatrix& query = cat.item(pr.a).views[pr.view_a];
    auto t0 = std::chrono::steady_clock::now();
    std::vector<RetrievedItem> got = retrieve(r, query, nullptr, opt);
    auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    RankedList l;
    l.query_id = static_cast<std::int64_t>(pair_idx[k]);
    l.target_id = pr.b;
    for (const auto& g : got) l.ranked_ids.push_back(g.item_id);
    lists.push_back(std::move(l));
  }
  return score_lists(lists, ks, total_ms);
}

EvalScores eval_session_retrieval(const Catalog& cat, const MethodSetup& m,
                                  const ScorerParams& scorer,
                                  const std::map<std::int64_t, UserContext>& users,
                                  const std::vector<SemanticId>* qsids_override,
                                  const std::vector<std::size_t>& sess_idx,
                                  const RetrieveOptions& opt, const std::vector<int>& ks,
                                  int token_budget, std::size_t stride) {
  if (stride < 1) fail(errc::invalid_config, "stride must be >= 1");
  Retriever r = Retriever::make_custom(cat, m.fusion, scorer, m.table, method_recon(m),
                                       method_query_encode(m));
  std::vector<RankedList> lists;
  double total_ms = 0.0;
  for (std::size_t k = 0; k < sess_idx.size(); k += stride) {
    std::size_t si = sess_idx[k];
    const Session& s = cat.sessions[si];
    auto uit = users.find(s.user_id);
    if (uit == users.end()) fail(errc::missing_file, "session user has no context");
    UserContext u = uit->second;
    u.scene_id = s.scene_id;

    auto t0 = std::chrono::steady_clock::now();
    const TokenMatrix* query = &s.query;
    TokenMatrix pruned;
    if (token_budget >= 0 && token_budget < s.query.count()) {
      pruned = prune_tokens(s.query, select_tokens(s.query, token_budget, 0));
      query = &pruned;
    }
    std::vector<RetrievedItem> got;
    if (qsids_override != nullptr) {
      // pinned query codes, bypassing the retriever's own encoder
      ScorerInput base;
      base.query = query;
      base.user = &u;
      base.query_sid = &(*qsids_override)[si];
      std::vector<BeamItem> beams = beam_search(r.scorer, base, r.trie, opt.beam);
      Vec qf = r.query_fused(*query);
      for (const BeamItem& bm : beams) {
        int node = r.trie.find(bm.sid.codes);
        std::vector<std::int64_t> ids =
            rank_within_code(r.trie.nodes[node].items, cat, opt.weights);
        for (std::int64_t id : ids) {
          if (static_cast<int>(got.size()) >= opt.top_n) break;
          RetrievedItem item;
          item.item_id = id;
          item.sid = bm.sid;
          item.logprob = bm.logprob;
          item.s_conv = s_conv(cat.item(id), opt.weights);
          item.similarity = cosine(qf, r.item_recon[cat.item_index(id)]);
          item.low_confidence = item.similarity < opt.conf_threshold;
          got.push_back(std::move(item));
        }
        if (static_cast<int>(got.size()) >= opt.top_n) break;
      }
    } else {
      got = retrieve(r, *query, &u, opt);
    }
    auto t1 = std::chrono::steady_clock::now();
    total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();

    RankedList l;
    l.query_id = static_cast<std::int64_t>(si);
    l.target_id = s.purchased;
    for (const auto& g : got) l.ranked_ids.push_back(g.item_id);
    lists.push_back(std::move(l));
  }
  return score_lists(lists, ks, total_ms);
}

std::vector<EncodeStudyRow> run_encode_study(const Catalog& cat, const FusionParams& base,
                                             const EncodeBudget& budget, const StageBudgets& gr,
                                             const RetrieveOptions& ropt,
                                             std::size_t eval_stride) {
  Splits splits = make_splits(cat);
  std::vector<int> ks{1, 4, 10};
  std::vector<EncodeStudyRow> rows;
  for (MethodKind kind : {MethodKind::rq_kmeans, MethodKind::rq_vae, MethodKind::opq,
                          MethodKind::fsq, MethodKind::vrq}) {
    MethodSetup m = fit_method(kind, cat, base, budget, splits);
    EncodeStudyRow row;
    row.method = m.name;
    row.ico = ico(m.table);

    std::vector<std::size_t> qas_pairs;
    for (std::size_t i = 0; i < splits.eval_pairs.size(); i += eval_stride)
      qas_pairs.push_back(splits.eval_pairs[i]);
    QasResult q = qas_with(cat, m.fusion, method_recon(m), qas_pairs, ks);
    row.qas_hr4 = q.hr.at(4);
    row.qas_mrr4 = q.mrr.at(4);

    ScorerParams scorer = gr_pretrain_sft(cat, m, gr);
    EvalScores e = eval_pair_retrieval(cat, m, scorer, splits.eval_pairs, ropt, ks, eval_stride);
    row.gr_hr4 = e.hr.at(4);
    row.gr_mrr4 = e.mrr.at(4);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<SweepRow> run_sweep(const Catalog& cat, const FusionParams& base,
                                const std::vector<SweepConfig>& configs,
                                const EncodeBudget& budget, const StageBudgets& gr,
                                const RetrieveOptions& ropt, std::size_t eval_stride) {
  Splits splits = make_splits(cat);
  std::vector<int> ks{4};
  std::vector<SweepRow> rows;
  for (const SweepConfig& c : configs) {
    EncodeBudget b = budget;
    b.shallow = c.shallow;
    b.deep = c.deep;
    MethodSetup m = fit_method(MethodKind::vrq, cat, base, b, splits);
    ScorerParams scorer = gr_pretrain_sft(cat, m, gr);
    EvalScores e = eval_pair_retrieval(cat, m, scorer, splits.eval_pairs, ropt, ks, eval_stride);
    SweepRow row;
    std::ostringstream os;
    for (std::size_t i = 0; i < c.shallow.size(); ++i)
      os << (i ? "," : "") << c.shallow[i];
    os << '|';
    for (std::size_t i = 0; i < c.deep.size(); ++i) os << (i ? "," : "") << c.deep[i];
    row.levels = os.str();
    row.gr_hr4 = e.hr.at(4);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<PruneRow> run_prune_study(const Catalog& cat, const MethodSetup& m,
                                      const StageArtifacts& stages,
                                      const std::vector<int>& subset_sizes, int epochs,
                                      const PruneTrainOptions& popt,
                                      const RetrieveOptions& ropt, int v_max,
                                      const Splits& splits) {
  std::vector<int> ks{4};
  std::size_t scorer_params = 0;
  {
    ScorerParams copy = stages.dpo;
    copy.for_each_span([&](std::span<double> s) { scorer_params += s.size(); });
  }
  std::vector<PruneRow> rows;
  for (int v_sub : subset_sizes) {
    if (v_sub < 1 || v_sub > v_max) fail(errc::invalid_config, "subset size out of range");
    const ScorerParams* eval_params = &stages.dpo;
    ScorerParams student;
    if (v_sub < v_max) {
      CurriculumSchedule sched{v_max, v_sub, epochs};
      student = train_pruned(cat, m.table, stages.users, stages.dpo, sched, popt, nullptr,
                             &stages.qsids);
      eval_params = &student;
    }
    EvalScores e = eval_session_retrieval(cat, m, *eval_params, stages.users, &stages.qsids,
                                          splits.eval_sessions, ropt, ks,
                                          v_sub < v_max ? v_sub : -1);
    PruneRow row;
    row.v_sub = v_sub;
    row.hr4 = e.hr.at(4);
    row.mrr4 = e.mrr.at(4);
    row.mean_ms = e.mean_ms;
    row.working_set_mb =
        (scorer_params * 8.0 + static_cast<double>(v_sub) * cat.cfg.dim * 8.0) / 1.0e6;
    rows.push_back(row);
  }
  return rows;
}

std::string file_hash_hex(const std::filesystem::path& path) {
  std::ostringstream os;
  os << std::hex << fnv1a64_file(path);
  return os.str();
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  json j;
  j["command"] = m.command;
  j["config"] = m.config;
  j["seed"] = m.seed;
  j["input_hashes"] = m.input_hashes;
  j["output_hashes"] = m.output_hashes;
  j["wall_ms"] = m.wall_ms;
  j["tool_version"] = m.tool_version;
  write_lines(path, {j.dump(2)});
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::string> lines;
  auto join = [](const std::vector<std::string>& cells) {
    std::string s;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) s += ',';
      s += cells[i];
    }
    return s;
  };
  lines.push_back(join(header));
  for (const auto& r : rows) {
    if (r.size() != header.size()) fail(errc::shape_mismatch, "csv row width mismatch");
    lines.push_back(join(r));
  }
  write_lines(path, lines);
}

PipelineOutcome run_full_pipeline(const std::filesystem::path& dir, const PipelineConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  PipelineOutcome out;

  Catalog cat = generate_catalog(cfg.catalog);
  save_catalog(cat, dir / "catalog");
  Splits splits = make_splits(cat);

  FusionParams base = make_fusion_params(static_cast<int>(cfg.catalog.dim),
                                         static_cast<int>(cfg.catalog.d_cat),
                                         static_cast<int>(cfg.catalog.dim), 64,
                                         cfg.catalog.seed);
  base = train_fusion(cat, std::move(base), cfg.fusion_epochs, cfg.fusion_lr, cfg.fusion_batch,
                      cfg.catalog.seed, splits.train_pairs);
  save_fusion(dir / "fusion.bin", base);

  MethodSetup m = fit_method(MethodKind::vrq, cat, base, cfg.encode, splits);
  save_fusion(dir / "fusion_vrq.bin", m.fusion);
  save_stack(dir / "stack.bin", m.stack);
  save_sid_table(dir / "sids.tsv", m.table);

  StageArtifacts stages = train_all_stages(cat, m, cfg.stages);
  save_scorer(dir / "scorer_pretrain.bin", stages.pretrain, "pretrain", "");
  std::string h0 = file_hash_hex(dir / "scorer_pretrain.bin");
  save_scorer(dir / "scorer_sft.bin", stages.sft, "sft", h0);
  std::string h1 = file_hash_hex(dir / "scorer_sft.bin");
  save_scorer(dir / "scorer_psft.bin", stages.psft, "psft", h1);
  std::string h2 = file_hash_hex(dir / "scorer_psft.bin");
  save_scorer(dir / "scorer_dpo.bin", stages.dpo, "dpo", h2);

  out.final_eval = eval_session_retrieval(cat, m, stages.dpo, stages.users, &stages.qsids,
                                          splits.eval_sessions, cfg.retrieve, cfg.eval_ks, -1,
                                          cfg.eval_stride);
  json rep;
  json hr = json::object(), mrr = json::object();
  for (const auto& [k, v] : out.final_eval.hr) hr[std::to_string(k)] = v;
  for (const auto& [k, v] : out.final_eval.mrr) mrr[std::to_string(k)] = v;
  rep["hr"] = hr;
  rep["mrr"] = mrr;
  rep["queries"] = out.final_eval.queries;
  write_lines(dir / "retrieval_report.json", {rep.dump(2)});

  for (const char* name :
       {"fusion.bin", "fusion.bin.json", "fusion_vrq.bin", "fusion_vrq.bin.json", "stack.bin",
        "stack.bin.json", "sids.tsv", "sids.tsv.json", "scorer_pretrain.bin",
        "scorer_pretrain.bin.json", "scorer_sft.bin", "scorer_sft.bin.json", "scorer_psft.bin",
        "scorer_psft.bin.json", "scorer_dpo.bin", "scorer_dpo.bin.json",
        "retrieval_report.json"})
    out.artifact_hashes[name] = file_hash_hex(dir / name);
  for (const char* name : {"items.jsonl", "pairs.jsonl", "sessions.jsonl", "histories.jsonl",
                           "embeddings.bin", "category_vecs.bin", "manifest.json"})
    out.artifact_hashes[std::string("catalog/") + name] = file_hash_hex(dir / "catalog" / name);
  return out;
}

}  // namespace visid
