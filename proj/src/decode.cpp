#include "visid/decode.hpp"

#include <algorithm>
#include <cmath>

namespace visid {

int SidTrie::find(std::span<const int> prefix) const {
  int node = 0;
  for (int code : prefix) {
    const auto& ch = nodes[node].children;
    auto it = std::lower_bound(ch.begin(), ch.end(), code,
                               [](const std::pair<int, int>& c, int v) { return c.first < v; });
    if (it == ch.end() || it->first != code) return -1;
    node = it->second;
  }
  return node;
}

bool SidTrie::contains(const SemanticId& sid) const {
  if (static_cast<int>(sid.codes.size()) != depth) return false;
  return find(sid.codes) >= 0;
}

std::size_t SidTrie::terminal_count() const {
  std::size_t n = 0;
  for (const auto& node : nodes)
    if (!node.items.empty()) ++n;
  return n;
}

SidTrie trie_build(const SidTable& table) {
  if (table.canonical.empty()) fail(errc::empty_input, "trie over empty table");
  SidTrie t;
  t.depth = static_cast<int>(table.level_sizes.size());
  t.nodes.emplace_back();
  for (const auto& [item_id, sid] : table.canonical) {
    if (static_cast<int>(sid.codes.size()) != t.depth)
      fail(errc::shape_mismatch, "code sequence length mismatch in trie build");
    int node = 0;
    for (int l = 0; l < t.depth; ++l) {
      int code = sid.codes[l];
      if (code < 0 || code >= table.level_sizes[l])
        fail(errc::invalid_config, "code out of level range in trie build");
      auto& ch = t.nodes[node].children;
      auto it = std::lower_bound(ch.begin(), ch.end(), code,
                                 [](const std::pair<int, int>& c, int v) { return c.first < v; });
      if (it == ch.end() || it->first != code) {
        int next = static_cast<int>(t.nodes.size());
        t.nodes[node].children.insert(it, {code, next});
        t.nodes.emplace_back();
        node = next;
      } else {
        node = it->second;
      }
    }
    t.nodes[node].items.push_back(item_id);
  }
  for (auto& node : t.nodes) std::sort(node.items.begin(), node.items.end());
  return t;
}

std::vector<BeamItem> beam_search_core(const StepScorer& step,
                                       const std::vector<int>& level_sizes, const SidTrie& trie,
                                       int beam) {
  if (beam < 1) fail(errc::invalid_config, "beam must be >= 1");
  if (trie.nodes.empty() || trie.root().children.empty())
    fail(errc::empty_input, "beam search over empty trie");
  int levels = static_cast<int>(level_sizes.size());
  if (trie.depth != levels) fail(errc::shape_mismatch, "trie depth mismatch");

  struct Hyp {
    std::vector<int> prefix;
    int node = 0;
    double logprob = 0.0;
  };
  std::vector<Hyp> beams{{std::vector<int>{}, 0, 0.0}};
  for (int l = 0; l < levels; ++l) {
    std::vector<Hyp> cand;
    for (const Hyp& h : beams) {
      const auto& children = trie.nodes[h.node].children;
      Vec p = step(h.prefix);
      if (static_cast<int>(p.size()) != level_sizes[l])
        fail(errc::shape_mismatch, "step distribution size mismatch");
      double mass = 0.0;
      for (const auto& [code, node] : children) mass += p[code];
      for (const auto& [code, node] : children) {
        // renormalize over the children so scores stay comparable
        double pr = mass > 0.0 ? p[code] / mass : 1.0 / children.size();
        Hyp next;
        next.prefix = h.prefix;
        next.prefix.push_back(code);
        next.node = node;
        next.logprob = h.logprob + std::log(pr);
        cand.push_back(std::move(next));
      }
    }
    std::sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) {
      if (a.logprob != b.logprob) return a.logprob > b.logprob;
      return a.prefix < b.prefix;
    });
    if (static_cast<int>(cand.size()) > beam) cand.resize(beam);
    beams = std::move(cand);
  }
  std::vector<BeamItem> out;
  out.reserve(beams.size());
  for (Hyp& h : beams) out.push_back({SemanticId{std::move(h.prefix)}, h.logprob});
  return out;
}

std::vector<BeamItem> beam_search(const ScorerParams& params, const ScorerInput& base,
                                  const SidTrie& trie, int beam) {
  StepScorer step = [&](std::span<const int> prefix) {
    ScorerInput in = base;
    in.prefix.assign(prefix.begin(), prefix.end());
    return score_next(params, in);
  };
  return beam_search_core(step, params.level_sizes, trie, beam);
}

double s_conv(const Item& item, const ConvWeights& w) {
  return w.w1 * static_cast<double>(item.biz.clicks_30d) + w.w2 * item.biz.gmv_30d +
         w.w3 * static_cast<double>(item.biz.orders_30d);
}

std::vector<std::int64_t> rank_within_code(std::vector<std::int64_t> ids, const Catalog& cat,
                                           const ConvWeights& w) {
  if (ids.empty()) fail(errc::empty_input, "ranking an empty group");
  std::sort(ids.begin(), ids.end(), [&](std::int64_t a, std::int64_t b) {
    double sa = s_conv(cat.item(a), w), sb = s_conv(cat.item(b), w);
    if (sa != sb) return sa > sb;
    return a < b;
  });
  return ids;
}

ConfidenceReport confidence_check(std::span<const double> query_fused,
                                  const std::vector<Vec>& recons, double threshold, int top_k) {
  if (threshold < -1.0 || threshold > 1.0)
    fail(errc::invalid_config, "confidence threshold outside [-1, 1]");
  ConfidenceReport rep;
  rep.flags.reserve(recons.size());
  for (std::size_t i = 0; i < recons.size(); ++i) {
    double sim = cosine(query_fused, recons[i]);
    rep.flags.push_back({sim < threshold, sim});
    if (static_cast<int>(i) < top_k) rep.max_similarity = std::max(rep.max_similarity, sim);
  }
  return rep;
}

Retriever Retriever::make(const Catalog& cat, FusionParams fusion, CodebookStack stack,
                          ScorerParams scorer, SidTable table) {
  Retriever r;
  r.cat = &cat;
  r.fusion = std::move(fusion);
  r.stack = std::move(stack);
  r.scorer = std::move(scorer);
  r.trie = trie_build(table);
  r.table = std::move(table);
  r.item_recon.reserve(cat.items.size());
  bool deep = r.stack.total_levels() > r.stack.shallow_levels;
  for (const Item& it : cat.items) {
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    Vec f = fuse(r.fusion, it.views[0].pooled, y).f;
    r.item_recon.push_back(deep ? vrq_encode(f, it.biz, r.stack).full_recon
                                : rq_encode(f, r.stack).full_recon);
  }
  return r;
}

Retriever Retriever::make_custom(const Catalog& cat, FusionParams fusion, ScorerParams scorer,
                                 SidTable table, const ReconFn& recon,
                                 QueryEncodeFn query_encode) {
  Retriever r;
  r.cat = &cat;
  r.fusion = std::move(fusion);
  r.scorer = std::move(scorer);
  r.trie = trie_build(table);
  r.table = std::move(table);
  r.query_encode = std::move(query_encode);
  r.item_recon.reserve(cat.items.size());
  for (const Item& it : cat.items) {
    auto cv = cat.category_vec(it.category_id);
    Vec y(cv.begin(), cv.end());
    Vec f = fuse(r.fusion, it.views[0].pooled, y).f;
    r.item_recon.push_back(recon(f, it));
  }
  return r;
}

Vec Retriever::query_fused(const TokenMatrix& query) const {
  Vec y(fusion.cat_dim(), 0.0);  // a raw query carries no category signal
  return fuse(fusion, query.pooled, y).f;
}

std::vector<RetrievedItem> retrieve(const Retriever& r, const TokenMatrix& query,
                                    const UserContext* user, const RetrieveOptions& opt) {
  if (opt.top_n < 1) fail(errc::invalid_config, "top_n must be >= 1");
  Vec qf = r.query_fused(query);
  SemanticId qsid;
  ScorerInput base;
  base.query = &query;
  base.user = user;
  if (opt.use_query_codes) {
    if (r.query_encode) {
      qsid = r.query_encode(qf);
    } else if (!r.stack.shallow.empty()) {
      // queries carry no business signal
      qsid = r.stack.total_levels() > r.stack.shallow_levels
                 ? vrq_encode(qf, BizStats{}, r.stack).sid
                 : rq_encode(qf, r.stack).sid;
    }
    if (!qsid.codes.empty()) base.query_sid = &qsid;
  }
  std::vector<BeamItem> beams = beam_search(r.scorer, base, r.trie, opt.beam);
  std::vector<RetrievedItem> out;
  for (const BeamItem& b : beams) {
    int node = r.trie.find(b.sid.codes);
    if (node < 0) fail(errc::invalid_config, "emitted code sequence not in trie");
    std::vector<std::int64_t> ids =
        rank_within_code(r.trie.nodes[node].items, *r.cat, opt.weights);
    for (std::int64_t id : ids) {
      if (static_cast<int>(out.size()) >= opt.top_n) return out;
      RetrievedItem item;
      item.item_id = id;
      item.sid = b.sid;
      item.logprob = b.logprob;
      item.s_conv = s_conv(r.cat->item(id), opt.weights);
      item.similarity = cosine(qf, r.item_recon[r.cat->item_index(id)]);
      item.low_confidence = item.similarity < opt.conf_threshold;
      out.push_back(std::move(item));
    }
  }
  return out;
}

}  // namespace visid
