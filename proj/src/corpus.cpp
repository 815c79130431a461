#include "visid/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "json.hpp"
#include "visid/serialize.hpp"

namespace visid {

using nlohmann::json;

void TokenMatrix::recompute_pooled() {
  pooled.assign(dim, 0.0);
  int n = count();
  if (n == 0) return;
  for (int t = 0; t < n; ++t) {
    auto row = token(t);
    for (int j = 0; j < dim; ++j) pooled[j] += row[j];
  }
  for (int j = 0; j < dim; ++j) pooled[j] /= n;
}

const Item& Catalog::item(std::int64_t id) const {
  int idx = item_index(id);
  if (idx < 0) fail(errc::invalid_config, "unknown item id " + std::to_string(id));
  return items[idx];
}

int Catalog::item_index(std::int64_t id) const {
  if (index_.empty()) {
    for (std::size_t i = 0; i < items.size(); ++i) index_[items[i].item_id] = static_cast<int>(i);
  }
  auto it = index_.find(id);
  return it == index_.end() ? -1 : it->second;
}

bool is_eval_pair(std::size_t pair_index) { return pair_index % 5 == 4; }
bool is_eval_session(std::size_t session_index) { return session_index % 5 == 4; }

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// One view: center drawn around the prototype, then per-token jitter. Tokens
// are rescaled so their mean is unit norm, which keeps pooled == row mean.
TokenMatrix make_view(Rng& rng, const Vec& prototype, int v_max, int dim) {
  Vec center(dim);
  for (int j = 0; j < dim; ++j) center[j] = prototype[j] + 0.15 * rng.normal();
  std::vector<Vec> toks(v_max, Vec(dim));
  Vec mean(dim, 0.0);
  for (int t = 0; t < v_max; ++t) {
    for (int j = 0; j < dim; ++j) {
      toks[t][j] = center[j] + 0.05 * rng.normal();
      mean[j] += toks[t][j];
    }
  }
  for (int j = 0; j < dim; ++j) mean[j] /= v_max;
  double scale = 1.0 / std::max(norm2(mean), 1e-12);
  TokenMatrix tm;
  tm.dim = dim;
  tm.tokens.resize(static_cast<std::size_t>(v_max) * dim);
  for (int t = 0; t < v_max; ++t)
    for (int j = 0; j < dim; ++j)
      tm.tokens[static_cast<std::size_t>(t) * dim + j] = static_cast<float>(toks[t][j] * scale);
  tm.recompute_pooled();
  return tm;
}

BizStats make_biz(Rng& rng) {
  BizStats b;
  b.clicks_30d = static_cast<std::int64_t>(std::floor(std::exp(3.0 + 1.2 * rng.normal())));
  if (b.clicks_30d < 0) b.clicks_30d = 0;
  double order_rate = sigmoid(-1.5 + 0.7 * rng.normal());
  b.orders_30d = std::min<std::int64_t>(
      b.clicks_30d, static_cast<std::int64_t>(std::floor(b.clicks_30d * order_rate)));
  b.price = std::round(std::exp(2.5 + 0.8 * rng.normal()) * 100.0) / 100.0 + 0.01;
  b.gmv_30d = static_cast<double>(b.orders_30d) * b.price;
  return b;
}

}  // namespace

Catalog generate_catalog(const CatalogConfig& cfg) {
  if (cfg.n_items < 1 || cfg.n_views < 2 || cfg.v_max < 1 || cfg.dim < 1 || cfg.d_cat < 1 ||
      cfg.n_categories < 1 || cfg.n_users < 1 || cfg.n_sessions < 0)
    fail(errc::invalid_config, "catalog config out of range");

  Catalog c;
  c.cfg = cfg;
  Rng rng(cfg.seed);

  c.category_vecs.resize(static_cast<std::size_t>(cfg.n_categories) * cfg.d_cat);
  for (auto& x : c.category_vecs) x = static_cast<float>(rng.normal());

  // Category anchors spread 1.0, item offsets 0.35.
  std::vector<Vec> anchors(cfg.n_categories, Vec(cfg.dim));
  for (auto& a : anchors) rng.fill_normal(a, 1.0);

  std::vector<Vec> prototypes(cfg.n_items, Vec(cfg.dim));
  c.items.resize(cfg.n_items);
  for (int i = 0; i < cfg.n_items; ++i) {
    Item& it = c.items[i];
    it.item_id = i;
    it.category_id = i % cfg.n_categories;
    Vec offset(cfg.dim);
    rng.fill_normal(offset, 0.35);
    for (int j = 0; j < cfg.dim; ++j) prototypes[i][j] = anchors[it.category_id][j] + offset[j];
    it.title_vec.resize(cfg.d_cat);
    auto cv = c.category_vec(it.category_id);
    for (int j = 0; j < cfg.d_cat; ++j)
      it.title_vec[j] = static_cast<float>(cv[j] + 0.35 * rng.normal());
    it.biz = make_biz(rng);
    it.views.reserve(cfg.n_views);
    for (int w = 0; w < cfg.n_views; ++w)
      it.views.push_back(make_view(rng, prototypes[i], cfg.v_max, cfg.dim));
  }

  // Nearest neighbours by prototype distance; ties broken by lower id.
  int want = std::min(cfg.n_items - 1, 8);
  std::vector<std::vector<int>> neighbors(cfg.n_items);
  if (want > 0) {
    std::vector<std::pair<double, int>> dist(cfg.n_items);
    for (int i = 0; i < cfg.n_items; ++i) {
      for (int j = 0; j < cfg.n_items; ++j) dist[j] = {sq_dist(prototypes[i], prototypes[j]), j};
      dist[i].first = std::numeric_limits<double>::infinity();
      std::partial_sort(dist.begin(), dist.begin() + want, dist.end());
      neighbors[i].reserve(want);
      for (int k = 0; k < want; ++k) neighbors[i].push_back(dist[k].second);
    }
  }

  // Positives: every same-item view pair, plus one nearest-prototype
  // cross-item pair anchored at view 0.
  for (int i = 0; i < cfg.n_items; ++i)
    for (int w1 = 0; w1 < cfg.n_views; ++w1)
      for (int w2 = w1 + 1; w2 < cfg.n_views; ++w2)
        c.pairs.pairs.push_back({i, w1, i, w2});
  if (want > 0)
    for (int i = 0; i < cfg.n_items; ++i) c.pairs.pairs.push_back({i, 0, neighbors[i][0], 0});

  c.sessions.reserve(cfg.n_sessions);
  for (int s = 0; s < cfg.n_sessions; ++s) {
    Session ses;
    ses.user_id = rng.uniform_int(cfg.n_users);
    std::int64_t target = rng.uniform_int(cfg.n_items);
    ses.purchased = target;
    ses.scene_id = rng.uniform_int(2);
    ses.query = make_view(rng, prototypes[target], cfg.v_max, cfg.dim);
    const auto& nb = neighbors[target];
    for (std::size_t k = 0; k < nb.size() && k < 3; ++k)
      ses.clicked_not_purchased.push_back(nb[k]);
    for (std::size_t k = 3; k < nb.size() && k < 8; ++k)
      ses.exposed_not_clicked.push_back(nb[k]);
    ses.timestamp = s;
    c.sessions.push_back(std::move(ses));
  }

  for (int u = 0; u < cfg.n_users; ++u) c.histories[u] = UserHistory{};
  for (const Session& ses : c.sessions) {
    UserHistory& h = c.histories[ses.user_id];
    h.short_term.push_back(ses.purchased);
    if (h.short_term.size() > 5) h.short_term.erase(h.short_term.begin());
    h.long_term.push_back(ses.purchased);
    if (!ses.clicked_not_purchased.empty()) h.long_term.push_back(ses.clicked_not_purchased[0]);
    while (h.long_term.size() > 20) h.long_term.erase(h.long_term.begin());
  }

  return c;
}

namespace {

json biz_to_json(const BizStats& b) {
  return json{{"clicks_30d", b.clicks_30d},
              {"gmv_30d", b.gmv_30d},
              {"orders_30d", b.orders_30d},
              {"price", b.price}};
}

BizStats biz_from_json(const json& j) {
  BizStats b;
  b.clicks_30d = j.at("clicks_30d").get<std::int64_t>();
  b.gmv_30d = j.at("gmv_30d").get<double>();
  b.orders_30d = j.at("orders_30d").get<std::int64_t>();
  b.price = j.at("price").get<double>();
  return b;
}

constexpr int kCatalogFormatVersion = 1;

}  // namespace

void save_catalog(const Catalog& c, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const CatalogConfig& g = c.cfg;

  json man{{"format_version", kCatalogFormatVersion},
           {"n_items", g.n_items},
           {"n_views", g.n_views},
           {"v_max", g.v_max},
           {"dim", g.dim},
           {"d_cat", g.d_cat},
           {"n_categories", g.n_categories},
           {"n_users", g.n_users},
           {"n_sessions", g.n_sessions},
           {"seed", g.seed}};
  write_lines(dir / "manifest.json", {man.dump()});

  std::vector<std::string> lines;
  lines.reserve(c.items.size());
  for (const Item& it : c.items) {
    json j{{"item_id", it.item_id},
           {"category_id", it.category_id},
           {"views", static_cast<int>(it.views.size())},
           {"title_vec", it.title_vec},
           {"biz", biz_to_json(it.biz)}};
    lines.push_back(j.dump());
  }
  write_lines(dir / "items.jsonl", lines);

  lines.clear();
  for (const auto& p : c.pairs.pairs) {
    json j{{"a", p.a}, {"va", p.view_a}, {"b", p.b}, {"vb", p.view_b}};
    lines.push_back(j.dump());
  }
  write_lines(dir / "pairs.jsonl", lines);

  lines.clear();
  for (const Session& s : c.sessions) {
    json j{{"user_id", s.user_id},
           {"scene_id", s.scene_id},
           {"purchased", s.purchased},
           {"clicked_not_purchased", s.clicked_not_purchased},
           {"exposed_not_clicked", s.exposed_not_clicked},
           {"timestamp", s.timestamp}};
    lines.push_back(j.dump());
  }
  write_lines(dir / "sessions.jsonl", lines);

  lines.clear();
  for (const auto& [uid, h] : c.histories) {
    json j{{"user_id", uid}, {"long_term", h.long_term}, {"short_term", h.short_term}};
    lines.push_back(j.dump());
  }
  write_lines(dir / "histories.jsonl", lines);

  // Token rows for all item views, then all session queries.
  std::vector<float> emb;
  emb.reserve((static_cast<std::size_t>(g.n_items) * g.n_views + c.sessions.size()) * g.v_max *
              g.dim);
  for (const Item& it : c.items)
    for (const TokenMatrix& v : it.views) emb.insert(emb.end(), v.tokens.begin(), v.tokens.end());
  for (const Session& s : c.sessions)
    emb.insert(emb.end(), s.query.tokens.begin(), s.query.tokens.end());
  write_blob_f32(dir / "embeddings.bin", emb, static_cast<std::uint32_t>(g.dim));

  write_blob_f32(dir / "category_vecs.bin", c.category_vecs, static_cast<std::uint32_t>(g.d_cat));
}

Catalog load_catalog(const std::filesystem::path& dir) {
  auto man_lines = read_lines(dir / "manifest.json");
  if (man_lines.empty()) fail(errc::io_failure, "empty catalog manifest");
  json man = json::parse(man_lines[0]);
  if (man.at("format_version").get<int>() != kCatalogFormatVersion)
    fail(errc::version_mismatch, "unsupported catalog format version");

  Catalog c;
  c.cfg.n_items = man.at("n_items").get<int>();
  c.cfg.n_views = man.at("n_views").get<int>();
  c.cfg.v_max = man.at("v_max").get<int>();
  c.cfg.dim = man.at("dim").get<int>();
  c.cfg.d_cat = man.at("d_cat").get<int>();
  c.cfg.n_categories = man.at("n_categories").get<int>();
  c.cfg.n_users = man.at("n_users").get<int>();
  c.cfg.n_sessions = man.at("n_sessions").get<int>();
  c.cfg.seed = man.at("seed").get<std::uint64_t>();

  std::uint32_t dim = 0;
  std::vector<float> emb = read_blob_f32(dir / "embeddings.bin", &dim);
  if (dim != static_cast<std::uint32_t>(c.cfg.dim))
    fail(errc::shape_mismatch, "embeddings dim mismatch");
  c.category_vecs = read_blob_f32(dir / "category_vecs.bin", &dim);
  if (dim != static_cast<std::uint32_t>(c.cfg.d_cat))
    fail(errc::shape_mismatch, "category_vecs dim mismatch");
  if (c.category_vecs.size() !=
      static_cast<std::size_t>(c.cfg.n_categories) * c.cfg.d_cat)
    fail(errc::shape_mismatch, "category_vecs count mismatch");

  const std::size_t view_floats = static_cast<std::size_t>(c.cfg.v_max) * c.cfg.dim;
  std::size_t cursor = 0;
  auto take_view = [&]() {
    if (cursor + view_floats > emb.size()) fail(errc::shape_mismatch, "embeddings truncated");
    TokenMatrix tm;
    tm.dim = c.cfg.dim;
    tm.tokens.assign(emb.begin() + cursor, emb.begin() + cursor + view_floats);
    cursor += view_floats;
    tm.recompute_pooled();
    return tm;
  };

  for (const auto& line : read_lines(dir / "items.jsonl")) {
    json j = json::parse(line);
    Item it;
    it.item_id = j.at("item_id").get<std::int64_t>();
    it.category_id = j.at("category_id").get<int>();
    it.title_vec = j.at("title_vec").get<std::vector<float>>();
    it.biz = biz_from_json(j.at("biz"));
    int nviews = j.at("views").get<int>();
    it.views.reserve(nviews);
    for (int w = 0; w < nviews; ++w) it.views.push_back(take_view());
    c.items.push_back(std::move(it));
  }

  for (const auto& line : read_lines(dir / "pairs.jsonl")) {
    json j = json::parse(line);
    c.pairs.pairs.push_back({j.at("a").get<std::int64_t>(), j.at("va").get<int>(),
                             j.at("b").get<std::int64_t>(), j.at("vb").get<int>()});
  }

  for (const auto& line : read_lines(dir / "sessions.jsonl")) {
    json j = json::parse(line);
    Session s;
    s.user_id = j.at("user_id").get<std::int64_t>();
    s.scene_id = j.at("scene_id").get<int>();
    s.purchased = j.at("purchased").get<std::int64_t>();
    s.clicked_not_purchased = j.at("clicked_not_purchased").get<std::vector<std::int64_t>>();
    s.exposed_not_clicked = j.at("exposed_not_clicked").get<std::vector<std::int64_t>>();
    s.timestamp = j.at("timestamp").get<std::int64_t>();
    s.query = take_view();
    c.sessions.push_back(std::move(s));
  }

  for (const auto& line : read_lines(dir / "histories.jsonl")) {
    json j = json::parse(line);
    UserHistory h;
    h.long_term = j.at("long_term").get<std::vector<std::int64_t>>();
    h.short_term = j.at("short_term").get<std::vector<std::int64_t>>();
    c.histories[j.at("user_id").get<std::int64_t>()] = std::move(h);
  }

  if (cursor != emb.size()) fail(errc::shape_mismatch, "embeddings row count mismatch");
  return c;
}

bool catalogs_equal(const Catalog& a, const Catalog& b) {
  auto cfg_eq = [](const CatalogConfig& x, const CatalogConfig& y) {
    return x.n_items == y.n_items && x.n_views == y.n_views && x.v_max == y.v_max &&
           x.dim == y.dim && x.d_cat == y.d_cat && x.n_categories == y.n_categories &&
           x.n_users == y.n_users && x.n_sessions == y.n_sessions && x.seed == y.seed;
  };
  auto tm_eq = [](const TokenMatrix& x, const TokenMatrix& y) {
    return x.dim == y.dim && x.tokens == y.tokens && x.pooled == y.pooled;
  };
  if (!cfg_eq(a.cfg, b.cfg)) return false;
  if (a.category_vecs != b.category_vecs) return false;
  if (a.items.size() != b.items.size() || a.pairs.pairs.size() != b.pairs.pairs.size() ||
      a.sessions.size() != b.sessions.size() || a.histories.size() != b.histories.size())
    return false;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    const Item& x = a.items[i];
    const Item& y = b.items[i];
    if (x.item_id != y.item_id || x.category_id != y.category_id ||
        x.title_vec != y.title_vec || x.views.size() != y.views.size())
      return false;
    if (x.biz.clicks_30d != y.biz.clicks_30d || x.biz.gmv_30d != y.biz.gmv_30d ||
        x.biz.orders_30d != y.biz.orders_30d || x.biz.price != y.biz.price)
      return false;
    for (std::size_t w = 0; w < x.views.size(); ++w)
      if (!tm_eq(x.views[w], y.views[w])) return false;
  }
  for (std::size_t i = 0; i < a.pairs.pairs.size(); ++i) {
    const auto& x = a.pairs.pairs[i];
    const auto& y = b.pairs.pairs[i];
    if (x.a != y.a || x.view_a != y.view_a || x.b != y.b || x.view_b != y.view_b) return false;
  }
  for (std::size_t i = 0; i < a.sessions.size(); ++i) {
    const Session& x = a.sessions[i];
    const Session& y = b.sessions[i];
    if (x.user_id != y.user_id || x.scene_id != y.scene_id || x.purchased != y.purchased ||
        x.timestamp != y.timestamp || x.clicked_not_purchased != y.clicked_not_purchased ||
        x.exposed_not_clicked != y.exposed_not_clicked || !tm_eq(x.query, y.query))
      return false;
  }
  auto ia = a.histories.begin();
  auto ib = b.histories.begin();
  for (; ia != a.histories.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.long_term != ib->second.long_term ||
        ia->second.short_term != ib->second.short_term)
      return false;
  }
  return true;
}

}  // namespace visid
