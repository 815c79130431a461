// Synthetic multi-view catalog: items with per-view token matrices, business
// stats, positive pairs, sessions and user histories. Generation is a pure
// function of the config, and save/load round-trips are bit-exact (vector
// payloads live in binary blobs, metadata in JSONL).
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "visid/common.hpp"

namespace visid {

// Fixed-width stack of token vectors for one view. Tokens are stored as
// float32 (matching on-disk layout); pooled is their double-precision mean.
struct TokenMatrix {
  int dim = 0;
  std::vector<float> tokens;  // count() x dim, row-major
  Vec pooled;

  int count() const { return dim == 0 ? 0 : static_cast<int>(tokens.size()) / dim; }
  std::span<const float> token(int i) const {
    return {tokens.data() + static_cast<std::size_t>(i) * dim, static_cast<std::size_t>(dim)};
  }
  void recompute_pooled();
};

struct BizStats {
  std::int64_t clicks_30d = 0;
  double gmv_30d = 0.0;
  std::int64_t orders_30d = 0;
  double price = 0.0;
};

struct Item {
  std::int64_t item_id = 0;
  int category_id = 0;
  std::vector<TokenMatrix> views;
  std::vector<float> title_vec;
  BizStats biz;
};

struct PairSet {
  struct Pair {
    std::int64_t a = 0;
    int view_a = 0;
    std::int64_t b = 0;
    int view_b = 0;
  };
  std::vector<Pair> pairs;
};

struct Session {
  std::int64_t user_id = 0;
  TokenMatrix query;
  int scene_id = 0;
  std::int64_t purchased = 0;
  std::vector<std::int64_t> clicked_not_purchased;
  std::vector<std::int64_t> exposed_not_clicked;
  std::int64_t timestamp = 0;
};

struct UserHistory {
  std::vector<std::int64_t> long_term;   // item ids, capped
  std::vector<std::int64_t> short_term;  // at most 5, oldest first
};

struct CatalogConfig {
  int n_items = 2000;
  int n_views = 4;
  int v_max = 48;
  int dim = 64;
  int d_cat = 32;
  int n_categories = 16;
  int n_users = 250;
  int n_sessions = 2500;
  std::uint64_t seed = 7;
};

struct Catalog {
  CatalogConfig cfg;
  std::vector<Item> items;
  PairSet pairs;
  std::vector<Session> sessions;
  std::map<std::int64_t, UserHistory> histories;
  std::vector<float> category_vecs;  // n_categories x d_cat

  const Item& item(std::int64_t id) const;
  int item_index(std::int64_t id) const;  // -1 when absent
  std::span<const float> category_vec(int c) const {
    return {category_vecs.data() + static_cast<std::size_t>(c) * cfg.d_cat,
            static_cast<std::size_t>(cfg.d_cat)};
  }

 private:
  mutable std::map<std::int64_t, int> index_;
};

Catalog generate_catalog(const CatalogConfig& cfg);

void save_catalog(const Catalog& c, const std::filesystem::path& dir);
Catalog load_catalog(const std::filesystem::path& dir);

bool catalogs_equal(const Catalog& a, const Catalog& b);

// Held-out splits used by every evaluation: every fifth pair/session.
bool is_eval_pair(std::size_t pair_index);
bool is_eval_session(std::size_t session_index);

}  // namespace visid
