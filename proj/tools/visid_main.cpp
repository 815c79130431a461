// Command-line frontend over the library: corpus generation, fusion and
// quantizer training, catalog encoding, scorer stages, retrieval and the
// study reports. Every command writes its artifacts plus a run manifest.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "visid/pipeline.hpp"
#include "visid/serialize.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace visid;

namespace {

constexpr const char* kToolVersion = "0.1.0";

int exit_code_for(errc kind) {
  switch (kind) {
    case errc::invalid_config:
    case errc::infeasible_config:
      return 2;
    case errc::missing_file:
    case errc::io_failure:
      return 3;
    case errc::training_diverged:
      return 4;
    default:
      return 5;  // checksum, version, shape, unfitted, empty input
  }
}

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// One subcommand's flags plus the config-file fallback. Flags win: a config
// key only lands on options the command line left untouched.
struct Binder {
  CLI::App* cmd = nullptr;
  std::string config_path;
  std::map<std::string, CLI::Option*> opts;
  std::map<std::string, std::function<void(const std::string&)>> setters;
  std::map<std::string, std::function<std::string()>> getters;

  explicit Binder(CLI::App* c) : cmd(c) {
    cmd->add_option("--config", config_path, "flat key=value config file; flags win");
  }

  static long long to_int(const std::string& key, const std::string& raw) {
    try {
      std::size_t used = 0;
      long long v = std::stoll(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return v;
    } catch (const std::exception&) {
      fail(errc::invalid_config, "config key '" + key + "' wants an integer, got '" + raw + "'");
    }
  }

  static double to_double(const std::string& key, const std::string& raw) {
    try {
      std::size_t used = 0;
      double v = std::stod(raw, &used);
      if (used != raw.size()) throw std::invalid_argument(raw);
      return v;
    } catch (const std::exception&) {
      fail(errc::invalid_config, "config key '" + key + "' wants a number, got '" + raw + "'");
    }
  }

  CLI::Option* flag_int(const std::string& name, int* v, const std::string& help) {
    CLI::Option* o = cmd->add_option(name, *v, help);
    reg(name, o, [v](const std::string& key, const std::string& raw) {
      *v = static_cast<int>(to_int(key, raw));
    }, [v] { return std::to_string(*v); });
    return o;
  }

  CLI::Option* flag_u64(const std::string& name, std::uint64_t* v, const std::string& help) {
    CLI::Option* o = cmd->add_option(name, *v, help);
    reg(name, o, [v](const std::string& key, const std::string& raw) {
      *v = static_cast<std::uint64_t>(to_int(key, raw));
    }, [v] { return std::to_string(*v); });
    return o;
  }

  CLI::Option* flag_double(const std::string& name, double* v, const std::string& help) {
    CLI::Option* o = cmd->add_option(name, *v, help);
    reg(name, o, [v](const std::string& key, const std::string& raw) {
      *v = to_double(key, raw);
    }, [v] { return fmt_double(*v); });
    return o;
  }

  CLI::Option* flag_str(const std::string& name, std::string* v, const std::string& help) {
    CLI::Option* o = cmd->add_option(name, *v, help);
    reg(name, o, [v](const std::string&, const std::string& raw) { *v = raw; },
        [v] { return *v; });
    return o;
  }

  // config-file-only knob, no command-line spelling
  void key_int(const std::string& key, int* v) {
    reg("--" + key, nullptr, [v](const std::string& k, const std::string& raw) {
      *v = static_cast<int>(to_int(k, raw));
    }, [v] { return std::to_string(*v); });
  }
  void key_double(const std::string& key, double* v) {
    reg("--" + key, nullptr, [v](const std::string& k, const std::string& raw) {
      *v = to_double(k, raw);
    }, [v] { return fmt_double(*v); });
  }
  void key_str(const std::string& key, std::string* v) {
    reg("--" + key, nullptr, [v](const std::string&, const std::string& raw) { *v = raw; },
        [v] { return *v; });
  }

  void apply_config_and_snapshot(std::map<std::string, std::string>& snapshot) {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) fail(errc::missing_file, "cannot open config file " + config_path);
      std::string line;
      int lineno = 0;
      while (std::getline(in, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#') continue;
        auto eq = t.find('=');
        if (eq == std::string::npos)
          fail(errc::invalid_config,
               config_path + ":" + std::to_string(lineno) + ": expected key=value");
        std::string key = trim(t.substr(0, eq));
        std::string val = trim(t.substr(eq + 1));
        auto it = setters.find(key);
        if (it == setters.end())
          fail(errc::invalid_config, "unknown config key '" + key + "'");
        CLI::Option* o = opts[key];
        if (o == nullptr || o->count() == 0) it->second(val);
      }
    }
    for (const auto& [key, get] : getters) snapshot[key] = get();
  }

 private:
  static std::string trim(const std::string& s) {
    std::size_t b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    std::size_t e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  }

  void reg(const std::string& flag, CLI::Option* o,
           std::function<void(const std::string&, const std::string&)> set,
           std::function<std::string()> get) {
    std::string key = flag.substr(2);  // strip leading dashes
    opts[key] = o;
    setters[key] = [key, set](const std::string& raw) { set(key, raw); };
    getters[key] = std::move(get);
  }
};

std::vector<int> parse_int_list(const std::string& key, const std::string& raw) {
  std::vector<int> out;
  std::stringstream ss(raw);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoi(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      fail(errc::invalid_config, "'" + key + "' wants comma-separated integers, got '" + raw + "'");
    }
  }
  if (out.empty()) fail(errc::invalid_config, "'" + key + "' is empty");
  return out;
}

ConvWeights parse_conv_weights(const std::string& raw) {
  std::vector<double> w;
  std::stringstream ss(raw);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t used = 0;
      w.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      fail(errc::invalid_config, "--conv-weights wants three numbers, got '" + raw + "'");
    }
  }
  if (w.size() != 3) fail(errc::invalid_config, "--conv-weights wants exactly three numbers");
  return ConvWeights{w[0], w[1], w[2]};
}

const std::vector<std::string> kCatalogFiles = {
    "manifest.json",  "items.jsonl",     "pairs.jsonl",       "sessions.jsonl",
    "histories.jsonl", "embeddings.bin", "category_vecs.bin"};

void hash_catalog(const fs::path& dir, std::map<std::string, std::string>& into) {
  for (const auto& f : kCatalogFiles) into["catalog/" + f] = file_hash_hex(dir / f);
}

void hash_with_sidecar(const fs::path& p, std::map<std::string, std::string>& into) {
  into[p.filename().string()] = file_hash_hex(p);
  fs::path side = p;
  side += ".json";
  if (fs::exists(side)) into[side.filename().string()] = file_hash_hex(side);
}

void require_file(const fs::path& p) {
  if (!fs::exists(p)) fail(errc::missing_file, "missing input " + p.string());
}

void require_catalog(const fs::path& dir) {
  for (const auto& f : kCatalogFiles) require_file(dir / f);
}

// report path pair: whichever extension the user gave, its sibling gets the other
std::pair<fs::path, fs::path> report_paths(const fs::path& report) {
  fs::path j = report, c = report;
  if (report.extension() == ".csv") {
    j.replace_extension(".json");
  } else {
    c.replace_extension(".csv");
  }
  return {j, c};
}

struct ManifestClock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  }
};

void finish_manifest(RunManifest& man, const fs::path& path, const ManifestClock& clock) {
  man.wall_ms = clock.ms();
  man.tool_version = kToolVersion;
  write_manifest(path, man);
}

// shared handles on upstream artifacts for the serving-side commands
struct ServingArtifacts {
  Catalog cat;
  MethodSetup m;
  ScorerCheckpoint scorer;
  std::map<std::int64_t, UserContext> users;
  std::vector<SemanticId> qsids;
};

ServingArtifacts load_serving(const std::string& catalog, const std::string& fusion,
                              const std::string& stack, const std::string& sids,
                              const std::string& scorer, RunManifest& man) {
  require_catalog(catalog);
  require_file(fusion);
  require_file(stack);
  require_file(sids);
  require_file(scorer);
  ServingArtifacts s;
  s.cat = load_catalog(catalog);
  s.m.kind = MethodKind::vrq;
  s.m.name = method_name(MethodKind::vrq);
  s.m.fusion = load_fusion(fusion);
  s.m.stack = load_stack(stack);
  s.m.table = load_sid_table(sids);
  s.scorer = load_scorer(scorer);
  s.users = build_user_contexts(s.cat, s.m.fusion, s.m.stack, s.m.table);
  s.qsids = session_query_codes(s.cat, s.m);
  hash_catalog(catalog, man.input_hashes);
  for (const auto& p : {fusion, stack, sids, scorer})
    hash_with_sidecar(p, man.input_hashes);
  return s;
}

json scores_json(const EvalScores& e, const std::vector<int>& hr_ks,
                 const std::vector<int>& mrr_ks) {
  json hr = json::object(), mrr = json::object();
  for (int k : hr_ks) hr[std::to_string(k)] = e.hr.at(k);
  for (int k : mrr_ks) mrr[std::to_string(k)] = e.mrr.at(k);
  return json{{"hr", hr}, {"mrr", mrr}, {"queries", e.queries}};
}

// ---- commands ----------------------------------------------------------

struct CmdDatagen {
  std::uint64_t seed = 7;
  std::string out = "catalog";
  int items = 2000, views = 4, v_max = 48, dim = 64, d_cat = 32;
  int categories = 16, users = 250, sessions = 2500;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("datagen", "generate the synthetic multi-view catalog");
    b = std::make_shared<Binder>(c);
    b->flag_u64("--seed", &seed, "master RNG seed");
    b->flag_str("--out", &out, "output catalog directory");
    b->key_int("items", &items);
    b->key_int("views", &views);
    b->key_int("v_max", &v_max);
    b->key_int("dim", &dim);
    b->key_int("d_cat", &d_cat);
    b->key_int("categories", &categories);
    b->key_int("users", &users);
    b->key_int("sessions", &sessions);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "datagen";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    CatalogConfig cfg;
    cfg.n_items = items;
    cfg.n_views = views;
    cfg.v_max = v_max;
    cfg.dim = dim;
    cfg.d_cat = d_cat;
    cfg.n_categories = categories;
    cfg.n_users = users;
    cfg.n_sessions = sessions;
    cfg.seed = seed;
    Catalog cat = generate_catalog(cfg);
    fs::create_directories(out);
    save_catalog(cat, out);
    hash_catalog(out, man.output_hashes);
    finish_manifest(man, fs::path(out) / "run_manifest.json", clock);
    std::cout << "wrote catalog: " << cat.items.size() << " items, " << cat.pairs.pairs.size()
              << " pairs, " << cat.sessions.size() << " sessions -> " << out << "\n";
    return 0;
  }
};

struct CmdTrainFusion {
  std::string catalog = "catalog", out = "fusion.bin";
  std::uint64_t seed = 7;
  int epochs = 3, batch = 32, hidden = 64;
  double lr = 0.05;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("train-fusion", "train the visual-category fusion encoder");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_u64("--seed", &seed, "training seed");
    b->flag_int("--epochs", &epochs, "training epochs");
    b->flag_double("--lr", &lr, "learning rate");
    b->flag_str("--out", &out, "output parameter file");
    b->key_int("batch", &batch);
    b->key_int("hidden", &hidden);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "train-fusion";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    require_catalog(catalog);
    hash_catalog(catalog, man.input_hashes);
    Catalog cat = load_catalog(catalog);
    Splits splits = make_splits(cat);
    FusionParams p = make_fusion_params(cat.cfg.dim, cat.cfg.d_cat, cat.cfg.dim, hidden, seed);
    TrainTrace trace;
    p = train_fusion(cat, std::move(p), epochs, lr, batch, seed, splits.train_pairs, &trace);
    save_fusion(out, p);
    hash_with_sidecar(out, man.output_hashes);
    finish_manifest(man, out + ".manifest.json", clock);
    std::cout << "fusion trained: epoch losses";
    for (double v : trace.epoch_loss) std::cout << ' ' << v;
    std::cout << " -> " << out << "\n";
    return 0;
  }
};

struct CmdFitVrq {
  std::string catalog = "catalog", fusion = "fusion.bin", out = "vrq";
  std::string levels = "8,8,8|4,4";
  std::uint64_t seed = 7;
  int epochs = 3, batch = 64, opq_iters = 8;
  double lr = 0.02;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand(
        "fit-vrq", "train the residual codebooks jointly with fusion, then the deep quantizer");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--fusion", &fusion, "base fusion parameters");
    b->flag_str("--levels", &levels, "codebook sizes, shallow|deep");
    b->flag_u64("--seed", &seed, "training seed");
    b->flag_int("--epochs", &epochs, "codebook training epochs");
    b->flag_double("--lr", &lr, "encoder learning rate");
    b->flag_str("--out", &out, "output directory for stack.bin and fusion.bin");
    b->key_int("batch", &batch);
    b->key_int("opq_iters", &opq_iters);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "fit-vrq";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    require_catalog(catalog);
    require_file(fusion);
    hash_catalog(catalog, man.input_hashes);
    hash_with_sidecar(fusion, man.input_hashes);

    Catalog cat = load_catalog(catalog);
    Splits splits = make_splits(cat);
    FusionParams base = load_fusion(fusion);
    EncodeBudget budget;
    std::tie(budget.shallow, budget.deep) = parse_levels(levels);
    budget.vrq_epochs = epochs;
    budget.vrq_lr = lr;
    budget.vrq_batch = batch;
    budget.opq_iters = opq_iters;
    budget.seed = seed;
    MethodSetup m = fit_method(MethodKind::vrq, cat, base, budget, splits);

    fs::create_directories(out);
    fs::path stack_path = fs::path(out) / "stack.bin";
    fs::path fusion_path = fs::path(out) / "fusion.bin";
    save_stack(stack_path, m.stack);
    save_fusion(fusion_path, m.fusion);
    hash_with_sidecar(stack_path, man.output_hashes);
    hash_with_sidecar(fusion_path, man.output_hashes);
    finish_manifest(man, fs::path(out) / "run_manifest.json", clock);
    std::cout << "vrq fitted: levels " << levels << " -> " << out << "\n";
    return 0;
  }
};

struct CmdEncode {
  std::string catalog = "catalog", fusion = "vrq/fusion.bin", stack = "vrq/stack.bin";
  std::string out = "sids.tsv";
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("encode", "assign hierarchical codes to every item view");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--fusion", &fusion, "fusion parameters (post quantizer training)");
    b->flag_str("--stack", &stack, "fitted codebook stack");
    b->flag_str("--out", &out, "output code table");
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "encode";
    b->apply_config_and_snapshot(man.config);
    require_catalog(catalog);
    require_file(fusion);
    require_file(stack);
    hash_catalog(catalog, man.input_hashes);
    hash_with_sidecar(fusion, man.input_hashes);
    hash_with_sidecar(stack, man.input_hashes);

    Catalog cat = load_catalog(catalog);
    FusionParams f = load_fusion(fusion);
    CodebookStack s = load_stack(stack);
    SidTable t = vrq_encode_catalog(cat, f, s);
    save_sid_table(out, t);
    hash_with_sidecar(out, man.output_hashes);
    finish_manifest(man, out + ".manifest.json", clock);
    std::cout << "encoded " << t.rows.size() << " rows, ICO " << ico(t) << " -> " << out << "\n";
    return 0;
  }
};

struct CmdEvalCodes {
  std::string catalog = "catalog", fusion = "fusion.bin", report = "codes_report.json";
  std::string levels = "8,8,8|4,4", fsq_levels = "7,7,7,5,5";
  std::uint64_t seed = 7;
  int beam = 10, topn = 10;
  int vrq_epochs = 3, vrq_batch = 64, opq_iters = 8, rqvae_epochs = 3;
  double vrq_lr = 0.02;
  int gr_epochs = 5, gr_batch = 32, eval_stride = 1;
  double gr_lr = 0.05;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand(
        "eval-codes", "compare encoding methods on occupancy, quantized ANN and retrieval");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--fusion", &fusion, "base fusion parameters");
    b->flag_str("--levels", &levels, "codebook sizes, shallow|deep");
    b->flag_u64("--seed", &seed, "study seed");
    b->flag_int("--beam", &beam, "beam width");
    b->flag_int("--topn", &topn, "retrieved list length");
    b->flag_str("--report", &report, "report path (json + csv sibling)");
    b->key_str("fsq_levels", &fsq_levels);
    b->key_int("vrq_epochs", &vrq_epochs);
    b->key_double("vrq_lr", &vrq_lr);
    b->key_int("vrq_batch", &vrq_batch);
    b->key_int("rqvae_epochs", &rqvae_epochs);
    b->key_int("opq_iters", &opq_iters);
    b->key_int("gr_epochs", &gr_epochs);
    b->key_double("gr_lr", &gr_lr);
    b->key_int("gr_batch", &gr_batch);
    b->key_int("eval_stride", &eval_stride);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "eval-codes";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    require_catalog(catalog);
    require_file(fusion);
    hash_catalog(catalog, man.input_hashes);
    hash_with_sidecar(fusion, man.input_hashes);
    if (eval_stride < 1) fail(errc::invalid_config, "eval_stride must be >= 1");

    Catalog cat = load_catalog(catalog);
    FusionParams base = load_fusion(fusion);
    EncodeBudget budget;
    std::tie(budget.shallow, budget.deep) = parse_levels(levels);
    budget.vrq_epochs = vrq_epochs;
    budget.vrq_lr = vrq_lr;
    budget.vrq_batch = vrq_batch;
    budget.rqvae_epochs = rqvae_epochs;
    budget.opq_iters = opq_iters;
    budget.fsq_levels = parse_int_list("fsq_levels", fsq_levels);
    budget.seed = seed;

    StageBudgets gr;
    gr.pretrain = {gr_epochs, gr_lr, gr_batch, seed, 0.1};
    gr.sft = gr.pretrain;
    RetrieveOptions ropt;
    ropt.beam = beam;
    ropt.top_n = topn;

    std::vector<EncodeStudyRow> rows =
        run_encode_study(cat, base, budget, gr, ropt, static_cast<std::size_t>(eval_stride));

    auto [jpath, cpath] = report_paths(report);
    json jrows = json::array();
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : rows) {
      jrows.push_back({{"method", r.method},
                       {"ico", r.ico},
                       {"qas_hr4", r.qas_hr4},
                       {"qas_mrr4", r.qas_mrr4},
                       {"gr_hr4", r.gr_hr4},
                       {"gr_mrr4", r.gr_mrr4}});
      csv.push_back({r.method, fmt_double(r.ico), fmt_double(r.qas_hr4), fmt_double(r.qas_mrr4),
                     fmt_double(r.gr_hr4), fmt_double(r.gr_mrr4)});
    }
    write_lines(jpath, {json{{"rows", jrows}}.dump(2)});
    write_csv(cpath, {"method", "ico", "qas_hr4", "qas_mrr4", "gr_hr4", "gr_mrr4"}, csv);
    man.output_hashes[jpath.filename().string()] = file_hash_hex(jpath);
    man.output_hashes[cpath.filename().string()] = file_hash_hex(cpath);
    finish_manifest(man, jpath.string() + ".manifest.json", clock);
    for (const auto& r : rows)
      std::cout << r.method << ": ico " << r.ico << ", qas hr@4 " << r.qas_hr4 << ", gr hr@4 "
                << r.gr_hr4 << "\n";
    return 0;
  }
};

struct CmdTrainGr {
  std::string catalog = "catalog", sids = "sids.tsv", stage;
  std::string fusion = "vrq/fusion.bin", stack = "vrq/stack.bin";
  std::string init, out;
  std::uint64_t seed = 7;
  int epochs = 5, batch = 32, d_s = 64, h_s = 128;
  double lr = 0.05, dpo_beta = 0.1;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("train-gr", "train one stage of the generative scorer");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--sids", &sids, "item code table");
    b->flag_str("--stage", &stage, "pretrain, sft, psft or dpo");
    b->flag_str("--fusion", &fusion, "fusion parameters (user context stages)");
    b->flag_str("--stack", &stack, "codebook stack (user context stages)");
    b->flag_str("--init", &init, "starting checkpoint; defaults to the prior stage's file");
    b->flag_u64("--seed", &seed, "training seed");
    b->flag_int("--epochs", &epochs, "training epochs");
    b->flag_double("--lr", &lr, "learning rate");
    b->flag_double("--dpo-beta", &dpo_beta, "preference sharpness (dpo stage)");
    b->flag_str("--out", &out, "output checkpoint; defaults to scorer_<stage>.bin");
    b->key_int("batch", &batch);
    b->key_int("d_s", &d_s);
    b->key_int("h_s", &h_s);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "train-gr";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    if (stage != "pretrain" && stage != "sft" && stage != "psft" && stage != "dpo")
      fail(errc::invalid_config, "--stage must be one of pretrain, sft, psft, dpo");
    if (out.empty()) out = "scorer_" + stage + ".bin";
    if (init.empty() && stage != "pretrain") {
      if (stage == "sft") init = "scorer_pretrain.bin";
      if (stage == "psft") init = "scorer_sft.bin";
      if (stage == "dpo") init = "scorer_psft.bin";
    }
    require_catalog(catalog);
    require_file(sids);
    hash_catalog(catalog, man.input_hashes);
    hash_with_sidecar(sids, man.input_hashes);

    Catalog cat = load_catalog(catalog);
    SidTable table = load_sid_table(sids);
    GrTrainOptions opt{epochs, lr, batch, seed, dpo_beta};
    GrTrace trace;

    ScorerParams params;
    std::string parent;
    if (stage == "pretrain") {
      params = make_scorer(table.level_sizes, cat.cfg.dim, cat.cfg.n_categories, d_s, h_s, seed);
    } else {
      require_file(init);
      hash_with_sidecar(init, man.input_hashes);
      parent = file_hash_hex(init);
      params = load_scorer(init).params;
    }

    if (stage == "pretrain") {
      params = train_pretrain(cat, table, std::move(params), opt, &trace);
    } else if (stage == "sft") {
      params = train_sft(cat, table, std::move(params), opt, &trace);
    } else {
      require_file(fusion);
      require_file(stack);
      hash_with_sidecar(fusion, man.input_hashes);
      hash_with_sidecar(stack, man.input_hashes);
      MethodSetup m;
      m.kind = MethodKind::vrq;
      m.fusion = load_fusion(fusion);
      m.stack = load_stack(stack);
      m.table = table;
      auto users = build_user_contexts(cat, m.fusion, m.stack, table);
      auto qsids = session_query_codes(cat, m);
      if (stage == "psft")
        params = train_personalized_sft(cat, table, users, std::move(params), opt, &trace, &qsids);
      else
        params = train_dpo(cat, table, users, std::move(params), opt, &trace, &qsids);
    }

    save_scorer(out, params, stage, parent);
    hash_with_sidecar(out, man.output_hashes);
    finish_manifest(man, out + ".manifest.json", clock);
    std::cout << "stage " << stage << " done: epoch losses";
    for (double v : trace.epoch_loss) std::cout << ' ' << v;
    std::cout << " -> " << out << "\n";
    return 0;
  }
};

struct CmdDecode {
  std::string catalog = "catalog", sids = "sids.tsv", scorer = "scorer_dpo.bin";
  std::string fusion = "vrq/fusion.bin", stack = "vrq/stack.bin", out = "retrieved.jsonl";
  std::string conv_weights = "1.0,0.001,5.0", split = "eval";
  int beam = 10, topn = 10, max_queries = 0;
  double conf_threshold = -1.0;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("decode", "retrieve ranked items for session queries");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--sids", &sids, "item code table");
    b->flag_str("--scorer", &scorer, "scorer checkpoint");
    b->flag_str("--fusion", &fusion, "fusion parameters");
    b->flag_str("--stack", &stack, "codebook stack");
    b->flag_int("--beam", &beam, "beam width");
    b->flag_int("--topn", &topn, "retrieved list length");
    b->flag_str("--conv-weights", &conv_weights, "conversion score weights w1,w2,w3");
    b->flag_str("--out", &out, "output jsonl");
    b->key_str("split", &split);
    b->key_int("max_queries", &max_queries);
    b->key_double("conf_threshold", &conf_threshold);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "decode";
    b->apply_config_and_snapshot(man.config);
    if (split != "eval" && split != "train" && split != "all")
      fail(errc::invalid_config, "split must be eval, train or all");
    ServingArtifacts s = load_serving(catalog, fusion, stack, sids, scorer, man);

    RetrieveOptions opt;
    opt.beam = beam;
    opt.top_n = topn;
    opt.weights = parse_conv_weights(conv_weights);
    opt.conf_threshold = conf_threshold;

    Retriever r = Retriever::make_custom(s.cat, s.m.fusion, s.scorer.params, s.m.table,
                                         method_recon(s.m), method_query_encode(s.m));
    std::vector<std::string> lines;
    int emitted = 0;
    for (std::size_t i = 0; i < s.cat.sessions.size(); ++i) {
      bool eval = is_eval_session(i);
      if (split == "eval" && !eval) continue;
      if (split == "train" && eval) continue;
      if (max_queries > 0 && emitted >= max_queries) break;
      const Session& sess = s.cat.sessions[i];
      auto uit = s.users.find(sess.user_id);
      if (uit == s.users.end()) fail(errc::missing_file, "session user has no context");
      UserContext u = uit->second;
      u.scene_id = sess.scene_id;
      std::vector<RetrievedItem> got = retrieve(r, sess.query, &u, opt);
      int rank = 1;
      for (const auto& g : got) {
        json j{{"query_id", i},         {"rank", rank++},
               {"item_id", g.item_id},  {"sid", g.sid.str()},
               {"logprob", g.logprob},  {"s_conv", g.s_conv},
               {"low_confidence", g.low_confidence}};
        lines.push_back(j.dump());
      }
      ++emitted;
    }
    write_lines(out, lines);
    man.output_hashes[fs::path(out).filename().string()] = file_hash_hex(out);
    finish_manifest(man, out + ".manifest.json", clock);
    std::cout << "decoded " << emitted << " queries -> " << out << "\n";
    return 0;
  }
};

struct CmdEvalRetrieval {
  std::string catalog = "catalog", sids = "sids.tsv", scorer = "scorer_dpo.bin";
  std::string fusion = "vrq/fusion.bin", stack = "vrq/stack.bin";
  std::string conv_weights = "1.0,0.001,5.0", report = "retrieval_report.json";
  int beam = 10, topn = 10, eval_stride = 1;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("eval-retrieval",
                                     "hit rate and reciprocal rank on held-out sessions");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--sids", &sids, "item code table");
    b->flag_str("--scorer", &scorer, "scorer checkpoint");
    b->flag_str("--fusion", &fusion, "fusion parameters");
    b->flag_str("--stack", &stack, "codebook stack");
    b->flag_int("--beam", &beam, "beam width");
    b->flag_int("--topn", &topn, "retrieved list length");
    b->flag_str("--conv-weights", &conv_weights, "conversion score weights w1,w2,w3");
    b->flag_str("--report", &report, "report path (json + csv sibling)");
    b->key_int("eval_stride", &eval_stride);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "eval-retrieval";
    b->apply_config_and_snapshot(man.config);
    if (eval_stride < 1) fail(errc::invalid_config, "eval_stride must be >= 1");
    ServingArtifacts s = load_serving(catalog, fusion, stack, sids, scorer, man);
    Splits splits = make_splits(s.cat);

    RetrieveOptions opt;
    opt.beam = beam;
    opt.top_n = topn;
    opt.weights = parse_conv_weights(conv_weights);

    EvalScores e = eval_session_retrieval(s.cat, s.m, s.scorer.params, s.users, &s.qsids,
                                          splits.eval_sessions, opt, {1, 4, 10}, -1,
                                          static_cast<std::size_t>(eval_stride));

    auto [jpath, cpath] = report_paths(report);
    json j = scores_json(e, {1, 4, 10}, {4, 10});
    j["stage"] = s.scorer.stage;
    write_lines(jpath, {j.dump(2)});
    write_csv(cpath, {"hr_at_1", "hr_at_4", "hr_at_10", "mrr_at_4", "mrr_at_10", "queries"},
              {{fmt_double(e.hr.at(1)), fmt_double(e.hr.at(4)), fmt_double(e.hr.at(10)),
                fmt_double(e.mrr.at(4)), fmt_double(e.mrr.at(10)), std::to_string(e.queries)}});
    man.output_hashes[jpath.filename().string()] = file_hash_hex(jpath);
    man.output_hashes[cpath.filename().string()] = file_hash_hex(cpath);
    finish_manifest(man, jpath.string() + ".manifest.json", clock);
    std::cout << "hr@1 " << e.hr.at(1) << ", hr@4 " << e.hr.at(4) << ", hr@10 " << e.hr.at(10)
              << ", mrr@10 " << e.mrr.at(10) << " over " << e.queries << " queries\n";
    return 0;
  }
};

struct CmdPruneStudy {
  std::string catalog = "catalog", sids = "sids.tsv", scorer = "scorer_dpo.bin";
  std::string fusion = "vrq/fusion.bin", stack = "vrq/stack.bin";
  std::string subset_sizes = "48,32,16,12", conv_weights = "1.0,0.001,5.0";
  std::string report = "prune_report.csv";
  std::uint64_t seed = 7;
  int epochs = 4, batch = 32, beam = 10, topn = 10;
  double lr = 0.05;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("prune-study",
                                     "accuracy and latency across visual token budgets");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--sids", &sids, "item code table");
    b->flag_str("--scorer", &scorer, "reference scorer checkpoint");
    b->flag_str("--fusion", &fusion, "fusion parameters");
    b->flag_str("--stack", &stack, "codebook stack");
    b->flag_str("--subset-sizes", &subset_sizes, "token budgets to study");
    b->flag_int("--epochs", &epochs, "distillation epochs per budget");
    b->flag_double("--lr", &lr, "distillation learning rate");
    b->flag_u64("--seed", &seed, "training seed");
    b->flag_int("--beam", &beam, "beam width");
    b->flag_int("--topn", &topn, "retrieved list length");
    b->flag_str("--conv-weights", &conv_weights, "conversion score weights w1,w2,w3");
    b->flag_str("--report", &report, "report path (csv + json sibling)");
    b->key_int("batch", &batch);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "prune-study";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    ServingArtifacts s = load_serving(catalog, fusion, stack, sids, scorer, man);
    Splits splits = make_splits(s.cat);

    StageArtifacts stages;
    stages.dpo = s.scorer.params;
    stages.users = s.users;
    stages.qsids = s.qsids;

    PruneTrainOptions popt;
    popt.lr = lr;
    popt.batch_size = batch;
    popt.seed = seed;
    RetrieveOptions ropt;
    ropt.beam = beam;
    ropt.top_n = topn;
    ropt.weights = parse_conv_weights(conv_weights);

    std::vector<PruneRow> rows =
        run_prune_study(s.cat, s.m, stages, parse_int_list("--subset-sizes", subset_sizes),
                        epochs, popt, ropt, s.cat.cfg.v_max, splits);

    auto [jpath, cpath] = report_paths(report);
    json jrows = json::array();
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : rows) {
      jrows.push_back({{"v_sub", r.v_sub},
                       {"hr4", r.hr4},
                       {"mrr4", r.mrr4},
                       {"mean_decode_ms", r.mean_ms},
                       {"working_set_mb", r.working_set_mb}});
      csv.push_back({std::to_string(r.v_sub), fmt_double(r.hr4), fmt_double(r.mrr4),
                     fmt_double(r.mean_ms), fmt_double(r.working_set_mb)});
    }
    write_lines(jpath, {json{{"rows", jrows}}.dump(2)});
    write_csv(cpath, {"v_sub", "hr_at_4", "mrr_at_4", "mean_decode_ms", "working_set_mb"}, csv);
    man.output_hashes[jpath.filename().string()] = file_hash_hex(jpath);
    man.output_hashes[cpath.filename().string()] = file_hash_hex(cpath);
    finish_manifest(man, cpath.string() + ".manifest.json", clock);
    for (const auto& r : rows)
      std::cout << "v_sub " << r.v_sub << ": hr@4 " << r.hr4 << ", mean " << r.mean_ms
                << " ms\n";
    return 0;
  }
};

struct CmdSweep {
  std::string catalog = "catalog", fusion = "fusion.bin", report = "sweep_report.csv";
  std::string configs = "8|4,4;8,8|4,4;8,8,8|4,4;4,8,8|4,4;16,8,8|4,4";
  std::uint64_t seed = 7;
  int beam = 10, topn = 10;
  int vrq_epochs = 3, vrq_batch = 64, opq_iters = 8;
  double vrq_lr = 0.02;
  int gr_epochs = 5, gr_batch = 32, eval_stride = 1;
  double gr_lr = 0.05;
  std::shared_ptr<Binder> b;

  void bind(CLI::App& app) {
    CLI::App* c = app.add_subcommand("sweep", "retrieval accuracy across codebook shapes");
    b = std::make_shared<Binder>(c);
    b->flag_str("--catalog", &catalog, "catalog directory");
    b->flag_str("--fusion", &fusion, "base fusion parameters");
    b->flag_u64("--seed", &seed, "study seed");
    b->flag_int("--beam", &beam, "beam width");
    b->flag_int("--topn", &topn, "retrieved list length");
    b->flag_str("--report", &report, "report path (csv + json sibling)");
    b->key_str("configs", &configs);
    b->key_int("vrq_epochs", &vrq_epochs);
    b->key_double("vrq_lr", &vrq_lr);
    b->key_int("vrq_batch", &vrq_batch);
    b->key_int("opq_iters", &opq_iters);
    b->key_int("gr_epochs", &gr_epochs);
    b->key_double("gr_lr", &gr_lr);
    b->key_int("gr_batch", &gr_batch);
    b->key_int("eval_stride", &eval_stride);
  }

  int run() {
    ManifestClock clock;
    RunManifest man;
    man.command = "sweep";
    b->apply_config_and_snapshot(man.config);
    man.seed = seed;
    require_catalog(catalog);
    require_file(fusion);
    hash_catalog(catalog, man.input_hashes);
    hash_with_sidecar(fusion, man.input_hashes);
    if (eval_stride < 1) fail(errc::invalid_config, "eval_stride must be >= 1");

    Catalog cat = load_catalog(catalog);
    FusionParams base = load_fusion(fusion);

    std::vector<SweepConfig> cfgs;
    std::stringstream ss(configs);
    std::string part;
    while (std::getline(ss, part, ';')) {
      if (part.empty()) continue;
      SweepConfig c;
      std::tie(c.shallow, c.deep) = parse_levels(part);
      cfgs.push_back(std::move(c));
    }
    if (cfgs.empty()) fail(errc::invalid_config, "no sweep configurations given");

    EncodeBudget budget;
    budget.vrq_epochs = vrq_epochs;
    budget.vrq_lr = vrq_lr;
    budget.vrq_batch = vrq_batch;
    budget.opq_iters = opq_iters;
    budget.seed = seed;
    StageBudgets gr;
    gr.pretrain = {gr_epochs, gr_lr, gr_batch, seed, 0.1};
    gr.sft = gr.pretrain;
    RetrieveOptions ropt;
    ropt.beam = beam;
    ropt.top_n = topn;

    std::vector<SweepRow> rows = run_sweep(cat, base, cfgs, budget, gr, ropt,
                                           static_cast<std::size_t>(eval_stride));

    auto [jpath, cpath] = report_paths(report);
    json jrows = json::array();
    std::vector<std::vector<std::string>> csv;
    for (const auto& r : rows) {
      jrows.push_back({{"levels", r.levels}, {"gr_hr4", r.gr_hr4}});
      csv.push_back({r.levels, fmt_double(r.gr_hr4)});
    }
    write_lines(jpath, {json{{"rows", jrows}}.dump(2)});
    write_csv(cpath, {"levels", "gr_hr4"}, csv);
    man.output_hashes[jpath.filename().string()] = file_hash_hex(jpath);
    man.output_hashes[cpath.filename().string()] = file_hash_hex(cpath);
    finish_manifest(man, cpath.string() + ".manifest.json", clock);
    for (const auto& r : rows) std::cout << r.levels << ": gr hr@4 " << r.gr_hr4 << "\n";
    return 0;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"hierarchical semantic id retrieval pipeline"};
  app.require_subcommand(1);

  CmdDatagen datagen;
  CmdTrainFusion train_fusion_cmd;
  CmdFitVrq fit_vrq;
  CmdEncode encode_cmd;
  CmdEvalCodes eval_codes;
  CmdTrainGr train_gr;
  CmdDecode decode_cmd;
  CmdEvalRetrieval eval_retrieval;
  CmdPruneStudy prune_study;
  CmdSweep sweep_cmd;

  datagen.bind(app);
  train_fusion_cmd.bind(app);
  fit_vrq.bind(app);
  encode_cmd.bind(app);
  eval_codes.bind(app);
  train_gr.bind(app);
  decode_cmd.bind(app);
  eval_retrieval.bind(app);
  prune_study.bind(app);
  sweep_cmd.bind(app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int r = app.exit(e);
    return r == 0 ? 0 : 2;
  }

  auto guarded = [](auto&& fn) -> int {
    try {
      return fn();
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return exit_code_for(e.kind());
    } catch (const std::exception& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 5;
    }
  };

  if (datagen.b->cmd->parsed()) return guarded([&] { return datagen.run(); });
  if (train_fusion_cmd.b->cmd->parsed()) return guarded([&] { return train_fusion_cmd.run(); });
  if (fit_vrq.b->cmd->parsed()) return guarded([&] { return fit_vrq.run(); });
  if (encode_cmd.b->cmd->parsed()) return guarded([&] { return encode_cmd.run(); });
  if (eval_codes.b->cmd->parsed()) return guarded([&] { return eval_codes.run(); });
  if (train_gr.b->cmd->parsed()) return guarded([&] { return train_gr.run(); });
  if (decode_cmd.b->cmd->parsed()) return guarded([&] { return decode_cmd.run(); });
  if (eval_retrieval.b->cmd->parsed()) return guarded([&] { return eval_retrieval.run(); });
  if (prune_study.b->cmd->parsed()) return guarded([&] { return prune_study.run(); });
  if (sweep_cmd.b->cmd->parsed()) return guarded([&] { return sweep_cmd.run(); });
  return 2;
}
