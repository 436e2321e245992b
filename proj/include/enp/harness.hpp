#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "enp/io.hpp"
#include "enp/oracle.hpp"
#include "enp/trainer.hpp"

namespace enp {

// Experiment orchestration: config files, the ablation grid, evaluation CSVs
// and plot-data export.

// ---------------------------------------------------------------------------
// Flat key-value config files. Every TrainConfig/SgldConfig field has a key;
// unknown keys are rejected.

using ConfigSetter = std::function<void(TrainConfig&, SgldConfig&, const json&)>;

inline const std::map<std::string, ConfigSetter>& config_setters() {
  static const std::map<std::string, ConfigSetter> setters = {
      {"method", [](TrainConfig& t, SgldConfig&, const json& v) {
         t.method = parse_method(v.get<std::string>());
       }},
      {"epochs", [](TrainConfig& t, SgldConfig&, const json& v) { t.epochs = v.get<int>(); }},
      {"batch_size",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.batch_size = v.get<int>(); }},
      {"lr", [](TrainConfig& t, SgldConfig&, const json& v) { t.lr = v.get<double>(); }},
      {"beta", [](TrainConfig& t, SgldConfig&, const json& v) { t.beta = v.get<double>(); }},
      {"lambda_s",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.lambda_s = v.get<double>(); }},
      {"seed",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.seed = v.get<std::uint64_t>(); }},
      {"aggregate_every",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.aggregate_every = v.get<int>(); }},
      {"aggregate_episodes",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.aggregate_episodes = v.get<int>(); }},
      {"grad_clip",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.grad_clip = v.get<double>(); }},
      {"max_steps",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.max_steps = v.get<int>(); }},
      {"state_dim",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.state_dim = v.get<int>(); }},
      {"emb_dim", [](TrainConfig& t, SgldConfig&, const json& v) { t.emb_dim = v.get<int>(); }},
      {"proj_dim",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.proj_dim = v.get<int>(); }},
      {"pretrain_epochs",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.pretrain_epochs = v.get<int>(); }},
      {"sgld_iters_pretrain",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.sgld_iters_pretrain = v.get<int>(); }},
      {"memory_capacity",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.memory_capacity = v.get<int>(); }},
      {"memory_reinit_prob",
       [](TrainConfig& t, SgldConfig&, const json& v) {
         t.memory_reinit_prob = v.get<double>();
       }},
      {"tabular", [](TrainConfig& t, SgldConfig&, const json& v) { t.tabular = v.get<bool>(); }},
      {"tab_layout_seed",
       [](TrainConfig& t, SgldConfig&, const json& v) {
         t.tab_layout_seed = v.get<std::uint64_t>();
       }},
      {"tab_horizon",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.tab_horizon = v.get<int>(); }},
      {"tab_goal_token",
       [](TrainConfig& t, SgldConfig&, const json& v) { t.tab_goal_token = v.get<int>(); }},
      {"sgld_eps", [](TrainConfig&, SgldConfig& s, const json& v) { s.eps = v.get<double>(); }},
      {"sgld_noise_var",
       [](TrainConfig&, SgldConfig& s, const json& v) { s.noise_var = v.get<double>(); }},
      {"sgld_iters", [](TrainConfig&, SgldConfig& s, const json& v) { s.iters = v.get<int>(); }},
      {"sgld_matched_kernel",
       [](TrainConfig&, SgldConfig& s, const json& v) { s.matched_kernel = v.get<bool>(); }},
  };
  return setters;
}

inline void apply_config_json(const json& j, TrainConfig& train, SgldConfig& sgld) {
  if (!j.is_object()) throw std::invalid_argument("config: expected a flat JSON object");
  const auto& setters = config_setters();
  for (auto it = j.begin(); it != j.end(); ++it) {
    auto s = setters.find(it.key());
    if (s == setters.end())
      throw std::invalid_argument("config: unknown key '" + it.key() + "'");
    s->second(train, sgld, it.value());
  }
}

inline void load_config_file(const std::string& path, TrainConfig& train, SgldConfig& sgld) {
  apply_config_json(json::parse(read_text_file(path)), train, sgld);
}

inline json train_config_to_json(const TrainConfig& t, const SgldConfig& s) {
  return json{{"method", method_name(t.method)},
              {"epochs", t.epochs},
              {"batch_size", t.batch_size},
              {"lr", t.lr},
              {"beta", t.beta},
              {"lambda_s", t.lambda_s},
              {"seed", t.seed},
              {"aggregate_every", t.aggregate_every},
              {"aggregate_episodes", t.aggregate_episodes},
              {"grad_clip", t.grad_clip},
              {"max_steps", t.max_steps},
              {"state_dim", t.state_dim},
              {"emb_dim", t.emb_dim},
              {"proj_dim", t.proj_dim},
              {"pretrain_epochs", t.pretrain_epochs},
              {"sgld_iters_pretrain", t.sgld_iters_pretrain},
              {"memory_capacity", t.memory_capacity},
              {"memory_reinit_prob", t.memory_reinit_prob},
              {"tabular", t.tabular},
              {"tab_layout_seed", t.tab_layout_seed},
              {"tab_horizon", t.tab_horizon},
              {"tab_goal_token", t.tab_goal_token},
              {"sgld_eps", s.eps},
              {"sgld_noise_var", s.noise_var},
              {"sgld_iters", s.iters},
              {"sgld_matched_kernel", s.matched_kernel}};
}

// ---------------------------------------------------------------------------
// Evaluation CSV

inline const std::vector<int>& sr_buckets() {
  static const std::vector<int> buckets = {0, 4, 8, 12, 16};
  return buckets;
}

inline std::string eval_csv_header() {
  std::ostringstream os;
  os << "split,method,seed,SR,SPL,NE,TL,OSR,NDTW,SDTW";
  const auto& b = sr_buckets();
  for (std::size_t i = 0; i < b.size(); ++i) {
    if (i + 1 < b.size())
      os << ",sr_len_" << b[i] << "_" << b[i + 1] - 1;
    else
      os << ",sr_len_" << b[i] << "p";
  }
  return os.str();
}

inline std::string eval_csv_row(const std::string& split, const std::string& method,
                                std::uint64_t seed, const AggregateMetrics& agg) {
  std::ostringstream os;
  os << split << "," << method << "," << seed << "," << agg.sr << "," << agg.spl << ","
     << agg.ne << "," << agg.tl << "," << agg.osr << "," << agg.ndtw << "," << agg.sdtw;
  const auto& edges = sr_buckets();
  for (std::size_t i = 0; i < edges.size(); ++i) {
    double mass = 0.0;
    int count = 0;
    for (const auto& [lo, sc] : agg.sr_by_length) {
      bool in = i + 1 < edges.size() ? (lo >= edges[i] && lo < edges[i + 1]) : lo >= edges[i];
      if (in) {
        mass += sc.first * sc.second;
        count += sc.second;
      }
    }
    os << ",";
    if (count > 0)
      os << mass / count;
    else
      os << "nan";
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Experiment specs and the ablation grid

struct ExperimentSpec {
  std::string name = "experiment";
  EnvConfig env;
  DatasetGenConfig gen;
  std::uint64_t data_seed = 0;
  TrainConfig train;
  SgldConfig sgld;
  std::vector<std::uint64_t> seeds;
  std::vector<std::pair<std::string, std::vector<json>>> axes;  // field -> values
};

inline DatasetGenConfig gen_config_from_json(const json& j) {
  DatasetGenConfig gen;
  if (j.contains("train_layouts")) gen.train_layouts = j.at("train_layouts").get<int>();
  if (j.contains("unseen_layouts")) gen.unseen_layouts = j.at("unseen_layouts").get<int>();
  if (j.contains("episodes_per_layout"))
    gen.episodes_per_layout = j.at("episodes_per_layout").get<int>();
  if (j.contains("val_seen_episodes_per_layout"))
    gen.val_seen_episodes_per_layout = j.at("val_seen_episodes_per_layout").get<int>();
  if (j.contains("val_unseen_episodes_per_layout"))
    gen.val_unseen_episodes_per_layout = j.at("val_unseen_episodes_per_layout").get<int>();
  if (j.contains("train_seed_lo")) gen.train_seed_lo = j.at("train_seed_lo").get<std::uint64_t>();
  if (j.contains("unseen_seed_lo"))
    gen.unseen_seed_lo = j.at("unseen_seed_lo").get<std::uint64_t>();
  if (j.contains("max_steps")) gen.max_steps = j.at("max_steps").get<int>();
  return gen;
}

inline json gen_config_to_json(const DatasetGenConfig& g) {
  return json{{"train_layouts", g.train_layouts},
              {"unseen_layouts", g.unseen_layouts},
              {"episodes_per_layout", g.episodes_per_layout},
              {"val_seen_episodes_per_layout", g.val_seen_episodes_per_layout},
              {"val_unseen_episodes_per_layout", g.val_unseen_episodes_per_layout},
              {"train_seed_lo", g.train_seed_lo},
              {"unseen_seed_lo", g.unseen_seed_lo},
              {"max_steps", g.max_steps}};
}

inline ExperimentSpec experiment_spec_from_json(const json& j) {
  ExperimentSpec spec;
  if (j.contains("name")) spec.name = j.at("name").get<std::string>();
  if (j.contains("env")) spec.env = env_config_from_json(j.at("env"));
  if (j.contains("gen")) spec.gen = gen_config_from_json(j.at("gen"));
  if (j.contains("data_seed")) spec.data_seed = j.at("data_seed").get<std::uint64_t>();
  if (j.contains("train")) apply_config_json(j.at("train"), spec.train, spec.sgld);
  if (!j.contains("seeds") || !j.at("seeds").is_array() || j.at("seeds").empty())
    throw std::invalid_argument("experiment spec: non-empty 'seeds' list required");
  for (const auto& s : j.at("seeds")) spec.seeds.push_back(s.get<std::uint64_t>());
  if (j.contains("axes")) {
    const auto& setters = config_setters();
    for (auto it = j.at("axes").begin(); it != j.at("axes").end(); ++it) {
      if (setters.find(it.key()) == setters.end())
        throw std::invalid_argument("experiment spec: axis '" + it.key() +
                                    "' is not a config field");
      std::vector<json> values(it.value().begin(), it.value().end());
      if (values.empty())
        throw std::invalid_argument("experiment spec: axis '" + it.key() + "' has no values");
      spec.axes.emplace_back(it.key(), values);
    }
  }
  return spec;
}

inline ExperimentSpec load_experiment_spec(const std::string& path) {
  return experiment_spec_from_json(json::parse(read_text_file(path)));
}

struct CellRun {
  std::map<std::string, json> overrides;  // axis field -> value
  std::uint64_t seed = 0;
  std::string label;
  bool ok = false;
  std::string error;
  SplitEval val_unseen;
  SplitEval val_seen;
  RunLog log;
};

inline std::string cell_label(const std::map<std::string, json>& overrides) {
  if (overrides.empty()) return "base";
  std::ostringstream os;
  bool first = true;
  for (const auto& [k, v] : overrides) {
    if (!first) os << "_";
    first = false;
    os << k << "=" << v.dump();
  }
  return os.str();
}

// Cartesian product of axis values; one CellRun per cell and seed.
inline std::vector<CellRun> expand_grid(const ExperimentSpec& spec) {
  std::vector<std::map<std::string, json>> cells{{}};
  for (const auto& [field, values] : spec.axes) {
    std::vector<std::map<std::string, json>> next;
    for (const auto& cell : cells)
      for (const auto& v : values) {
        auto c = cell;
        c[field] = v;
        next.push_back(std::move(c));
      }
    cells = std::move(next);
  }
  std::vector<CellRun> runs;
  for (const auto& cell : cells)
    for (std::uint64_t seed : spec.seeds) {
      CellRun run;
      run.overrides = cell;
      run.seed = seed;
      run.label = cell_label(cell);
      runs.push_back(std::move(run));
    }
  return runs;
}

inline void run_cell(const ExperimentSpec& spec, const DatasetSplits& data, CellRun& run) {
  try {
    TrainConfig tc = spec.train;
    SgldConfig sgld = spec.sgld;
    const auto& setters = config_setters();
    for (const auto& [field, value] : run.overrides) setters.at(field)(tc, sgld, value);
    tc.seed = run.seed;
    TrainResult res = train(tc, sgld, spec.env, data);
    run.log = std::move(res.log);
    if (!run.log.records.empty()) {
      run.val_unseen = run.log.records.back().val_unseen;
      run.val_seen = run.log.records.back().val_seen;
    }
    run.ok = true;
  } catch (const std::exception& e) {
    run.ok = false;
    run.error = e.what();
  }
}

struct AblateResult {
  std::vector<CellRun> runs;
  std::string summary_csv;        // one row per run
  std::string summary_mean_csv;   // mean +- std per cell
};

inline AblateResult run_ablation(const ExperimentSpec& spec, int jobs = 1) {
  DatasetSplits data;
  if (!spec.train.tabular) data = generate_dataset(spec.env, spec.gen, spec.data_seed);
  AblateResult result;
  result.runs = expand_grid(spec);
  std::atomic<std::size_t> cursor{0};
  auto worker = [&]() {
    while (true) {
      std::size_t i = cursor.fetch_add(1);
      if (i >= result.runs.size()) return;
      run_cell(spec, data, result.runs[i]);
    }
  };
  if (jobs <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }

  // per-run rows
  std::vector<std::string> axis_fields;
  for (const auto& [field, values] : spec.axes) axis_fields.push_back(field);
  std::ostringstream rows;
  rows << "cell";
  for (const auto& f : axis_fields) rows << "," << f;
  rows << ",seed,status,sr,spl,ne,ndtw\n";
  for (const auto& run : result.runs) {
    rows << run.label;
    for (const auto& f : axis_fields) rows << "," << run.overrides.at(f).dump();
    rows << "," << run.seed << "," << (run.ok ? "ok" : "failed") << "," << run.val_unseen.sr
         << "," << run.val_unseen.spl << "," << run.val_unseen.ne << "," << run.val_unseen.ndtw
         << "\n";
  }
  result.summary_csv = rows.str();

  // mean +- std per cell over seeds
  std::map<std::string, std::vector<const CellRun*>> by_cell;
  for (const auto& run : result.runs) by_cell[run.label].push_back(&run);
  std::ostringstream means;
  means << "cell";
  for (const auto& f : axis_fields) means << "," << f;
  means << ",n_seeds,sr_mean,sr_std,spl_mean,spl_std,ndtw_mean\n";
  for (const auto& [label, cell_runs] : by_cell) {
    int n = 0;
    double sr = 0, sr2 = 0, spl = 0, spl2 = 0, nd = 0;
    for (const CellRun* r : cell_runs) {
      if (!r->ok) continue;
      ++n;
      sr += r->val_unseen.sr;
      sr2 += r->val_unseen.sr * r->val_unseen.sr;
      spl += r->val_unseen.spl;
      spl2 += r->val_unseen.spl * r->val_unseen.spl;
      nd += r->val_unseen.ndtw;
    }
    means << label;
    for (const auto& f : axis_fields) means << "," << cell_runs.front()->overrides.at(f).dump();
    if (n == 0) {
      means << ",0,nan,nan,nan,nan,nan\n";
      continue;
    }
    double sr_m = sr / n, spl_m = spl / n;
    double sr_v = std::max(0.0, sr2 / n - sr_m * sr_m);
    double spl_v = std::max(0.0, spl2 / n - spl_m * spl_m);
    means << "," << n << "," << sr_m << "," << std::sqrt(sr_v) << "," << spl_m << ","
          << std::sqrt(spl_v) << "," << nd / n << "\n";
  }
  result.summary_mean_csv = means.str();
  return result;
}

// ---------------------------------------------------------------------------
// Plot-data export: tidy long-format (x, y, series, seed) tables from run
// directories containing runlog.jsonl and meta.json.

struct RunDirData {
  std::string name;
  std::string method;
  std::uint64_t seed = 0;
  RunLog log;
  json sr_by_length;  // {split: {bucket: {sr, count}}}, written at train time
};

inline json sr_by_length_json(const AggregateMetrics& agg) {
  json j = json::object();
  for (const auto& [bucket, sc] : agg.sr_by_length)
    j[std::to_string(bucket)] = {{"sr", sc.first}, {"count", sc.second}};
  return j;
}

inline RunDirData load_run_dir(const std::string& dir) {
  RunDirData run;
  run.name = std::filesystem::path(dir).filename().string();
  run.log = load_runlog(dir + "/runlog.jsonl");
  std::string meta_path = dir + "/meta.json";
  if (std::filesystem::exists(meta_path)) {
    json meta = json::parse(read_text_file(meta_path));
    if (meta.contains("method")) run.method = meta.at("method").get<std::string>();
    if (meta.contains("seed")) run.seed = meta.at("seed").get<std::uint64_t>();
  }
  std::string hist_path = dir + "/sr_by_length.json";
  if (std::filesystem::exists(hist_path))
    run.sr_by_length = json::parse(read_text_file(hist_path));
  return run;
}

struct PlotExport {
  std::string loss_curves_csv;
  std::string kl_curves_csv;
  std::string sr_by_length_csv;
};

inline PlotExport export_plots(const std::vector<RunDirData>& runs) {
  PlotExport out;
  std::ostringstream loss, kl, hist;
  loss << "x,y,series,seed\n";
  kl << "x,y,series,seed\n";
  hist << "x,y,series,seed\n";
  for (const auto& run : runs) {
    std::string base = run.method.empty() ? run.name : run.name + ":" + run.method;
    for (const auto& rec : run.log.records) {
      loss << rec.epoch << "," << rec.l_pi << "," << base << ":l_pi," << run.seed << "\n";
      loss << rec.epoch << "," << rec.l_s << "," << base << ":l_s," << run.seed << "\n";
      if (rec.has_kl)
        kl << rec.epoch << "," << rec.forward_kl << "," << base << "," << run.seed << "\n";
    }
    if (run.sr_by_length.is_object()) {
      for (auto split = run.sr_by_length.begin(); split != run.sr_by_length.end(); ++split)
        for (auto b = split.value().begin(); b != split.value().end(); ++b)
          hist << b.key() << "," << b.value().at("sr").get<double>() << "," << base << ":"
               << split.key() << "," << run.seed << "\n";
    }
  }
  out.loss_curves_csv = loss.str();
  out.kl_curves_csv = kl.str();
  out.sr_by_length_csv = hist.str();
  return out;
}

}  // namespace enp
