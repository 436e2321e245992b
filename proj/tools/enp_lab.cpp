// enp_lab: dataset generation, training, evaluation, oracle analysis, the
// ablation harness and plot-data export for the grid-maze navigation lab.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "enp/harness.hpp"
#include "enp/io.hpp"
#include "enp/oracle.hpp"
#include "enp/trainer.hpp"

namespace fs = std::filesystem;
using namespace enp;

namespace {

std::uint64_t env_seed_fallback() {
  const char* v = std::getenv("ENP_LAB_SEED");
  return v ? std::stoull(v) : 0;
}

void refuse_existing(const std::vector<std::string>& paths, bool force) {
  if (force) return;
  for (const auto& p : paths)
    if (fs::exists(p))
      throw std::runtime_error("output " + p + " exists; pass --force to overwrite");
}

void add_env_flags(CLI::App* cmd, EnvConfig& env) {
  cmd->add_option("--width", env.width, "maze width");
  cmd->add_option("--height", env.height, "maze height");
  cmd->add_option("--wall-density", env.wall_density, "wall probability (< 0.4)");
  cmd->add_option("--landmarks", env.landmark_count, "landmarks per layout");
  cmd->add_option("--vocab", env.vocab_size, "landmark token vocabulary size");
  cmd->add_option("--window-radius", env.window_radius, "egocentric view radius");
  cmd->add_option("--max-instr-len", env.max_instruction_len, "instruction length bound");
  cmd->add_option("--instr-len", env.gen_instruction_len, "sampled instruction length cap");
}

json dataset_meta(const EnvConfig& env, const DatasetGenConfig& gen, std::uint64_t seed) {
  return json{{"env", env_config_to_json(env)}, {"gen", gen_config_to_json(gen)}, {"seed", seed}};
}

struct LoadedDataset {
  EnvConfig env;
  DatasetSplits splits;
};

LoadedDataset load_dataset_dir(const std::string& dir) {
  LoadedDataset out;
  json meta = json::parse(read_text_file(dir + "/meta.json"));
  out.env = env_config_from_json(meta.at("env"));
  out.splits.train = load_dataset(dir + "/train.jsonl");
  out.splits.val_seen = load_dataset(dir + "/val_seen.jsonl");
  out.splits.val_unseen = load_dataset(dir + "/val_unseen.jsonl");
  return out;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const std::string& out_dir, const EnvConfig& env, const DatasetGenConfig& gen,
                 std::uint64_t seed, bool force) {
  refuse_existing({out_dir + "/train.jsonl", out_dir + "/val_seen.jsonl",
                   out_dir + "/val_unseen.jsonl", out_dir + "/meta.json"},
                  force);
  DatasetSplits splits = generate_dataset(env, gen, seed);
  fs::create_directories(out_dir);
  save_dataset(out_dir + "/train.jsonl", splits.train);
  save_dataset(out_dir + "/val_seen.jsonl", splits.val_seen);
  save_dataset(out_dir + "/val_unseen.jsonl", splits.val_unseen);
  write_text_file(out_dir + "/meta.json", dataset_meta(env, gen, seed).dump(2) + "\n");
  std::cout << "wrote " << splits.train.trajectories.size() << " train / "
            << splits.val_seen.trajectories.size() << " val-seen / "
            << splits.val_unseen.trajectories.size() << " val-unseen trajectories to "
            << out_dir << "\n";
  return 0;
}

json checkpoint_meta(const TrainConfig& tc, const SgldConfig& sgld, const EnvConfig& env) {
  PolicyDims dims = dims_from_config(tc, env);
  return json{{"format", 1},
              {"method", method_name(tc.method)},
              {"seed", tc.seed},
              {"env", env_config_to_json(env)},
              {"config", train_config_to_json(tc, sgld)},
              {"dims",
               {{"K", dims.K},
                {"D", dims.D},
                {"D_obs", dims.D_obs},
                {"D_emb", dims.D_emb},
                {"D_proj", dims.D_proj},
                {"vocab", dims.vocab}}}};
}

int cmd_train(const std::string& dataset_dir, const std::string& out_dir, const TrainConfig& tc,
              const SgldConfig& sgld, EnvConfig env_override, bool has_env_override,
              bool force) {
  refuse_existing({out_dir + "/checkpoint.bin", out_dir + "/runlog.jsonl"}, force);
  LoadedDataset data;
  if (tc.tabular) {
    if (!has_env_override && !dataset_dir.empty())
      data = load_dataset_dir(dataset_dir);
    else
      data.env = env_override;
  } else {
    if (dataset_dir.empty())
      throw std::runtime_error("train: --dataset-dir is required (run gen-data first)");
    data = load_dataset_dir(dataset_dir);
  }
  TrainResult res = train(tc, sgld, data.env, data.splits);
  fs::create_directories(out_dir);
  save_runlog(out_dir + "/runlog.jsonl", res.log);
  save_checkpoint(out_dir + "/checkpoint.bin",
                  to_param_store(res.model, checkpoint_meta(tc, sgld, data.env).dump()));
  write_text_file(out_dir + "/meta.json", checkpoint_meta(tc, sgld, data.env).dump(2) + "\n");
  // final-model evaluation artifacts for export-plots
  if (!data.splits.val_seen.trajectories.empty() ||
      !data.splits.val_unseen.trajectories.empty() || tc.tabular) {
    json hist = json::object();
    std::ostringstream csv;
    csv << eval_csv_header() << "\n";
    struct SplitRef {
      const char* name;
      const Dataset* ds;
    };
    Dataset tab_demo;
    std::vector<SplitRef> splits;
    if (tc.tabular) {
      tab_demo = tabular_demo_dataset(tabular_instance_from_config(tc, data.env));
      splits = {{"val_seen", &tab_demo}, {"val_unseen", &tab_demo}};
    } else {
      splits = {{"val_seen", &data.splits.val_seen}, {"val_unseen", &data.splits.val_unseen}};
    }
    for (const auto& [name, ds] : splits) {
      if (ds->trajectories.empty()) continue;
      EvalOutput ev = evaluate_split(res.model, *ds, data.env, tc.max_steps);
      csv << eval_csv_row(name, method_name(tc.method), tc.seed, ev.aggregate) << "\n";
      hist[name] = sr_by_length_json(ev.aggregate);
    }
    write_text_file(out_dir + "/eval.csv", csv.str());
    write_text_file(out_dir + "/sr_by_length.json", hist.dump(2) + "\n");
  }
  if (!res.log.records.empty()) {
    const auto& last = res.log.records.back();
    std::cout << "final: l_pi=" << last.l_pi << " l_s=" << last.l_s
              << " val_unseen_sr=" << last.val_unseen.sr;
    if (last.has_kl) std::cout << " forward_kl=" << last.forward_kl;
    std::cout << "\n";
  }
  std::cout << "artifacts in " << out_dir << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& dataset_dir,
             const std::string& split, const std::string& out_file, int max_steps, bool force) {
  refuse_existing({out_file}, force);
  ParamStore store = load_checkpoint(checkpoint);
  json meta = json::parse(store.meta);
  EnvConfig ckpt_env = env_config_from_json(meta.at("env"));
  LoadedDataset data = load_dataset_dir(dataset_dir);
  if (env_config_to_json(data.env) != env_config_to_json(ckpt_env))
    throw std::runtime_error(
        "eval: checkpoint and dataset were produced with different environment "
        "hyperparameters");
  PolicyDims dims;
  dims.K = meta.at("dims").at("K").get<int>();
  dims.D = meta.at("dims").at("D").get<int>();
  dims.D_obs = meta.at("dims").at("D_obs").get<int>();
  dims.D_emb = meta.at("dims").at("D_emb").get<int>();
  dims.D_proj = meta.at("dims").at("D_proj").get<int>();
  dims.vocab = meta.at("dims").at("vocab").get<int>();
  if (dims.D_obs != obs_dim(data.env))
    throw std::runtime_error("eval: checkpoint observation width does not match the dataset");
  PolicyModel model = model_from_store(store, dims);
  const Dataset* ds = nullptr;
  if (split == "train") ds = &data.splits.train;
  else if (split == "val_seen") ds = &data.splits.val_seen;
  else if (split == "val_unseen") ds = &data.splits.val_unseen;
  else throw std::runtime_error("eval: unknown split '" + split + "'");
  if (ds->trajectories.empty()) throw std::runtime_error("eval: split '" + split + "' is empty");
  EvalOutput ev = evaluate_split(model, *ds, data.env, max_steps);
  std::ostringstream csv;
  csv << eval_csv_header() << "\n"
      << eval_csv_row(split, meta.at("method").get<std::string>(),
                      meta.at("seed").get<std::uint64_t>(), ev.aggregate)
      << "\n";
  write_text_file(out_file, csv.str());
  std::cout << "split=" << split << " episodes=" << ev.episodes.size()
            << " SR=" << ev.aggregate.sr << " SPL=" << ev.aggregate.spl
            << " NDTW=" << ev.aggregate.ndtw << "\n";
  return 0;
}

int cmd_oracle(const std::string& instance_file, const std::string& checkpoint,
               const std::string& out_file, bool force) {
  refuse_existing({out_file}, force);
  json spec = json::parse(read_text_file(instance_file));
  EnvConfig env = env_config_from_json(spec.at("env"));
  TrainConfig tc;
  tc.tabular = true;
  tc.tab_layout_seed = spec.at("layout_seed").get<std::uint64_t>();
  tc.tab_horizon = spec.at("horizon").get<int>();
  if (spec.contains("goal_token")) tc.tab_goal_token = spec.at("goal_token").get<int>();
  OracleInstance inst = tabular_instance_from_config(tc, env);

  ParamStore store = load_checkpoint(checkpoint);
  json meta = json::parse(store.meta);
  PolicyDims dims;
  dims.K = meta.at("dims").at("K").get<int>();
  dims.D = meta.at("dims").at("D").get<int>();
  dims.D_obs = meta.at("dims").at("D_obs").get<int>();
  dims.D_emb = meta.at("dims").at("D_emb").get<int>();
  dims.D_proj = meta.at("dims").at("D_proj").get<int>();
  dims.vocab = meta.at("dims").at("vocab").get<int>();
  if (dims.D_obs != obs_dim(env))
    throw std::runtime_error("oracle: checkpoint observation width does not match the instance");
  PolicyModel model = model_from_store(store, dims);

  OccupancyTable expert_occ = occupancy(inst.mdp, expert_tabular_policy(inst), true);
  OccupancyTable learner_occ = occupancy(inst.mdp, lift_policy(model, inst), true);
  double fkl = forward_kl(expert_occ, learner_occ, true);
  ReverseKlResult rkl = reverse_kl(learner_occ, expert_occ, true);
  json out{{"n_states", inst.mdp.n_states},
           {"n_actions", inst.mdp.n_actions},
           {"horizon", inst.horizon},
           {"forward_kl", fkl},
           {"reverse_kl", {{"kl", rkl.kl}, {"cross", rkl.cross}, {"entropy", rkl.entropy}}},
           {"expert_occupancy", expert_occ.v},
           {"learner_occupancy", learner_occ.v}};
  write_text_file(out_file, out.dump(2) + "\n");
  std::cout << "forward_kl=" << fkl << " reverse_kl=" << rkl.kl << " states=" << inst.mdp.n_states
            << "\n";
  return 0;
}

int cmd_ablate(const std::string& spec_file, const std::string& out_dir, int jobs, bool force) {
  refuse_existing({out_dir + "/summary.csv", out_dir + "/summary_mean.csv"}, force);
  ExperimentSpec spec = load_experiment_spec(spec_file);
  AblateResult result = run_ablation(spec, jobs);
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/summary.csv", result.summary_csv);
  write_text_file(out_dir + "/summary_mean.csv", result.summary_mean_csv);
  int failed = 0;
  for (const auto& run : result.runs) {
    std::string dir = out_dir + "/" + run.label + "_seed" + std::to_string(run.seed);
    fs::create_directories(dir);
    if (run.ok) {
      save_runlog(dir + "/runlog.jsonl", run.log);
      json meta{{"method", method_name(spec.train.method)},
                {"seed", run.seed},
                {"cell", run.label}};
      write_text_file(dir + "/meta.json", meta.dump(2) + "\n");
    } else {
      write_text_file(dir + "/error.txt", run.error + "\n");
      ++failed;
    }
  }
  std::cout << "ran " << result.runs.size() << " cells (" << failed << " failed); summaries in "
            << out_dir << "\n";
  return failed == 0 ? 0 : 1;
}

int cmd_export_plots(const std::vector<std::string>& run_dirs, const std::string& out_dir,
                     bool force) {
  refuse_existing({out_dir + "/loss_curves.csv", out_dir + "/kl_curves.csv",
                   out_dir + "/sr_by_length.csv"},
                  force);
  std::vector<RunDirData> runs;
  for (const auto& dir : run_dirs) runs.push_back(load_run_dir(dir));
  PlotExport exp = export_plots(runs);
  fs::create_directories(out_dir);
  write_text_file(out_dir + "/loss_curves.csv", exp.loss_curves_csv);
  write_text_file(out_dir + "/kl_curves.csv", exp.kl_curves_csv);
  write_text_file(out_dir + "/sr_by_length.csv", exp.sr_by_length_csv);
  std::cout << "exported " << runs.size() << " runs to " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"energy-based navigation policy lab"};
  app.require_subcommand(1);

  // gen-data ---------------------------------------------------------------
  auto* gen_cmd = app.add_subcommand("gen-data", "generate dataset splits");
  EnvConfig gen_env;
  DatasetGenConfig gen_cfg;
  std::string gen_out = "data";
  std::uint64_t gen_seed = env_seed_fallback();
  bool gen_force = false;
  gen_cmd->add_option("--out,--dataset-dir", gen_out, "output directory");
  gen_cmd->add_option("--seed", gen_seed, "dataset master seed");
  add_env_flags(gen_cmd, gen_env);
  gen_cmd->add_option("--train-layouts", gen_cfg.train_layouts, "train layout count");
  gen_cmd->add_option("--unseen-layouts", gen_cfg.unseen_layouts, "held-out layout count");
  gen_cmd->add_option("--episodes-per-layout", gen_cfg.episodes_per_layout,
                      "train episodes per layout");
  gen_cmd->add_option("--val-seen-episodes", gen_cfg.val_seen_episodes_per_layout,
                      "val-seen episodes per layout");
  gen_cmd->add_option("--val-unseen-episodes", gen_cfg.val_unseen_episodes_per_layout,
                      "val-unseen episodes per layout");
  gen_cmd->add_option("--train-seed-lo", gen_cfg.train_seed_lo, "train layout seed range start");
  gen_cmd->add_option("--unseen-seed-lo", gen_cfg.unseen_seed_lo,
                      "unseen layout seed range start");
  gen_cmd->add_option("--expert-max-steps", gen_cfg.max_steps, "expert rollout cap");
  gen_cmd->add_flag("--force", gen_force, "overwrite existing outputs");

  // train --------------------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train a policy");
  TrainConfig tc_flags;  // flag values; merged over the config file after parse
  SgldConfig sgld_flags;
  EnvConfig train_env;
  std::string train_method = "bc", train_data_dir, train_out = "run", train_config_file;
  bool train_force = false;
  train_cmd->add_option("--method", train_method, "bc|dagger|enp|airl-tab");
  train_cmd->add_option("--dataset-dir", train_data_dir, "dataset directory from gen-data");
  train_cmd->add_option("--out", train_out, "output directory");
  train_cmd->add_option("--config", train_config_file, "flat JSON config file");
  // (option, copy-flag-value-into-final-config) pairs
  using Merge = std::function<void(TrainConfig&, SgldConfig&)>;
  std::vector<std::pair<CLI::Option*, Merge>> merges;
  auto opt = [&](const char* name, auto& field, auto TrainConfig::*member,
                 const char* desc = "") {
    CLI::Option* o = train_cmd->add_option(name, field, desc);
    merges.emplace_back(o, [&field, member](TrainConfig& t, SgldConfig&) { t.*member = field; });
    return o;
  };
  auto sopt = [&](const char* name, auto& field, auto SgldConfig::*member,
                  const char* desc = "") {
    CLI::Option* o = train_cmd->add_option(name, field, desc);
    merges.emplace_back(o, [&field, member](TrainConfig&, SgldConfig& s) { s.*member = field; });
    return o;
  };
  opt("--epochs", tc_flags.epochs, &TrainConfig::epochs);
  opt("--batch-size", tc_flags.batch_size, &TrainConfig::batch_size);
  opt("--lr", tc_flags.lr, &TrainConfig::lr);
  opt("--beta", tc_flags.beta, &TrainConfig::beta, "P(batch slot from D+)");
  opt("--lambda-s", tc_flags.lambda_s, &TrainConfig::lambda_s, "L_S weight");
  CLI::Option* o_seed = opt("--seed", tc_flags.seed, &TrainConfig::seed);
  opt("--aggregate-every", tc_flags.aggregate_every, &TrainConfig::aggregate_every,
      "epochs between aggregation passes");
  opt("--aggregate-episodes", tc_flags.aggregate_episodes, &TrainConfig::aggregate_episodes);
  opt("--grad-clip", tc_flags.grad_clip, &TrainConfig::grad_clip);
  opt("--max-steps", tc_flags.max_steps, &TrainConfig::max_steps);
  opt("--state-dim", tc_flags.state_dim, &TrainConfig::state_dim);
  opt("--emb-dim", tc_flags.emb_dim, &TrainConfig::emb_dim);
  opt("--proj-dim", tc_flags.proj_dim, &TrainConfig::proj_dim);
  opt("--pretrain-epochs", tc_flags.pretrain_epochs, &TrainConfig::pretrain_epochs);
  opt("--sgld-iters-pretrain", tc_flags.sgld_iters_pretrain, &TrainConfig::sgld_iters_pretrain);
  opt("--memory-capacity", tc_flags.memory_capacity, &TrainConfig::memory_capacity);
  opt("--memory-reinit-prob", tc_flags.memory_reinit_prob, &TrainConfig::memory_reinit_prob);
  opt("--tab-layout-seed", tc_flags.tab_layout_seed, &TrainConfig::tab_layout_seed);
  opt("--tab-horizon", tc_flags.tab_horizon, &TrainConfig::tab_horizon);
  opt("--tab-goal-token", tc_flags.tab_goal_token, &TrainConfig::tab_goal_token);
  {
    CLI::Option* o = train_cmd->add_flag("--tabular", tc_flags.tabular,
                                         "train on a tabular instance");
    merges.emplace_back(o, [&tc_flags](TrainConfig& t, SgldConfig&) {
      t.tabular = tc_flags.tabular;
    });
  }
  sopt("--sgld-eps", sgld_flags.eps, &SgldConfig::eps, "SGLD step size");
  sopt("--sgld-noise-var", sgld_flags.noise_var, &SgldConfig::noise_var, "SGLD noise variance");
  sopt("--sgld-iters", sgld_flags.iters, &SgldConfig::iters, "SGLD iterations");
  {
    CLI::Option* o = train_cmd->add_flag("--sgld-matched-kernel", sgld_flags.matched_kernel,
                                         "couple noise std to eps");
    merges.emplace_back(o, [&sgld_flags](TrainConfig&, SgldConfig& s) {
      s.matched_kernel = sgld_flags.matched_kernel;
    });
  }
  add_env_flags(train_cmd, train_env);
  train_cmd->add_flag("--force", train_force, "overwrite existing outputs");

  // eval ---------------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  std::string eval_ckpt, eval_data_dir, eval_split = "val_unseen", eval_out = "eval.csv";
  int eval_max_steps = 40;
  bool eval_force = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt)->required();
  eval_cmd->add_option("--dataset-dir", eval_data_dir)->required();
  eval_cmd->add_option("--split", eval_split, "train|val_seen|val_unseen");
  eval_cmd->add_option("--out", eval_out, "metrics CSV path");
  eval_cmd->add_option("--max-steps", eval_max_steps, "rollout cap");
  eval_cmd->add_flag("--force", eval_force, "overwrite existing outputs");

  // oracle ---------------------------------------------------------------------
  auto* oracle_cmd = app.add_subcommand("oracle", "exact occupancy/KL analysis");
  std::string oracle_instance, oracle_ckpt, oracle_out = "oracle.json";
  bool oracle_force = false;
  oracle_cmd->add_option("--instance", oracle_instance, "instance JSON file")->required();
  oracle_cmd->add_option("--checkpoint", oracle_ckpt)->required();
  oracle_cmd->add_option("--out", oracle_out, "output JSON path");
  oracle_cmd->add_flag("--force", oracle_force, "overwrite existing outputs");

  // ablate ---------------------------------------------------------------------
  auto* ablate_cmd = app.add_subcommand("ablate", "run an experiment grid");
  std::string ablate_spec, ablate_out = "ablation";
  int ablate_jobs = 1;
  bool ablate_force = false;
  ablate_cmd->add_option("--spec", ablate_spec, "experiment spec JSON")->required();
  ablate_cmd->add_option("--out", ablate_out, "output directory");
  ablate_cmd->add_option("--jobs", ablate_jobs, "parallel cells");
  ablate_cmd->add_flag("--force", ablate_force, "overwrite existing outputs");

  // export-plots ----------------------------------------------------------------
  auto* export_cmd = app.add_subcommand("export-plots", "tidy plot tables from run dirs");
  std::vector<std::string> export_runs;
  std::string export_out = "plots";
  bool export_force = false;
  export_cmd->add_option("--runs", export_runs, "run directories")->required();
  export_cmd->add_option("--out", export_out, "output directory");
  export_cmd->add_flag("--force", export_force, "overwrite existing outputs");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen_cmd->parsed())
      return cmd_gen_data(gen_out, gen_env, gen_cfg, gen_seed, gen_force);
    if (train_cmd->parsed()) {
      // precedence: defaults < config file < explicit flags
      TrainConfig tc;
      SgldConfig sgld;
      if (!train_config_file.empty()) load_config_file(train_config_file, tc, sgld);
      for (auto& [option, merge] : merges)
        if (option->count() > 0) merge(tc, sgld);
      if (train_cmd->count("--method") > 0 || train_config_file.empty())
        tc.method = parse_method(train_method);
      if (o_seed->count() == 0 && std::getenv("ENP_LAB_SEED") &&
          (train_config_file.empty() || tc.seed == 0))
        tc.seed = env_seed_fallback();
      bool has_env_override = train_cmd->count("--width") || train_cmd->count("--height") ||
                              train_cmd->count("--vocab") || train_cmd->count("--landmarks") ||
                              train_cmd->count("--wall-density") ||
                              train_cmd->count("--window-radius");
      return cmd_train(train_data_dir, train_out, tc, sgld, train_env,
                       has_env_override || tc.tabular, train_force);
    }
    if (eval_cmd->parsed())
      return cmd_eval(eval_ckpt, eval_data_dir, eval_split, eval_out, eval_max_steps,
                      eval_force);
    if (oracle_cmd->parsed())
      return cmd_oracle(oracle_instance, oracle_ckpt, oracle_out, oracle_force);
    if (ablate_cmd->parsed()) return cmd_ablate(ablate_spec, ablate_out, ablate_jobs, ablate_force);
    if (export_cmd->parsed()) return cmd_export_plots(export_runs, export_out, export_force);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
