#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "enp/env.hpp"
#include "enp/trainer.hpp"

namespace enp {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Dataset files: line-delimited JSON, one trajectory per line.
// {layout_seed, instruction_tokens, goal, steps:[{obs, action, cell}]}

inline json trajectory_to_json(const Trajectory& traj) {
  json steps = json::array();
  for (const auto& s : traj.steps) {
    steps.push_back({{"obs", s.obs.features.data},
                     {"action", s.action},
                     {"cell", {s.cell.r, s.cell.c}}});
  }
  return json{{"layout_seed", traj.layout_seed},
              {"instruction_tokens", traj.instruction.tokens},
              {"goal", {traj.instruction.goal.r, traj.instruction.goal.c}},
              {"steps", steps}};
}

inline Trajectory trajectory_from_json(const json& j, int obs_rows) {
  Trajectory traj;
  traj.layout_seed = j.at("layout_seed").get<std::uint64_t>();
  traj.instruction.tokens = j.at("instruction_tokens").get<std::vector<int>>();
  traj.instruction.goal = {j.at("goal")[0].get<int>(), j.at("goal")[1].get<int>()};
  for (const auto& js : j.at("steps")) {
    TrajStep step;
    std::vector<double> flat = js.at("obs").get<std::vector<double>>();
    if (flat.size() % obs_rows != 0)
      throw std::runtime_error("dataset: obs length not divisible by K");
    step.obs.features = Tensor(obs_rows, flat.size() / obs_rows);
    step.obs.features.data = std::move(flat);
    step.action = js.at("action").get<int>();
    step.cell = {js.at("cell")[0].get<int>(), js.at("cell")[1].get<int>()};
    step.obs.position = step.cell;
    traj.steps.push_back(std::move(step));
  }
  // expert trajectories end at the goal; STOP rows keep end == last cell
  traj.end = traj.steps.empty() ? traj.instruction.goal : traj.steps.back().cell;
  if (!traj.steps.empty() && traj.steps.back().action != kStop)
    traj.end = traj.instruction.goal;
  return traj;
}

inline void save_dataset(const std::string& path, const Dataset& ds) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("dataset: cannot write " + path);
  for (const auto& traj : ds.trajectories) os << trajectory_to_json(traj).dump() << "\n";
}

inline Dataset load_dataset(const std::string& path, int obs_rows = kNumActions) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset: cannot open " + path);
  Dataset ds;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    ds.trajectories.push_back(trajectory_from_json(json::parse(line), obs_rows));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Env config <-> JSON (dataset meta and checkpoint headers)

inline json env_config_to_json(const EnvConfig& cfg) {
  return json{{"width", cfg.width},
              {"height", cfg.height},
              {"wall_density", cfg.wall_density},
              {"landmark_count", cfg.landmark_count},
              {"vocab_size", cfg.vocab_size},
              {"window_radius", cfg.window_radius},
              {"max_instruction_len", cfg.max_instruction_len},
              {"gen_instruction_len", cfg.gen_instruction_len}};
}

inline EnvConfig env_config_from_json(const json& j) {
  EnvConfig cfg;
  cfg.width = j.at("width").get<int>();
  cfg.height = j.at("height").get<int>();
  cfg.wall_density = j.at("wall_density").get<double>();
  cfg.landmark_count = j.at("landmark_count").get<int>();
  cfg.vocab_size = j.at("vocab_size").get<int>();
  cfg.window_radius = j.at("window_radius").get<int>();
  cfg.max_instruction_len = j.at("max_instruction_len").get<int>();
  if (j.contains("gen_instruction_len"))
    cfg.gen_instruction_len = j.at("gen_instruction_len").get<int>();
  return cfg;
}

// ---------------------------------------------------------------------------
// Run logs: line-delimited JSON, one record per epoch. Records deliberately
// avoid run identity (method, seed) so that runs with identical dynamics
// serialize identically.

inline json epoch_record_to_json(const EpochRecord& r) {
  json j{{"epoch", r.epoch},
         {"l_pi", r.l_pi},
         {"l_s", r.l_s},
         {"val_seen",
          {{"sr", r.val_seen.sr},
           {"spl", r.val_seen.spl},
           {"ne", r.val_seen.ne},
           {"ndtw", r.val_seen.ndtw}}},
         {"val_unseen",
          {{"sr", r.val_unseen.sr},
           {"spl", r.val_unseen.spl},
           {"ne", r.val_unseen.ne},
           {"ndtw", r.val_unseen.ndtw}}},
         {"sgld_aborts", r.sgld_aborts}};
  if (r.has_kl) j["forward_kl"] = r.forward_kl;
  return j;
}

inline EpochRecord epoch_record_from_json(const json& j) {
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.l_pi = j.at("l_pi").get<double>();
  r.l_s = j.at("l_s").get<double>();
  r.val_seen = {j.at("val_seen").at("sr").get<double>(), j.at("val_seen").at("spl").get<double>(),
                j.at("val_seen").at("ne").get<double>(),
                j.at("val_seen").at("ndtw").get<double>(), 0};
  r.val_unseen = {j.at("val_unseen").at("sr").get<double>(),
                  j.at("val_unseen").at("spl").get<double>(),
                  j.at("val_unseen").at("ne").get<double>(),
                  j.at("val_unseen").at("ndtw").get<double>(), 0};
  r.sgld_aborts = j.at("sgld_aborts").get<std::uint64_t>();
  if (j.contains("forward_kl")) {
    r.has_kl = true;
    r.forward_kl = j.at("forward_kl").get<double>();
  }
  return r;
}

inline std::string runlog_to_jsonl(const RunLog& log) {
  std::ostringstream os;
  for (const auto& r : log.records) os << epoch_record_to_json(r).dump() << "\n";
  return os.str();
}

inline void save_runlog(const std::string& path, const RunLog& log) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("runlog: cannot write " + path);
  os << runlog_to_jsonl(log);
}

inline RunLog load_runlog(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("runlog: cannot open " + path);
  RunLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    log.records.push_back(epoch_record_from_json(json::parse(line)));
  }
  return log;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path);
  os << text;
}

}  // namespace enp
