#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "enp/io.hpp"
#include "enp/trainer.hpp"

using namespace enp;

namespace {

EnvConfig tiny_env() {
  EnvConfig cfg;
  cfg.width = 5;
  cfg.height = 5;
  cfg.wall_density = 0.12;
  cfg.landmark_count = 3;
  cfg.vocab_size = 6;
  return cfg;
}

TrainConfig tiny_train(Method m) {
  TrainConfig tc;
  tc.method = m;
  tc.epochs = 2;
  tc.batch_size = 4;
  tc.lr = 0.1;
  tc.state_dim = 10;
  tc.emb_dim = 6;
  tc.proj_dim = 6;
  tc.aggregate_episodes = 6;
  tc.max_steps = 20;
  tc.seed = 5;
  return tc;
}

DatasetSplits tiny_data(const EnvConfig& cfg, int layouts = 4, int episodes = 2) {
  DatasetGenConfig gen;
  gen.train_layouts = layouts;
  gen.unseen_layouts = 2;
  gen.episodes_per_layout = episodes;
  gen.val_seen_episodes_per_layout = 1;
  gen.val_unseen_episodes_per_layout = 2;
  gen.max_steps = 20;
  return generate_dataset(cfg, gen, 11);
}

PolicyModel make_model(const TrainConfig& tc, const EnvConfig& env, std::uint64_t seed) {
  RngStream rng(seed);
  return PolicyModel::init(dims_from_config(tc, env), rng);
}

}  // namespace

TEST_CASE("bc loss of a uniform-logit model is T log K") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::BC);
  PolicyModel m = make_model(tc, env, 1);
  for (double& v : m.w_act.data) v = 0.0;
  m.b_act.data[0] = 0.0;
  DatasetSplits data = tiny_data(env);
  for (int i = 0; i < 3; ++i) {
    const Trajectory& traj = data.train.trajectories[i];
    double expected = traj.steps.size() * std::log(5.0);
    CHECK(bc_loss(m, traj) == Catch::Approx(expected).margin(1e-9));
  }
}

TEST_CASE("bc loss vanishes in the large-margin limit") {
  // handcrafted model: the observation's first feature (+1 for the labeled
  // action, -1 otherwise) is routed straight to the logit with a huge gain
  TrainConfig tc = tiny_train(Method::BC);
  PolicyDims d;
  d.D = 6;
  d.D_obs = 4;
  d.D_emb = 3;
  d.D_proj = 3;
  d.vocab = 4;
  RngStream rng(2);
  PolicyModel m = PolicyModel::init(d, rng);
  for (auto& [name, t] : m.params())
    for (double& v : t->data) v = 0.0;
  m.W_obs.at(0, 0) = 5.0;                   // obs feature 0 -> proj unit 0
  m.W_fuse.at(d.D_emb + 0, 0) = 30.0;       // proj unit 0 -> state column 0
  m.w_act.at(0, 0) = 30.0;                  // state column 0 -> logit
  Trajectory traj;
  traj.instruction.tokens = {1};
  for (int t = 0; t < 3; ++t) {
    TrajStep step;
    step.action = t % 2;
    step.obs.features = Tensor(d.K, d.D_obs);
    for (int k = 0; k < d.K; ++k) step.obs.features.at(k, 0) = k == step.action ? 1.0 : -1.0;
    traj.steps.push_back(step);
  }
  CHECK(bc_loss(m, traj) < 1e-3);
}

TEST_CASE("bc loss matches a straight-line cross-entropy oracle") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::BC);
  PolicyModel m = make_model(tc, env, 3);
  DatasetSplits data = tiny_data(env);
  const Trajectory& traj = data.train.trajectories[0];
  // independent: value-level encoder chain + explicit softmax
  double expected = 0.0;
  HistoryState h = HistoryState::initial(m.dims.D);
  for (const auto& step : traj.steps) {
    auto [s, h2] = encode_state(m, traj.instruction.tokens, step.obs, h);
    h = h2;
    auto p = softmax_values(action_logits(m, s));
    expected -= std::log(p[step.action]);
  }
  CHECK(bc_loss(m, traj) == Catch::Approx(expected).margin(1e-10));
}

TEST_CASE("aggregation with the expert as learner keeps labels equal to moves") {
  EnvConfig env = tiny_env();
  Layout l = generate_layout(0, env);
  int tok = l.landmarks.begin()->first;
  Instruction ins{{tok}, l.landmarks.at(tok)};
  Cell start = free_cells(l).back();
  auto expert_cb = [&](const Observation& obs) {
    return expert_action(l, obs.position, ins.goal);
  };
  // record the taken actions alongside
  std::vector<int> taken;
  auto recording = [&](const Observation& obs) {
    int a = expert_cb(obs);
    taken.push_back(a);
    return a;
  };
  Trajectory traj = aggregate_episode(l, ins, recording, 30, env, start);
  REQUIRE(traj.steps.size() == taken.size());
  for (std::size_t i = 0; i < taken.size(); ++i) CHECK(traj.steps[i].action == taken[i]);
}

TEST_CASE("aggregation of a constant-STOP learner labels the expert first move") {
  EnvConfig env = tiny_env();
  Layout l = generate_layout(1, env);
  int tok = l.landmarks.begin()->first;
  Instruction ins{{tok}, l.landmarks.at(tok)};
  Cell start = free_cells(l).back();
  if (start == ins.goal) start = free_cells(l).front();
  Trajectory traj = aggregate_episode(
      l, ins, [](const Observation&) { return kStop; }, 30, env, start);
  REQUIRE(traj.steps.size() == 1);
  CHECK(traj.steps[0].action == expert_action(l, start, ins.goal));
}

TEST_CASE("aggregation labels equal the BFS first move at every visited cell") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::DAGGER);
  PolicyModel m = make_model(tc, env, 4);
  std::vector<Layout> layouts;
  for (std::uint64_t s = 0; s < 20; ++s) layouts.push_back(generate_layout(s, env));
  RngStream env_rng(9);
  auto dplus = aggregate(m, layouts, env, 30, 25, env_rng);
  CHECK(dplus.size() == 30);
  for (const Trajectory& traj : dplus) {
    const Layout* l = nullptr;
    for (const auto& cand : layouts)
      if (cand.seed == traj.layout_seed) l = &cand;
    REQUIRE(l != nullptr);
    auto dist = bfs_distances(*l, traj.instruction.goal);
    for (const auto& step : traj.steps) {
      int a = step.action;
      CHECK(a == expert_action(*l, step.cell, traj.instruction.goal));
      if (a != kStop) {
        Cell next = move_cell(step.cell, a);
        CHECK(dist[next.r * l->width + next.c] ==
              dist[step.cell.r * l->width + step.cell.c] - 1);
      }
    }
  }
}

TEST_CASE("train_step gradient equals hand-assembled CE + contrastive gradients") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::ENP);
  tc.lambda_s = 0.7;
  PolicyModel m = make_model(tc, env, 6);
  DatasetSplits data = tiny_data(env);
  Trajectory traj = data.train.trajectories[0];
  traj.steps.resize(1);  // one-step trajectory
  SgldConfig sgld;
  sgld.eps = 0.5;
  sgld.noise_var = 0.0;
  sgld.iters = 1;
  MarginalStateMemory memory(100, 0.05);

  // replicate the sampler draw with an identical stream
  RngStream probe(derive_seed(77, 0));
  Tensor s0 = init_sample(memory, probe, m.dims.K, m.dims.D);
  SgldResult chain = sgld_chain(m, s0, sgld, probe);

  // hand-assembled gradients: two separate graphs
  PolicyGraph g_ce = PolicyGraph::from_model(m);
  backward(bc_loss_node(g_ce, traj));
  PolicyGraph g_ls = PolicyGraph::from_model(m);
  {
    auto [s, h] = encode_state(m, traj.instruction.tokens, traj.steps[0].obs,
                               HistoryState::initial(m.dims.D));
    backward(marginal_loss(g_ls, s.matrix, chain.state));
  }

  PolicyModel before = m;
  RngStream sgld_rng(derive_seed(77, 0));
  StepOutcome oc = train_step(m, {&traj}, memory, sgld, tc.lambda_s, tc.lr,
                              /*grad_clip=*/1e9, sgld_rng, true);
  (void)oc;
  auto grad_at = [](const PolicyGraph& g, const std::string& name, const Tensor& param,
                    std::size_t i) {
    const Tensor& grad = g.at(name)->grad;
    return grad.size() == param.size() ? grad.data[i] : 0.0;  // unreached leaf
  };
  for (auto& [name, t] : before.params()) {
    Tensor* after = nullptr;
    for (auto& [n2, t2] : m.params())
      if (n2 == name) after = t2;
    for (std::size_t i = 0; i < t->size(); ++i) {
      double g_total = grad_at(g_ce, name, *t, i) + tc.lambda_s * grad_at(g_ls, name, *t, i);
      double expected = t->data[i] - tc.lr * g_total;
      CHECK(std::abs(after->data[i] - expected) < 1e-10);
    }
  }
}

TEST_CASE("gradient assembly is linear in the two loss terms") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::ENP);
  PolicyModel m = make_model(tc, env, 7);
  DatasetSplits data = tiny_data(env);
  const Trajectory& traj = data.train.trajectories[1];
  RngStream rng(8);
  Tensor sample(m.dims.K, m.dims.D);
  for (double& v : sample.data) v = rng.uniform(-1.0, 1.0);
  const double lambda = 0.35;

  auto [s_val, h_val] = encode_state(m, traj.instruction.tokens, traj.steps[0].obs,
                                     HistoryState::initial(m.dims.D));
  PolicyGraph g_joint = PolicyGraph::from_model(m);
  {
    NodePtr l_pi = bc_loss_node(g_joint, traj);
    NodePtr l_s = marginal_loss(g_joint, s_val.matrix, sample);
    backward(add(l_pi, scalar_scale(l_s, lambda)));
  }
  PolicyGraph g_pi = PolicyGraph::from_model(m);
  backward(bc_loss_node(g_pi, traj));
  PolicyGraph g_s = PolicyGraph::from_model(m);
  backward(marginal_loss(g_s, s_val.matrix, sample));
  auto grad_at = [](const PolicyGraph& g, const std::string& name, const Tensor& param,
                    std::size_t i) {
    const Tensor& grad = g.at(name)->grad;
    return grad.size() == param.size() ? grad.data[i] : 0.0;
  };
  for (auto& [name, t] : m.params()) {
    for (std::size_t i = 0; i < t->size(); ++i) {
      double joint = grad_at(g_joint, name, *t, i);
      double parts = grad_at(g_pi, name, *t, i) + lambda * grad_at(g_s, name, *t, i);
      CHECK(std::abs(joint - parts) < 1e-10);
    }
  }
}

TEST_CASE("memory grows by the number of steps in the batch up to capacity") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::ENP);
  PolicyModel m = make_model(tc, env, 9);
  DatasetSplits data = tiny_data(env);
  std::vector<const Trajectory*> batch;
  int steps = 0;
  for (int i = 0; i < 3; ++i) {
    batch.push_back(&data.train.trajectories[i]);
    steps += static_cast<int>(data.train.trajectories[i].steps.size());
  }
  SgldConfig sgld;
  sgld.iters = 2;
  MarginalStateMemory memory(1000, 0.05);
  RngStream rng(10);
  train_step(m, batch, memory, sgld, 1.0, tc.lr, 10.0, rng, true);
  CHECK(static_cast<int>(memory.size()) == steps);
}

TEST_CASE("epochs 0 returns the initialized model and no records") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::BC);
  tc.epochs = 0;
  DatasetSplits data = tiny_data(env);
  TrainResult res = train(tc, SgldConfig{}, env, data);
  CHECK(res.log.records.empty());
  PolicyModel expected = make_model(tc, env, 0);
  RngSet rngs = RngSet::from_seed(tc.seed);
  PolicyModel init = PolicyModel::init(dims_from_config(tc, env), rngs.init);
  for (auto& [name, t] : init.params()) {
    Tensor* got = nullptr;
    for (auto& [n2, t2] : res.model.params())
      if (n2 == name) got = t2;
    CHECK(got->data == t->data);
  }
}

TEST_CASE("BC memorizes a single trajectory") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::BC);
  tc.epochs = 400;
  tc.batch_size = 1;
  tc.lr = 0.5;
  DatasetSplits data = tiny_data(env);
  DatasetSplits one;
  one.train.trajectories = {data.train.trajectories[0]};
  one.val_seen = one.train;
  one.val_unseen = one.train;
  TrainResult res = train(tc, SgldConfig{}, env, one);
  CHECK(res.log.records.back().l_pi < 0.01);
  CHECK(res.log.records.back().val_seen.sr == 1.0);
}

TEST_CASE("training is deterministic in (config, seed)") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::ENP);
  tc.epochs = 2;
  DatasetSplits data = tiny_data(env);
  TrainResult a = train(tc, SgldConfig{}, env, data);
  TrainResult b = train(tc, SgldConfig{}, env, data);
  CHECK(runlog_to_jsonl(a.log) == runlog_to_jsonl(b.log));
  tc.seed = 6;
  TrainResult c = train(tc, SgldConfig{}, env, data);
  CHECK(runlog_to_jsonl(a.log) != runlog_to_jsonl(c.log));
}

TEST_CASE("ENP with lambda_s=0 and beta=0 degenerates to BC exactly") {
  EnvConfig env = tiny_env();
  DatasetSplits data = tiny_data(env);
  TrainConfig bc = tiny_train(Method::BC);
  bc.epochs = 3;
  TrainConfig enp = tiny_train(Method::ENP);
  enp.epochs = 3;
  enp.lambda_s = 0.0;
  enp.beta = 0.0;
  TrainResult res_bc = train(bc, SgldConfig{}, env, data);
  TrainResult res_enp = train(enp, SgldConfig{}, env, data);
  REQUIRE(runlog_to_jsonl(res_bc.log) == runlog_to_jsonl(res_enp.log));
  for (auto& [name, t] : res_bc.model.params()) {
    Tensor* other = nullptr;
    for (auto& [n2, t2] : res_enp.model.params())
      if (n2 == name) other = t2;
    CHECK(t->data == other->data);
  }
}

TEST_CASE("dataset pool grows monotonically under aggregation") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::DAGGER);
  tc.epochs = 4;
  tc.aggregate_episodes = 3;
  DatasetSplits data = tiny_data(env);
  // aggregation adds aggregate_episodes per pass; observable through val
  // metrics only indirectly, so check the internal contract via aggregate()
  std::vector<Layout> layouts{generate_layout(0, env)};
  PolicyModel m = make_model(tc, env, 12);
  RngStream env_rng(13);
  std::size_t total = 0;
  for (int n = 1; n <= 4; ++n) {
    auto fresh = aggregate(m, layouts, env, tc.aggregate_episodes, tc.max_steps, env_rng);
    total += fresh.size();
    CHECK(total == static_cast<std::size_t>(n) * tc.aggregate_episodes);
  }
}

TEST_CASE("invalid methods and configs error before training") {
  EnvConfig env = tiny_env();
  DatasetSplits data = tiny_data(env);
  REQUIRE_THROWS_AS(parse_method("sac"), std::invalid_argument);
  TrainConfig bad = tiny_train(Method::ENP);
  bad.lambda_s = 11.0;
  REQUIRE_THROWS_AS(train(bad, SgldConfig{}, env, data), std::invalid_argument);
  TrainConfig bad2 = tiny_train(Method::ENP);
  bad2.beta = 1.5;
  REQUIRE_THROWS_AS(train(bad2, SgldConfig{}, env, data), std::invalid_argument);
  TrainConfig bad3 = tiny_train(Method::AIRL_TAB);
  bad3.tabular = false;
  REQUIRE_THROWS_AS(train(bad3, SgldConfig{}, env, data), std::invalid_argument);
}

TEST_CASE("predict_action is greedy with ties to the lowest id") {
  EnvConfig env = tiny_env();
  TrainConfig tc = tiny_train(Method::BC);
  PolicyModel m = make_model(tc, env, 14);
  for (double& v : m.w_act.data) v = 0.0;  // uniform logits
  Layout l = generate_layout(0, env);
  Observation obs = make_observation(l, free_cells(l)[0], kUp, env);
  Instruction ins{{0}, {0, 0}};
  auto [action, h] = predict_action(m, ins, obs, HistoryState::initial(m.dims.D));
  CHECK(action == 0);
  // argmax invariance under constant logit shifts
  PolicyModel m2 = make_model(tc, env, 15);
  auto [a1, h1] = predict_action(m2, ins, obs, HistoryState::initial(m2.dims.D));
  m2.b_act.data[0] += 5.5;
  auto [a2, h2] = predict_action(m2, ins, obs, HistoryState::initial(m2.dims.D));
  CHECK(a1 == a2);
  // chosen action minimizes the pair energy
  auto [s, hh] = encode_state(m2, ins.tokens, obs, HistoryState::initial(m2.dims.D));
  int argmin_e = 0;
  for (int k = 1; k < m2.dims.K; ++k)
    if (pair_energy(m2, s, k) < pair_energy(m2, s, argmin_e)) argmin_e = k;
  CHECK(a1 == argmin_e);
}

TEST_CASE("tabular runs report a decreasing forward KL") {
  EnvConfig env;
  env.width = 4;
  env.height = 4;
  env.wall_density = 0.1;
  env.landmark_count = 2;
  env.vocab_size = 5;
  TrainConfig tc = tiny_train(Method::BC);
  tc.tabular = true;
  tc.tab_layout_seed = 3;
  tc.tab_horizon = 5;
  tc.epochs = 60;
  tc.batch_size = 1;
  tc.lr = 0.4;
  tc.state_dim = 10;
  TrainResult res = train(tc, SgldConfig{}, env, DatasetSplits{});
  REQUIRE(res.log.records.size() == 60);
  REQUIRE(res.log.records.front().has_kl);
  CHECK(res.log.records.back().forward_kl < res.log.records.front().forward_kl);
}

TEST_CASE("graph reverse KL matches the oracle computation") {
  EnvConfig env;
  env.width = 4;
  env.height = 4;
  env.wall_density = 0.1;
  env.landmark_count = 2;
  env.vocab_size = 5;
  TrainConfig tc = tiny_train(Method::AIRL_TAB);
  tc.tabular = true;
  tc.tab_layout_seed = 3;
  tc.tab_horizon = 4;
  tc.state_dim = 8;
  OracleInstance inst = tabular_instance_from_config(tc, env);
  OccupancyTable expert_occ = occupancy(inst.mdp, expert_tabular_policy(inst), true);
  PolicyModel m = make_model(tc, env, 16);

  std::vector<double> log_expert(expert_occ.v.size());
  double z = 0.0;
  for (double v : expert_occ.v) z += v + kKlSmoothEps;
  for (std::size_t i = 0; i < expert_occ.v.size(); ++i)
    log_expert[i] = std::log(expert_occ.v[i] + kKlSmoothEps) - std::log(z);
  PolicyGraph g = PolicyGraph::from_model(m);
  double graph_val = reverse_kl_node(g, inst, log_expert)->value.data[0];

  OccupancyTable lifted = occupancy(inst.mdp, lift_policy(m, inst), true);
  double oracle_val = reverse_kl(lifted, expert_occ, true).kl;
  CHECK(graph_val == Catch::Approx(oracle_val).margin(1e-9));
}

TEST_CASE("AIRL-TAB training reduces its reverse-KL objective") {
  EnvConfig env;
  env.width = 4;
  env.height = 4;
  env.wall_density = 0.1;
  env.landmark_count = 2;
  env.vocab_size = 5;
  TrainConfig tc = tiny_train(Method::AIRL_TAB);
  tc.tabular = true;
  tc.tab_layout_seed = 3;
  tc.tab_horizon = 4;
  tc.epochs = 40;
  tc.lr = 0.4;
  tc.state_dim = 8;
  TrainResult res = train(tc, SgldConfig{}, env, DatasetSplits{});
  REQUIRE(res.log.records.size() == 40);
  CHECK(res.log.records.back().l_pi < res.log.records.front().l_pi);
  CHECK(res.log.records.front().has_kl);
}
