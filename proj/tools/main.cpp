// shellflow command-line surface: gen-data / train / eval / rollout / ik.
// One JSON config per run; every output directory gets a run_manifest.json
// recording the effective config, seed, paths, and timings.

#include <CLI11.hpp>
#include <Eigen/Core>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>

#include "shellflow/checkpoint.hpp"
#include "shellflow/latent.hpp"
#include "shellflow/metrics.hpp"

using namespace shellflow;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr const char* kBuildId = "shellflow 0.1.0";

json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return json::parse(in);
}

// FNV-1a over the canonical dump; cheap, stable content fingerprint.
std::string config_hash(const json& j) {
  const std::string s = j.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return buf;
}

void write_manifest(const std::string& dir, const std::string& command,
                    const json& effective_config, uint64_t seed,
                    const json& inputs, const json& outputs,
                    double seconds) {
  json m;
  m["command"] = command;
  m["build"] = kBuildId;
  m["config"] = effective_config;
  m["config_hash"] = config_hash(effective_config);
  m["seed"] = seed;
  m["inputs"] = inputs;
  m["outputs"] = outputs;
  m["seconds"] = seconds;
  fs::create_directories(dir);
  const std::string tmp = dir + "/run_manifest.json.tmp";
  {
    std::ofstream out(tmp);
    out << m.dump(2) << "\n";
  }
  fs::rename(tmp, dir + "/run_manifest.json");  // atomic on one filesystem
}

struct Timer {
  std::chrono::steady_clock::time_point t0 =
      std::chrono::steady_clock::now();
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                         t0)
        .count();
  }
};

TrainConfig train_config_from_json(const json& j, uint64_t seed) {
  TrainConfig cfg;
  cfg.lambda_recon = j.value("lambda_recon", cfg.lambda_recon);
  cfg.lambda_vert = j.value("lambda_vert", cfg.lambda_vert);
  cfg.lambda_ephys = j.value("lambda_ephys", cfg.lambda_ephys);
  cfg.lambda_sim = j.value("lambda_sim", cfg.lambda_sim);
  cfg.lambda_mphys = j.value("lambda_mphys", cfg.lambda_mphys);
  cfg.lr = j.value("lr", cfg.lr);
  cfg.epochs = j.value("epochs", cfg.epochs);
  cfg.batch = j.value("batch", cfg.batch);
  cfg.unroll = j.value("unroll", cfg.unroll);
  cfg.seed = seed;
  return cfg;
}

json train_config_to_json(const TrainConfig& cfg, const json& extra) {
  json j = extra;
  j["lambda_recon"] = cfg.lambda_recon;
  j["lambda_vert"] = cfg.lambda_vert;
  j["lambda_ephys"] = cfg.lambda_ephys;
  j["lambda_sim"] = cfg.lambda_sim;
  j["lambda_mphys"] = cfg.lambda_mphys;
  j["lr"] = cfg.lr;
  j["epochs"] = cfg.epochs;
  j["batch"] = cfg.batch;
  j["unroll"] = cfg.unroll;
  return j;
}

// Combined checkpoint: autoencoder tensors plus (optionally) mlp tensors in
// one store; meta records which components are present and their plans.
ParamStore merge_stores(const ParamStore& a, const ParamStore* b) {
  ParamStore out;
  for (int i = 0; i < a.size(); ++i) {
    const int idx = out.add(a.name(i), static_cast<int>(a.value(i).rows()),
                            static_cast<int>(a.value(i).cols()));
    out.value(idx) = a.value(i);
  }
  if (b)
    for (int i = 0; i < b->size(); ++i) {
      const int idx = out.add(b->name(i),
                              static_cast<int>(b->value(i).rows()),
                              static_cast<int>(b->value(i).cols()));
      out.value(idx) = b->value(i);
    }
  return out;
}

ParamStore filter_store(const ParamStore& all, bool mlp_part) {
  ParamStore out;
  for (int i = 0; i < all.size(); ++i) {
    const bool is_mlp = all.name(i).rfind("mlp", 0) == 0;
    if (is_mlp != mlp_part) continue;
    const int idx = out.add(all.name(i),
                            static_cast<int>(all.value(i).rows()),
                            static_cast<int>(all.value(i).cols()));
    out.value(idx) = all.value(i);
  }
  return out;
}

struct LoadedModels {
  Autoencoder ae;
  LatentMLP mlp;  // valid only when has_mlp
  bool has_mlp = false;
  json meta;
};

LoadedModels load_models(const std::string& path, const ReferenceFrame& ref) {
  json meta;
  ParamStore all = load_checkpoint(path, meta);
  LoadedModels out{Autoencoder::attach(
                       ref, filter_store(all, false),
                       meta.at("autoencoder").at("latent_dim").get<int>()),
                   LatentMLP{}, false, meta};
  if (meta.contains("mlp")) {
    const json& mp = meta["mlp"];
    out.mlp = LatentMLP::attach(filter_store(all, true),
                                mp.at("latent_dim").get<int>(),
                                mp.at("grasp_dim").get<int>(),
                                mp.at("hidden").get<int>(),
                                mp.at("n_hidden").get<int>());
    out.has_mlp = true;
  }
  return out;
}

std::vector<std::pair<int, int>> contiguous_runs(const std::vector<int>& split,
                                                 int label) {
  std::vector<std::pair<int, int>> runs;  // (start, length)
  int start = -1;
  const int n = static_cast<int>(split.size());
  for (int m = 0; m <= n; ++m) {
    const bool in = m < n && split[m] == label;
    if (in && start < 0) start = m;
    if (!in && start >= 0) {
      runs.push_back({start, m - start});
      start = -1;
    }
  }
  return runs;
}

struct SplitMetrics {
  double rms, sted, phys;
};

// m_rms over the split's frames; m_sted averaged over the split's
// contiguous runs (5 consecutive frames in every 17 for the test split);
// m_phys over triples inside runs.
SplitMetrics split_metrics(const Dataset& ds, const Adjacency& adj,
                           const std::vector<Eigen::VectorXd>& candidate,
                           int label) {
  const auto runs = contiguous_runs(ds.split, label);
  SequencePair flat;
  double sted_acc = 0.0;
  int sted_runs = 0;
  double phys_acc = 0.0;
  int phys_n = 0;
  for (auto [start, len] : runs) {
    SequencePair run;
    for (int m = start; m < start + len; ++m) {
      run.reference.push_back(ds.frames[m]);
      run.candidate.push_back(candidate[m]);
      flat.reference.push_back(ds.frames[m]);
      flat.candidate.push_back(candidate[m]);
    }
    if (len >= 2) {
      sted_acc += m_sted(run, adj);
      ++sted_runs;
    }
    for (int m = start + 2; m < start + len; ++m) {
      phys_acc += m_phys(candidate[m - 2], candidate[m - 1], candidate[m],
                         ds.grasp_targets(m), ds.cfg);
      ++phys_n;
    }
  }
  SplitMetrics out;
  out.rms = flat.reference.empty() ? 0.0 : m_rms(flat);
  out.sted = sted_runs ? sted_acc / sted_runs : 0.0;
  out.phys = phys_n ? phys_acc / phys_n : 0.0;
  return out;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir,
                 uint64_t seed) {
  Timer timer;
  const json user = load_json(config_path);

  TriMesh mesh;
  GraspSet grasp;
  const json mesh_cfg = user.value("mesh", json{{"kind", "sheet"}});
  const std::string kind = mesh_cfg.value("kind", "sheet");
  if (kind == "sheet") {
    std::tie(mesh, grasp) = make_sheet(mesh_cfg.value("n", 17),
                                       mesh_cfg.value("holes", false));
  } else if (kind == "ball") {
    std::tie(mesh, grasp) = make_ball(mesh_cfg.value("subdiv", 2));
  } else {
    throw std::runtime_error("unknown mesh kind: " + kind);
  }

  SimConfig cfg = sim_config_from_json(user.value("sim", json::object()),
                                       mesh);
  cfg.grasp_indices = grasp.indices;

  const json tj = user.value("trajectory", json{{"kind", "+X"}});
  const int n_frames = user.value("n_frames", 136);
  Eigen::VectorXd q0(3 * grasp.indices.size());
  for (size_t k = 0; k < grasp.indices.size(); ++k)
    q0.segment<3>(3 * k) = mesh.vertices[grasp.indices[k]];
  const auto traj = make_trajectory(
      trajectory_kind_from_string(tj.value("kind", "+X")), q0,
      tj.value("amplitude", 0.2), tj.value("period", 2.0), cfg.dt, n_frames);

  Dataset ds = generate(mesh, grasp, cfg, traj, n_frames, seed);
  ds.provenance["config"] = user;
  ds.provenance["trajectory"] = tj;
  save_dataset(out_dir, ds);

  json effective = user;
  effective["mesh"] = mesh_cfg;
  effective["trajectory"] = tj;
  effective["n_frames"] = n_frames;
  effective["sim"] = sim_config_to_json(ds.cfg);
  write_manifest(out_dir, "gen-data", effective, seed,
                 {{"config", config_path}}, {{"dataset", out_dir}},
                 timer.seconds());
  return 0;
}

int cmd_train(int stage, const std::string& dataset_dir,
              const std::string& checkpoint_in, const std::string& config_path,
              const std::string& out_dir, uint64_t seed) {
  Timer timer;
  const json user = config_path.empty() ? json::object()
                                        : load_json(config_path);
  const Dataset ds = load_dataset(dataset_dir);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  TrainConfig cfg = train_config_from_json(user, seed);
  const int latent_dim = user.value("latent_dim", 128);
  const int hidden = user.value("hidden", 256);
  const int n_hidden = user.value("n_hidden", 3);
  const int grasp_dim = 3 * static_cast<int>(ds.grasp.indices.size());

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/history.csv");
  json meta;
  ParamStore to_save;

  if (stage == 1) {
    Autoencoder ae = Autoencoder::create(ref, latent_dim, seed);
    const auto history = train_stage1(ae, ds, ref, solver, cfg);
    csv << "epoch,split,recon,vert,ephys\n";
    for (const auto& r : history) {
      csv << r.epoch << ",train," << r.train_recon << "," << r.train_vert
          << "," << r.train_ephys << "\n";
      csv << r.epoch << ",test," << r.test_recon << "," << r.test_vert << ","
          << r.test_ephys << "\n";
    }
    meta["autoencoder"] = ae.plan();
    to_save = merge_stores(ae.params(), nullptr);
  } else if (stage == 2) {
    if (checkpoint_in.empty())
      throw std::runtime_error("stage 2 needs --checkpoint with a stage-1 "
                               "checkpoint");
    LoadedModels models = load_models(checkpoint_in, ref);
    LatentMLP mlp = LatentMLP::create(models.ae.latent_dim(), grasp_dim,
                                      hidden, n_hidden, seed);
    const auto history =
        train_stage2(mlp, models.ae, solver, ds, ref, cfg);
    csv << "epoch,split,sim,mphys\n";
    for (const auto& r : history) {
      csv << r.epoch << ",train," << r.train_sim << "," << r.train_mphys
          << "\n";
      csv << r.epoch << ",test," << r.test_sim << "," << r.test_mphys << "\n";
    }
    meta["autoencoder"] = models.ae.plan();
    meta["mlp"] = mlp.plan();
    to_save = merge_stores(models.ae.params(), &mlp.params());
  } else if (stage == 3) {
    if (checkpoint_in.empty())
      throw std::runtime_error("stage 3 needs --checkpoint with a stage-2 "
                               "checkpoint");
    LoadedModels models = load_models(checkpoint_in, ref);
    if (!models.has_mlp)
      throw std::runtime_error("stage 3 checkpoint has no mlp component");
    const auto history =
        finetune_stage3(models.ae, models.mlp, solver, ds, ref, cfg);
    csv << "epoch,split,recon,vert,ephys,sim\n";
    for (const auto& r : history) {
      csv << r.epoch << ",train," << r.train_recon << "," << r.train_vert
          << "," << r.train_ephys << "," << r.train_sim << "\n";
      csv << r.epoch << ",test," << r.test_recon << "," << r.test_vert << ","
          << r.test_ephys << "," << r.test_sim << "\n";
    }
    meta["autoencoder"] = models.ae.plan();
    meta["mlp"] = models.mlp.plan();
    to_save = merge_stores(models.ae.params(), &models.mlp.params());
  } else {
    throw std::runtime_error("--stage must be 1, 2 or 3");
  }
  csv.close();

  const json effective = train_config_to_json(
      cfg, {{"latent_dim", latent_dim}, {"hidden", hidden},
            {"n_hidden", n_hidden}, {"stage", stage}});
  meta["train_config"] = effective;
  meta["seed"] = seed;
  meta["stage"] = stage;
  const std::string ckpt = out_dir + "/checkpoint.ckpt";
  save_checkpoint(ckpt, to_save, meta);
  write_manifest(out_dir, "train", effective, seed,
                 {{"dataset", dataset_dir},
                  {"config", config_path},
                  {"checkpoint_in", checkpoint_in}},
                 {{"checkpoint", ckpt},
                  {"history", out_dir + "/history.csv"}},
                 timer.seconds());
  return 0;
}

int cmd_eval(const std::string& dataset_dir, const std::string& checkpoint,
             const std::string& out_dir, uint64_t seed) {
  Timer timer;
  const Dataset ds = load_dataset(dataset_dir);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  LoadedModels models = load_models(checkpoint, ref);
  const int N = static_cast<int>(ds.frames.size());

  // candidate A: per-frame autoencoder reconstruction
  std::vector<Eigen::VectorXd> recon(N);
  std::vector<AcapFeature> feats(N);
  for (int m = 0; m < N; ++m) {
    feats[m] = acap_forward(ref, ds.frames[m]);
    const AcapFeature y =
        models.ae.decode(models.ae.encode(feats[m], nullptr), nullptr);
    recon[m] = acap_inverse(y, ds.grasp_targets(m), solver);
  }

  fs::create_directories(out_dir);
  std::ofstream csv(out_dir + "/metrics.csv");
  csv << "dataset,method,split,m_rms,m_sted,m_phys\n";
  const Adjacency adj = build_adjacency(ds.mesh);
  const std::string name = fs::path(dataset_dir).filename().string();
  auto emit = [&](const std::string& method,
                  const std::vector<Eigen::VectorXd>& cand) {
    for (int label : {0, 1}) {
      const SplitMetrics sm = split_metrics(ds, adj, cand, label);
      csv << name << "," << method << ","
          << (label == 0 ? "train" : "test") << "," << 1000.0 * sm.rms
          << "," << sm.sted << "," << sm.phys << "\n";
    }
  };
  emit("recon", recon);

  if (models.has_mlp) {
    // candidate B: 3-frame prediction from ground-truth context
    const LatentContext ctx = build_latent_context(models.ae, ref, ds);
    std::vector<Eigen::VectorXd> pred = ds.frames;
    for (int m = 2; m < N; ++m) {
      const Eigen::VectorXd z =
          mlp_step(models.mlp, ctx.z[m - 2], ctx.z[m - 1], ctx.q_rel[m]);
      pred[m] = acap_inverse(models.ae.decode(z, nullptr), ctx.q_abs[m],
                             solver);
    }
    emit("predict3", pred);
  }
  csv.close();
  write_manifest(out_dir, "eval", json::object(), seed,
                 {{"dataset", dataset_dir}, {"checkpoint", checkpoint}},
                 {{"metrics", out_dir + "/metrics.csv"}}, timer.seconds());
  return 0;
}

int cmd_rollout(const std::string& dataset_dir, const std::string& checkpoint,
                int n_frames, const std::string& out_dir, uint64_t seed) {
  Timer timer;
  const Dataset ds = load_dataset(dataset_dir);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  LoadedModels models = load_models(checkpoint, ref);
  if (!models.has_mlp)
    throw std::runtime_error("rollout needs a checkpoint with an mlp");
  if (n_frames <= 0) n_frames = static_cast<int>(ds.frames.size());
  if (n_frames > static_cast<int>(ds.frames.size()))
    throw std::runtime_error("--frames exceeds the dataset trajectory");

  const LatentContext ctx = build_latent_context(models.ae, ref, ds);
  const RolloutResult learned =
      rollout_latent(models.mlp, models.ae, solver, ctx.z[0], ctx.z[1],
                     ctx.q_abs, ctx.q_rel, n_frames);

  // ground-truth simulator over the same horizon, for the timing table
  Timer sim_timer;
  SimState st{ds.frames[0], ds.frames[1]};
  for (int m = 2; m < n_frames; ++m) {
    const Eigen::VectorXd p = step(st, ds.grasp_targets(m), ds.cfg);
    st.p_prev2 = st.p_prev1;
    st.p_prev1 = p;
  }
  const double sim_seconds = sim_timer.seconds();

  Dataset out = ds;
  out.frames.resize(2);
  for (const auto& f : learned.frames) out.frames.push_back(f);
  out.split = split_labels(static_cast<int>(out.frames.size()));
  out.provenance = {{"kind", "latent_rollout"},
                    {"checkpoint", checkpoint},
                    {"n_frames", n_frames}};
  save_dataset(out_dir + "/prediction", out);

  std::ofstream csv(out_dir + "/timing.csv");
  csv << "method,frames,seconds\n";
  csv << "latent," << n_frames << "," << learned.seconds << "\n";
  csv << "simulator," << n_frames << "," << sim_seconds << "\n";
  csv.close();

  write_manifest(out_dir, "rollout", {{"n_frames", n_frames}}, seed,
                 {{"dataset", dataset_dir}, {"checkpoint", checkpoint}},
                 {{"prediction", out_dir + "/prediction"},
                  {"timing", out_dir + "/timing.csv"},
                  {"speedup", sim_seconds / std::max(1e-12, learned.seconds)}},
                 timer.seconds());
  return 0;
}

int cmd_ik(const std::string& dataset_dir, const std::string& checkpoint,
           const std::string& targets_path, const std::string& out_dir,
           uint64_t seed) {
  Timer timer;
  const Dataset ds = load_dataset(dataset_dir);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  LoadedModels models = load_models(checkpoint, ref);

  const json tj = load_json(targets_path);
  const auto qv = tj.at("targets").get<std::vector<double>>();
  if (qv.size() != 3 * ds.grasp.indices.size())
    throw std::runtime_error("targets length must be 3 * |grasp|");
  Eigen::VectorXd q(qv.size());
  for (size_t i = 0; i < qv.size(); ++i) q[i] = qv[i];

  const int init_frame = tj.value("init_frame", 0);
  const Eigen::VectorXd z0 = models.ae.encode(
      acap_forward(ref, ds.frames.at(init_frame)), nullptr);
  const IkResult res =
      ik_solve(models.ae, solver, q, z0, ds.cfg, tj.value("max_iters", 500));

  TriMesh mesh = ds.mesh;
  mesh.set_positions(res.positions);
  fs::create_directories(out_dir);
  save_obj(out_dir + "/ik.obj", mesh);
  write_manifest(out_dir, "ik",
                 {{"targets", targets_path},
                  {"init_frame", init_frame},
                  {"objective", res.objective},
                  {"grad_norm", res.grad_norm},
                  {"iterations", res.iterations}},
                 seed, {{"dataset", dataset_dir}, {"checkpoint", checkpoint}},
                 {{"mesh", out_dir + "/ik.obj"}}, timer.seconds());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* threads = std::getenv("SHELLFLOW_THREADS"))
    Eigen::setNbThreads(std::max(1, std::atoi(threads)));

  CLI::App app{"thin-shell simulation and reduced-order learning toolkit"};
  app.require_subcommand(1);

  std::string config, dataset, checkpoint, out;
  uint64_t seed = 0;
  int stage = 1, frames = 0;

  auto* gen = app.add_subcommand("gen-data", "simulate a dataset");
  gen->add_option("--config", config)->required();
  gen->add_option("--out", out)->required();
  gen->add_option("--seed", seed);

  auto* train = app.add_subcommand("train", "run one training stage");
  train->add_option("--stage", stage)->check(CLI::Range(1, 3))->required();
  train->add_option("--dataset", dataset)->required();
  train->add_option("--config", config);
  train->add_option("--checkpoint", checkpoint);
  train->add_option("--out", out)->required();
  train->add_option("--seed", seed);

  auto* ev = app.add_subcommand("eval", "metrics table for a checkpoint");
  ev->add_option("--dataset", dataset)->required();
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--out", out)->required();
  ev->add_option("--seed", seed);

  auto* roll = app.add_subcommand("rollout", "free-running latent rollout");
  roll->add_option("--dataset", dataset)->required();
  roll->add_option("--checkpoint", checkpoint)->required();
  roll->add_option("--frames", frames);
  roll->add_option("--out", out)->required();
  roll->add_option("--seed", seed);

  auto* ik = app.add_subcommand("ik", "latent-space inverse kinematics");
  ik->add_option("--dataset", dataset)->required();
  ik->add_option("--checkpoint", checkpoint)->required();
  ik->add_option("--config", config)->required();
  ik->add_option("--out", out)->required();
  ik->add_option("--seed", seed);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << json{{"error", e.what()}, {"kind", "bad-args"}}.dump()
              << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config, out, seed);
    if (train->parsed())
      return cmd_train(stage, dataset, checkpoint, config, out, seed);
    if (ev->parsed()) return cmd_eval(dataset, checkpoint, out, seed);
    if (roll->parsed())
      return cmd_rollout(dataset, checkpoint, frames, out, seed);
    if (ik->parsed()) return cmd_ik(dataset, checkpoint, config, out, seed);
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}, {"kind", "runtime"}}.dump()
              << "\n";
    return 1;
  }
  return 0;
}
