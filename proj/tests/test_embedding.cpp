#include <doctest.h>

#include <filesystem>
#include <random>

#include "shellflow/checkpoint.hpp"
#include "shellflow/embedding.hpp"
#include "testing.hpp"

using namespace shellflow;
using namespace shellflow::testing;

namespace {

// Small simulated dataset for the loss tests.
Dataset tiny_dataset(int n_frames, int n = 3) {
  auto [mesh, grasp] = make_sheet(n, false);
  const Adjacency adj = build_adjacency(mesh);
  SimConfig cfg;
  cfg.mass = Eigen::VectorXd::Constant(mesh.vertex_count(),
                                       0.5 / mesh.vertex_count());
  cfg.material = MaterialModel::mass_spring(mesh, adj);
  cfg.k_stretch = 100.0;
  cfg.k_bend = 1.0;
  Eigen::VectorXd q0(6);
  q0 << mesh.vertices[grasp.indices[0]], mesh.vertices[grasp.indices[1]];
  const auto traj = make_trajectory(TrajectoryKind::PlusZ, q0, 0.04, 0.7,
                                    cfg.dt, n_frames);
  return generate(mesh, grasp, cfg, traj, n_frames, 1);
}

double stage1_total(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                    const Dataset& ds, const PoissonSolver& solver,
                    const std::vector<int>& frames,
                    const std::vector<int>& triples, const TrainConfig& cfg) {
  return cfg.lambda_recon * loss_recon(ae, feats, frames, 0.0) +
         cfg.lambda_vert * loss_vert(ae, feats, ds, solver, frames, 0.0) +
         cfg.lambda_ephys * loss_ephys(ae, feats, ds, solver, triples, 0.0);
}

}  // namespace

TEST_CASE("autoencoder shapes and checkpoint round trip") {
  const Dataset ds = tiny_dataset(6);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  Autoencoder ae = Autoencoder::create(ref, 16, 5);
  const AcapFeature x = acap_forward(ref, ds.frames[3]);
  const Eigen::VectorXd z = ae.encode(x, nullptr);
  CHECK(z.size() == 16);
  const AcapFeature y = ae.decode(z, nullptr);
  CHECK(y.data.size() == x.data.size());

  save_checkpoint("ae_test.ckpt", ae.params(), ae.plan());
  nlohmann::json meta;
  ParamStore loaded = load_checkpoint("ae_test.ckpt", meta);
  std::filesystem::remove("ae_test.ckpt");
  CHECK(meta["latent_dim"] == 16);
  Autoencoder ae2 = Autoencoder::attach(ref, std::move(loaded), 16);
  CHECK((ae2.encode(x, nullptr) - z).norm() == 0.0);
}

TEST_CASE("loss_recon trivial cases") {
  const Dataset ds = tiny_dataset(5);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  Autoencoder ae = Autoencoder::create(ref, 8, 5);
  std::vector<AcapFeature> feats;
  for (const auto& p : ds.frames) feats.push_back(acap_forward(ref, p));
  const std::vector<int> frames = {0, 1, 2, 3, 4};
  // all-zero parameters: decoder output is zero -> loss = mean |x|^2
  for (int i = 0; i < ae.params().size(); ++i) ae.params().value(i).setZero();
  double expect = 0.0;
  for (int m : frames) expect += feats[m].data.squaredNorm() / frames.size();
  CHECK(loss_recon(ae, feats, frames, 0.0) ==
        doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("stage-1 loss gradient matches finite differences") {
  const Dataset ds = tiny_dataset(6);  // 9 vertices
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  Autoencoder ae = Autoencoder::create(ref, 8, 5);
  std::vector<AcapFeature> feats;
  for (const auto& p : ds.frames) feats.push_back(acap_forward(ref, p));

  TrainConfig cfg;
  cfg.lambda_recon = 1.0;
  cfg.lambda_vert = 1.0;
  cfg.lambda_ephys = 0.5;
  const std::vector<int> frames = {0, 1, 2, 3, 4, 5};
  const std::vector<int> triples = {2, 3, 4, 5};

  ae.params().zero_grads();
  loss_recon(ae, feats, frames, cfg.lambda_recon);
  loss_vert(ae, feats, ds, solver, frames, cfg.lambda_vert);
  loss_ephys(ae, feats, ds, solver, triples, cfg.lambda_ephys);

  // the ephys analytic gradient ignores the frame m-1/m-2 paths; compare
  // against FD of the severed objective: context reconstructions frozen.
  std::vector<Eigen::VectorXd> frozen(ds.frames.size());
  for (int m : frames) {
    const AcapFeature y = ae.decode(ae.encode(feats[m], nullptr), nullptr);
    frozen[m] = acap_inverse(y, ds.grasp_targets(m), solver);
  }
  auto severed_total = [&]() {
    double l = cfg.lambda_recon * loss_recon(ae, feats, frames, 0.0) +
               cfg.lambda_vert * loss_vert(ae, feats, ds, solver, frames, 0.0);
    for (int m : triples) {
      const AcapFeature y = ae.decode(ae.encode(feats[m], nullptr), nullptr);
      const Eigen::VectorXd p = acap_inverse(y, ds.grasp_targets(m), solver);
      l += cfg.lambda_ephys / triples.size() *
           physics_loss(frozen[m - 2], frozen[m - 1], p, ds.grasp_targets(m),
                        ds.cfg);
    }
    return l;
  };

  std::mt19937_64 rng(71);
  const double h = 1e-6;
  int checked = 0;
  for (int idx = 0; idx < ae.params().size(); ++idx) {
    auto& val = ae.params().value(idx);
    std::uniform_int_distribution<int> rr(0, static_cast<int>(val.rows()) - 1);
    std::uniform_int_distribution<int> cc(0, static_cast<int>(val.cols()) - 1);
    for (int probe = 0; probe < 4; ++probe) {
      const int r = rr(rng), c = cc(rng);
      const double save = val(r, c);
      val(r, c) = save + h;
      const double fp = severed_total();
      val(r, c) = save - h;
      const double fm = severed_total();
      val(r, c) = save;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = ae.params().grad(idx)(r, c);
      CHECK(std::abs(an - fd) < 1e-3 * std::max(1.0, std::abs(fd)));
      ++checked;
    }
  }
  CHECK(checked >= 40);
}

TEST_CASE("loss_vert grasped coordinates contribute nothing") {
  const Dataset ds = tiny_dataset(5);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  Autoencoder ae = Autoencoder::create(ref, 8, 5);
  std::vector<AcapFeature> feats;
  for (const auto& p : ds.frames) feats.push_back(acap_forward(ref, p));
  for (int m = 0; m < 5; ++m) {
    const AcapFeature y = ae.decode(ae.encode(feats[m], nullptr), nullptr);
    const Eigen::VectorXd p = acap_inverse(y, ds.grasp_targets(m), solver);
    for (size_t k = 0; k < ds.grasp.indices.size(); ++k)
      CHECK((p.segment<3>(3 * ds.grasp.indices[k]) -
             ds.frames[m].segment<3>(3 * ds.grasp.indices[k]))
                .norm() < 1e-11);
  }
}

TEST_CASE("train_stage1 runs, improves, and is deterministic") {
  const Dataset ds = tiny_dataset(20, 4);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.batch = 8;
  cfg.lr = 1e-3;
  cfg.lambda_ephys = 0.1;
  cfg.seed = 5;
  Autoencoder a = Autoencoder::create(ref, 8, cfg.seed);
  const auto ha = train_stage1(a, ds, ref, solver, cfg);
  REQUIRE(ha.size() == 8);
  CHECK(ha.back().train_recon < ha.front().train_recon);
  Autoencoder b = Autoencoder::create(ref, 8, cfg.seed);
  const auto hb = train_stage1(b, ds, ref, solver, cfg);
  for (size_t e = 0; e < ha.size(); ++e) {
    CHECK(ha[e].train_recon == hb[e].train_recon);  // bit identical
    CHECK(ha[e].test_vert == hb[e].test_vert);
  }
}

TEST_CASE("ik solve pins grasps and never increases the objective") {
  const Dataset ds = tiny_dataset(6);
  const ReferenceFrame ref = ReferenceFrame::build(ds.mesh);
  const PoissonSolver solver(ref, ds.grasp.indices);
  Autoencoder ae = Autoencoder::create(ref, 8, 5);
  const AcapFeature x = acap_forward(ref, ds.frames[4]);
  const Eigen::VectorXd z0 = ae.encode(x, nullptr);
  const Eigen::VectorXd q = ds.grasp_targets(4);

  const IkResult res = ik_solve(ae, solver, q, z0, ds.cfg, 50);
  for (size_t k = 0; k < ds.grasp.indices.size(); ++k)
    CHECK((res.positions.segment<3>(3 * ds.grasp.indices[k]) -
           q.segment<3>(3 * k))
              .norm() < 1e-11);
  // objective at the solution is no worse than at the start
  SimConfig elastic = ds.cfg;
  elastic.gravity.setZero();
  const Eigen::VectorXd p0 =
      acap_inverse(ae.decode(z0, nullptr), q, solver);
  CHECK(res.objective <= potential_energy(p0, elastic) + 1e-12);
  CHECK(std::isfinite(res.grad_norm));
}
