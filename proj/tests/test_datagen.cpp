#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "shellflow/datagen.hpp"
#include "shellflow/metrics.hpp"
#include "testing.hpp"

using namespace shellflow;
using namespace shellflow::testing;

TEST_CASE("sheet sizes and split pattern") {
  auto [mesh, grasp] = make_sheet(17, false);
  CHECK(mesh.vertex_count() == 289);
  CHECK(mesh.triangle_count() == 512);
  CHECK_NOTHROW(mesh.validate());
  CHECK(grasp.indices.size() == 2);
  // grasped corners: (0,0) and (1,0), a side of length 1
  CHECK((mesh.vertices[grasp.indices[0]] -
         mesh.vertices[grasp.indices[1]])
            .norm() == doctest::Approx(1.0));

  auto [mesh33, g33] = make_sheet(33, false);
  (void)g33;
  CHECK(mesh33.vertex_count() == 1089);

  const auto split = split_labels(34);
  int train = 0;
  for (int m = 0; m < 34; ++m) {
    CHECK(split[m] == ((m % 17) < 12 ? 0 : 1));
    train += split[m] == 0;
  }
  CHECK(train == 24);
}

TEST_CASE("holed sheet stays manifold") {
  auto [mesh, grasp] = make_sheet(17, true);
  (void)grasp;
  CHECK(mesh.vertex_count() < 289);
  CHECK_NOTHROW(mesh.validate());
}

TEST_CASE("ball is a closed manifold mesh with a top grasp") {
  auto [mesh, grasp] = make_ball(2);
  CHECK(mesh.vertex_count() == 162);
  CHECK(mesh.triangle_count() == 320);
  CHECK_NOTHROW(mesh.validate());
  // closed surface: V - E + F = 2, E = 3F/2
  CHECK(mesh.vertex_count() - 3 * mesh.triangle_count() / 2 +
            mesh.triangle_count() ==
        2);
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    CHECK(mesh.vertices[i].norm() == doctest::Approx(0.25));
    CHECK(mesh.vertices[i].z() <= mesh.vertices[grasp.indices[0]].z());
  }
}

TEST_CASE("trajectories behave per kind") {
  Eigen::VectorXd q0(6);
  q0 << 0, 0, 0, 1, 0, 0;
  const double dt = 1.0 / 60.0;
  SUBCASE("zero amplitude is constant") {
    const auto tr = make_trajectory(TrajectoryKind::PlusX, q0, 0.0, 1.0, dt,
                                    10);
    for (const auto& q : tr) CHECK((q - q0).norm() == 0.0);
  }
  SUBCASE("quarter period reaches the amplitude") {
    const int quarter = 15;  // period 1s at 60 Hz
    const auto tr =
        make_trajectory(TrajectoryKind::PlusX, q0, 0.2, 1.0, dt, quarter + 1);
    CHECK(tr[quarter][0] == doctest::Approx(0.2).epsilon(1e-12));
    const auto trm =
        make_trajectory(TrajectoryKind::MinusX, q0, 0.2, 1.0, dt, quarter + 1);
    CHECK(trm[quarter][0] == doctest::Approx(-0.2).epsilon(1e-12));
  }
  SUBCASE("rotation preserves inter-grasp distance") {
    const auto tr =
        make_trajectory(TrajectoryKind::PlusR, q0, 0.8, 1.0, dt, 40);
    for (const auto& q : tr)
      CHECK((q.head<3>() - q.tail<3>()).norm() ==
            doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("generate applies trajectory exactly and is deterministic") {
  auto [mesh, grasp] = make_sheet(5, false);
  const Adjacency adj = build_adjacency(mesh);
  SimConfig cfg;
  cfg.mass = Eigen::VectorXd::Constant(mesh.vertex_count(),
                                       0.5 / mesh.vertex_count());
  cfg.material = MaterialModel::mass_spring(mesh, adj);
  cfg.k_stretch = 200.0;
  cfg.k_bend = 2.0;
  Eigen::VectorXd q0(6);
  q0 << mesh.vertices[grasp.indices[0]], mesh.vertices[grasp.indices[1]];
  const auto traj =
      make_trajectory(TrajectoryKind::PlusZ, q0, 0.05, 1.0, cfg.dt, 20);
  const Dataset a = generate(mesh, grasp, cfg, traj, 20, 7);
  const Dataset b = generate(mesh, grasp, cfg, traj, 20, 7);
  REQUIRE(a.frames.size() == 20);
  for (int m = 0; m < 20; ++m) {
    CHECK((a.frames[m] - b.frames[m]).norm() == 0.0);  // bit identical
    for (size_t k = 0; k < grasp.indices.size(); ++k)
      CHECK((a.frames[m].segment<3>(3 * grasp.indices[k]) -
             traj[m].segment<3>(3 * k))
                .norm() == 0.0);
    if (m >= 2)
      CHECK(m_phys(a.frames[m - 2], a.frames[m - 1], a.frames[m], traj[m],
                   a.cfg) < a.cfg.newton_tol() * a.cfg.newton_tol());
  }
}

TEST_CASE("dataset save/load round trip") {
  auto [mesh, grasp] = make_sheet(4, false);
  const Adjacency adj = build_adjacency(mesh);
  SimConfig cfg;
  cfg.mass = Eigen::VectorXd::Constant(mesh.vertex_count(),
                                       0.5 / mesh.vertex_count());
  cfg.material = MaterialModel::fem_shell(mesh, adj);
  cfg.k_stretch = 100.0;
  cfg.obstacle = Sphere{{0.5, 0.5, -0.4}, 0.2};
  Eigen::VectorXd q0(6);
  q0 << mesh.vertices[grasp.indices[0]], mesh.vertices[grasp.indices[1]];
  const auto traj =
      make_trajectory(TrajectoryKind::PlusY, q0, 0.03, 0.8, cfg.dt, 8);
  const Dataset ds = generate(mesh, grasp, cfg, traj, 8, 3);

  const std::string dir = "dataset_roundtrip_test";
  save_dataset(dir, ds);
  const Dataset back = load_dataset(dir);
  std::filesystem::remove_all(dir);

  REQUIRE(back.frames.size() == ds.frames.size());
  for (size_t m = 0; m < ds.frames.size(); ++m)
    CHECK((back.frames[m] - ds.frames[m]).norm() == 0.0);
  CHECK(back.mesh.triangles == ds.mesh.triangles);
  CHECK(back.grasp.indices == ds.grasp.indices);
  CHECK(back.split == ds.split);
  CHECK(back.cfg.material.kind == MaterialKind::FemShell);
  CHECK(back.cfg.obstacle.has_value());
  CHECK(back.cfg.k_stretch == ds.cfg.k_stretch);
}

TEST_CASE("frames file format is stable") {
  std::vector<Eigen::VectorXd> frames = {Eigen::VectorXd::LinSpaced(6, 0, 5),
                                         Eigen::VectorXd::LinSpaced(6, 6, 11)};
  const std::string path = "frames_format_test.bin";
  save_frames(path, frames, 2);
  std::ifstream in(path, std::ios::binary);
  char magic[8];
  in.read(magic, 8);
  CHECK(std::string(magic, 8) == "SFLOFRM1");
  in.close();
  const auto back = load_frames(path);
  std::filesystem::remove(path);
  REQUIRE(back.size() == 2);
  CHECK((back[1] - frames[1]).norm() == 0.0);
}
