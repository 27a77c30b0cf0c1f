#include "shellflow/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>

namespace shellflow {

using nlohmann::json;

std::vector<int> split_labels(int n_frames) {
  std::vector<int> labels(n_frames);
  for (int m = 0; m < n_frames; ++m) labels[m] = (m % 17) < 12 ? 0 : 1;
  return labels;
}

Eigen::VectorXd Dataset::grasp_targets(int frame) const {
  const int ng = static_cast<int>(grasp.indices.size());
  Eigen::VectorXd q(3 * ng);
  for (int k = 0; k < ng; ++k)
    q.segment<3>(3 * k) = frames[frame].segment<3>(3 * grasp.indices[k]);
  return q;
}

std::pair<TriMesh, GraspSet> make_sheet(int n, bool holes) {
  if (n < 3) throw MeshError("sheet resolution must be >= 3");
  const double h = 1.0 / (n - 1);
  TriMesh mesh;
  std::vector<int> remap(n * n, -1);
  const int block = (n - 1) / 4;
  const int lo = (n - block) / 2, hi = lo + block;  // removed index range
  for (int j = 0; j < n; ++j)
    for (int i = 0; i < n; ++i) {
      if (holes && i >= lo && i < hi && j >= lo && j < hi) continue;
      remap[j * n + i] = mesh.vertex_count();
      mesh.vertices.push_back({i * h, j * h, 0.0});
    }
  auto add_tri = [&](int a, int b, int c) {
    if (remap[a] >= 0 && remap[b] >= 0 && remap[c] >= 0)
      mesh.triangles.push_back({remap[a], remap[b], remap[c]});
  };
  for (int j = 0; j < n - 1; ++j)
    for (int i = 0; i < n - 1; ++i) {
      const int a = j * n + i, b = j * n + i + 1;
      const int c = (j + 1) * n + i, d = (j + 1) * n + i + 1;
      add_tri(a, b, d);
      add_tri(a, d, c);
    }
  GraspSet grasp;
  grasp.indices = {remap[0], remap[n - 1]};  // two adjacent corners
  return {mesh, grasp};
}

std::pair<TriMesh, GraspSet> make_ball(int subdiv) {
  const double phi = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> verts = {
      {-1, phi, 0}, {1, phi, 0},  {-1, -phi, 0}, {1, -phi, 0},
      {0, -1, phi}, {0, 1, phi},  {0, -1, -phi}, {0, 1, -phi},
      {phi, 0, -1}, {phi, 0, 1},  {-phi, 0, -1}, {-phi, 0, 1}};
  std::vector<std::array<int, 3>> tris = {
      {0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
      {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
      {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
      {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (auto& v : verts) v.normalize();

  for (int s = 0; s < subdiv; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      verts.push_back((verts[a] + verts[b]).normalized());
      const int idx = static_cast<int>(verts.size()) - 1;
      midpoint[key] = idx;
      return idx;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& t : tris) {
      const int ab = mid(t[0], t[1]), bc = mid(t[1], t[2]),
                ca = mid(t[2], t[0]);
      next.push_back({t[0], ab, ca});
      next.push_back({t[1], bc, ab});
      next.push_back({t[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    tris = std::move(next);
  }

  TriMesh mesh;
  const double radius = 0.25;
  for (const auto& v : verts) mesh.vertices.push_back(radius * v);
  mesh.triangles = tris;

  int top = 0;
  for (int i = 1; i < mesh.vertex_count(); ++i)
    if (mesh.vertices[i].z() > mesh.vertices[top].z()) top = i;
  GraspSet grasp;
  grasp.indices = {top};
  return {mesh, grasp};
}

TrajectoryKind trajectory_kind_from_string(const std::string& s) {
  if (s == "+X") return TrajectoryKind::PlusX;
  if (s == "-X") return TrajectoryKind::MinusX;
  if (s == "+Y") return TrajectoryKind::PlusY;
  if (s == "-Y") return TrajectoryKind::MinusY;
  if (s == "+Z") return TrajectoryKind::PlusZ;
  if (s == "-Z") return TrajectoryKind::MinusZ;
  if (s == "+R") return TrajectoryKind::PlusR;
  if (s == "-R") return TrajectoryKind::MinusR;
  throw std::invalid_argument("unknown trajectory kind: " + s);
}

std::vector<Eigen::VectorXd> make_trajectory(TrajectoryKind kind,
                                             const Eigen::VectorXd& q0,
                                             double amplitude, double period,
                                             double dt, int n_frames) {
  if (period <= 0.0) throw std::invalid_argument("period must be > 0");
  const int ng = static_cast<int>(q0.size() / 3);
  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  for (int k = 0; k < ng; ++k) centroid += q0.segment<3>(3 * k);
  centroid /= ng;

  std::vector<Eigen::VectorXd> traj(n_frames);
  for (int m = 0; m < n_frames; ++m) {
    const double s = amplitude * std::sin(2.0 * M_PI * m * dt / period);
    Eigen::VectorXd q = q0;
    switch (kind) {
      case TrajectoryKind::PlusX:
      case TrajectoryKind::MinusX: {
        const double d = kind == TrajectoryKind::PlusX ? s : -s;
        for (int k = 0; k < ng; ++k) q[3 * k + 0] += d;
        break;
      }
      case TrajectoryKind::PlusY:
      case TrajectoryKind::MinusY: {
        const double d = kind == TrajectoryKind::PlusY ? s : -s;
        for (int k = 0; k < ng; ++k) q[3 * k + 1] += d;
        break;
      }
      case TrajectoryKind::PlusZ:
      case TrajectoryKind::MinusZ: {
        const double d = kind == TrajectoryKind::PlusZ ? s : -s;
        for (int k = 0; k < ng; ++k) q[3 * k + 2] += d;
        break;
      }
      case TrajectoryKind::PlusR:
      case TrajectoryKind::MinusR: {
        const double angle = kind == TrajectoryKind::PlusR ? s : -s;
        const Eigen::Matrix3d rot =
            Eigen::AngleAxisd(angle, Eigen::Vector3d::UnitZ())
                .toRotationMatrix();
        for (int k = 0; k < ng; ++k)
          q.segment<3>(3 * k) =
              centroid + rot * (q0.segment<3>(3 * k) - centroid);
        break;
      }
    }
    traj[m] = q;
  }
  return traj;
}

Dataset generate(const TriMesh& mesh, const GraspSet& grasp,
                 const SimConfig& cfg,
                 const std::vector<Eigen::VectorXd>& trajectory, int n_frames,
                 uint64_t seed) {
  if (static_cast<int>(trajectory.size()) < n_frames)
    throw SimError("trajectory shorter than frame count");
  if (n_frames < 2) throw SimError("need at least 2 frames");

  Dataset ds;
  ds.mesh = mesh;
  ds.cfg = cfg;
  ds.cfg.grasp_indices = grasp.indices;
  ds.grasp = grasp;
  ds.grasp.trajectory = trajectory;

  Eigen::VectorXd rest = mesh.positions();
  Eigen::VectorXd p0 = rest, p1 = rest;
  apply_grasp(p0, trajectory[0], ds.cfg);
  apply_grasp(p1, trajectory[1], ds.cfg);
  ds.frames.push_back(p0);
  ds.frames.push_back(p1);

  SimState st{p0, p1};
  for (int m = 2; m < n_frames; ++m) {
    Eigen::VectorXd p;
    try {
      p = step(st, trajectory[m], ds.cfg);
    } catch (const SimError& e) {
      throw SimError("frame " + std::to_string(m) + ": " + e.what());
    }
    ds.frames.push_back(p);
    st.p_prev2 = st.p_prev1;
    st.p_prev1 = p;
  }
  ds.split = split_labels(n_frames);
  ds.provenance = {{"seed", seed}, {"n_frames", n_frames}};
  return ds;
}

json sim_config_to_json(const SimConfig& cfg) {
  json j;
  j["dt"] = cfg.dt;
  j["total_mass"] = cfg.mass.sum();
  j["gravity"] = {cfg.gravity.x(), cfg.gravity.y(), cfg.gravity.z()};
  j["material"] =
      cfg.material.kind == MaterialKind::MassSpring ? "mass_spring"
                                                    : "fem_shell";
  j["grasp_indices"] = cfg.grasp_indices;
  j["k_stretch"] = cfg.k_stretch;
  j["k_bend"] = cfg.k_bend;
  j["k_collision"] = cfg.k_collision;
  j["collision_margin"] = cfg.collision_margin;
  j["max_newton"] = cfg.max_newton;
  if (cfg.obstacle) {
    j["obstacle"] = {{"center",
                      {cfg.obstacle->center.x(), cfg.obstacle->center.y(),
                       cfg.obstacle->center.z()}},
                     {"radius", cfg.obstacle->radius}};
  }
  return j;
}

SimConfig sim_config_from_json(const json& j, const TriMesh& mesh) {
  SimConfig cfg;
  const int K = mesh.vertex_count();
  cfg.dt = j.value("dt", 1.0 / 60.0);
  const double total_mass = j.value("total_mass", 0.5);
  cfg.mass = Eigen::VectorXd::Constant(K, total_mass / K);
  if (j.contains("gravity")) {
    auto g = j["gravity"];
    cfg.gravity = {g[0].get<double>(), g[1].get<double>(), g[2].get<double>()};
  }
  cfg.k_stretch = j.value("k_stretch", 5000.0);
  cfg.k_bend = j.value("k_bend", 50.0);
  cfg.k_collision = j.value("k_collision", 1e4);
  cfg.collision_margin = j.value("collision_margin", 1e-3);
  cfg.max_newton = j.value("max_newton", 50);
  cfg.grasp_indices = j.value("grasp_indices", std::vector<int>{});
  const Adjacency adj = build_adjacency(mesh);
  const std::string mat = j.value("material", "mass_spring");
  if (mat == "mass_spring")
    cfg.material = MaterialModel::mass_spring(mesh, adj);
  else if (mat == "fem_shell")
    cfg.material = MaterialModel::fem_shell(mesh, adj);
  else
    throw SimError("unknown material model: " + mat);
  if (j.contains("obstacle")) {
    auto o = j["obstacle"];
    auto c = o["center"];
    cfg.obstacle = Sphere{{c[0].get<double>(), c[1].get<double>(),
                           c[2].get<double>()},
                          o["radius"].get<double>()};
  }
  return cfg;
}

void save_frames(const std::string& path,
                 const std::vector<Eigen::VectorXd>& frames, int K) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("cannot write frames file: " + path);
  const char magic[8] = {'S', 'F', 'L', 'O', 'F', 'R', 'M', '1'};
  std::fwrite(magic, 1, 8, f);
  const uint32_t version = 1;
  const uint64_t n = frames.size(), k = K;
  std::fwrite(&version, sizeof(version), 1, f);
  std::fwrite(&n, sizeof(n), 1, f);
  std::fwrite(&k, sizeof(k), 1, f);
  for (const auto& fr : frames)
    std::fwrite(fr.data(), sizeof(double), fr.size(), f);
  std::fclose(f);
}

std::vector<Eigen::VectorXd> load_frames(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("cannot open frames file: " + path);
  char magic[8];
  uint32_t version;
  uint64_t n, k;
  if (std::fread(magic, 1, 8, f) != 8 ||
      std::memcmp(magic, "SFLOFRM1", 8) != 0 ||
      std::fread(&version, sizeof(version), 1, f) != 1 || version != 1 ||
      std::fread(&n, sizeof(n), 1, f) != 1 ||
      std::fread(&k, sizeof(k), 1, f) != 1) {
    std::fclose(f);
    throw std::runtime_error("bad frames file header: " + path);
  }
  std::vector<Eigen::VectorXd> frames(n);
  for (uint64_t m = 0; m < n; ++m) {
    frames[m].resize(3 * k);
    if (std::fread(frames[m].data(), sizeof(double), 3 * k, f) != 3 * k) {
      std::fclose(f);
      throw std::runtime_error("truncated frames file: " + path);
    }
  }
  std::fclose(f);
  return frames;
}

void save_dataset(const std::string& dir, const Dataset& ds) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  save_obj(dir + "/mesh.obj", ds.mesh);
  save_frames(dir + "/frames.bin", ds.frames, ds.mesh.vertex_count());
  json manifest;
  manifest["format"] = "shellflow-dataset";
  manifest["version"] = 1;
  manifest["mesh"] = "mesh.obj";
  manifest["frames"] = "frames.bin";
  manifest["n_frames"] = ds.frames.size();
  manifest["K"] = ds.mesh.vertex_count();
  manifest["grasp_indices"] = ds.grasp.indices;
  manifest["split_rule"] = {{"train", 12}, {"cycle", 17}};
  manifest["sim"] = sim_config_to_json(ds.cfg);
  manifest["provenance"] = ds.provenance;
  std::ofstream out(dir + "/manifest.json");
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw std::runtime_error("cannot open " + dir + "/manifest.json");
  json manifest = json::parse(in);
  Dataset ds;
  ds.mesh = load_obj(dir + "/" + manifest["mesh"].get<std::string>());
  ds.frames = load_frames(dir + "/" + manifest["frames"].get<std::string>());
  ds.cfg = sim_config_from_json(manifest["sim"], ds.mesh);
  ds.grasp.indices = manifest["grasp_indices"].get<std::vector<int>>();
  for (size_t m = 0; m < ds.frames.size(); ++m) {
    Eigen::VectorXd q(3 * ds.grasp.indices.size());
    for (size_t k = 0; k < ds.grasp.indices.size(); ++k)
      q.segment<3>(3 * k) =
          ds.frames[m].segment<3>(3 * ds.grasp.indices[k]);
    ds.grasp.trajectory.push_back(q);
  }
  ds.split = split_labels(static_cast<int>(ds.frames.size()));
  ds.provenance = manifest.value("provenance", json::object());
  return ds;
}

}  // namespace shellflow
