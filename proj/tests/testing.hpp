#pragma once

#include <Eigen/Dense>
#include <functional>
#include <random>

#include "shellflow/datagen.hpp"
#include "shellflow/sim.hpp"

namespace shellflow::testing {

// Central finite-difference gradient of a scalar function.
inline Eigen::VectorXd fd_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double h = 1e-6) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (int i = 0; i < x.size(); ++i) {
    const double xi = x[i];
    xp[i] = xi + h;
    const double fp = f(xp);
    xp[i] = xi - h;
    const double fm = f(xp);
    xp[i] = xi;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

inline double rel_error(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double denom = std::max(1e-12, std::max(a.norm(), b.norm()));
  return (a - b).norm() / denom;
}

// Small sheet with a mass-spring config; deterministic mild perturbation so
// energies and gradients are generic (no symmetric cancellation).
inline std::pair<TriMesh, SimConfig> tiny_sheet(int n = 3,
                                                bool fem = false,
                                                uint64_t seed = 7) {
  auto [mesh, grasp] = make_sheet(n, false);
  const Adjacency adj = build_adjacency(mesh);
  SimConfig cfg;
  cfg.mass = Eigen::VectorXd::Constant(mesh.vertex_count(),
                                       0.5 / mesh.vertex_count());
  cfg.material = fem ? MaterialModel::fem_shell(mesh, adj)
                     : MaterialModel::mass_spring(mesh, adj);
  cfg.grasp_indices = grasp.indices;
  cfg.k_stretch = 100.0;
  cfg.k_bend = 1.0;
  return {mesh, cfg};
}

inline Eigen::VectorXd perturbed_rest(const TriMesh& mesh, double scale,
                                      uint64_t seed = 11) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-scale, scale);
  Eigen::VectorXd p = mesh.positions();
  for (int i = 0; i < p.size(); ++i) p[i] += dist(rng);
  return p;
}

}  // namespace shellflow::testing
