#include "shellflow/sim.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>

namespace shellflow {

namespace {

Eigen::Vector3d vtx(const Eigen::VectorXd& p, int i) {
  return p.segment<3>(3 * i);
}

double dihedral_angle(const Eigen::Vector3d& x0, const Eigen::Vector3d& x1,
                      const Eigen::Vector3d& x2, const Eigen::Vector3d& x3) {
  const Eigen::Vector3d e = x1 - x0;
  const Eigen::Vector3d n1 = e.cross(x2 - x0);
  const Eigen::Vector3d n2 = (x3 - x0).cross(e);
  return std::atan2(n1.cross(n2).dot(e.normalized()), n1.dot(n2));
}

// Gradient of the signed dihedral angle w.r.t. the four stencil vertices.
void dihedral_angle_gradient(const Eigen::Vector3d& x0,
                             const Eigen::Vector3d& x1,
                             const Eigen::Vector3d& x2,
                             const Eigen::Vector3d& x3,
                             Eigen::Vector3d g[4]) {
  const Eigen::Vector3d e = x1 - x0;
  const double l = e.norm();
  const Eigen::Vector3d n1 = e.cross(x2 - x0);
  const Eigen::Vector3d n2 = (x3 - x0).cross(e);
  const Eigen::Vector3d gn1 = n1 / n1.squaredNorm();
  const Eigen::Vector3d gn2 = n2 / n2.squaredNorm();
  g[2] = -l * gn1;
  g[3] = -l * gn2;
  g[0] = -((x2 - x1).dot(e) / l) * gn1 - ((x3 - x1).dot(e) / l) * gn2;
  g[1] = ((x2 - x0).dot(e) / l) * gn1 + ((x3 - x0).dot(e) / l) * gn2;
}

// StVK membrane on the 2D rest metric; unit moduli, k_stretch applied
// by the caller. Energy density mu |E|^2 + lambda/2 tr(E)^2, mu = lambda = 1.
double membrane_energy(const MaterialModel::TriangleElement& el,
                       const Eigen::Vector3d& p0, const Eigen::Vector3d& p1,
                       const Eigen::Vector3d& p2) {
  Eigen::Matrix<double, 3, 2> ds;
  ds.col(0) = p1 - p0;
  ds.col(1) = p2 - p0;
  const Eigen::Matrix<double, 3, 2> f = ds * el.dm_inv;
  const Eigen::Matrix2d green =
      0.5 * (f.transpose() * f - Eigen::Matrix2d::Identity());
  return el.area *
         (green.squaredNorm() + 0.5 * green.trace() * green.trace());
}

void membrane_gradient(const MaterialModel::TriangleElement& el,
                       const Eigen::Vector3d& p0, const Eigen::Vector3d& p1,
                       const Eigen::Vector3d& p2, Eigen::Vector3d g[3]) {
  Eigen::Matrix<double, 3, 2> ds;
  ds.col(0) = p1 - p0;
  ds.col(1) = p2 - p0;
  const Eigen::Matrix<double, 3, 2> f = ds * el.dm_inv;
  const Eigen::Matrix2d green =
      0.5 * (f.transpose() * f - Eigen::Matrix2d::Identity());
  const Eigen::Matrix<double, 3, 2> dpsi_df =
      el.area * (2.0 * f * green + green.trace() * f);
  const Eigen::Matrix<double, 3, 2> dpsi_dds =
      dpsi_df * el.dm_inv.transpose();
  g[1] = dpsi_dds.col(0);
  g[2] = dpsi_dds.col(1);
  g[0] = -g[1] - g[2];
}

// Clamp a small symmetric matrix to PSD by eigenvalue truncation.
Eigen::MatrixXd project_psd(Eigen::MatrixXd h) {
  h = 0.5 * (h + h.transpose().eval());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(h);
  Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0);
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

std::vector<int> SimConfig::free_vertices() const {
  std::vector<char> grasped(vertex_count(), 0);
  for (int g : grasp_indices) grasped[g] = 1;
  std::vector<int> out;
  for (int i = 0; i < vertex_count(); ++i)
    if (!grasped[i]) out.push_back(i);
  return out;
}

MaterialModel MaterialModel::mass_spring(const TriMesh& rest,
                                         const Adjacency& adj) {
  MaterialModel m;
  m.kind = MaterialKind::MassSpring;
  const int K = rest.vertex_count();
  for (int i = 0; i < K; ++i) {
    for (int j : adj.one_ring[i])
      if (j > i)
        m.stretch_springs.push_back(
            {i, j, (rest.vertices[i] - rest.vertices[j]).norm()});
    for (int j : adj.two_ring[i])
      if (j > i)
        m.bend_springs.push_back(
            {i, j, (rest.vertices[i] - rest.vertices[j]).norm()});
  }
  return m;
}

MaterialModel MaterialModel::fem_shell(const TriMesh& rest,
                                       const Adjacency& adj) {
  MaterialModel m;
  m.kind = MaterialKind::FemShell;
  for (const auto& tri : rest.triangles) {
    const Eigen::Vector3d e1 = rest.vertices[tri[1]] - rest.vertices[tri[0]];
    const Eigen::Vector3d e2 = rest.vertices[tri[2]] - rest.vertices[tri[0]];
    const Eigen::Vector3d n = e1.cross(e2);
    const double area = 0.5 * n.norm();
    if (area <= 0.0) throw SimError("degenerate rest triangle");
    const Eigen::Vector3d u = e1.normalized();
    const Eigen::Vector3d w = n.normalized().cross(u);
    Eigen::Matrix2d dm;
    dm << e1.dot(u), e2.dot(u), e1.dot(w), e2.dot(w);
    m.triangles.push_back({{tri[0], tri[1], tri[2]}, dm.inverse(), area});
  }
  for (const auto& dp : adj.dihedral_pairs) {
    const double rest_angle =
        dihedral_angle(rest.vertices[dp.edge_v0], rest.vertices[dp.edge_v1],
                       rest.vertices[dp.opp_a], rest.vertices[dp.opp_b]);
    m.hinges.push_back(
        {{dp.edge_v0, dp.edge_v1, dp.opp_a, dp.opp_b}, rest_angle});
  }
  return m;
}

void apply_grasp(Eigen::VectorXd& p, const Eigen::VectorXd& q,
                 const SimConfig& cfg) {
  if (q.size() != 3 * static_cast<int>(cfg.grasp_indices.size()))
    throw SimError("grasp target length mismatch");
  for (size_t k = 0; k < cfg.grasp_indices.size(); ++k)
    p.segment<3>(3 * cfg.grasp_indices[k]) = q.segment<3>(3 * k);
}

double collision_penalty(const Eigen::VectorXd& p, const Sphere& sphere,
                         double k_c, double margin) {
  const double inflated = sphere.radius + margin;
  double e = 0.0;
  for (int i = 0; i < p.size() / 3; ++i) {
    const double depth = inflated - (vtx(p, i) - sphere.center).norm();
    if (depth > 0.0) e += k_c * depth * depth;
  }
  return e;
}

Eigen::VectorXd collision_penalty_gradient(const Eigen::VectorXd& p,
                                           const Sphere& sphere, double k_c,
                                           double margin) {
  const double inflated = sphere.radius + margin;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p.size());
  for (int i = 0; i < p.size() / 3; ++i) {
    const Eigen::Vector3d d = vtx(p, i) - sphere.center;
    const double dist = d.norm();
    const double depth = inflated - dist;
    if (depth > 0.0 && dist > 0.0)
      g.segment<3>(3 * i) = -2.0 * k_c * depth * d / dist;
  }
  return g;
}

double potential_energy(const Eigen::VectorXd& p, const SimConfig& cfg) {
  const int K = cfg.vertex_count();
  double e = 0.0;
  for (int i = 0; i < K; ++i)
    e -= cfg.mass[i] * cfg.gravity.dot(vtx(p, i));

  const MaterialModel& mat = cfg.material;
  double ps = 0.0, pb = 0.0;
  if (mat.kind == MaterialKind::MassSpring) {
    for (const auto& s : mat.stretch_springs) {
      const double l = (vtx(p, s.i) - vtx(p, s.j)).norm();
      ps += 0.5 * (l - s.rest) * (l - s.rest);
    }
    for (const auto& s : mat.bend_springs) {
      const double l = (vtx(p, s.i) - vtx(p, s.j)).norm();
      pb += 0.5 * (l - s.rest) * (l - s.rest);
    }
  } else {
    for (const auto& el : mat.triangles)
      ps += membrane_energy(el, vtx(p, el.v[0]), vtx(p, el.v[1]),
                            vtx(p, el.v[2]));
    for (const auto& h : mat.hinges) {
      const double th = dihedral_angle(vtx(p, h.v[0]), vtx(p, h.v[1]),
                                       vtx(p, h.v[2]), vtx(p, h.v[3]));
      pb += (th - h.rest_angle) * (th - h.rest_angle);
    }
  }
  e += cfg.k_stretch * ps + cfg.k_bend * pb;
  if (cfg.obstacle)
    e += collision_penalty(p, *cfg.obstacle, cfg.k_collision,
                           cfg.collision_margin);
  if (!std::isfinite(e)) throw SimError("non-finite potential energy");
  return e;
}

Eigen::VectorXd potential_gradient(const Eigen::VectorXd& p,
                                   const SimConfig& cfg) {
  const int K = cfg.vertex_count();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(3 * K);
  for (int i = 0; i < K; ++i)
    g.segment<3>(3 * i) -= cfg.mass[i] * cfg.gravity;

  const MaterialModel& mat = cfg.material;
  auto add_spring = [&](const Spring& s, double k) {
    const Eigen::Vector3d d = vtx(p, s.i) - vtx(p, s.j);
    const double l = d.norm();
    if (l <= 0.0) throw SimError("coincident spring endpoints");
    const Eigen::Vector3d f = k * (l - s.rest) * d / l;
    g.segment<3>(3 * s.i) += f;
    g.segment<3>(3 * s.j) -= f;
  };
  if (mat.kind == MaterialKind::MassSpring) {
    for (const auto& s : mat.stretch_springs) add_spring(s, cfg.k_stretch);
    for (const auto& s : mat.bend_springs) add_spring(s, cfg.k_bend);
  } else {
    for (const auto& el : mat.triangles) {
      Eigen::Vector3d ge[3];
      membrane_gradient(el, vtx(p, el.v[0]), vtx(p, el.v[1]), vtx(p, el.v[2]),
                        ge);
      for (int k = 0; k < 3; ++k)
        g.segment<3>(3 * el.v[k]) += cfg.k_stretch * ge[k];
    }
    for (const auto& h : mat.hinges) {
      const double th = dihedral_angle(vtx(p, h.v[0]), vtx(p, h.v[1]),
                                       vtx(p, h.v[2]), vtx(p, h.v[3]));
      Eigen::Vector3d gd[4];
      dihedral_angle_gradient(vtx(p, h.v[0]), vtx(p, h.v[1]), vtx(p, h.v[2]),
                              vtx(p, h.v[3]), gd);
      const double c = 2.0 * cfg.k_bend * (th - h.rest_angle);
      for (int k = 0; k < 4; ++k) g.segment<3>(3 * h.v[k]) += c * gd[k];
    }
  }
  if (cfg.obstacle)
    g += collision_penalty_gradient(p, *cfg.obstacle, cfg.k_collision,
                                    cfg.collision_margin);
  for (int gi : cfg.grasp_indices) g.segment<3>(3 * gi).setZero();
  if (!g.allFinite()) throw SimError("non-finite potential gradient");
  return g;
}

double physics_loss(const Eigen::VectorXd& p_prev2,
                    const Eigen::VectorXd& p_prev1, const Eigen::VectorXd& p,
                    const Eigen::VectorXd& q, const SimConfig& cfg) {
  Eigen::VectorXd pc = p;
  apply_grasp(pc, q, cfg);
  const Eigen::VectorXd d = pc - 2.0 * p_prev1 + p_prev2;
  double kinetic = 0.0;
  for (int i = 0; i < cfg.vertex_count(); ++i)
    kinetic += cfg.mass[i] * d.segment<3>(3 * i).squaredNorm();
  kinetic /= 2.0 * cfg.dt * cfg.dt;
  return kinetic + potential_energy(pc, cfg);
}

Eigen::VectorXd physics_loss_gradient(const Eigen::VectorXd& p_prev2,
                                      const Eigen::VectorXd& p_prev1,
                                      const Eigen::VectorXd& p,
                                      const Eigen::VectorXd& q,
                                      const SimConfig& cfg) {
  Eigen::VectorXd pc = p;
  apply_grasp(pc, q, cfg);
  const Eigen::VectorXd d = pc - 2.0 * p_prev1 + p_prev2;
  Eigen::VectorXd g = potential_gradient(pc, cfg);
  const double inv = 1.0 / (cfg.dt * cfg.dt);
  for (int i = 0; i < cfg.vertex_count(); ++i)
    g.segment<3>(3 * i) += cfg.mass[i] * inv * d.segment<3>(3 * i);
  for (int gi : cfg.grasp_indices) g.segment<3>(3 * gi).setZero();
  return g;
}

namespace {

// PSD-projected potential Hessian triplets over the full 3K DOFs.
// Springs and collision use analytic element Hessians; membrane and
// bending elements use central differences of the analytic element
// gradient, symmetrized and eigenvalue-clamped.
void potential_hessian_triplets(const Eigen::VectorXd& p, const SimConfig& cfg,
                                std::vector<Eigen::Triplet<double>>& trips) {
  const MaterialModel& mat = cfg.material;

  auto add_block = [&](int vi, int vj, const Eigen::Matrix3d& h) {
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        trips.emplace_back(3 * vi + a, 3 * vj + b, h(a, b));
  };

  auto add_spring = [&](const Spring& s, double k) {
    const Eigen::Vector3d d = vtx(p, s.i) - vtx(p, s.j);
    const double l = d.norm();
    const Eigen::Vector3d dh = d / l;
    const Eigen::Matrix3d outer = dh * dh.transpose();
    const double tangent = std::max(0.0, 1.0 - s.rest / l);
    const Eigen::Matrix3d h =
        k * (tangent * (Eigen::Matrix3d::Identity() - outer) + outer);
    add_block(s.i, s.i, h);
    add_block(s.j, s.j, h);
    add_block(s.i, s.j, -h);
    add_block(s.j, s.i, -h);
  };

  auto add_fd_element = [&](const std::vector<int>& verts,
                            auto&& grad_fn) {
    const int n = static_cast<int>(verts.size());
    Eigen::VectorXd x(3 * n);
    for (int k = 0; k < n; ++k) x.segment<3>(3 * k) = vtx(p, verts[k]);
    Eigen::MatrixXd h(3 * n, 3 * n);
    const double step = 1e-5 * (1.0 + x.cwiseAbs().maxCoeff());
    Eigen::VectorXd xp = x, xm = x;
    for (int c = 0; c < 3 * n; ++c) {
      xp[c] = x[c] + step;
      xm[c] = x[c] - step;
      h.col(c) = (grad_fn(xp) - grad_fn(xm)) / (2.0 * step);
      xp[c] = x[c];
      xm[c] = x[c];
    }
    const Eigen::MatrixXd hp = project_psd(h);
    for (int a = 0; a < n; ++a)
      for (int b = 0; b < n; ++b)
        add_block(verts[a], verts[b], hp.block<3, 3>(3 * a, 3 * b));
  };

  if (mat.kind == MaterialKind::MassSpring) {
    for (const auto& s : mat.stretch_springs) add_spring(s, cfg.k_stretch);
    for (const auto& s : mat.bend_springs) add_spring(s, cfg.k_bend);
  } else {
    for (const auto& el : mat.triangles) {
      add_fd_element({el.v[0], el.v[1], el.v[2]},
                     [&](const Eigen::VectorXd& x) {
                       Eigen::Vector3d ge[3];
                       membrane_gradient(el, x.segment<3>(0), x.segment<3>(3),
                                         x.segment<3>(6), ge);
                       Eigen::VectorXd g(9);
                       for (int k = 0; k < 3; ++k)
                         g.segment<3>(3 * k) = cfg.k_stretch * ge[k];
                       return g;
                     });
    }
    for (const auto& h : mat.hinges) {
      add_fd_element({h.v[0], h.v[1], h.v[2], h.v[3]},
                     [&](const Eigen::VectorXd& x) {
                       const Eigen::Vector3d x0 = x.segment<3>(0),
                                             x1 = x.segment<3>(3),
                                             x2 = x.segment<3>(6),
                                             x3 = x.segment<3>(9);
                       const double th = dihedral_angle(x0, x1, x2, x3);
                       Eigen::Vector3d gd[4];
                       dihedral_angle_gradient(x0, x1, x2, x3, gd);
                       const double c = 2.0 * cfg.k_bend * (th - h.rest_angle);
                       Eigen::VectorXd g(12);
                       for (int k = 0; k < 4; ++k)
                         g.segment<3>(3 * k) = c * gd[k];
                       return g;
                     });
    }
  }

  if (cfg.obstacle) {
    const double inflated = cfg.obstacle->radius + cfg.collision_margin;
    for (int i = 0; i < cfg.vertex_count(); ++i) {
      const Eigen::Vector3d d = vtx(p, i) - cfg.obstacle->center;
      const double dist = d.norm();
      const double depth = inflated - dist;
      if (depth > 0.0 && dist > 0.0) {
        const Eigen::Vector3d dh = d / dist;
        const Eigen::Matrix3d outer = dh * dh.transpose();
        Eigen::Matrix3d h =
            2.0 * cfg.k_collision *
            (outer - depth / dist * (Eigen::Matrix3d::Identity() - outer));
        add_block(i, i, project_psd(h));
      }
    }
  }
}

}  // namespace

Eigen::VectorXd step(const SimState& state, const Eigen::VectorXd& q_m,
                     const SimConfig& cfg) {
  const int K = cfg.vertex_count();
  const std::vector<int> free = cfg.free_vertices();
  const int nf = static_cast<int>(free.size());
  std::vector<int> vert_to_free(K, -1);
  for (int k = 0; k < nf; ++k) vert_to_free[free[k]] = k;

  // inertial initial guess with grasp applied
  Eigen::VectorXd p = 2.0 * state.p_prev1 - state.p_prev2;
  apply_grasp(p, q_m, cfg);

  const double tol = cfg.newton_tol();
  const double inv_dt2 = 1.0 / (cfg.dt * cfg.dt);

  double loss = physics_loss(state.p_prev2, state.p_prev1, p, q_m, cfg);
  for (int it = 0; it < cfg.max_newton; ++it) {
    const Eigen::VectorXd g =
        physics_loss_gradient(state.p_prev2, state.p_prev1, p, q_m, cfg);
    // 2-norm over free DOFs so converged frames satisfy |g|^2 < tol^2
    double gsq = 0.0;
    for (int k = 0; k < nf; ++k) gsq += g.segment<3>(3 * free[k]).squaredNorm();
    if (gsq < tol * tol) return p;

    std::vector<Eigen::Triplet<double>> trips;
    potential_hessian_triplets(p, cfg, trips);
    std::vector<Eigen::Triplet<double>> ftrips;
    ftrips.reserve(trips.size() + 3 * nf);
    for (const auto& t : trips) {
      const int fi = vert_to_free[t.row() / 3];
      const int fj = vert_to_free[t.col() / 3];
      if (fi >= 0 && fj >= 0)
        ftrips.emplace_back(3 * fi + t.row() % 3, 3 * fj + t.col() % 3,
                            t.value());
    }
    for (int k = 0; k < nf; ++k) {
      const double mi = cfg.mass[free[k]] * inv_dt2;
      for (int a = 0; a < 3; ++a)
        ftrips.emplace_back(3 * k + a, 3 * k + a, mi);
    }
    Eigen::SparseMatrix<double> h(3 * nf, 3 * nf);
    h.setFromTriplets(ftrips.begin(), ftrips.end());

    Eigen::VectorXd gf(3 * nf);
    for (int k = 0; k < nf; ++k)
      gf.segment<3>(3 * k) = g.segment<3>(3 * free[k]);

    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt(h);
    if (ldlt.info() != Eigen::Success)
      throw SimError("Hessian factorization failed");
    const Eigen::VectorXd df = ldlt.solve(-gf);

    // backtracking line search (Armijo)
    const double slope = gf.dot(df);
    double alpha = 1.0;
    bool accepted = false;
    while (alpha > 1e-12) {
      Eigen::VectorXd trial = p;
      for (int k = 0; k < nf; ++k)
        trial.segment<3>(3 * free[k]) += alpha * df.segment<3>(3 * k);
      const double trial_loss =
          physics_loss(state.p_prev2, state.p_prev1, trial, q_m, cfg);
      if (trial_loss <= loss + 1e-4 * alpha * slope) {
        p = trial;
        loss = trial_loss;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted)
      throw SimError("line search failed at Newton iteration " +
                     std::to_string(it));
  }

  const Eigen::VectorXd g =
      physics_loss_gradient(state.p_prev2, state.p_prev1, p, q_m, cfg);
  double gsq = 0.0;
  for (int idx : free) gsq += g.segment<3>(3 * idx).squaredNorm();
  if (gsq < tol * tol) return p;
  throw SimError("Newton did not converge: residual " +
                 std::to_string(std::sqrt(gsq)) + " tol " +
                 std::to_string(tol));
}

std::vector<Eigen::VectorXd> rollout(const SimState& initial,
                                     const std::vector<Eigen::VectorXd>& traj,
                                     const SimConfig& cfg, int n_frames) {
  if (static_cast<int>(traj.size()) < n_frames)
    throw SimError("grasp trajectory shorter than requested frame count");
  std::vector<Eigen::VectorXd> frames;
  frames.reserve(n_frames);
  SimState st = initial;
  for (int m = 0; m < n_frames; ++m) {
    Eigen::VectorXd p;
    try {
      p = step(st, traj[m], cfg);
    } catch (const SimError& e) {
      throw SimError("frame " + std::to_string(m) + ": " + e.what());
    }
    frames.push_back(p);
    st.p_prev2 = st.p_prev1;
    st.p_prev1 = p;
  }
  return frames;
}

}  // namespace shellflow
