#include "shellflow/acap.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>
#include <cmath>
#include <queue>

namespace shellflow {

Eigen::Matrix3d AcapFeature::stretch(int i) const {
  return unpack_sym(data.segment<6>(9 * i + 3));
}

void AcapFeature::set_stretch(int i, const Eigen::Matrix3d& s) {
  data.segment<6>(9 * i + 3) = pack_sym(s);
}

Eigen::Matrix3d unpack_sym(const Eigen::Matrix<double, 6, 1>& s) {
  Eigen::Matrix3d m;
  m << s[0], s[1], s[2], s[1], s[3], s[4], s[2], s[4], s[5];
  return m;
}

Eigen::Matrix<double, 6, 1> pack_sym(const Eigen::Matrix3d& s) {
  Eigen::Matrix<double, 6, 1> out;
  out << s(0, 0), s(0, 1), s(0, 2), s(1, 1), s(1, 2), s(2, 2);
  return out;
}

ReferenceFrame ReferenceFrame::build(const TriMesh& mesh) {
  ReferenceFrame ref;
  ref.mesh = mesh;
  ref.adj = build_adjacency(mesh);
  ref.cotan = cotan_weights(mesh);
  const int K = mesh.vertex_count();
  ref.fits.resize(K);
  for (int i = 0; i < K; ++i) {
    Eigen::Matrix3d g = Eigen::Matrix3d::Zero();
    for (int j : ref.adj.one_ring[i]) {
      const Eigen::Vector3d e0 = mesh.vertices[i] - mesh.vertices[j];
      g += ref.cotan.at(i, j) * e0 * e0.transpose();
    }
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(g);
    const Eigen::Vector3d ev = es.eigenvalues();
    const double tol = 1e-9 * std::abs(ev[2]);
    int rank = 0;
    for (int k = 0; k < 3; ++k)
      if (std::abs(ev[k]) > tol) ++rank;
    if (rank < 2)
      throw AcapError("vertex " + std::to_string(i) +
                      ": singular normal matrix (collinear 1-ring edges)");
    Eigen::Matrix3d pinv = Eigen::Matrix3d::Zero();
    for (int k = 3 - rank; k < 3; ++k)
      pinv += es.eigenvectors().col(k) * es.eigenvectors().col(k).transpose() /
              ev[k];
    ref.fits[i] = {g, pinv, rank, es.eigenvectors().col(0),
                   es.eigenvectors().col(1), es.eigenvectors().col(2)};
  }
  return ref;
}

std::vector<Eigen::Matrix3d> deformation_gradients(const ReferenceFrame& ref,
                                                   const Eigen::VectorXd& p) {
  const int K = ref.mesh.vertex_count();
  if (p.size() != 3 * K) throw AcapError("position vector length mismatch");
  std::vector<Eigen::Matrix3d> out(K);
  for (int i = 0; i < K; ++i) {
    Eigen::Matrix3d b = Eigen::Matrix3d::Zero();
    for (int j : ref.adj.one_ring[i]) {
      const Eigen::Vector3d e0 = ref.mesh.vertices[i] - ref.mesh.vertices[j];
      const Eigen::Vector3d e = p.segment<3>(3 * i) - p.segment<3>(3 * j);
      b += ref.cotan.at(i, j) * e * e0.transpose();
    }
    const auto& fit = ref.fits[i];
    Eigen::Matrix3d t = b * fit.g_pinv;
    if (fit.rank == 2) {
      // complete along the reference normal; geometric-mean normal stretch
      // orient so a pure rotation R completes to exactly R n0
      const double orient = fit.u.cross(fit.v).dot(fit.n0) < 0.0 ? -1.0 : 1.0;
      const Eigen::Vector3d cr = orient * (t * fit.u).cross(t * fit.v);
      const double len = cr.norm();
      if (len < 1e-14)
        throw AcapError("vertex " + std::to_string(i) +
                        ": degenerate deformed 1-ring");
      t += (cr / std::sqrt(len)) * fit.n0.transpose();
    }
    out[i] = t;
  }
  return out;
}

void polar_decompose(const Eigen::Matrix3d& t, Eigen::Matrix3d& r,
                     Eigen::Matrix3d& s) {
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(
      t, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d sigma = svd.singularValues();
  if (sigma[2] < 1e-10 * sigma[0])
    throw AcapError("polar decomposition of near-singular matrix");
  Eigen::Vector3d flip(1.0, 1.0, 1.0);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0)
    flip[2] = -1.0;
  r = svd.matrixU() * flip.asDiagonal() * svd.matrixV().transpose();
  s = svd.matrixV() * (sigma.cwiseProduct(flip)).asDiagonal() *
      svd.matrixV().transpose();
}

namespace {

// Axis-angle with angle in [0, pi]; quaternion-based for stability near pi.
Eigen::Vector3d log_rotation(const Eigen::Matrix3d& r) {
  Eigen::Quaterniond q(r);
  if (q.w() < 0.0) q.coeffs() *= -1.0;
  const double vn = q.vec().norm();
  if (vn < 1e-16) return Eigen::Vector3d::Zero();
  const double angle = 2.0 * std::atan2(vn, q.w());
  return (angle / vn) * q.vec();
}

}  // namespace

std::vector<Eigen::Vector3d> consistent_log(
    const std::vector<Eigen::Matrix3d>& rotations, const Adjacency& adj) {
  const int K = static_cast<int>(rotations.size());
  std::vector<Eigen::Vector3d> omega(K);
  std::vector<char> visited(K, 0);

  auto candidates = [](const Eigen::Vector3d& base) {
    std::vector<Eigen::Vector3d> c{base};
    const double th = base.norm();
    if (th > 1e-12) {
      const Eigen::Vector3d axis = base / th;
      c.push_back((th - 2.0 * M_PI) * axis);
      c.push_back((th + 2.0 * M_PI) * axis);
    }
    return c;
  };

  for (int root = 0; root < K; ++root) {
    if (visited[root]) continue;
    omega[root] = log_rotation(rotations[root]);  // shortest branch at root
    visited[root] = 1;
    std::queue<int> bfs;
    bfs.push(root);
    while (!bfs.empty()) {
      const int i = bfs.front();
      bfs.pop();
      for (int j : adj.one_ring[i]) {
        if (visited[j]) continue;
        const Eigen::Vector3d base = log_rotation(rotations[j]);
        Eigen::Vector3d best = base;
        double best_d = std::numeric_limits<double>::infinity();
        for (const auto& c : candidates(base)) {
          const double d = (c - omega[i]).norm();
          if (d < best_d) {
            best_d = d;
            best = c;
          }
        }
        omega[j] = best;
        visited[j] = 1;
        bfs.push(j);
      }
    }
  }
  return omega;
}

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& omega) {
  const double th = omega.norm();
  Eigen::Matrix3d k;
  k << 0, -omega.z(), omega.y(), omega.z(), 0, -omega.x(), -omega.y(),
      omega.x(), 0;
  if (th < 1e-8) {
    // 2nd-order Taylor, accurate to ~1e-16 at this threshold
    return Eigen::Matrix3d::Identity() + k + 0.5 * k * k;
  }
  return Eigen::Matrix3d::Identity() + std::sin(th) / th * k +
         (1.0 - std::cos(th)) / (th * th) * k * k;
}

Eigen::Vector3d rodrigues_vjp(const Eigen::Vector3d& omega,
                              const Eigen::Matrix3d& d_r) {
  const double th2 = omega.squaredNorm();
  const Eigen::Matrix3d r = rodrigues(omega);
  Eigen::Vector3d out;
  auto skew = [](const Eigen::Vector3d& v) {
    Eigen::Matrix3d m;
    m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return m;
  };
  for (int i = 0; i < 3; ++i) {
    Eigen::Matrix3d dr_di;
    if (th2 < 1e-16) {
      dr_di = skew(Eigen::Vector3d::Unit(i));
    } else {
      // Gallego & Yezzi closed form for d exp(omega)/d omega_i
      const Eigen::Vector3d e = Eigen::Vector3d::Unit(i);
      const Eigen::Vector3d w =
          omega.cross((Eigen::Matrix3d::Identity() - r) * e);
      dr_di = (omega[i] * skew(omega) + skew(w)) / th2 * r;
    }
    out[i] = (d_r.array() * dr_di.array()).sum();
  }
  return out;
}

AcapFeature acap_forward(const ReferenceFrame& ref, const Eigen::VectorXd& p) {
  const auto grads = deformation_gradients(ref, p);
  const int K = static_cast<int>(grads.size());
  std::vector<Eigen::Matrix3d> rots(K);
  AcapFeature feat;
  feat.data.resize(9 * K);
  std::vector<Eigen::Matrix3d> stretches(K);
  for (int i = 0; i < K; ++i) {
    try {
      polar_decompose(grads[i], rots[i], stretches[i]);
    } catch (const AcapError& e) {
      throw AcapError("vertex " + std::to_string(i) + ": " + e.what());
    }
  }
  const auto omegas = consistent_log(rots, ref.adj);
  for (int i = 0; i < K; ++i) {
    feat.set_omega(i, omegas[i]);
    feat.set_stretch(i, stretches[i]);
  }
  return feat;
}

PoissonSolver::PoissonSolver(const ReferenceFrame& ref,
                             const std::vector<int>& grasp)
    : ref_(&ref), grasp_(grasp) {
  const int K = ref.mesh.vertex_count();
  if (grasp.empty())
    throw AcapError("PoissonSolver needs at least one grasped vertex");
  vert_to_free_.assign(K, -1);
  std::vector<int> vert_to_grasp(K, -1);
  for (size_t k = 0; k < grasp_.size(); ++k) {
    if (grasp_[k] < 0 || grasp_[k] >= K)
      throw AcapError("grasp index out of range");
    vert_to_grasp[grasp_[k]] = static_cast<int>(k);
  }
  for (int i = 0; i < K; ++i)
    if (vert_to_grasp[i] < 0) {
      vert_to_free_[i] = static_cast<int>(free_.size());
      free_.push_back(i);
    }

  std::vector<Eigen::Triplet<double>> tf, tg;
  for (int i = 0; i < K; ++i) {
    for (int b = 0; b < 3; ++b) {
      const int row = 3 * i + b;
      double diag = 0.0;
      for (int j : ref.adj.one_ring[i]) {
        const Eigen::Vector3d e0 = ref.mesh.vertices[i] - ref.mesh.vertices[j];
        const double c = ref.cotan.at(i, j) * e0[b];
        diag += c;
        if (vert_to_free_[j] >= 0)
          tf.emplace_back(row, vert_to_free_[j], -c);
        else
          tg.emplace_back(row, vert_to_grasp[j], -c);
      }
      if (vert_to_free_[i] >= 0)
        tf.emplace_back(row, vert_to_free_[i], diag);
      else
        tg.emplace_back(row, vert_to_grasp[i], diag);
    }
  }
  a_free_.resize(3 * K, static_cast<int>(free_.size()));
  a_free_.setFromTriplets(tf.begin(), tf.end());
  a_grasp_.resize(3 * K, static_cast<int>(grasp_.size()));
  a_grasp_.setFromTriplets(tg.begin(), tg.end());

  const Eigen::SparseMatrix<double> n =
      Eigen::SparseMatrix<double>(a_free_.transpose()) * a_free_;
  ldlt_ = std::make_shared<
      Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>(n);
  if (ldlt_->info() != Eigen::Success)
    throw AcapError("Poisson factorization failed");
}

Eigen::VectorXd PoissonSolver::solve(const std::vector<Eigen::Matrix3d>& t,
                                     const Eigen::VectorXd& q) const {
  const int K = ref_->mesh.vertex_count();
  if (static_cast<int>(t.size()) != K)
    throw AcapError("deformation gradient count mismatch");
  if (q.size() != 3 * static_cast<int>(grasp_.size()))
    throw AcapError("grasp target length mismatch");

  Eigen::MatrixXd r(3 * K, 3);  // rows (i,b), columns = coordinate a
  for (int i = 0; i < K; ++i) {
    const Eigen::Matrix3d tg = t[i] * ref_->fits[i].g;
    for (int b = 0; b < 3; ++b) r.row(3 * i + b) = tg.col(b).transpose();
  }
  Eigen::MatrixXd qm(static_cast<int>(grasp_.size()), 3);
  for (size_t k = 0; k < grasp_.size(); ++k)
    qm.row(static_cast<int>(k)) = q.segment<3>(3 * k).transpose();

  const Eigen::MatrixXd rhs = a_free_.transpose() * (r - a_grasp_ * qm);
  const Eigen::MatrixXd sol = ldlt_->solve(rhs);

  Eigen::VectorXd p(3 * K);
  for (size_t k = 0; k < free_.size(); ++k)
    p.segment<3>(3 * free_[k]) = sol.row(static_cast<int>(k)).transpose();
  for (size_t k = 0; k < grasp_.size(); ++k)
    p.segment<3>(3 * grasp_[k]) = q.segment<3>(3 * k);
  return p;
}

std::vector<Eigen::Matrix3d> PoissonSolver::solve_vjp(
    const Eigen::VectorXd& upstream) const {
  const int K = ref_->mesh.vertex_count();
  if (upstream.size() != 3 * K) throw AcapError("upstream length mismatch");

  Eigen::MatrixXd uf(static_cast<int>(free_.size()), 3);
  for (size_t k = 0; k < free_.size(); ++k)
    uf.row(static_cast<int>(k)) =
        upstream.segment<3>(3 * free_[k]).transpose();
  const Eigen::MatrixXd lambda = ldlt_->solve(uf);
  const Eigen::MatrixXd w = a_free_ * lambda;  // rows (i,b), cols a

  std::vector<Eigen::Matrix3d> d_t(K);
  for (int i = 0; i < K; ++i) {
    Eigen::Matrix3d dr;  // dr(a,b) = dL/d (T_i G_i)_{a,b}
    for (int b = 0; b < 3; ++b) dr.col(b) = w.row(3 * i + b).transpose();
    d_t[i] = dr * ref_->fits[i].g.transpose();
  }
  return d_t;
}

Eigen::VectorXd acap_inverse(const AcapFeature& feat, const Eigen::VectorXd& q,
                             const PoissonSolver& solver) {
  const int K = feat.vertex_count();
  std::vector<Eigen::Matrix3d> t(K);
  for (int i = 0; i < K; ++i)
    t[i] = rodrigues(feat.omega(i)) * feat.stretch(i);
  return solver.solve(t, q);
}

Eigen::VectorXd acap_inverse_gradient(const AcapFeature& feat,
                                      const Eigen::VectorXd& q,
                                      const PoissonSolver& solver,
                                      const Eigen::VectorXd& upstream) {
  const int K = feat.vertex_count();
  const auto d_t = solver.solve_vjp(upstream);
  Eigen::VectorXd grad(9 * K);
  for (int i = 0; i < K; ++i) {
    const Eigen::Matrix3d r = rodrigues(feat.omega(i));
    const Eigen::Matrix3d s = feat.stretch(i);
    const Eigen::Matrix3d d_s_full = r.transpose() * d_t[i];
    const Eigen::Matrix3d d_r = d_t[i] * s;  // s symmetric
    grad.segment<3>(9 * i) = rodrigues_vjp(feat.omega(i), d_r);
    Eigen::Matrix<double, 6, 1> ds;
    ds << d_s_full(0, 0), d_s_full(0, 1) + d_s_full(1, 0),
        d_s_full(0, 2) + d_s_full(2, 0), d_s_full(1, 1),
        d_s_full(1, 2) + d_s_full(2, 1), d_s_full(2, 2);
    grad.segment<6>(9 * i + 3) = ds;
  }
  return grad;
}

}  // namespace shellflow
