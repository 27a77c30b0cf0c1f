#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <memory>
#include <stdexcept>
#include <vector>

#include "shellflow/mesh.hpp"

namespace shellflow {

struct AcapError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Per-vertex 9-vector: log-rotation (3) + packed symmetric stretch (6),
// flattened vertex-major to length 9K.
struct AcapFeature {
  Eigen::VectorXd data;

  int vertex_count() const { return static_cast<int>(data.size() / 9); }

  Eigen::Vector3d omega(int i) const { return data.segment<3>(9 * i); }
  void set_omega(int i, const Eigen::Vector3d& w) {
    data.segment<3>(9 * i) = w;
  }
  // packing order: S00, S01, S02, S11, S12, S22
  Eigen::Matrix3d stretch(int i) const;
  void set_stretch(int i, const Eigen::Matrix3d& s);
};

Eigen::Matrix3d unpack_sym(const Eigen::Matrix<double, 6, 1>& s);
Eigen::Matrix<double, 6, 1> pack_sym(const Eigen::Matrix3d& s);

// Reference shape plus the per-vertex normal-equation data of the local
// deformation-gradient fit. For a locally planar reference the normal
// matrix is rank 2; the fit is completed along the reference normal.
struct ReferenceFrame {
  TriMesh mesh;
  Adjacency adj;
  CotanWeights cotan;

  struct VertexFit {
    Eigen::Matrix3d g;      // sum_j c_ij e0 e0^T
    Eigen::Matrix3d g_pinv; // rank-aware pseudo-inverse
    int rank;
    Eigen::Vector3d n0, u, v;  // eigenbasis; n0 is the null direction (rank 2)
  };
  std::vector<VertexFit> fits;

  static ReferenceFrame build(const TriMesh& mesh);
};

// Per-vertex weighted least-squares deformation gradients (rank-completed).
std::vector<Eigen::Matrix3d> deformation_gradients(const ReferenceFrame& ref,
                                                   const Eigen::VectorXd& p);

// T = R S with R a proper rotation and S symmetric. det(T) <= 0 flips the
// smallest singular direction. Throws AcapError on near-singular T.
void polar_decompose(const Eigen::Matrix3d& t, Eigen::Matrix3d& r,
                     Eigen::Matrix3d& s);

// Axis-angle logs with branch choice propagated greedily over a BFS
// spanning tree so neighboring logs stay close; exp(omega_i) = R_i always.
std::vector<Eigen::Vector3d> consistent_log(
    const std::vector<Eigen::Matrix3d>& rotations, const Adjacency& adj);

Eigen::Matrix3d rodrigues(const Eigen::Vector3d& omega);
// Vector-Jacobian product: upstream gradient w.r.t. R -> gradient w.r.t. omega.
Eigen::Vector3d rodrigues_vjp(const Eigen::Vector3d& omega,
                              const Eigen::Matrix3d& d_r);

AcapFeature acap_forward(const ReferenceFrame& ref, const Eigen::VectorXd& p);

// Prefactorized constrained Poisson reconstruction. Solves the stacked
// per-vertex normal equations B_i(p) = T_i G_i in least squares with the
// grasped vertices pinned; the three coordinates decouple and share one
// factorization per (mesh, grasp set).
class PoissonSolver {
 public:
  PoissonSolver(const ReferenceFrame& ref, const std::vector<int>& grasp);

  const std::vector<int>& grasp() const { return grasp_; }

  // q stacks grasped targets (3 * |grasp|).
  Eigen::VectorXd solve(const std::vector<Eigen::Matrix3d>& t,
                        const Eigen::VectorXd& q) const;

  // Adjoint solve: gradient w.r.t. positions -> per-vertex gradient w.r.t. T.
  std::vector<Eigen::Matrix3d> solve_vjp(const Eigen::VectorXd& upstream) const;

 private:
  const ReferenceFrame* ref_;
  std::vector<int> grasp_, free_;
  std::vector<int> vert_to_free_;
  Eigen::SparseMatrix<double> a_free_;   // stacked rows x free vertices
  Eigen::SparseMatrix<double> a_grasp_;  // stacked rows x grasped vertices
  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> ldlt_;
};

Eigen::VectorXd acap_inverse(const AcapFeature& feat, const Eigen::VectorXd& q,
                             const PoissonSolver& solver);

// VJP through the saddle solve, T = R S, and the Rodrigues map.
Eigen::VectorXd acap_inverse_gradient(const AcapFeature& feat,
                                      const Eigen::VectorXd& q,
                                      const PoissonSolver& solver,
                                      const Eigen::VectorXd& upstream);

}  // namespace shellflow
