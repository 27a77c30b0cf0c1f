#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <optional>
#include <stdexcept>
#include <vector>

#include "shellflow/mesh.hpp"

namespace shellflow {

struct SimError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MaterialKind { MassSpring, FemShell };

struct Spring {
  int i, j;
  double rest;
};

// Rest-shape quantities for the two material models. MassSpring carries
// Hooke springs over 1-ring (stretch) and 2-ring (bend) pairs; FemShell
// carries per-triangle 2D rest metrics and per-hinge rest dihedral angles.
struct MaterialModel {
  MaterialKind kind = MaterialKind::MassSpring;

  std::vector<Spring> stretch_springs;
  std::vector<Spring> bend_springs;

  struct TriangleElement {
    std::array<int, 3> v;
    Eigen::Matrix2d dm_inv;  // inverse rest-edge matrix in the triangle plane
    double area;
  };
  struct HingeElement {
    std::array<int, 4> v;  // edge v0, edge v1, opposite in tri A, in tri B
    double rest_angle;
  };
  std::vector<TriangleElement> triangles;
  std::vector<HingeElement> hinges;

  static MaterialModel mass_spring(const TriMesh& rest, const Adjacency& adj);
  static MaterialModel fem_shell(const TriMesh& rest, const Adjacency& adj);
};

struct GraspSet {
  std::vector<int> indices;
  // trajectory[m] stacks the grasped targets for frame m, length 3*|indices|
  std::vector<Eigen::VectorXd> trajectory;
};

struct Sphere {
  Eigen::Vector3d center;
  double radius;
};

struct SimConfig {
  double dt = 1.0 / 60.0;
  Eigen::VectorXd mass;  // lumped per-vertex mass, length K
  Eigen::Vector3d gravity{0.0, 0.0, -9.8};
  MaterialModel material;
  std::vector<int> grasp_indices;
  std::optional<Sphere> obstacle;
  double k_stretch = 5000.0;
  double k_bend = 50.0;
  double k_collision = 1e4;
  double collision_margin = 1e-3;
  int max_newton = 50;

  int vertex_count() const { return static_cast<int>(mass.size()); }
  // tol_newton = 1e-6 * (total mass * |g|); floor guards the g = 0 case.
  double newton_tol() const {
    return std::max(1e-6 * mass.sum() * gravity.norm(), 1e-12);
  }
  std::vector<int> free_vertices() const;
};

struct SimState {
  Eigen::VectorXd p_prev2, p_prev1;
};

// Overwrites grasped entries of p with the targets q (3*|grasp| stacked).
void apply_grasp(Eigen::VectorXd& p, const Eigen::VectorXd& q,
                 const SimConfig& cfg);

double collision_penalty(const Eigen::VectorXd& p, const Sphere& sphere,
                         double k_c, double margin);
Eigen::VectorXd collision_penalty_gradient(const Eigen::VectorXd& p,
                                           const Sphere& sphere, double k_c,
                                           double margin);

// P(p) = P_g + k_s P_s + k_b P_b + P_collision; grasped entries of p are
// assumed already substituted with their targets.
double potential_energy(const Eigen::VectorXd& p, const SimConfig& cfg);

// Exact analytic gradient of potential_energy; grasped DOFs zeroed.
Eigen::VectorXd potential_gradient(const Eigen::VectorXd& p,
                                   const SimConfig& cfg);

// |p - 2 p1 + p2|^2_M / (2 dt^2) + P(p); q is substituted into p first.
double physics_loss(const Eigen::VectorXd& p_prev2,
                    const Eigen::VectorXd& p_prev1, const Eigen::VectorXd& p,
                    const Eigen::VectorXd& q, const SimConfig& cfg);

// d physics_loss / d p, grasped DOFs zeroed (eliminated).
Eigen::VectorXd physics_loss_gradient(const Eigen::VectorXd& p_prev2,
                                      const Eigen::VectorXd& p_prev1,
                                      const Eigen::VectorXd& p,
                                      const Eigen::VectorXd& q,
                                      const SimConfig& cfg);

// One variational implicit-Euler step: minimizes physics_loss over free
// DOFs with Newton + backtracking line search. Grasped DOFs are set to q_m.
// Throws SimError carrying the residual on non-convergence.
Eigen::VectorXd step(const SimState& state, const Eigen::VectorXd& q_m,
                     const SimConfig& cfg);

// Frames p_3..p_{n_frames+2} via repeated step; trajectory indexed from
// frame 3 (trajectory[m] is q for the m-th predicted frame, m = 0-based).
std::vector<Eigen::VectorXd> rollout(const SimState& initial,
                                     const std::vector<Eigen::VectorXd>& traj,
                                     const SimConfig& cfg, int n_frames);

}  // namespace shellflow
