#pragma once

#include <json.hpp>
#include <string>
#include <vector>

#include "shellflow/mesh.hpp"
#include "shellflow/sim.hpp"

namespace shellflow {

// 12-of-17 protocol: first 12 frames of every 17 are Train (0), rest Test (1).
std::vector<int> split_labels(int n_frames);

struct Dataset {
  TriMesh mesh;  // rest shape; also the ACAP reference (first frame)
  std::vector<Eigen::VectorXd> frames;
  GraspSet grasp;
  SimConfig cfg;
  std::vector<int> split;  // per frame, 0 = Train, 1 = Test
  nlohmann::json provenance;

  Eigen::VectorXd grasp_targets(int frame) const;
};

// Regular n x n grid sheet in the XY plane, side length 1 m, two adjacent
// corners grasped. holes removes a centered (n-1)/4 x (n-1)/4 vertex block.
std::pair<TriMesh, GraspSet> make_sheet(int n, bool holes);

// Icosphere of the given subdivision level, radius 0.25 m, topmost vertex
// grasped.
std::pair<TriMesh, GraspSet> make_ball(int subdiv);

enum class TrajectoryKind { PlusX, MinusX, PlusY, MinusY, PlusZ, MinusZ,
                            PlusR, MinusR };
TrajectoryKind trajectory_kind_from_string(const std::string& s);

// Sinusoidal back-and-forth along an axis, or rotation about Z through the
// grasp centroid (R kinds, amplitude in radians). q0 stacks the initial
// grasp positions; frame m is evaluated at t = m dt.
std::vector<Eigen::VectorXd> make_trajectory(TrajectoryKind kind,
                                             const Eigen::VectorXd& q0,
                                             double amplitude, double period,
                                             double dt, int n_frames);

// Rollout from rest under the trajectory; frames[0..1] are the rest shape
// with the trajectory's first two targets applied.
Dataset generate(const TriMesh& mesh, const GraspSet& grasp,
                 const SimConfig& cfg,
                 const std::vector<Eigen::VectorXd>& trajectory, int n_frames,
                 uint64_t seed);

// SimConfig <-> JSON (material rebuilt from the mesh on load).
nlohmann::json sim_config_to_json(const SimConfig& cfg);
SimConfig sim_config_from_json(const nlohmann::json& j, const TriMesh& mesh);

void save_dataset(const std::string& dir, const Dataset& ds);
Dataset load_dataset(const std::string& dir);

void save_frames(const std::string& path,
                 const std::vector<Eigen::VectorXd>& frames, int K);
std::vector<Eigen::VectorXd> load_frames(const std::string& path);

}  // namespace shellflow
