#pragma once

#include <Eigen/Dense>
#include <vector>

#include "shellflow/mesh.hpp"
#include "shellflow/sim.hpp"

namespace shellflow {

struct SequencePair {
  std::vector<Eigen::VectorXd> reference;
  std::vector<Eigen::VectorXd> candidate;
};

// sqrt( sum_{m,i} |p_mi - phat_mi|^2 / (N K) ), in the input units.
// The CLI reporting layer converts meter meshes to millimeters.
double m_rms(const SequencePair& pair);

struct StedConfig {
  double temporal_weight = 0.5;  // linear combination weight w
};

// Spatial term: RMS over frames and edges of relative edge-length change.
// Temporal term: RMS over vertices and consecutive frames of the difference
// in displacement magnitude, normalized by mean reference edge length.
// Combined as spatial + w * temporal.
double m_sted(const SequencePair& pair, const Adjacency& adj,
              const StedConfig& cfg = {});

// |d L_phys / d p_m|^2 over free DOFs for one frame triple.
double m_phys(const Eigen::VectorXd& p_prev2, const Eigen::VectorXd& p_prev1,
              const Eigen::VectorXd& p, const Eigen::VectorXd& q_m,
              const SimConfig& cfg);

// Mean of m_phys over all consecutive triples of a sequence; q taken from
// the grasped entries of each frame.
double m_phys_sequence(const std::vector<Eigen::VectorXd>& frames,
                       const SimConfig& cfg);

}  // namespace shellflow
