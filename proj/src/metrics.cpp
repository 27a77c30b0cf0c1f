#include "shellflow/metrics.hpp"

#include <cmath>
#include <stdexcept>

namespace shellflow {

double m_rms(const SequencePair& pair) {
  if (pair.reference.size() != pair.candidate.size())
    throw std::invalid_argument("sequence length mismatch");
  if (pair.reference.empty()) return 0.0;
  const int k3 = static_cast<int>(pair.reference[0].size());
  double acc = 0.0;
  for (size_t m = 0; m < pair.reference.size(); ++m)
    acc += (pair.reference[m] - pair.candidate[m]).squaredNorm();
  return std::sqrt(acc / (static_cast<double>(pair.reference.size()) *
                          (k3 / 3)));
}

double m_sted(const SequencePair& pair, const Adjacency& adj,
              const StedConfig& cfg) {
  if (pair.reference.size() != pair.candidate.size())
    throw std::invalid_argument("sequence length mismatch");
  if (pair.reference.size() < 2)
    throw std::invalid_argument("STED needs at least 2 frames");
  const size_t n = pair.reference.size();
  const int K = static_cast<int>(adj.one_ring.size());

  // unique edges from the 1-ring
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < K; ++i)
    for (int j : adj.one_ring[i])
      if (j > i) edges.push_back({i, j});

  double mean_ref_edge = 0.0;
  {
    const Eigen::VectorXd& p = pair.reference[0];
    for (auto [i, j] : edges)
      mean_ref_edge += (p.segment<3>(3 * i) - p.segment<3>(3 * j)).norm();
    mean_ref_edge /= static_cast<double>(edges.size());
  }

  double spatial = 0.0;
  for (size_t m = 0; m < n; ++m) {
    const Eigen::VectorXd& r = pair.reference[m];
    const Eigen::VectorXd& c = pair.candidate[m];
    for (auto [i, j] : edges) {
      const double lr = (r.segment<3>(3 * i) - r.segment<3>(3 * j)).norm();
      const double lc = (c.segment<3>(3 * i) - c.segment<3>(3 * j)).norm();
      const double rel = (lc - lr) / lr;
      spatial += rel * rel;
    }
  }
  spatial = std::sqrt(spatial / (static_cast<double>(n) * edges.size()));

  double temporal = 0.0;
  for (size_t m = 0; m + 1 < n; ++m) {
    for (int i = 0; i < K; ++i) {
      const double dr = (pair.reference[m + 1].segment<3>(3 * i) -
                         pair.reference[m].segment<3>(3 * i))
                            .norm();
      const double dc = (pair.candidate[m + 1].segment<3>(3 * i) -
                         pair.candidate[m].segment<3>(3 * i))
                            .norm();
      const double rel = (dc - dr) / mean_ref_edge;
      temporal += rel * rel;
    }
  }
  temporal = std::sqrt(temporal / (static_cast<double>(n - 1) * K));

  return spatial + cfg.temporal_weight * temporal;
}

double m_phys(const Eigen::VectorXd& p_prev2, const Eigen::VectorXd& p_prev1,
              const Eigen::VectorXd& p, const Eigen::VectorXd& q_m,
              const SimConfig& cfg) {
  const Eigen::VectorXd g =
      physics_loss_gradient(p_prev2, p_prev1, p, q_m, cfg);
  return g.squaredNorm();  // grasped entries are already zeroed
}

double m_phys_sequence(const std::vector<Eigen::VectorXd>& frames,
                       const SimConfig& cfg) {
  if (frames.size() < 3) return 0.0;
  const int ng = static_cast<int>(cfg.grasp_indices.size());
  double acc = 0.0;
  int count = 0;
  for (size_t m = 2; m < frames.size(); ++m) {
    Eigen::VectorXd q(3 * ng);
    for (int k = 0; k < ng; ++k)
      q.segment<3>(3 * k) = frames[m].segment<3>(3 * cfg.grasp_indices[k]);
    acc += m_phys(frames[m - 2], frames[m - 1], frames[m], q, cfg);
    ++count;
  }
  return acc / count;
}

}  // namespace shellflow
