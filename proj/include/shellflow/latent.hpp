#pragma once

#include <vector>

#include "shellflow/embedding.hpp"

namespace shellflow {

// MLP(z_{m-2}, z_{m-1}, q_m) -> z_m; hidden layers leaky ReLU, linear output.
class LatentMLP {
 public:
  static LatentMLP create(int latent_dim, int grasp_dim, int hidden,
                          int n_hidden, uint64_t seed);
  static LatentMLP attach(ParamStore params, int latent_dim, int grasp_dim,
                          int hidden, int n_hidden);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int latent_dim() const { return latent_dim_; }
  int input_dim() const { return 2 * latent_dim_ + grasp_dim_; }

  struct Trace {
    Eigen::VectorXd in;
    std::vector<Eigen::VectorXd> pre;  // pre-activation per layer
  };

  Eigen::VectorXd forward(const Eigen::VectorXd& z_prev2,
                          const Eigen::VectorXd& z_prev1,
                          const Eigen::VectorXd& q, Trace* trace) const;
  // Accumulates parameter grads; returns dL/d(input) (2*latent + grasp).
  Eigen::VectorXd backward(const Trace& trace,
                           const Eigen::VectorXd& d_out);

  nlohmann::json plan() const;

 private:
  ParamStore params_;
  std::vector<Dense> layers_;
  int latent_dim_ = 0, grasp_dim_ = 0, hidden_ = 0;
  static constexpr double kSlope = 0.1;
};

Eigen::VectorXd mlp_step(const LatentMLP& mlp, const Eigen::VectorXd& z_prev2,
                         const Eigen::VectorXd& z_prev1,
                         const Eigen::VectorXd& q);

// Per-dataset precomputation for the latent stage: ground-truth encodings,
// absolute grasp targets, and the MLP's grasp input (targets relative to
// the first frame's grasp centroid; ACAP features are translation-invariant
// so absolute coordinates would leak an inconsistent frame).
struct LatentContext {
  std::vector<Eigen::VectorXd> z, q_abs, q_rel;
  Eigen::Vector3d centroid0;
};

LatentContext build_latent_context(const Autoencoder& ae,
                                   const ReferenceFrame& ref,
                                   const Dataset& ds);

// Teacher-forced one-step loss, mean over the given end frames (m >= 2):
// |MLP(z_{m-2}, z_{m-1}, q_m) - z_m|^2.
double loss_sim(LatentMLP& mlp, const LatentContext& ctx,
                const std::vector<int>& ends, double grad_weight);

// Unrolled physics loss over free-running windows. Each window starts from
// the ground-truth encodings of its first two frames and recurses; per term
// the physics-loss gradient flows only into the newest frame's path, while
// the recurrent chain through the MLP inputs is kept (backprop through
// time within the window).
struct UnrollWindow {
  int start;   // first frame of the window
  int length;  // >= 3
};

std::vector<UnrollWindow> make_windows(const std::vector<int>& split,
                                       int label, int window);

double loss_mphys(LatentMLP& mlp, Autoencoder& ae, const PoissonSolver& solver,
                  const Dataset& ds, const LatentContext& ctx,
                  const std::vector<UnrollWindow>& windows,
                  double grad_weight);

struct Stage2Record {
  int epoch;
  double train_sim, train_mphys;
  double test_sim, test_mphys;
};

std::vector<Stage2Record> train_stage2(LatentMLP& mlp, Autoencoder& ae,
                                       const PoissonSolver& solver,
                                       const Dataset& ds,
                                       const ReferenceFrame& ref,
                                       const TrainConfig& cfg);

struct Stage3Record {
  int epoch;
  double train_recon, train_vert, train_ephys, train_sim;
  double test_recon, test_vert, test_ephys, test_sim;
};

// Joint fine-tuning: decodes from z' = 0.5 z_m + 0.5 MLP(z_{m-2}, z_{m-1},
// q_m) for the recon/vert/ephys terms, plus the teacher-forced sim term.
std::vector<Stage3Record> finetune_stage3(Autoencoder& ae, LatentMLP& mlp,
                                          const PoissonSolver& solver,
                                          const Dataset& ds,
                                          const ReferenceFrame& ref,
                                          const TrainConfig& cfg);

struct RolloutResult {
  std::vector<Eigen::VectorXd> frames;  // predicted frames 2..N-1
  double seconds;                       // wall clock for the full rollout
};

// Free-running latent rollout from the first two ground-truth frames of the
// trajectory; q_abs/q_rel indexed like the context (frame m).
RolloutResult rollout_latent(const LatentMLP& mlp, const Autoencoder& ae,
                             const PoissonSolver& solver,
                             const Eigen::VectorXd& z1,
                             const Eigen::VectorXd& z2,
                             const std::vector<Eigen::VectorXd>& q_abs,
                             const std::vector<Eigen::VectorXd>& q_rel,
                             int n_frames);

}  // namespace shellflow
