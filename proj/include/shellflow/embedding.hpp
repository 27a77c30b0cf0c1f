#pragma once

#include <json.hpp>
#include <vector>

#include "shellflow/acap.hpp"
#include "shellflow/datagen.hpp"
#include "shellflow/nn.hpp"

namespace shellflow {

// Weight-tied graph-conv autoencoder over per-vertex 9-channel features:
//   encode: x -> C1 -> lrelu -> C2 -> lrelu -> flatten -> FC -> z
//   decode: z -> FC^T -> lrelu -> C2^T -> lrelu -> C1^T -> xhat
// FC^T / C^T share weights with their forward twins and own their biases.
class Autoencoder {
 public:
  static constexpr double kSlope = 0.1;

  static Autoencoder create(const ReferenceFrame& ref, int latent_dim,
                            uint64_t seed);
  // Rebinds layer handles onto a loaded ParamStore (same layer plan).
  static Autoencoder attach(const ReferenceFrame& ref, ParamStore params,
                            int latent_dim);

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  int latent_dim() const { return latent_dim_; }
  int vertex_count() const { return K_; }

  struct EncodeTrace {
    Eigen::MatrixXd x, a1, h1, a2, h2;  // K x 9 stages
    Eigen::VectorXd z;
  };
  struct DecodeTrace {
    Eigen::VectorXd z, u;               // u = FC^T output, 9K
    Eigen::MatrixXd g, b2, h2, b1;      // K x 9 stages
  };

  Eigen::VectorXd encode(const AcapFeature& x, EncodeTrace* trace) const;
  AcapFeature decode(const Eigen::VectorXd& z, DecodeTrace* trace) const;

  // Accumulate parameter grads; return the input-side gradient.
  Eigen::VectorXd decode_backward(const DecodeTrace& trace,
                                  const Eigen::VectorXd& d_feat);  // -> dz
  Eigen::VectorXd encode_backward(const EncodeTrace& trace,
                                  const Eigen::VectorXd& dz);  // -> d_feat

  nlohmann::json plan() const;

 private:
  ParamStore params_;
  GraphConv c1_, c2_;
  GraphConvTranspose c2t_, c1t_;
  Dense fc_;
  DenseTranspose fct_;
  Eigen::SparseMatrix<double> avg_;
  int K_ = 0, latent_dim_ = 0;
};

struct TrainConfig {
  double lambda_recon = 1.0;
  double lambda_vert = 1.0;
  double lambda_ephys = 0.5;
  double lambda_sim = 1.0;
  double lambda_mphys = 0.1;
  double lr = 1e-3;
  int epochs = 200;
  int batch = 16;
  int unroll = 8;  // truncated window for the stage-2 physics loss
  uint64_t seed = 0;
};

// Mean over frames of the squared feature-space reconstruction error.
// grad_weight w accumulates the gradient of w * loss into ae.params();
// w = 0 skips the backward pass entirely.
double loss_recon(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                  const std::vector<int>& frames, double grad_weight);

// Mean squared vertex error after full reconstruction through acap_inverse.
double loss_vert(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                 const Dataset& ds, const PoissonSolver& solver,
                 const std::vector<int>& frames, double grad_weight);

// L_phys on a reconstructed triple ending at frame m; gradients flow only
// through the frame-m path (the first two frames are held fixed).
double loss_ephys(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                  const Dataset& ds, const PoissonSolver& solver,
                  const std::vector<int>& triple_ends, double grad_weight);

struct EpochRecord {
  int epoch;
  double train_recon, train_vert, train_ephys;
  double test_recon, test_vert, test_ephys;
};

std::vector<EpochRecord> train_stage1(Autoencoder& ae, const Dataset& ds,
                                      const ReferenceFrame& ref,
                                      const PoissonSolver& solver,
                                      const TrainConfig& cfg);

struct IkResult {
  Eigen::VectorXd z;
  Eigen::VectorXd positions;
  double objective;
  double grad_norm;
  int iterations;
  bool converged;
};

// argmin_z (P_s + P_b)(acap_inverse(D(z), q)): gradient descent with
// backtracking, 500 iteration cap; cfg supplies the material terms only
// (gravity and collision are ignored).
IkResult ik_solve(Autoencoder& ae, const PoissonSolver& solver,
                  const Eigen::VectorXd& q, const Eigen::VectorXd& z0,
                  const SimConfig& cfg, int max_iters = 500,
                  double grad_tol = 1e-8);

}  // namespace shellflow
