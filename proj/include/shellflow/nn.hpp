#pragma once

#include <Eigen/Dense>
#include <Eigen/Sparse>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "shellflow/mesh.hpp"

namespace shellflow {

struct NnError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named float64 tensors with matching gradient accumulators.
// Deterministic iteration order (insertion order).
class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols);
  int index(const std::string& name) const;
  bool has(const std::string& name) const;

  Eigen::MatrixXd& value(int idx) { return entries_[idx].value; }
  const Eigen::MatrixXd& value(int idx) const { return entries_[idx].value; }
  Eigen::MatrixXd& grad(int idx) { return entries_[idx].grad; }
  const Eigen::MatrixXd& grad(int idx) const { return entries_[idx].grad; }
  const std::string& name(int idx) const { return entries_[idx].name; }
  int size() const { return static_cast<int>(entries_.size()); }

  void zero_grads();
  // uniform init scaled by 1/sqrt(fan_in); fan_in = cols
  void init_uniform(int idx, std::mt19937_64& rng);

 private:
  struct Entry {
    std::string name;
    Eigen::MatrixXd value, grad;
  };
  std::vector<Entry> entries_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(ParamStore& store, AdamConfig cfg);
  void step();  // consumes current grads; parameters with zero grad move only
                // through stale moments, so call zero_grads before backward
 private:
  ParamStore* store_;
  AdamConfig cfg_;
  std::vector<Eigen::MatrixXd> m_, v_;
  long t_ = 0;
};

inline Eigen::MatrixXd leaky_relu(const Eigen::MatrixXd& x, double slope) {
  return x.cwiseMax(slope * x);
}
inline Eigen::MatrixXd leaky_relu_backward(const Eigen::MatrixXd& x,
                                           const Eigen::MatrixXd& dy,
                                           double slope) {
  return (x.array() > 0.0).select(dy, slope * dy);
}

// Row-normalized 1-ring averaging operator; empty rings give zero rows.
Eigen::SparseMatrix<double> neighbor_average(const Adjacency& adj);

// y_i = W x_i + W_N mean_{j in N1_i} x_j + b ; x is K x c_in row-major
// per vertex, y is K x c_out.
struct GraphConv {
  int w = -1, wn = -1, b = -1;
  int c_in = 0, c_out = 0;

  static GraphConv create(ParamStore& store, const std::string& name, int c_in,
                          int c_out, std::mt19937_64& rng);
  Eigen::MatrixXd forward(const ParamStore& store, const Eigen::MatrixXd& x,
                          const Eigen::SparseMatrix<double>& avg) const;
  // accumulates parameter grads, returns dL/dx
  Eigen::MatrixXd backward(ParamStore& store, const Eigen::MatrixXd& x,
                           const Eigen::SparseMatrix<double>& avg,
                           const Eigen::MatrixXd& dy) const;
};

// Exact adjoint of GraphConv's linear part (shared W, W_N), own bias.
struct GraphConvTranspose {
  int w = -1, wn = -1, b = -1;
  int c_in = 0, c_out = 0;  // c_in = tied layer's c_out

  static GraphConvTranspose create(ParamStore& store, const std::string& name,
                                   const GraphConv& tied);
  Eigen::MatrixXd forward(const ParamStore& store, const Eigen::MatrixXd& u,
                          const Eigen::SparseMatrix<double>& avg) const;
  Eigen::MatrixXd backward(ParamStore& store, const Eigen::MatrixXd& u,
                           const Eigen::SparseMatrix<double>& avg,
                           const Eigen::MatrixXd& du) const;
};

struct Dense {
  int w = -1, b = -1;
  int in = 0, out = 0;

  static Dense create(ParamStore& store, const std::string& name, int in,
                      int out, std::mt19937_64& rng);
  Eigen::VectorXd forward(const ParamStore& store,
                          const Eigen::VectorXd& x) const;
  Eigen::VectorXd backward(ParamStore& store, const Eigen::VectorXd& x,
                           const Eigen::VectorXd& dy) const;
};

struct DenseTranspose {
  int w = -1, b = -1;
  int in = 0, out = 0;  // in = tied layer's out

  static DenseTranspose create(ParamStore& store, const std::string& name,
                               const Dense& tied);
  Eigen::VectorXd forward(const ParamStore& store,
                          const Eigen::VectorXd& z) const;
  Eigen::VectorXd backward(ParamStore& store, const Eigen::VectorXd& z,
                           const Eigen::VectorXd& dy) const;
};

}  // namespace shellflow
