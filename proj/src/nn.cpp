#include "shellflow/nn.hpp"

#include <cmath>

namespace shellflow {

int ParamStore::add(const std::string& name, int rows, int cols) {
  if (has(name)) throw NnError("duplicate parameter name: " + name);
  entries_.push_back({name, Eigen::MatrixXd::Zero(rows, cols),
                      Eigen::MatrixXd::Zero(rows, cols)});
  return static_cast<int>(entries_.size()) - 1;
}

int ParamStore::index(const std::string& name) const {
  for (size_t i = 0; i < entries_.size(); ++i)
    if (entries_[i].name == name) return static_cast<int>(i);
  throw NnError("unknown parameter: " + name);
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

void ParamStore::zero_grads() {
  for (auto& e : entries_) e.grad.setZero();
}

void ParamStore::init_uniform(int idx, std::mt19937_64& rng) {
  auto& v = entries_[idx].value;
  const double bound = 1.0 / std::sqrt(static_cast<double>(v.cols()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (int c = 0; c < v.cols(); ++c)
    for (int r = 0; r < v.rows(); ++r) v(r, c) = dist(rng);
}

Adam::Adam(ParamStore& store, AdamConfig cfg) : store_(&store), cfg_(cfg) {
  for (int i = 0; i < store.size(); ++i) {
    m_.push_back(Eigen::MatrixXd::Zero(store.value(i).rows(),
                                       store.value(i).cols()));
    v_.push_back(m_.back());
  }
}

void Adam::step() {
  if (static_cast<int>(m_.size()) != store_->size())
    throw NnError("parameter store changed size after Adam construction");
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (int i = 0; i < store_->size(); ++i) {
    const Eigen::MatrixXd& g = store_->grad(i);
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] +
            (1.0 - cfg_.beta2) * g.cwiseProduct(g);
    const Eigen::ArrayXXd mh = m_[i].array() / bc1;
    const Eigen::ArrayXXd vh = v_[i].array() / bc2;
    store_->value(i).array() -= cfg_.lr * mh / (vh.sqrt() + cfg_.eps);
  }
}

Eigen::SparseMatrix<double> neighbor_average(const Adjacency& adj) {
  const int K = static_cast<int>(adj.one_ring.size());
  std::vector<Eigen::Triplet<double>> trips;
  for (int i = 0; i < K; ++i) {
    if (adj.one_ring[i].empty()) continue;
    const double wv = 1.0 / static_cast<double>(adj.one_ring[i].size());
    for (int j : adj.one_ring[i]) trips.emplace_back(i, j, wv);
  }
  Eigen::SparseMatrix<double> a(K, K);
  a.setFromTriplets(trips.begin(), trips.end());
  return a;
}

GraphConv GraphConv::create(ParamStore& store, const std::string& name,
                            int c_in, int c_out, std::mt19937_64& rng) {
  GraphConv l;
  l.c_in = c_in;
  l.c_out = c_out;
  l.w = store.add(name + ".w", c_out, c_in);
  l.wn = store.add(name + ".wn", c_out, c_in);
  l.b = store.add(name + ".b", c_out, 1);
  store.init_uniform(l.w, rng);
  store.init_uniform(l.wn, rng);
  return l;
}

Eigen::MatrixXd GraphConv::forward(const ParamStore& store,
                                   const Eigen::MatrixXd& x,
                                   const Eigen::SparseMatrix<double>& avg) const {
  if (x.cols() != c_in) throw NnError("graph_conv: channel mismatch");
  Eigen::MatrixXd y = x * store.value(w).transpose() +
                      (avg * x) * store.value(wn).transpose();
  y.rowwise() += store.value(b).col(0).transpose();
  return y;
}

Eigen::MatrixXd GraphConv::backward(ParamStore& store, const Eigen::MatrixXd& x,
                                    const Eigen::SparseMatrix<double>& avg,
                                    const Eigen::MatrixXd& dy) const {
  store.grad(w) += dy.transpose() * x;
  store.grad(wn) += dy.transpose() * (avg * x);
  store.grad(b).col(0) += dy.colwise().sum().transpose();
  return dy * store.value(w) + avg.transpose() * (dy * store.value(wn));
}

GraphConvTranspose GraphConvTranspose::create(ParamStore& store,
                                              const std::string& name,
                                              const GraphConv& tied) {
  GraphConvTranspose l;
  l.w = tied.w;
  l.wn = tied.wn;
  l.c_in = tied.c_out;
  l.c_out = tied.c_in;
  l.b = store.add(name + ".b", tied.c_in, 1);
  return l;
}

Eigen::MatrixXd GraphConvTranspose::forward(
    const ParamStore& store, const Eigen::MatrixXd& u,
    const Eigen::SparseMatrix<double>& avg) const {
  if (u.cols() != c_in) throw NnError("graph_conv_transpose: channel mismatch");
  Eigen::MatrixXd y =
      u * store.value(w) + avg.transpose() * (u * store.value(wn));
  y.rowwise() += store.value(b).col(0).transpose();
  return y;
}

Eigen::MatrixXd GraphConvTranspose::backward(
    ParamStore& store, const Eigen::MatrixXd& u,
    const Eigen::SparseMatrix<double>& avg, const Eigen::MatrixXd& du) const {
  store.grad(w) += u.transpose() * du;
  store.grad(wn) += u.transpose() * (avg * du);
  store.grad(b).col(0) += du.colwise().sum().transpose();
  return du * store.value(w).transpose() +
         (avg * du) * store.value(wn).transpose();
}

Dense Dense::create(ParamStore& store, const std::string& name, int in,
                    int out, std::mt19937_64& rng) {
  Dense l;
  l.in = in;
  l.out = out;
  l.w = store.add(name + ".w", out, in);
  l.b = store.add(name + ".b", out, 1);
  store.init_uniform(l.w, rng);
  return l;
}

Eigen::VectorXd Dense::forward(const ParamStore& store,
                               const Eigen::VectorXd& x) const {
  if (x.size() != in) throw NnError("dense: input size mismatch");
  return store.value(w) * x + store.value(b).col(0);
}

Eigen::VectorXd Dense::backward(ParamStore& store, const Eigen::VectorXd& x,
                                const Eigen::VectorXd& dy) const {
  store.grad(w) += dy * x.transpose();
  store.grad(b).col(0) += dy;
  return store.value(w).transpose() * dy;
}

DenseTranspose DenseTranspose::create(ParamStore& store,
                                      const std::string& name,
                                      const Dense& tied) {
  DenseTranspose l;
  l.w = tied.w;
  l.in = tied.out;
  l.out = tied.in;
  l.b = store.add(name + ".b", tied.in, 1);
  return l;
}

Eigen::VectorXd DenseTranspose::forward(const ParamStore& store,
                                        const Eigen::VectorXd& z) const {
  if (z.size() != in) throw NnError("dense_transpose: input size mismatch");
  return store.value(w).transpose() * z + store.value(b).col(0);
}

Eigen::VectorXd DenseTranspose::backward(ParamStore& store,
                                         const Eigen::VectorXd& z,
                                         const Eigen::VectorXd& dy) const {
  store.grad(w) += z * dy.transpose();
  store.grad(b).col(0) += dy;
  return store.value(w) * dy;
}

}  // namespace shellflow
