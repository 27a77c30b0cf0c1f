#include <doctest.h>

#include <random>

#include "shellflow/nn.hpp"
#include "testing.hpp"

using namespace shellflow;
using namespace shellflow::testing;

namespace {

Eigen::MatrixXd random_mat(int r, int c, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (int j = 0; j < c; ++j)
    for (int i = 0; i < r; ++i) m(i, j) = u(rng);
  return m;
}

}  // namespace

TEST_CASE("neighbor average rows sum to one") {
  auto [mesh, cfg] = tiny_sheet(4, false);
  (void)cfg;
  const Adjacency adj = build_adjacency(mesh);
  const auto avg = neighbor_average(adj);
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(mesh.vertex_count());
  CHECK(((avg * ones) - ones).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("graph conv matches dense per-vertex oracle") {
  auto [mesh, cfg] = tiny_sheet(3, false);
  (void)cfg;
  const Adjacency adj = build_adjacency(mesh);
  const auto avg = neighbor_average(adj);
  std::mt19937_64 rng(41);
  ParamStore ps;
  const GraphConv conv = GraphConv::create(ps, "c", 4, 5, rng);
  ps.init_uniform(conv.b, rng);
  const Eigen::MatrixXd x = random_mat(mesh.vertex_count(), 4, rng);
  const Eigen::MatrixXd y = conv.forward(ps, x, avg);
  for (int i = 0; i < mesh.vertex_count(); ++i) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(4);
    for (int j : adj.one_ring[i]) mean += x.row(j).transpose();
    mean /= static_cast<double>(adj.one_ring[i].size());
    const Eigen::VectorXd yi = ps.value(conv.w) * x.row(i).transpose() +
                               ps.value(conv.wn) * mean +
                               ps.value(conv.b).col(0);
    CHECK((y.row(i).transpose() - yi).norm() < 1e-12);
  }
}

TEST_CASE("transpose layers are exact adjoints of the linear part") {
  auto [mesh, cfg] = tiny_sheet(3, false);
  (void)cfg;
  const Adjacency adj = build_adjacency(mesh);
  const auto avg = neighbor_average(adj);
  std::mt19937_64 rng(43);
  ParamStore ps;
  const GraphConv conv = GraphConv::create(ps, "c", 3, 6, rng);
  const GraphConvTranspose convt =
      GraphConvTranspose::create(ps, "ct", conv);
  const int K = mesh.vertex_count();
  for (int t = 0; t < 10; ++t) {
    const Eigen::MatrixXd x = random_mat(K, 3, rng);
    const Eigen::MatrixXd v = random_mat(K, 6, rng);
    // strip both biases: <Cx, v> == <x, C^T v>
    Eigen::MatrixXd cx = conv.forward(ps, x, avg);
    cx.rowwise() -= ps.value(conv.b).col(0).transpose();
    Eigen::MatrixXd ctv = convt.forward(ps, v, avg);
    ctv.rowwise() -= ps.value(convt.b).col(0).transpose();
    const double lhs = (cx.array() * v.array()).sum();
    const double rhs = (x.array() * ctv.array()).sum();
    CHECK(std::abs(lhs - rhs) < 1e-10 * std::max(1.0, std::abs(lhs)));
  }
}

TEST_CASE("layer backward passes match finite differences") {
  auto [mesh, cfg] = tiny_sheet(3, false);
  (void)cfg;
  const Adjacency adj = build_adjacency(mesh);
  const auto avg = neighbor_average(adj);
  std::mt19937_64 rng(47);
  ParamStore ps;
  const GraphConv conv = GraphConv::create(ps, "c", 2, 3, rng);
  const GraphConvTranspose convt = GraphConvTranspose::create(ps, "ct", conv);
  const Dense dense = Dense::create(ps, "d", 5, 4, rng);
  const DenseTranspose denset = DenseTranspose::create(ps, "dt", dense);
  ps.init_uniform(conv.b, rng);
  ps.init_uniform(convt.b, rng);
  ps.init_uniform(dense.b, rng);
  ps.init_uniform(denset.b, rng);

  const int K = mesh.vertex_count();
  const Eigen::MatrixXd x = random_mat(K, 2, rng);
  const Eigen::MatrixXd up = random_mat(K, 3, rng);
  const Eigen::MatrixXd u = random_mat(K, 3, rng);
  const Eigen::MatrixXd up2 = random_mat(K, 2, rng);
  const Eigen::VectorXd xv = random_mat(5, 1, rng);
  const Eigen::VectorXd upv = random_mat(4, 1, rng);
  const Eigen::VectorXd zv = random_mat(4, 1, rng);
  const Eigen::VectorXd upz = random_mat(5, 1, rng);

  // scalar objective: sum(up .* layer(x)); check input + parameter grads
  ps.zero_grads();
  const Eigen::MatrixXd dx = conv.backward(ps, x, avg, up);
  const Eigen::MatrixXd du = convt.backward(ps, u, avg, up2);
  const Eigen::VectorXd dxv = dense.backward(ps, xv, upv);
  const Eigen::VectorXd dzv = denset.backward(ps, zv, upz);

  auto objective = [&]() {
    return (conv.forward(ps, x, avg).array() * up.array()).sum() +
           (convt.forward(ps, u, avg).array() * up2.array()).sum() +
           upv.dot(dense.forward(ps, xv)) + upz.dot(denset.forward(ps, zv));
  };
  const double h = 1e-6;
  for (int idx = 0; idx < ps.size(); ++idx) {
    auto& val = ps.value(idx);
    for (int c = 0; c < val.cols(); ++c)
      for (int r = 0; r < val.rows(); ++r) {
        const double save = val(r, c);
        val(r, c) = save + h;
        const double fp = objective();
        val(r, c) = save - h;
        const double fm = objective();
        val(r, c) = save;
        const double fd = (fp - fm) / (2.0 * h);
        CHECK(std::abs(ps.grad(idx)(r, c) - fd) <
              1e-6 * std::max(1.0, std::abs(fd)));
      }
  }
  // input gradients via directional FD
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  const Eigen::MatrixXd dir = random_mat(K, 2, rng);
  auto obj_x = [&](double eps) {
    return (conv.forward(ps, x + eps * dir, avg).array() * up.array()).sum();
  };
  const double fd_dir = (obj_x(h) - obj_x(-h)) / (2.0 * h);
  CHECK(std::abs((dx.array() * dir.array()).sum() - fd_dir) < 1e-6);
  (void)du;
  (void)dxv;
  (void)dzv;
}

TEST_CASE("adam minimizes a quadratic") {
  ParamStore ps;
  const int idx = ps.add("x", 3, 1);
  ps.value(idx) << 1.0, -2.0, 0.5;
  Adam adam(ps, {0.05});
  for (int it = 0; it < 500; ++it) {
    ps.zero_grads();
    ps.grad(idx) = 2.0 * ps.value(idx);
    adam.step();
  }
  CHECK(ps.value(idx).norm() < 1e-4);
}

TEST_CASE("param store init is deterministic per seed") {
  ParamStore a, b;
  std::mt19937_64 r1(99), r2(99);
  const int ia = a.add("w", 4, 7);
  const int ib = b.add("w", 4, 7);
  a.init_uniform(ia, r1);
  b.init_uniform(ib, r2);
  CHECK((a.value(ia) - b.value(ib)).norm() == 0.0);
}
