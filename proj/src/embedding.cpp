#include "shellflow/embedding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace shellflow {

namespace {

Eigen::MatrixXd feat_to_mat(const Eigen::VectorXd& data) {
  const int K = static_cast<int>(data.size() / 9);
  Eigen::MatrixXd m(K, 9);
  for (int i = 0; i < K; ++i) m.row(i) = data.segment<9>(9 * i).transpose();
  return m;
}

Eigen::VectorXd mat_to_feat(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(9 * m.rows());
  for (int i = 0; i < m.rows(); ++i)
    v.segment<9>(9 * i) = m.row(i).transpose();
  return v;
}

}  // namespace

Autoencoder Autoencoder::create(const ReferenceFrame& ref, int latent_dim,
                                uint64_t seed) {
  Autoencoder ae;
  ae.K_ = ref.mesh.vertex_count();
  ae.latent_dim_ = latent_dim;
  ae.avg_ = neighbor_average(ref.adj);
  std::mt19937_64 rng(seed);
  ae.c1_ = GraphConv::create(ae.params_, "c1", 9, 9, rng);
  ae.c2_ = GraphConv::create(ae.params_, "c2", 9, 9, rng);
  ae.fc_ = Dense::create(ae.params_, "fc", 9 * ae.K_, latent_dim, rng);
  ae.c2t_ = GraphConvTranspose::create(ae.params_, "c2t", ae.c2_);
  ae.c1t_ = GraphConvTranspose::create(ae.params_, "c1t", ae.c1_);
  ae.fct_ = DenseTranspose::create(ae.params_, "fct", ae.fc_);
  return ae;
}

Autoencoder Autoencoder::attach(const ReferenceFrame& ref, ParamStore params,
                                int latent_dim) {
  Autoencoder ae;
  ae.K_ = ref.mesh.vertex_count();
  ae.latent_dim_ = latent_dim;
  ae.avg_ = neighbor_average(ref.adj);
  ae.params_ = std::move(params);
  auto& ps = ae.params_;
  ae.c1_ = {ps.index("c1.w"), ps.index("c1.wn"), ps.index("c1.b"), 9, 9};
  ae.c2_ = {ps.index("c2.w"), ps.index("c2.wn"), ps.index("c2.b"), 9, 9};
  ae.fc_ = {ps.index("fc.w"), ps.index("fc.b"), 9 * ae.K_, latent_dim};
  ae.c2t_ = {ae.c2_.w, ae.c2_.wn, ps.index("c2t.b"), 9, 9};
  ae.c1t_ = {ae.c1_.w, ae.c1_.wn, ps.index("c1t.b"), 9, 9};
  ae.fct_ = {ae.fc_.w, ps.index("fct.b"), latent_dim, 9 * ae.K_};
  if (ps.value(ae.fc_.w).rows() != latent_dim ||
      ps.value(ae.fc_.w).cols() != 9 * ae.K_)
    throw NnError("checkpoint layer plan does not match the mesh");
  return ae;
}

nlohmann::json Autoencoder::plan() const {
  return {{"type", "graph_autoencoder"},
          {"K", K_},
          {"latent_dim", latent_dim_},
          {"conv_channels", {9, 9, 9}},
          {"activation", "leaky_relu"},
          {"slope", kSlope}};
}

Eigen::VectorXd Autoencoder::encode(const AcapFeature& x,
                                    EncodeTrace* trace) const {
  EncodeTrace local;
  EncodeTrace& t = trace ? *trace : local;
  t.x = feat_to_mat(x.data);
  t.a1 = c1_.forward(params_, t.x, avg_);
  t.h1 = leaky_relu(t.a1, kSlope);
  t.a2 = c2_.forward(params_, t.h1, avg_);
  t.h2 = leaky_relu(t.a2, kSlope);
  t.z = fc_.forward(params_, mat_to_feat(t.h2));
  return t.z;
}

AcapFeature Autoencoder::decode(const Eigen::VectorXd& z,
                                DecodeTrace* trace) const {
  DecodeTrace local;
  DecodeTrace& t = trace ? *trace : local;
  t.z = z;
  t.u = fct_.forward(params_, z);
  t.g = feat_to_mat(leaky_relu(t.u, kSlope));
  t.b2 = c2t_.forward(params_, t.g, avg_);
  t.h2 = leaky_relu(t.b2, kSlope);
  t.b1 = c1t_.forward(params_, t.h2, avg_);
  return AcapFeature{mat_to_feat(t.b1)};
}

Eigen::VectorXd Autoencoder::decode_backward(const DecodeTrace& t,
                                             const Eigen::VectorXd& d_feat) {
  const Eigen::MatrixXd db1 = feat_to_mat(d_feat);
  const Eigen::MatrixXd dh2 = c1t_.backward(params_, t.h2, avg_, db1);
  const Eigen::MatrixXd db2 = leaky_relu_backward(t.b2, dh2, kSlope);
  const Eigen::MatrixXd dg = c2t_.backward(params_, t.g, avg_, db2);
  const Eigen::VectorXd du =
      leaky_relu_backward(t.u, mat_to_feat(dg), kSlope);
  return fct_.backward(params_, t.z, du);
}

Eigen::VectorXd Autoencoder::encode_backward(const EncodeTrace& t,
                                             const Eigen::VectorXd& dz) {
  const Eigen::VectorXd dflat = fc_.backward(params_, mat_to_feat(t.h2), dz);
  const Eigen::MatrixXd dh2 = feat_to_mat(dflat);
  const Eigen::MatrixXd da2 = leaky_relu_backward(t.a2, dh2, kSlope);
  const Eigen::MatrixXd dh1 = c2_.backward(params_, t.h1, avg_, da2);
  const Eigen::MatrixXd da1 = leaky_relu_backward(t.a1, dh1, kSlope);
  return mat_to_feat(c1_.backward(params_, t.x, avg_, da1));
}

double loss_recon(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                  const std::vector<int>& frames, double grad_weight) {
  if (frames.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(frames.size());
  double loss = 0.0;
  for (int m : frames) {
    Autoencoder::EncodeTrace et;
    Autoencoder::DecodeTrace dt;
    const Eigen::VectorXd z = ae.encode(feats[m], &et);
    const AcapFeature y = ae.decode(z, &dt);
    const Eigen::VectorXd r = y.data - feats[m].data;
    loss += inv_n * r.squaredNorm();
    if (grad_weight != 0.0) {
      const Eigen::VectorXd dz =
          ae.decode_backward(dt, (2.0 * grad_weight * inv_n) * r);
      ae.encode_backward(et, dz);
    }
  }
  return loss;
}

double loss_vert(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                 const Dataset& ds, const PoissonSolver& solver,
                 const std::vector<int>& frames, double grad_weight) {
  if (frames.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(frames.size());
  double loss = 0.0;
  for (int m : frames) {
    Autoencoder::EncodeTrace et;
    Autoencoder::DecodeTrace dt;
    const Eigen::VectorXd z = ae.encode(feats[m], &et);
    const AcapFeature y = ae.decode(z, &dt);
    const Eigen::VectorXd q = ds.grasp_targets(m);
    const Eigen::VectorXd p = acap_inverse(y, q, solver);
    const Eigen::VectorXd r = p - ds.frames[m];
    loss += inv_n * r.squaredNorm();
    if (grad_weight != 0.0) {
      const Eigen::VectorXd d_feat = acap_inverse_gradient(
          y, q, solver, (2.0 * grad_weight * inv_n) * r);
      ae.encode_backward(et, ae.decode_backward(dt, d_feat));
    }
  }
  return loss;
}

double loss_ephys(Autoencoder& ae, const std::vector<AcapFeature>& feats,
                  const Dataset& ds, const PoissonSolver& solver,
                  const std::vector<int>& triple_ends, double grad_weight) {
  if (triple_ends.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(triple_ends.size());
  double loss = 0.0;
  for (int m : triple_ends) {
    if (m < 2) throw NnError("triple end before frame 2");
    // frames m-2, m-1 pass forward only; gradients are severed there.
    Eigen::VectorXd recon[3];
    Autoencoder::EncodeTrace et;
    Autoencoder::DecodeTrace dt;
    AcapFeature y_m;
    for (int s = 0; s < 3; ++s) {
      const int f = m - 2 + s;
      const bool last = s == 2;
      Autoencoder::EncodeTrace* etp = last ? &et : nullptr;
      Autoencoder::DecodeTrace* dtp = last ? &dt : nullptr;
      const Eigen::VectorXd z = ae.encode(feats[f], etp);
      AcapFeature y = ae.decode(z, dtp);
      recon[s] = acap_inverse(y, ds.grasp_targets(f), solver);
      if (last) y_m = std::move(y);
    }
    const Eigen::VectorXd q_m = ds.grasp_targets(m);
    loss += inv_n * physics_loss(recon[0], recon[1], recon[2], q_m, ds.cfg);
    if (grad_weight != 0.0) {
      const Eigen::VectorXd g =
          physics_loss_gradient(recon[0], recon[1], recon[2], q_m, ds.cfg);
      const Eigen::VectorXd d_feat = acap_inverse_gradient(
          y_m, q_m, solver, (grad_weight * inv_n) * g);
      ae.encode_backward(et, ae.decode_backward(dt, d_feat));
    }
  }
  return loss;
}

namespace {

// Frames whose full (m-2, m-1, m) context lies in the given split.
std::vector<int> triples_in_split(const std::vector<int>& split, int label) {
  std::vector<int> ends;
  for (size_t m = 2; m < split.size(); ++m)
    if (split[m] == label && split[m - 1] == label && split[m - 2] == label)
      ends.push_back(static_cast<int>(m));
  return ends;
}

std::vector<int> frames_in_split(const std::vector<int>& split, int label) {
  std::vector<int> out;
  for (size_t m = 0; m < split.size(); ++m)
    if (split[m] == label) out.push_back(static_cast<int>(m));
  return out;
}

}  // namespace

std::vector<EpochRecord> train_stage1(Autoencoder& ae, const Dataset& ds,
                                      const ReferenceFrame& ref,
                                      const PoissonSolver& solver,
                                      const TrainConfig& cfg) {
  const int N = static_cast<int>(ds.frames.size());
  std::vector<AcapFeature> feats(N);
  for (int m = 0; m < N; ++m) feats[m] = acap_forward(ref, ds.frames[m]);

  const std::vector<int> train = frames_in_split(ds.split, 0);
  const std::vector<int> test = frames_in_split(ds.split, 1);
  const std::vector<int> train_triples = triples_in_split(ds.split, 0);
  const std::vector<int> test_triples = triples_in_split(ds.split, 1);

  Adam adam(ae.params(), {cfg.lr});
  std::mt19937_64 rng(cfg.seed + 1);
  std::vector<EpochRecord> history;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train;
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(order.size(),
                                   start + static_cast<size_t>(cfg.batch));
      std::vector<int> batch(order.begin() + start, order.begin() + stop);
      std::vector<int> batch_triples;
      for (int m : batch)
        if (m >= 2 && ds.split[m - 1] == 0 && ds.split[m - 2] == 0)
          batch_triples.push_back(m);
      ae.params().zero_grads();
      double l = 0.0;
      if (cfg.lambda_recon > 0.0)
        l += cfg.lambda_recon *
             loss_recon(ae, feats, batch, cfg.lambda_recon);
      if (cfg.lambda_vert > 0.0)
        l += cfg.lambda_vert *
             loss_vert(ae, feats, ds, solver, batch, cfg.lambda_vert);
      if (cfg.lambda_ephys > 0.0 && !batch_triples.empty())
        l += cfg.lambda_ephys * loss_ephys(ae, feats, ds, solver,
                                           batch_triples, cfg.lambda_ephys);
      if (!std::isfinite(l))
        throw NnError("stage-1 loss diverged at epoch " +
                      std::to_string(epoch));
      adam.step();
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_recon = loss_recon(ae, feats, train, 0.0);
    rec.train_vert = loss_vert(ae, feats, ds, solver, train, 0.0);
    rec.train_ephys = loss_ephys(ae, feats, ds, solver, train_triples, 0.0);
    rec.test_recon = loss_recon(ae, feats, test, 0.0);
    rec.test_vert = loss_vert(ae, feats, ds, solver, test, 0.0);
    rec.test_ephys = loss_ephys(ae, feats, ds, solver, test_triples, 0.0);
    history.push_back(rec);
  }
  return history;
}

IkResult ik_solve(Autoencoder& ae, const PoissonSolver& solver,
                  const Eigen::VectorXd& q, const Eigen::VectorXd& z0,
                  const SimConfig& cfg, int max_iters, double grad_tol) {
  SimConfig elastic = cfg;
  elastic.gravity.setZero();
  elastic.obstacle.reset();

  auto objective = [&](const Eigen::VectorXd& z, Eigen::VectorXd* positions,
                       Autoencoder::DecodeTrace* dt, AcapFeature* feat) {
    AcapFeature y = ae.decode(z, dt);
    Eigen::VectorXd p = acap_inverse(y, q, solver);
    const double e = potential_energy(p, elastic);
    if (positions) *positions = std::move(p);
    if (feat) *feat = std::move(y);
    return e;
  };

  Eigen::VectorXd z = z0;
  Eigen::VectorXd p;
  Autoencoder::DecodeTrace dt;
  AcapFeature feat;
  double obj = objective(z, &p, &dt, &feat);
  if (!std::isfinite(obj)) throw NnError("ik: non-finite objective at start");

  IkResult res;
  res.converged = false;
  int it = 0;
  double gnorm = 0.0;
  for (; it < max_iters; ++it) {
    const Eigen::VectorXd gp = potential_gradient(p, elastic);
    const Eigen::VectorXd d_feat =
        acap_inverse_gradient(feat, q, solver, gp);
    ae.params().zero_grads();
    const Eigen::VectorXd gz = ae.decode_backward(dt, d_feat);
    ae.params().zero_grads();
    gnorm = gz.norm();
    if (gnorm < grad_tol) {
      res.converged = true;
      break;
    }
    double alpha = 1.0;
    bool accepted = false;
    const double g2 = gz.squaredNorm();
    while (alpha > 1e-14) {
      const Eigen::VectorXd z_try = z - alpha * gz;
      Eigen::VectorXd p_try;
      Autoencoder::DecodeTrace dt_try;
      AcapFeature feat_try;
      const double obj_try = objective(z_try, &p_try, &dt_try, &feat_try);
      if (std::isfinite(obj_try) && obj_try <= obj - 1e-4 * alpha * g2) {
        z = z_try;
        p = std::move(p_try);
        dt = std::move(dt_try);
        feat = std::move(feat_try);
        obj = obj_try;
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) break;  // line search stalled: local minimum to tolerance
  }

  res.z = z;
  res.positions = p;
  res.objective = obj;
  res.grad_norm = gnorm;
  res.iterations = it;
  return res;
}

}  // namespace shellflow
