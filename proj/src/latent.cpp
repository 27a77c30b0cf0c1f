#include "shellflow/latent.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>

namespace shellflow {

LatentMLP LatentMLP::create(int latent_dim, int grasp_dim, int hidden,
                            int n_hidden, uint64_t seed) {
  LatentMLP mlp;
  mlp.latent_dim_ = latent_dim;
  mlp.grasp_dim_ = grasp_dim;
  mlp.hidden_ = hidden;
  std::mt19937_64 rng(seed);
  int in = 2 * latent_dim + grasp_dim;
  for (int l = 0; l < n_hidden; ++l) {
    mlp.layers_.push_back(Dense::create(mlp.params_,
                                        "mlp" + std::to_string(l), in, hidden,
                                        rng));
    in = hidden;
  }
  mlp.layers_.push_back(
      Dense::create(mlp.params_, "mlp_out", in, latent_dim, rng));
  return mlp;
}

LatentMLP LatentMLP::attach(ParamStore params, int latent_dim, int grasp_dim,
                            int hidden, int n_hidden) {
  LatentMLP mlp;
  mlp.latent_dim_ = latent_dim;
  mlp.grasp_dim_ = grasp_dim;
  mlp.hidden_ = hidden;
  mlp.params_ = std::move(params);
  auto& ps = mlp.params_;
  int in = 2 * latent_dim + grasp_dim;
  for (int l = 0; l < n_hidden; ++l) {
    const std::string name = "mlp" + std::to_string(l);
    mlp.layers_.push_back(
        {ps.index(name + ".w"), ps.index(name + ".b"), in, hidden});
    in = hidden;
  }
  mlp.layers_.push_back(
      {ps.index("mlp_out.w"), ps.index("mlp_out.b"), in, latent_dim});
  if (ps.value(mlp.layers_[0].w).cols() != 2 * latent_dim + grasp_dim)
    throw NnError("checkpoint layer plan does not match the grasp set");
  return mlp;
}

nlohmann::json LatentMLP::plan() const {
  return {{"type", "latent_mlp"},
          {"latent_dim", latent_dim_},
          {"grasp_dim", grasp_dim_},
          {"hidden", hidden_},
          {"n_hidden", static_cast<int>(layers_.size()) - 1},
          {"activation", "leaky_relu"},
          {"slope", kSlope}};
}

Eigen::VectorXd LatentMLP::forward(const Eigen::VectorXd& z_prev2,
                                   const Eigen::VectorXd& z_prev1,
                                   const Eigen::VectorXd& q,
                                   Trace* trace) const {
  if (z_prev2.size() != latent_dim_ || z_prev1.size() != latent_dim_ ||
      q.size() != grasp_dim_)
    throw NnError("mlp_step: input size mismatch");
  Trace local;
  Trace& t = trace ? *trace : local;
  t.in.resize(input_dim());
  t.in << z_prev2, z_prev1, q;
  t.pre.clear();
  Eigen::VectorXd h = t.in;
  for (size_t l = 0; l + 1 < layers_.size(); ++l) {
    t.pre.push_back(layers_[l].forward(params_, h));
    h = leaky_relu(t.pre.back(), kSlope);
  }
  return layers_.back().forward(params_, h);
}

Eigen::VectorXd LatentMLP::backward(const Trace& t,
                                    const Eigen::VectorXd& d_out) {
  const size_t n_hidden = layers_.size() - 1;
  Eigen::VectorXd d = layers_.back().backward(
      params_, leaky_relu(t.pre.back(), kSlope), d_out);
  for (size_t l = n_hidden; l-- > 0;) {
    const Eigen::VectorXd input =
        l == 0 ? t.in : Eigen::VectorXd(leaky_relu(t.pre[l - 1], kSlope));
    const Eigen::VectorXd dpre = leaky_relu_backward(t.pre[l], d, kSlope);
    d = layers_[l].backward(params_, input, dpre);
  }
  return d;
}

Eigen::VectorXd mlp_step(const LatentMLP& mlp, const Eigen::VectorXd& z_prev2,
                         const Eigen::VectorXd& z_prev1,
                         const Eigen::VectorXd& q) {
  return mlp.forward(z_prev2, z_prev1, q, nullptr);
}

LatentContext build_latent_context(const Autoencoder& ae,
                                   const ReferenceFrame& ref,
                                   const Dataset& ds) {
  LatentContext ctx;
  const int N = static_cast<int>(ds.frames.size());
  const int ng = static_cast<int>(ds.grasp.indices.size());
  const Eigen::VectorXd q0 = ds.grasp_targets(0);
  ctx.centroid0.setZero();
  for (int k = 0; k < ng; ++k) ctx.centroid0 += q0.segment<3>(3 * k);
  ctx.centroid0 /= ng;
  for (int m = 0; m < N; ++m) {
    ctx.z.push_back(ae.encode(acap_forward(ref, ds.frames[m]), nullptr));
    Eigen::VectorXd qa = ds.grasp_targets(m);
    Eigen::VectorXd qr = qa;
    for (int k = 0; k < ng; ++k) qr.segment<3>(3 * k) -= ctx.centroid0;
    ctx.q_abs.push_back(std::move(qa));
    ctx.q_rel.push_back(std::move(qr));
  }
  return ctx;
}

double loss_sim(LatentMLP& mlp, const LatentContext& ctx,
                const std::vector<int>& ends, double grad_weight) {
  if (ends.empty()) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(ends.size());
  double loss = 0.0;
  for (int m : ends) {
    LatentMLP::Trace tr;
    const Eigen::VectorXd pred =
        mlp.forward(ctx.z[m - 2], ctx.z[m - 1], ctx.q_rel[m], &tr);
    const Eigen::VectorXd r = pred - ctx.z[m];
    loss += inv_n * r.squaredNorm();
    if (grad_weight != 0.0)
      mlp.backward(tr, (2.0 * grad_weight * inv_n) * r);
  }
  return loss;
}

std::vector<UnrollWindow> make_windows(const std::vector<int>& split,
                                       int label, int window) {
  std::vector<UnrollWindow> out;
  const int n = static_cast<int>(split.size());
  int run_start = -1;
  auto flush = [&](int a, int b) {  // run [a, b)
    const int step = std::max(1, window - 2);
    for (int s = a; s + 3 <= b; s += step) {
      const int len = std::min(window, b - s);
      if (len < 3) break;
      out.push_back({s, len});
      if (s + len >= b) break;
    }
  };
  for (int m = 0; m <= n; ++m) {
    const bool in = m < n && split[m] == label;
    if (in && run_start < 0) run_start = m;
    if (!in && run_start >= 0) {
      flush(run_start, m);
      run_start = -1;
    }
  }
  return out;
}

double loss_mphys(LatentMLP& mlp, Autoencoder& ae, const PoissonSolver& solver,
                  const Dataset& ds, const LatentContext& ctx,
                  const std::vector<UnrollWindow>& windows,
                  double grad_weight) {
  if (windows.empty()) return 0.0;
  int n_terms = 0;
  for (const auto& w : windows) n_terms += w.length - 2;
  const double inv_n = 1.0 / static_cast<double>(n_terms);
  const int L = mlp.latent_dim();
  double loss = 0.0;

  for (const auto& w : windows) {
    const int len = w.length;
    std::vector<Eigen::VectorXd> zeta(len), pos(len);
    std::vector<LatentMLP::Trace> tr(len);
    std::vector<Autoencoder::DecodeTrace> dt(len);
    std::vector<AcapFeature> feat(len);
    zeta[0] = ctx.z[w.start];
    zeta[1] = ctx.z[w.start + 1];
    // first two positions: decoded start states, gradient paths severed
    for (int t = 0; t < 2; ++t)
      pos[t] = acap_inverse(ae.decode(zeta[t], nullptr),
                            ctx.q_abs[w.start + t], solver);
    for (int t = 2; t < len; ++t) {
      const int m = w.start + t;
      zeta[t] = mlp.forward(zeta[t - 2], zeta[t - 1], ctx.q_rel[m], &tr[t]);
      feat[t] = ae.decode(zeta[t], &dt[t]);
      pos[t] = acap_inverse(feat[t], ctx.q_abs[m], solver);
      loss += inv_n * physics_loss(pos[t - 2], pos[t - 1], pos[t],
                                   ctx.q_abs[m], ds.cfg);
    }
    if (grad_weight == 0.0) continue;
    std::vector<Eigen::VectorXd> dz(len, Eigen::VectorXd::Zero(L));
    for (int t = len - 1; t >= 2; --t) {
      const int m = w.start + t;
      const Eigen::VectorXd dp =
          (grad_weight * inv_n) *
          physics_loss_gradient(pos[t - 2], pos[t - 1], pos[t],
                                ctx.q_abs[m], ds.cfg);
      const Eigen::VectorXd d_feat =
          acap_inverse_gradient(feat[t], ctx.q_abs[m], solver, dp);
      dz[t] += ae.decode_backward(dt[t], d_feat);
      const Eigen::VectorXd d_in = mlp.backward(tr[t], dz[t]);
      dz[t - 2] += d_in.head(L);
      dz[t - 1] += d_in.segment(L, L);
    }
  }
  return loss;
}

namespace {

std::vector<int> ends_in_split(const std::vector<int>& split, int label) {
  std::vector<int> ends;
  for (size_t m = 2; m < split.size(); ++m)
    if (split[m] == label && split[m - 1] == label && split[m - 2] == label)
      ends.push_back(static_cast<int>(m));
  return ends;
}

}  // namespace

std::vector<Stage2Record> train_stage2(LatentMLP& mlp, Autoencoder& ae,
                                       const PoissonSolver& solver,
                                       const Dataset& ds,
                                       const ReferenceFrame& ref,
                                       const TrainConfig& cfg) {
  const LatentContext ctx = build_latent_context(ae, ref, ds);
  const std::vector<int> train_ends = ends_in_split(ds.split, 0);
  const std::vector<int> test_ends = ends_in_split(ds.split, 1);
  const std::vector<UnrollWindow> train_windows =
      make_windows(ds.split, 0, cfg.unroll);
  const std::vector<UnrollWindow> test_windows =
      make_windows(ds.split, 1, cfg.unroll);

  Adam adam(mlp.params(), {cfg.lr});
  std::mt19937_64 rng(cfg.seed + 2);
  std::vector<Stage2Record> history;
  size_t window_cursor = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<int> order = train_ends;
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(order.size(),
                                   start + static_cast<size_t>(cfg.batch));
      std::vector<int> batch(order.begin() + start, order.begin() + stop);
      mlp.params().zero_grads();
      ae.params().zero_grads();  // frozen; grads discarded
      double l = 0.0;
      if (cfg.lambda_sim > 0.0)
        l += cfg.lambda_sim * loss_sim(mlp, ctx, batch, cfg.lambda_sim);
      if (cfg.lambda_mphys > 0.0 && !train_windows.empty()) {
        const UnrollWindow w =
            train_windows[window_cursor++ % train_windows.size()];
        l += cfg.lambda_mphys *
             loss_mphys(mlp, ae, solver, ds, ctx, {w}, cfg.lambda_mphys);
      }
      if (!std::isfinite(l))
        throw NnError("stage-2 loss diverged at epoch " +
                      std::to_string(epoch));
      adam.step();
    }

    Stage2Record rec;
    rec.epoch = epoch;
    rec.train_sim = loss_sim(mlp, ctx, train_ends, 0.0);
    rec.test_sim = loss_sim(mlp, ctx, test_ends, 0.0);
    rec.train_mphys =
        loss_mphys(mlp, ae, solver, ds, ctx, train_windows, 0.0);
    rec.test_mphys = loss_mphys(mlp, ae, solver, ds, ctx, test_windows, 0.0);
    history.push_back(rec);
  }
  return history;
}

namespace {

struct Stage3Losses {
  double recon = 0.0, vert = 0.0, ephys = 0.0, sim = 0.0;
};

// Forward (and optionally backward) pass of the stage-3 objective over the
// given end frames. Decodes from z' = 0.5 z_m + 0.5 MLP(...).
Stage3Losses stage3_pass(Autoencoder& ae, LatentMLP& mlp,
                         const PoissonSolver& solver, const Dataset& ds,
                         const std::vector<AcapFeature>& feats,
                         const LatentContext& ctx, const std::vector<int>& ends,
                         const TrainConfig& cfg, bool with_grads) {
  Stage3Losses out;
  if (ends.empty()) return out;
  const double inv_n = 1.0 / static_cast<double>(ends.size());
  const int L = ae.latent_dim();

  for (int m : ends) {
    Autoencoder::EncodeTrace et0, et1, et2;
    const Eigen::VectorXd z0 = ae.encode(feats[m - 2], &et0);
    const Eigen::VectorXd z1 = ae.encode(feats[m - 1], &et1);
    const Eigen::VectorXd z2 = ae.encode(feats[m], &et2);
    LatentMLP::Trace tr;
    const Eigen::VectorXd zp = mlp.forward(z0, z1, ctx.q_rel[m], &tr);
    const Eigen::VectorXd zb = 0.5 * z2 + 0.5 * zp;

    Autoencoder::DecodeTrace dtb;
    const AcapFeature yb = ae.decode(zb, &dtb);
    const Eigen::VectorXd rf = yb.data - feats[m].data;
    const Eigen::VectorXd p = acap_inverse(yb, ctx.q_abs[m], solver);
    const Eigen::VectorXd rv = p - ds.frames[m];
    // physics context frames: plain decodes, gradient paths severed
    const Eigen::VectorXd p0 = acap_inverse(ae.decode(z0, nullptr),
                                            ctx.q_abs[m - 2], solver);
    const Eigen::VectorXd p1 = acap_inverse(ae.decode(z1, nullptr),
                                            ctx.q_abs[m - 1], solver);
    const Eigen::VectorXd rs = zp - z2;

    out.recon += inv_n * rf.squaredNorm();
    out.vert += inv_n * rv.squaredNorm();
    out.ephys += inv_n * physics_loss(p0, p1, p, ctx.q_abs[m], ds.cfg);
    out.sim += inv_n * rs.squaredNorm();
    if (!with_grads) continue;

    Eigen::VectorXd d_feat =
        (2.0 * cfg.lambda_recon * inv_n) * rf;
    if (cfg.lambda_vert > 0.0)
      d_feat += acap_inverse_gradient(yb, ctx.q_abs[m], solver,
                                      (2.0 * cfg.lambda_vert * inv_n) * rv);
    if (cfg.lambda_ephys > 0.0) {
      const Eigen::VectorXd gp =
          physics_loss_gradient(p0, p1, p, ctx.q_abs[m], ds.cfg);
      d_feat += acap_inverse_gradient(yb, ctx.q_abs[m], solver,
                                      (cfg.lambda_ephys * inv_n) * gp);
    }
    const Eigen::VectorXd dzb = ae.decode_backward(dtb, d_feat);
    Eigen::VectorXd dz2 = 0.5 * dzb;
    Eigen::VectorXd dzp = 0.5 * dzb;
    if (cfg.lambda_sim > 0.0) {
      dz2 -= (2.0 * cfg.lambda_sim * inv_n) * rs;
      dzp += (2.0 * cfg.lambda_sim * inv_n) * rs;
    }
    const Eigen::VectorXd d_in = mlp.backward(tr, dzp);
    ae.encode_backward(et0, d_in.head(L));
    ae.encode_backward(et1, d_in.segment(L, L));
    ae.encode_backward(et2, dz2);
  }
  return out;
}

}  // namespace

std::vector<Stage3Record> finetune_stage3(Autoencoder& ae, LatentMLP& mlp,
                                          const PoissonSolver& solver,
                                          const Dataset& ds,
                                          const ReferenceFrame& ref,
                                          const TrainConfig& cfg) {
  const int N = static_cast<int>(ds.frames.size());
  std::vector<AcapFeature> feats(N);
  for (int m = 0; m < N; ++m) feats[m] = acap_forward(ref, ds.frames[m]);

  const std::vector<int> train_ends = ends_in_split(ds.split, 0);
  const std::vector<int> test_ends = ends_in_split(ds.split, 1);

  Adam adam_ae(ae.params(), {cfg.lr});
  Adam adam_mlp(mlp.params(), {cfg.lr});
  std::mt19937_64 rng(cfg.seed + 3);
  std::vector<Stage3Record> history;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // encodings move with the encoder; refresh the latent context each epoch
    LatentContext ctx = build_latent_context(ae, ref, ds);
    std::vector<int> order = train_ends;
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg.batch)) {
      const size_t stop = std::min(order.size(),
                                   start + static_cast<size_t>(cfg.batch));
      std::vector<int> batch(order.begin() + start, order.begin() + stop);
      ae.params().zero_grads();
      mlp.params().zero_grads();
      const Stage3Losses l = stage3_pass(ae, mlp, solver, ds, feats, ctx,
                                         batch, cfg, true);
      const double total = cfg.lambda_recon * l.recon +
                           cfg.lambda_vert * l.vert +
                           cfg.lambda_ephys * l.ephys + cfg.lambda_sim * l.sim;
      if (!std::isfinite(total))
        throw NnError("stage-3 loss diverged at epoch " +
                      std::to_string(epoch));
      adam_ae.step();
      adam_mlp.step();
    }

    LatentContext ctx_eval = build_latent_context(ae, ref, ds);
    const Stage3Losses ltr = stage3_pass(ae, mlp, solver, ds, feats, ctx_eval,
                                         train_ends, cfg, false);
    const Stage3Losses lte = stage3_pass(ae, mlp, solver, ds, feats, ctx_eval,
                                         test_ends, cfg, false);
    history.push_back({epoch, ltr.recon, ltr.vert, ltr.ephys, ltr.sim,
                       lte.recon, lte.vert, lte.ephys, lte.sim});
  }
  return history;
}

RolloutResult rollout_latent(const LatentMLP& mlp, const Autoencoder& ae,
                             const PoissonSolver& solver,
                             const Eigen::VectorXd& z1,
                             const Eigen::VectorXd& z2,
                             const std::vector<Eigen::VectorXd>& q_abs,
                             const std::vector<Eigen::VectorXd>& q_rel,
                             int n_frames) {
  RolloutResult res;
  const auto t0 = std::chrono::steady_clock::now();
  Eigen::VectorXd prev2 = z1, prev1 = z2;
  for (int m = 2; m < n_frames; ++m) {
    Eigen::VectorXd z = mlp.forward(prev2, prev1, q_rel[m], nullptr);
    res.frames.push_back(
        acap_inverse(ae.decode(z, nullptr), q_abs[m], solver));
    prev2 = std::move(prev1);
    prev1 = std::move(z);
  }
  const auto t1 = std::chrono::steady_clock::now();
  res.seconds = std::chrono::duration<double>(t1 - t0).count();
  return res;
}

}  // namespace shellflow
