#include "fgl/flowmatch.hpp"

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace fgl {

PathSample sample_path(const Tensor& z0, const Tensor& z1, double t) {
  if (z0.shape != z1.shape) throw std::invalid_argument("sample_path: shape mismatch");
  if (!(t >= 0.0 && t <= 1.0)) throw std::invalid_argument("sample_path: t must be in [0,1]");
  PathSample p;
  p.z0 = z0;
  p.z1 = z1;
  p.t = t;
  p.z_t = Tensor(z0.shape);
  for (int64_t i = 0; i < z0.numel(); i++)
    p.z_t.data[size_t(i)] = (1.0 - t) * z0.data[size_t(i)] + t * z1.data[size_t(i)];
  return p;
}

// ------------------------------ CFM loss ------------------------------------

namespace {

struct CfmNet {
  Graph g;
  NodeId vel = -1, loss = -1;
};

CfmNet& cfm_net(const ModelConfig& config, int frames) {
  static thread_local std::vector<std::pair<std::pair<ModelConfig, int>, std::unique_ptr<CfmNet>>> cache;
  for (auto& e : cache)
    if (e.first.second == frames && e.first.first == config) return *e.second;
  auto net = std::make_unique<CfmNet>();
  net->vel = append_velocity_graph(net->g, config, frames);
  const NodeId target = net->g.leaf("cfm_target", Shape{frames, config.d_latent});
  const NodeId w = net->g.leaf("cfm_w", Shape{frames, config.d_latent});
  net->loss = net->g.sum(net->g.mul(net->g.sqerr(net->vel, target), w));
  cache.emplace_back(std::make_pair(config, frames), std::move(net));
  return *cache.back().second;
}

}  // namespace

// weight tensor: 1/(masked entries) on masked rows, 0 elsewhere
Tensor mask_weights(const std::vector<uint8_t>& mask, int d, double extra_scale) {
  const int T = int(mask.size());
  int count = 0;
  for (uint8_t m : mask) count += m != 0;
  Tensor w(Shape{T, d});
  if (count == 0) return w;
  const double val = extra_scale / (double(count) * double(d));
  for (int f = 0; f < T; f++)
    if (mask[size_t(f)])
      for (int j = 0; j < d; j++) w.at(f, j) = val;
  return w;
}

void accumulate_param_grads(const Graph& g, Tape& tape, const ModelParams& params, double scale,
                            std::map<std::string, Tensor>* grads) {
  if (!grads) return;
  for (const auto& [name, node] : g.leaves()) {
    if (!params.tensors.count(name)) continue;
    Tensor t = tape.grad(node);
    t *= scale;
    auto it = grads->find(name);
    if (it == grads->end())
      grads->emplace(name, std::move(t));
    else
      it->second += t;
  }
}

double cfm_loss(const ModelParams& params, const std::vector<TrainItem>& batch, uint64_t seed,
                std::map<std::string, Tensor>* grads) {
  if (batch.empty()) throw std::invalid_argument("cfm_loss: empty batch");
  const ModelConfig& cfg = params.config;
  double total = 0.0;
  for (size_t i = 0; i < batch.size(); i++) {
    const TrainItem& item = batch[i];
    const int T = item.z1.shape.d[0];
    if (item.bundle.frames() != T)
      throw std::invalid_argument("cfm_loss: bundle/latent frame mismatch");
    Rng rng(derive_seed(seed, 0xF001, i));
    const double t = rng.uniform();
    Tensor z0 = Tensor::randn(Shape{T, cfg.d_latent}, rng);
    PathSample path = sample_path(z0, item.z1, t);
    Tensor target(z0.shape);
    for (int64_t k = 0; k < z0.numel(); k++)
      target.data[size_t(k)] = item.z1.data[size_t(k)] - z0.data[size_t(k)];
    const Tensor w = mask_weights(item.bundle.mask, cfg.d_latent);
    const Tensor onehot = tokens_onehot(item.bundle.token_grid, cfg.n_tokens);
    const Tensor tfeat = time_features(t);

    CfmNet& net = cfm_net(cfg, T);
    Tape tape(net.g);
    Bindings b;
    bind_params(b, params);
    b[kLeafZt] = &path.z_t;
    b[kLeafMelody] = &item.bundle.melody;
    b[kLeafOnehot] = &onehot;
    b[kLeafZctx] = &item.bundle.z_ctx;
    b[kLeafTfeat] = &tfeat;
    b["cfm_target"] = &target;
    b["cfm_w"] = &w;
    total += tape.forward(b, net.loss).value() / double(batch.size());
    if (grads) {
      tape.backward(net.loss);
      accumulate_param_grads(net.g, tape, params, 1.0 / double(batch.size()), grads);
    }
  }
  return total;
}

// ------------------------------ sampling ------------------------------------

Tensor init_latent(const ConditionBundle& bundle, int d_latent, uint64_t seed) {
  const int T = bundle.frames();
  if (bundle.z_ctx.shape != Shape{T, d_latent})
    throw std::invalid_argument("init_latent: z_ctx shape mismatch");
  Rng rng(derive_seed(seed, 0xE001));
  Tensor z = bundle.z_ctx;
  for (int f = 0; f < T; f++)
    if (bundle.mask[size_t(f)])
      for (int j = 0; j < d_latent; j++) z.at(f, j) = rng.normal();
  return z;
}

Tensor ode_sample_fn(const VelocityFn& vfn, const Tensor& z_init, const std::vector<uint8_t>& mask,
                     int n_steps) {
  if (n_steps < 1) throw std::invalid_argument("ode_sample: n_steps must be >= 1");
  if (z_init.shape.rank != 2 || size_t(z_init.shape.d[0]) != mask.size())
    throw std::invalid_argument("ode_sample: mask/latent mismatch");
  const double dt = 1.0 / double(n_steps);
  const int T = z_init.shape.d[0], D = z_init.shape.d[1];
  Tensor z = z_init;
  for (int k = 0; k < n_steps; k++) {
    const Tensor v = vfn(z, double(k) * dt);
    for (int f = 0; f < T; f++)
      if (mask[size_t(f)])
        for (int j = 0; j < D; j++) z.at(f, j) += dt * v.at(f, j);
  }
  return z;
}

Tensor ode_sample(const ModelParams& params, const ConditionBundle& bundle, int n_steps,
                  double cfg_scale, uint64_t seed) {
  const Tensor z0 = init_latent(bundle, params.config.d_latent, seed);
  VelocityFn vfn = [&](const Tensor& z, double t) {
    return velocity_cfg(params, z, t, bundle, cfg_scale);
  };
  return ode_sample_fn(vfn, z0, bundle.mask, n_steps);
}

Tensor score_from_velocity(const Tensor& z, const Tensor& v, double t) {
  if (z.shape != v.shape) throw std::invalid_argument("score_from_velocity: shape mismatch");
  if (!(t >= 0.0) || t >= 1.0 - kEpsT)
    throw std::invalid_argument("score_from_velocity: t must be in [0, 1-eps)");
  Tensor s(z.shape);
  const double inv = 1.0 / (1.0 - t);
  for (int64_t i = 0; i < z.numel(); i++)
    s.data[size_t(i)] = -(z.data[size_t(i)] - t * v.data[size_t(i)]) * inv;
  return s;
}

double sigma_t(double a, double t) {
  if (a < 0.0) throw std::invalid_argument("sigma_t: a must be >= 0");
  return a * std::sqrt(t / (1.0 - t + kEpsT));
}

void sde_mean_coeffs(int step_index, int n_steps, double a, double& c1, double& c2) {
  const double dt = 1.0 / double(n_steps);
  const double t = double(step_index) * dt;
  if (a == 0.0) {
    c1 = 1.0;
    c2 = dt;
    return;
  }
  // mean = z + dt*(v + (sigma_t^2/2) * (-(z - t*v)/(1-t)))
  const double st2 = sigma_t(a, t) * sigma_t(a, t);
  const double g = st2 / (2.0 * (1.0 - t));
  c1 = 1.0 - dt * g;
  c2 = dt * (1.0 + g * t);
}

double gauss_logp(const Tensor& sample, const Tensor& mean, double sigma,
                  const std::vector<uint8_t>& mask) {
  if (sample.shape != mean.shape || size_t(sample.shape.d[0]) != mask.size())
    throw std::invalid_argument("gauss_logp: shape mismatch");
  if (!(sigma > 0.0)) throw std::invalid_argument("gauss_logp: sigma must be positive");
  const int T = sample.shape.d[0], D = sample.shape.d[1];
  const double log_norm = -std::log(sigma) - 0.5 * std::log(6.283185307179586476925287);
  double lp = 0.0;
  for (int f = 0; f < T; f++) {
    if (!mask[size_t(f)]) continue;
    for (int j = 0; j < D; j++) {
      const double d = (sample.at(f, j) - mean.at(f, j)) / sigma;
      lp += log_norm - 0.5 * d * d;
    }
  }
  return lp;
}

SdeStepRecord sde_step_fn(const VelocityFn& vfn, const Tensor& z, const std::vector<uint8_t>& mask,
                          int step_index, int n_steps, double a, bool stochastic, uint64_t seed) {
  if (n_steps < 1 || step_index < 0 || step_index >= n_steps)
    throw std::invalid_argument("sde_step: step index outside schedule");
  if (a < 0.0) throw std::invalid_argument("sde_step: a must be >= 0");
  const double dt = 1.0 / double(n_steps);
  const double t = double(step_index) * dt;
  const int T = z.shape.d[0], D = z.shape.d[1];
  if (size_t(T) != mask.size()) throw std::invalid_argument("sde_step: mask/latent mismatch");

  SdeStepRecord rec;
  rec.step = step_index;
  rec.t = t;
  rec.z_in = z;

  const bool noisy = stochastic && a > 0.0 && t > 0.0;
  if (noisy && t >= 1.0 - kEpsT)
    throw std::invalid_argument("sde_step: stochastic step too close to t=1");

  const Tensor v = vfn(z, t);
  double c1, c2;
  sde_mean_coeffs(step_index, n_steps, noisy ? a : 0.0, c1, c2);
  rec.mean = z;
  for (int f = 0; f < T; f++)
    if (mask[size_t(f)])
      for (int j = 0; j < D; j++) rec.mean.at(f, j) = c1 * z.at(f, j) + c2 * v.at(f, j);

  if (!noisy) {
    rec.sigma = 0.0;
    rec.sample = rec.mean;
    rec.logp = 0.0;
    return rec;
  }
  rec.sigma = sigma_t(a, t) * std::sqrt(dt);
  rec.sample = rec.mean;
  Rng rng(derive_seed(seed, 0xE002, uint64_t(step_index)));
  for (int f = 0; f < T; f++)
    if (mask[size_t(f)])
      for (int j = 0; j < D; j++) rec.sample.at(f, j) += rec.sigma * rng.normal();
  rec.logp = gauss_logp(rec.sample, rec.mean, rec.sigma, mask);
  return rec;
}

SdeStepRecord sde_step(const ModelParams& params, const Tensor& z, const ConditionBundle& bundle,
                       int step_index, int n_steps, double a, bool stochastic, uint64_t seed) {
  VelocityFn vfn = [&](const Tensor& zz, double t) { return velocity(params, zz, t, bundle); };
  return sde_step_fn(vfn, z, bundle.mask, step_index, n_steps, a, stochastic, seed);
}

}  // namespace fgl
