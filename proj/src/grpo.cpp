#include "fgl/grpo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <stdexcept>
#include <tuple>

#include "fgl/rng.hpp"

namespace fgl {

void GrpoConfig::validate() const {
  if (group_size < 2) throw std::invalid_argument("grpo config: group_size must be >= 2");
  if (n_rewards < 1) throw std::invalid_argument("grpo config: n_rewards must be >= 1");
  if (!weights.empty()) {
    if (int(weights.size()) != n_rewards)
      throw std::invalid_argument("grpo config: weights length must equal n_rewards");
    double s = 0;
    for (double w : weights) s += w;
    if (std::abs(s - 1.0) > 1e-6) throw std::invalid_argument("grpo config: weights must sum to 1");
  }
  if (a < 0.0) throw std::invalid_argument("grpo config: a must be >= 0");
  if (w_min < 1) throw std::invalid_argument("grpo config: w_min must be >= 1");
  if (w_s < w_min) throw std::invalid_argument("grpo config: w_s must be >= w_min");
  if (!(eps_u > eps_l && eps_l > 0.0))
    throw std::invalid_argument("grpo config: need eps_u > eps_l > 0");
  if (beta < 0.0) throw std::invalid_argument("grpo config: beta must be >= 0");
  if (!(eps_clip > 0.0 && eps_clip < 1.0))
    throw std::invalid_argument("grpo config: eps_clip must be in (0, 1)");
  if (n_steps < w_s) throw std::invalid_argument("grpo config: n_steps must be >= w_s");
  if (!(lr > 0.0)) throw std::invalid_argument("grpo config: lr must be > 0");
  if (total_iters < 0) throw std::invalid_argument("grpo config: total_iters must be >= 0");
}

std::vector<double> GrpoConfig::norm_weights() const {
  if (!weights.empty()) return weights;
  return std::vector<double>(size_t(n_rewards), 1.0 / double(n_rewards));
}

// ------------------------------ window --------------------------------------

Window select_window(int iter, const GrpoConfig& cfg,
                     const std::vector<double>& reward_std_history) {
  cfg.validate();
  if (iter < 0) throw std::invalid_argument("select_window: negative iteration");
  if (reward_std_history.size() < size_t(iter))
    throw std::invalid_argument("select_window: history shorter than iteration count");
  const int p0 = cfg.n_steps - cfg.w_s;
  int p = p0;
  for (int i = 1; i <= iter; i++) {
    // history entries [0, i) have been observed when iteration i begins
    const int lo = std::max(0, i - 20);
    double mean = 0;
    for (int k = lo; k < i; k++) mean += reward_std_history[size_t(k)];
    mean /= double(i - lo);
    if (mean < cfg.eps_l) {
      // advance one step earlier, but keep at least w_min steps with t > 0
      const int cand = p - 1;
      const int stochastic_len = cfg.w_s - (cand == 0 ? 1 : 0);
      if (cand >= 0 && stochastic_len >= cfg.w_min) p = cand;
    } else if (mean > cfg.eps_u) {
      p = std::min(p0, p + 1);  // retreat, never beyond the starting position
    }
  }
  return Window{p, cfg.w_s};
}

// ------------------------------ rollouts ------------------------------------

TrajectoryGroup rollout_group(const ModelParams& params_old, const ConditionBundle& bundle,
                              const GrpoConfig& cfg, Window window, uint64_t seed) {
  cfg.validate();
  if (window.start < 0 || window.length < 1 || window.start + window.length > cfg.n_steps)
    throw std::invalid_argument("rollout_group: window outside the step schedule");
  const int d_latent = params_old.config.d_latent;
  TrajectoryGroup group;
  group.window = window;
  group.bundle = bundle;
  group.rewards = Tensor(Shape{cfg.group_size, cfg.n_rewards});
  // one shared start: candidates differ only through the window noise
  const Tensor z0 = init_latent(bundle, d_latent, derive_seed(seed, 0xC000));
  for (int i = 0; i < cfg.group_size; i++) {
    const uint64_t seed_i = derive_seed(seed, 0xC001, uint64_t(i));
    Tensor z = z0;
    std::vector<SdeStepRecord> recs;
    for (int k = 0; k < cfg.n_steps; k++) {
      const bool stochastic = window.contains(k);
      SdeStepRecord rec = sde_step(params_old, z, bundle, k, cfg.n_steps, cfg.a, stochastic, seed_i);
      z = rec.sample;
      // the t = 0 step degenerates to a plain Euler update; it carries no
      // transition density, so it is not a usable record
      if (stochastic && rec.sigma > 0.0) recs.push_back(std::move(rec));
    }
    group.records.push_back(std::move(recs));
    group.finals.push_back(std::move(z));
  }
  return group;
}

// ------------------------------ advantages ----------------------------------

std::vector<double> compute_advantages(const Tensor& rewards, const std::vector<double>& weights,
                                       double eps_std) {
  if (rewards.shape.rank != 2)
    throw std::invalid_argument("compute_advantages: rewards must be (G x M)");
  const int g = rewards.shape.d[0], m = rewards.shape.d[1];
  if (g < 2) throw std::invalid_argument("compute_advantages: need at least 2 samples");
  if (!(eps_std > 0.0)) throw std::invalid_argument("compute_advantages: eps_std must be > 0");
  std::vector<double> w = weights;
  if (w.empty()) w.assign(size_t(m), 1.0 / double(m));
  if (int(w.size()) != m)
    throw std::invalid_argument("compute_advantages: weights length must equal reward count");
  double wsum = 0;
  for (double x : w) wsum += x;
  if (std::abs(wsum - 1.0) > 1e-6)
    throw std::invalid_argument("compute_advantages: weights must sum to 1");

  std::vector<double> adv(size_t(g), 0.0);
  for (int k = 0; k < m; k++) {
    double mean = 0;
    for (int i = 0; i < g; i++) mean += rewards.at(i, k);
    mean /= double(g);
    double var = 0;
    for (int i = 0; i < g; i++) {
      const double d = rewards.at(i, k) - mean;
      var += d * d;
    }
    const double std = std::sqrt(var / double(g));  // population std
    if (std < eps_std) continue;                    // degenerate column contributes nothing
    for (int i = 0; i < g; i++) adv[size_t(i)] += w[size_t(k)] * (rewards.at(i, k) - mean) / std;
  }
  return adv;
}

// ------------------------------ loss ----------------------------------------

namespace {

struct GrpoNet {
  Graph g;
  NodeId out = -1, kl = -1;
};

GrpoNet& grpo_net(const ModelConfig& config, int frames, double eps_clip, double beta) {
  using Key = std::tuple<ModelConfig, int, double, double>;
  static thread_local std::vector<std::pair<Key, std::unique_ptr<GrpoNet>>> cache;
  for (auto& e : cache) {
    const auto& [cfg0, f0, e0, b0] = e.first;
    if (f0 == frames && e0 == eps_clip && b0 == beta && cfg0 == config) return *e.second;
  }
  auto net = std::make_unique<GrpoNet>();
  Graph& g = net->g;
  const NodeId vel = append_velocity_graph(g, config, frames);
  NodeId ztn = -1;
  for (const auto& [name, id] : g.leaves())
    if (name == kLeafZt) ztn = id;
  const int d = config.d_latent;
  const NodeId c1 = g.leaf("grpo_c1", Shape{1, d});
  const NodeId c2 = g.leaf("grpo_c2", Shape{1, d});
  // transition mean under the current policy; only masked rows are consumed
  const NodeId mu =
      g.add(g.mul(ztn, g.repeat_rows(c1, frames)), g.mul(vel, g.repeat_rows(c2, frames)));
  const NodeId sample = g.leaf("grpo_sample", Shape{frames, d});
  const NodeId w01 = g.leaf("grpo_w01", Shape{frames, d});
  const NodeId muref = g.leaf("grpo_muref", Shape{frames, d});
  const NodeId ssd_old = g.leaf("grpo_ssd_old", Shape{1});
  const NodeId inv2s2 = g.leaf("grpo_inv2s2", Shape{1});
  const NodeId adv = g.leaf("grpo_adv", Shape{1});
  const NodeId ssd = g.sum(g.mul(g.sqerr(mu, sample), w01));
  // same-sigma Gaussians: the density ratio needs only the quadratic terms
  const NodeId rho = g.exp(g.mul(g.sub(ssd_old, ssd), inv2s2));
  const NodeId clipped = g.clamp(rho, 1.0 - eps_clip, 1.0 + eps_clip);
  const NodeId surr = g.minimum(g.mul(rho, adv), g.mul(clipped, adv));
  net->kl = g.mul(g.sum(g.mul(g.sqerr(mu, muref), w01)), inv2s2);
  net->out = g.add(g.scalar_mul(surr, -1.0), g.scalar_mul(net->kl, beta));
  cache.emplace_back(Key{config, frames, eps_clip, beta}, std::move(net));
  return *cache.back().second;
}

Tensor mask01(const std::vector<uint8_t>& mask, int d) {
  Tensor w(Shape{int(mask.size()), d});
  for (size_t f = 0; f < mask.size(); f++)
    if (mask[f])
      for (int j = 0; j < d; j++) w.at(int(f), j) = 1.0;
  return w;
}

}  // namespace

double grpo_loss(const TrajectoryGroup& group, const std::vector<double>& advantages,
                 const ModelParams& params, const ModelParams& params_old,
                 const ModelParams& params_ref, const GrpoConfig& cfg,
                 std::map<std::string, Tensor>* grads, double* mean_kl) {
  cfg.validate();
  const int g_size = int(group.records.size());
  if (g_size != cfg.group_size || int(group.finals.size()) != g_size)
    throw std::invalid_argument("grpo_loss: group size mismatch");
  if (int(advantages.size()) != g_size)
    throw std::invalid_argument("grpo_loss: advantage count mismatch");
  if (!(params.config == params_old.config) || !(params.config == params_ref.config))
    throw std::invalid_argument("grpo_loss: model configs differ");
  const ConditionBundle& bundle = group.bundle;
  const int frames = bundle.frames();
  const int d = params.config.d_latent;
  const double dt = 1.0 / double(cfg.n_steps);

  const Tensor onehot = tokens_onehot(bundle.token_grid, params.config.n_tokens);
  const Tensor w01 = mask01(bundle.mask, d);
  GrpoNet& net = grpo_net(params.config, frames, cfg.eps_clip, cfg.beta);

  if (grads) grads->clear();
  double total = 0, kl_sum = 0;
  int n_records = 0;
  for (int i = 0; i < g_size; i++) {
    const auto& recs = group.records[size_t(i)];
    if (recs.empty()) throw std::invalid_argument("grpo_loss: trajectory has no stochastic records");
    const double scale = 1.0 / (double(g_size) * double(recs.size()));
    const Tensor adv = Tensor::scalar(advantages[size_t(i)]);
    for (const SdeStepRecord& rec : recs) {
      if (!(rec.sigma > 0.0))
        throw std::invalid_argument("grpo_loss: sigma = 0 at a stochastic step");
      const double want_sigma = sigma_t(cfg.a, rec.t) * std::sqrt(dt);
      if (std::abs(rec.sigma - want_sigma) > 1e-12)
        throw std::invalid_argument("grpo_loss: record sigma inconsistent with config");
      if (rec.z_in.shape != Shape{frames, d} || rec.sample.shape != rec.z_in.shape)
        throw std::invalid_argument("grpo_loss: record shape mismatch");

      double c1v, c2v;
      sde_mean_coeffs(rec.step, cfg.n_steps, cfg.a, c1v, c2v);
      const Tensor c1row = Tensor::full(Shape{1, d}, c1v);
      const Tensor c2row = Tensor::full(Shape{1, d}, c2v);

      // transition means under the old and reference policies (eager; the
      // same affine coefficients keep the arithmetic aligned with the graph)
      const Tensor v_old = velocity(params_old, rec.z_in, rec.t, bundle);
      const Tensor v_ref = velocity(params_ref, rec.z_in, rec.t, bundle);
      Tensor mu_ref = rec.z_in;
      double ssd_old = 0;
      for (int f = 0; f < frames; f++) {
        if (!bundle.mask[size_t(f)]) continue;
        for (int j = 0; j < d; j++) {
          const double mu_old = c1v * rec.z_in.at(f, j) + c2v * v_old.at(f, j);
          const double dev = rec.sample.at(f, j) - mu_old;
          ssd_old += dev * dev;
          mu_ref.at(f, j) = c1v * rec.z_in.at(f, j) + c2v * v_ref.at(f, j);
        }
      }
      const Tensor ssd_old_t = Tensor::scalar(ssd_old);
      const Tensor inv2s2 = Tensor::scalar(1.0 / (2.0 * rec.sigma * rec.sigma));
      const Tensor tfeat = time_features(rec.t);

      Tape tape(net.g);
      Bindings b;
      bind_params(b, params);
      b[kLeafZt] = &rec.z_in;
      b[kLeafMelody] = &bundle.melody;
      b[kLeafOnehot] = &onehot;
      b[kLeafZctx] = &bundle.z_ctx;
      b[kLeafTfeat] = &tfeat;
      b["grpo_c1"] = &c1row;
      b["grpo_c2"] = &c2row;
      b["grpo_sample"] = &rec.sample;
      b["grpo_w01"] = &w01;
      b["grpo_muref"] = &mu_ref;
      b["grpo_ssd_old"] = &ssd_old_t;
      b["grpo_inv2s2"] = &inv2s2;
      b["grpo_adv"] = &adv;
      total += tape.forward(b, net.out).value() * scale;
      kl_sum += tape.value(net.kl).value();
      n_records++;
      if (grads) {
        tape.backward(net.out);
        accumulate_param_grads(net.g, tape, params, scale, grads);
      }
    }
  }
  if (mean_kl) *mean_kl = kl_sum / double(n_records);
  return total;
}

// ------------------------------ training ------------------------------------

GrpoState grpo_init(const ModelParams& sft_params, const GrpoConfig& cfg) {
  cfg.validate();
  AdamConfig ac;
  ac.lr = cfg.lr;
  return GrpoState{cfg, sft_params, sft_params, sft_params, Adam(ac), 0, {}, {}};
}

GrpoStats grpo_train_iter(GrpoState& state, const std::vector<ConditionBundle>& batch,
                          const RewardFn& reward_fn, uint64_t seed) {
  const GrpoConfig& cfg = state.cfg;
  cfg.validate();
  if (batch.empty()) throw std::invalid_argument("grpo_train_iter: empty batch");
  if (!reward_fn) throw std::invalid_argument("grpo_train_iter: missing reward function");
  const int n_batch = int(batch.size());
  const int g_size = cfg.group_size, m = cfg.n_rewards;
  const std::vector<double> w = cfg.norm_weights();
  const Window window = select_window(state.iter, cfg, state.reward_std_history);

  std::map<std::string, Tensor> grads;
  double loss_total = 0, kl_total = 0, weighted_mean = 0, std_mean = 0;
  std::vector<double> reward_mean(size_t(m), 0.0);

  for (int j = 0; j < n_batch; j++) {
    TrajectoryGroup group =
        rollout_group(state.params_old, batch[size_t(j)], cfg, window, derive_seed(seed, 0xC100, uint64_t(j)));
    std::vector<double> totals(size_t(g_size), 0.0);
    for (int i = 0; i < g_size; i++) {
      const std::vector<double> r = reward_fn(group.finals[size_t(i)], batch[size_t(j)]);
      if (int(r.size()) != m)
        throw std::invalid_argument("grpo_train_iter: reward function returned wrong count");
      for (int k = 0; k < m; k++) {
        if (!std::isfinite(r[size_t(k)]))
          throw std::runtime_error("grpo_train_iter: non-finite reward at iteration " +
                                   std::to_string(state.iter));
        group.rewards.at(i, k) = r[size_t(k)];
        reward_mean[size_t(k)] += r[size_t(k)] / double(g_size * n_batch);
        totals[size_t(i)] += w[size_t(k)] * r[size_t(k)];
      }
      weighted_mean += totals[size_t(i)] / double(g_size * n_batch);
    }
    double tm = 0;
    for (double x : totals) tm += x;
    tm /= double(g_size);
    double tv = 0;
    for (double x : totals) tv += (x - tm) * (x - tm);
    std_mean += std::sqrt(tv / double(g_size)) / double(n_batch);

    const std::vector<double> adv = compute_advantages(group.rewards, w);
    std::map<std::string, Tensor> g1;
    double kl1 = 0;
    const double l1 =
        grpo_loss(group, adv, state.params, state.params_old, state.params_ref, cfg, &g1, &kl1);
    loss_total += l1 / double(n_batch);
    kl_total += kl1 / double(n_batch);
    for (auto& [name, t] : g1) {
      t *= 1.0 / double(n_batch);
      auto it = grads.find(name);
      if (it == grads.end())
        grads.emplace(name, std::move(t));
      else
        it->second += t;
    }
  }

  if (!std::isfinite(loss_total))
    throw std::runtime_error("grpo_train_iter: non-finite loss at iteration " +
                             std::to_string(state.iter) + " (window start " +
                             std::to_string(window.start) + ")");

  state.opt.step(state.params.tensors, grads);
  state.params_old = state.params;  // online refresh for the next iteration

  GrpoStats stats;
  stats.iter = state.iter;
  stats.mean_rewards = reward_mean;
  stats.mean_weighted_reward = weighted_mean;
  stats.mean_kl = kl_total;
  stats.window_start = window.start;
  stats.loss = loss_total;

  char row[512];
  std::string rewards_csv;
  for (int k = 0; k < m; k++) {
    std::snprintf(row, sizeof(row), "%.10g", reward_mean[size_t(k)]);
    rewards_csv += row;
    rewards_csv += ',';
  }
  std::snprintf(row, sizeof(row), "%d,%s%.10g,%d,%.10g", state.iter, rewards_csv.c_str(), kl_total,
                window.start, loss_total);
  state.log.push_back(row);

  state.reward_std_history.push_back(std_mean);
  state.iter++;
  return stats;
}

}  // namespace fgl
