#include "fgl/objectives.hpp"

#include <cmath>
#include <stdexcept>

#include "fgl/conditioning.hpp"
#include "fgl/rng.hpp"

namespace fgl {

double lambda_at(const LambdaSchedule& schedule, int64_t step) {
  if (!(schedule.lambda_start >= schedule.lambda_end && schedule.lambda_end > 0.0))
    throw std::invalid_argument("lambda_at: schedule needs lambda_start >= lambda_end > 0");
  if (schedule.decay_steps <= 0) throw std::invalid_argument("lambda_at: decay_steps must be > 0");
  if (step < 0) throw std::invalid_argument("lambda_at: negative step");
  if (step >= schedule.decay_steps) return schedule.lambda_end;
  const double f = double(step) / double(schedule.decay_steps);
  return schedule.lambda_start + (schedule.lambda_end - schedule.lambda_start) * f;
}

namespace {

void check_cka_shapes(const Shape& v, const Shape& h) {
  if (v.rank != 2 || h.rank != 2) throw std::invalid_argument("cka_loss: inputs must be 2-D");
  if (v.d[0] != h.d[0]) throw std::invalid_argument("cka_loss: row counts differ");
  if (v.d[0] < 2) throw std::invalid_argument("cka_loss: needs at least 2 rows");
}

}  // namespace

double cka_loss(const Tensor& v, const Tensor& h) {
  check_cka_shapes(v.shape, h.shape);
  const int64_t n = v.shape.d[0];
  const int64_t dv = v.shape.d[1], dh = h.shape.d[1];
  std::vector<double> K(size_t(n * n)), L(size_t(n * n));
  for (int64_t i = 0; i < n; i++)
    for (int64_t j = 0; j < n; j++) {
      double kv = 0.0, lv = 0.0;
      for (int64_t c = 0; c < dv; c++) kv += v.data[size_t(i * dv + c)] * v.data[size_t(j * dv + c)];
      for (int64_t c = 0; c < dh; c++) lv += h.data[size_t(i * dh + c)] * h.data[size_t(j * dh + c)];
      K[size_t(i * n + j)] = kv;
      L[size_t(i * n + j)] = lv;
    }
  double num = 0.0, den_k = 0.0, den_l = 0.0;
  for (int64_t i = 0; i < n; i++)
    for (int64_t j = 0; j < n; j++) {
      double kl = 0.0, kk = 0.0, ll = 0.0;
      for (int64_t c = 0; c < n; c++) {
        const double kc = K[size_t(c * n + i)];
        const double lc = L[size_t(c * n + i)];
        kl += kc * L[size_t(c * n + j)];
        kk += kc * K[size_t(c * n + j)];
        ll += lc * L[size_t(c * n + j)];
      }
      num += kl * kl;
      den_k += kk * kk;
      den_l += ll * ll;
    }
  if (den_k == 0.0 || den_l == 0.0) throw std::invalid_argument("cka_loss: all-zero input");
  // One square root over the product keeps exact-integer cases exact.
  const double den = std::sqrt(den_k * den_l);
  const double loss = (den - num) / den;
  return std::min(1.0, std::max(0.0, loss));
}

NodeId append_cka_loss(Graph& g, NodeId v, NodeId h) {
  check_cka_shapes(g.shape_of(v), g.shape_of(h));
  const NodeId K = g.matmul(v, g.transpose(v));
  const NodeId L = g.matmul(h, g.transpose(h));
  const NodeId ktl = g.matmul(g.transpose(K), L);
  const NodeId ktk = g.matmul(g.transpose(K), K);
  const NodeId ltl = g.matmul(g.transpose(L), L);
  const NodeId num = g.sum(g.mul(ktl, ktl));
  const NodeId den = g.sqrt(g.mul(g.sum(g.mul(ktk, ktk)), g.sum(g.mul(ltl, ltl))));
  return g.clamp(g.divide(g.sub(den, num), den), 0.0, 1.0);
}

namespace {

// True when every masked melody row is exactly zero, i.e. the melody condition
// was dropped for this item and alignment is undefined.
bool melody_dropped(const ConditionBundle& bundle, int start, int len) {
  const int64_t dm = bundle.melody.shape.d[1];
  for (int f = start; f < start + len; f++)
    for (int64_t c = 0; c < dm; c++)
      if (bundle.melody.at(f, c) != 0.0) return false;
  return true;
}

}  // namespace

double sft2_loss_fixed_lambda(const ModelParams& params, const std::vector<TrainItem>& batch,
                              double lambda, uint64_t seed,
                              std::map<std::string, Tensor>* grads, double* cka_out) {
  if (cka_out) *cka_out = 0.0;
  if (lambda < 0.0) throw std::invalid_argument("sft2_loss: negative lambda");
  if (lambda == 0.0) return cfm_loss(params, batch, seed, grads);
  if (batch.empty()) throw std::invalid_argument("sft2_loss: empty batch");
  const ModelConfig& cfg = params.config;
  if (grads) grads->clear();
  double total = 0.0;
  double cka_sum = 0.0;
  int cka_n = 0;
  for (size_t i = 0; i < batch.size(); i++) {
    const TrainItem& item = batch[i];
    const int T = item.z1.shape.d[0];
    if (item.bundle.frames() != T)
      throw std::invalid_argument("sft2_loss: bundle/latent frame mismatch");
    // Same draw stream as cfm_loss so the lambda -> 0 limit is exact.
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
    const auto [mstart, mlen] = mask_span(item.bundle.mask);
    if (mlen < 2) throw std::invalid_argument("sft2_loss: masked span must cover >= 2 frames");

    Graph g;
    const NodeId vel = append_velocity_graph(g, cfg, T);
    const NodeId tgt = g.leaf("cfm_target", Shape{T, cfg.d_latent});
    const NodeId wn = g.leaf("cfm_w", Shape{T, cfg.d_latent});
    const NodeId cfm_node = g.sum(g.mul(g.sqerr(vel, tgt), wn));
    NodeId out = cfm_node;
    NodeId cka_node = -1;
    const bool with_cka = !melody_dropped(item.bundle, mstart, mlen);
    if (with_cka) {
      NodeId melody_leaf = -1;
      for (const auto& [name, id] : g.leaves())
        if (name == kLeafMelody) melody_leaf = id;
      const NodeId vm = g.slice(vel, 0, mstart, mlen);
      const NodeId hm = g.slice(melody_leaf, 0, mstart, mlen);
      cka_node = append_cka_loss(g, vm, hm);
      out = g.add(cfm_node, g.scalar_mul(cka_node, lambda));
    }

    Tape tape(g);
    Bindings b;
    bind_params(b, params);
    b[kLeafZt] = &path.z_t;
    b[kLeafMelody] = &item.bundle.melody;
    b[kLeafOnehot] = &onehot;
    b[kLeafZctx] = &item.bundle.z_ctx;
    b[kLeafTfeat] = &tfeat;
    b["cfm_target"] = &target;
    b["cfm_w"] = &w;
    const double value = tape.forward(b, out).value();
    if (!std::isfinite(value))
      throw std::invalid_argument("sft2_loss: alignment term degenerate (all-zero velocity rows)");
    total += value / double(batch.size());
    if (with_cka) {
      cka_sum += tape.value(cka_node).value();
      cka_n++;
    }
    if (grads) {
      tape.backward(out);
      accumulate_param_grads(g, tape, params, 1.0 / double(batch.size()), grads);
    }
  }
  if (cka_out && cka_n > 0) *cka_out = cka_sum / double(cka_n);
  return total;
}

double sft2_loss(const ModelParams& params, const std::vector<TrainItem>& batch,
                 const LambdaSchedule& schedule, int64_t step, uint64_t seed,
                 std::map<std::string, Tensor>* grads, double* cka_out) {
  return sft2_loss_fixed_lambda(params, batch, lambda_at(schedule, step), seed, grads, cka_out);
}

}  // namespace fgl
