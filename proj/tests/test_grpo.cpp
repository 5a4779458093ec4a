#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "fgl/conditioning.hpp"
#include "fgl/grpo.hpp"

using namespace fgl;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.n_layers = 1;
  c.n_heads = 2;
  c.d_hidden = 8;
  c.d_latent = 4;
  c.d_melody = 4;
  c.d_token_emb = 4;
  c.n_tokens = 6;
  c.max_frames = 16;
  return c;
}

GrpoConfig small_grpo() {
  GrpoConfig g;
  g.group_size = 3;
  g.n_rewards = 2;
  g.n_steps = 8;
  g.w_s = 4;
  g.lr = 1e-3;
  return g;
}

ConditionBundle make_bundle(const ModelConfig& c, int T, int mask_start, int mask_len,
                            uint64_t seed) {
  Rng rng(seed);
  Tensor latent = Tensor::randn(Shape{T, c.d_latent}, rng);
  Tensor mel = Tensor::randn(Shape{2, c.d_melody}, rng);
  std::vector<TokenSentence> sents{{{1, 2}, 0}};
  return build_bundle(latent, mel, sents, MaskSpec{mask_start, mask_len});
}

Tensor rewards_from(const std::vector<std::vector<double>>& rows) {
  const int g = int(rows.size()), m = int(rows[0].size());
  Tensor r(Shape{g, m});
  for (int i = 0; i < g; i++)
    for (int k = 0; k < m; k++) r.at(i, k) = rows[size_t(i)][size_t(k)];
  return r;
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    auto it = b.tensors.find(name);
    if (it == b.tensors.end() || !(it->second.shape == t.shape)) return false;
    for (int64_t k = 0; k < t.numel(); k++)
      if (it->second.data[size_t(k)] != t.data[size_t(k)]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("grpo config validation") {
  GrpoConfig g;
  CHECK_NOTHROW(g.validate());
  CHECK(g.norm_weights() == std::vector<double>{0.25, 0.25, 0.25, 0.25});
  g.group_size = 1;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GrpoConfig{};
  g.weights = {0.3, 0.3, 0.3};  // wrong length
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g.weights = {0.3, 0.3, 0.3, 0.3};  // wrong sum
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GrpoConfig{};
  g.eps_l = 0.02;  // above eps_u
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GrpoConfig{};
  g.w_s = 40;  // beyond n_steps
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GrpoConfig{};
  g.w_min = 12;  // above w_s
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
  g = GrpoConfig{};
  g.eps_clip = 0.0;
  CHECK_THROWS_AS(g.validate(), std::invalid_argument);
}

TEST_CASE("stochastic window starts late and follows the reward-std history") {
  GrpoConfig cfg;  // 32 steps, w_s 8, eps_l 0.002, eps_u 0.01
  const std::vector<double> empty;
  Window w0 = select_window(0, cfg, empty);
  CHECK(w0.start == 24);
  CHECK(w0.length == 8);
  CHECK(w0.contains(24));
  CHECK(w0.contains(31));
  CHECK_FALSE(w0.contains(23));

  // high variance: the window retreats but never beyond its starting position
  std::vector<double> high(60, 0.5);
  CHECK(select_window(1, cfg, high).start == 24);
  CHECK(select_window(10, cfg, high).start == 24);
  CHECK(select_window(50, cfg, high).start == 24);

  // collapsed variance: the window advances one step per iteration to 0
  std::vector<double> low(60, 0.0005);
  CHECK(select_window(5, cfg, low).start == 19);
  CHECK(select_window(24, cfg, low).start == 0);
  CHECK(select_window(30, cfg, low).start == 0);

  // ten quiet iterations then loud ones: replayed trailing mean turns it back
  std::vector<double> mixed(10, 0.0005);
  mixed.resize(40, 0.5);
  CHECK(select_window(10, cfg, mixed).start == 14);
  CHECK(select_window(11, cfg, mixed).start == 15);
  CHECK(select_window(14, cfg, mixed).start == 18);
  CHECK(select_window(30, cfg, mixed).start == 24);

  // middling variance in the dead band: position unchanged
  std::vector<double> mid(40, 0.005);
  CHECK(select_window(20, cfg, mid).start == 24);

  // window covering all steps stays put regardless of history
  GrpoConfig full = cfg;
  full.w_s = 32;
  CHECK(select_window(0, full, empty).start == 0);
  CHECK(select_window(0, full, empty).length == 32);
  CHECK(select_window(20, full, low).start == 0);
  CHECK(select_window(20, full, high).start == 0);

  // w_min stops the advance before the t = 0 step would eat a stochastic slot
  GrpoConfig tight = cfg;
  tight.n_steps = 4;
  tight.w_s = 2;
  tight.w_min = 2;
  CHECK(select_window(0, tight, empty).start == 2);
  CHECK(select_window(1, tight, low).start == 1);
  CHECK(select_window(10, tight, low).start == 1);  // never 0

  CHECK_THROWS_AS(select_window(5, cfg, std::vector<double>(3, 0.1)), std::invalid_argument);
  CHECK_THROWS_AS(select_window(-1, cfg, empty), std::invalid_argument);
}

TEST_CASE("advantages match the frozen oracle values") {
  Tensor r = rewards_from({{0.0}, {0.0}, {0.0}, {2.0}});
  const auto a = compute_advantages(r, {1.0});
  REQUIRE(a.size() == 4);
  CHECK(a[0] == doctest::Approx(-0.5773502691896258).epsilon(1e-14));
  CHECK(a[1] == doctest::Approx(-0.5773502691896258).epsilon(1e-14));
  CHECK(a[2] == doctest::Approx(-0.5773502691896258).epsilon(1e-14));
  CHECK(a[3] == doctest::Approx(1.7320508075688774).epsilon(1e-14));
  // 4-decimal values advertised by the contract
  CHECK(a[0] == doctest::Approx(-0.5774).epsilon(1e-4));
  CHECK(a[3] == doctest::Approx(1.7321).epsilon(1e-4));

  // two equal columns with half weights reproduce the single-column case
  Tensor r2 = rewards_from({{0.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}, {2.0, 2.0}});
  const auto a2 = compute_advantages(r2, {0.5, 0.5});
  for (int i = 0; i < 4; i++) CHECK(a2[size_t(i)] == doctest::Approx(a[size_t(i)]).epsilon(1e-14));

  // identical rewards: every column is degenerate, all advantages vanish
  Tensor r3 = rewards_from({{1.0, 2.0}, {1.0, 2.0}, {1.0, 2.0}});
  for (double x : compute_advantages(r3, {})) CHECK(x == 0.0);

  // a degenerate column contributes zero next to a live one
  Tensor r4 = rewards_from({{5.0, 0.0}, {5.0, 0.0}, {5.0, 0.0}, {5.0, 2.0}});
  const auto a4 = compute_advantages(r4, {0.5, 0.5});
  for (int i = 0; i < 4; i++) CHECK(a4[size_t(i)] == doctest::Approx(0.5 * a[size_t(i)]).epsilon(1e-14));
}

TEST_CASE("advantages are centered with unit structure") {
  for (uint64_t s = 0; s < 200; s++) {
    Rng rng(4000 + s);
    const int g = 2 + int(rng.uniform_int(8));
    const int m = 1 + int(rng.uniform_int(5));
    Tensor r(Shape{g, m});
    for (int64_t k = 0; k < r.numel(); k++) r.data[size_t(k)] = rng.uniform(-2.0, 2.0);
    const auto a = compute_advantages(r, {});
    double sum = 0;
    for (double x : a) sum += x;
    CHECK(std::abs(sum) < 1e-9);
    if (m == 1) {
      double var = 0;
      for (double x : a) var += x * x;  // already centered
      CHECK(std::sqrt(var / double(g)) == doctest::Approx(1.0).epsilon(1e-9));
    }
  }
}

TEST_CASE("advantages validate their inputs") {
  Tensor ok = rewards_from({{1.0}, {2.0}});
  CHECK_NOTHROW(compute_advantages(ok, {}));
  CHECK_THROWS_AS(compute_advantages(rewards_from({{1.0}}), {}), std::invalid_argument);
  CHECK_THROWS_AS(compute_advantages(ok, {0.5, 0.5}), std::invalid_argument);
  CHECK_THROWS_AS(compute_advantages(ok, {0.9}), std::invalid_argument);
  CHECK_THROWS_AS(compute_advantages(Tensor(Shape{4}), {}), std::invalid_argument);
  CHECK_THROWS_AS(compute_advantages(ok, {1.0}, 0.0), std::invalid_argument);
}

TEST_CASE("rollout groups are deterministic and share their start") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 31);
  GrpoConfig cfg = small_grpo();
  ConditionBundle bundle = make_bundle(mc, 8, 2, 5, 900);
  const Window w = select_window(0, cfg, {});
  CHECK(w.start == 4);

  TrajectoryGroup g1 = rollout_group(p, bundle, cfg, w, 42);
  TrajectoryGroup g2 = rollout_group(p, bundle, cfg, w, 42);
  REQUIRE(g1.finals.size() == 3);
  REQUIRE(g1.records.size() == 3);
  for (int i = 0; i < 3; i++) {
    CHECK(g1.records[size_t(i)].size() == 4);  // all window steps have t > 0
    for (int64_t k = 0; k < g1.finals[size_t(i)].numel(); k++)
      CHECK(g1.finals[size_t(i)].data[size_t(k)] == g2.finals[size_t(i)].data[size_t(k)]);
    for (size_t rdx = 0; rdx < g1.records[size_t(i)].size(); rdx++) {
      const auto& ra = g1.records[size_t(i)][rdx];
      const auto& rb = g2.records[size_t(i)][rdx];
      CHECK(ra.step == rb.step);
      CHECK(ra.sigma == rb.sigma);
      CHECK(ra.logp == rb.logp);
      for (int64_t k = 0; k < ra.sample.numel(); k++)
        CHECK(ra.sample.data[size_t(k)] == rb.sample.data[size_t(k)]);
      CHECK(ra.step >= w.start);
      CHECK(ra.step < w.start + w.length);
      CHECK(ra.sigma > 0.0);
    }
  }

  // group members and different seeds genuinely differ
  bool members_differ = false;
  for (int64_t k = 0; k < g1.finals[0].numel(); k++)
    if (g1.finals[0].data[size_t(k)] != g1.finals[1].data[size_t(k)]) members_differ = true;
  CHECK(members_differ);
  TrajectoryGroup g3 = rollout_group(p, bundle, cfg, w, 43);
  bool seeds_differ = false;
  for (int64_t k = 0; k < g1.finals[0].numel(); k++)
    if (g1.finals[0].data[size_t(k)] != g3.finals[0].data[size_t(k)]) seeds_differ = true;
  CHECK(seeds_differ);

  // unmasked frames still carry the context rows
  for (int f = 0; f < 8; f++) {
    if (bundle.mask[size_t(f)]) continue;
    for (int j = 0; j < mc.d_latent; j++)
      CHECK(g1.finals[0].at(f, j) == bundle.z_ctx.at(f, j));
  }

  CHECK_THROWS_AS(rollout_group(p, bundle, cfg, Window{7, 4}, 42), std::invalid_argument);
  CHECK_THROWS_AS(rollout_group(p, bundle, cfg, Window{-1, 4}, 42), std::invalid_argument);
}

TEST_CASE("zero-noise rollouts collapse the group and reduce to the euler path") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 32);
  GrpoConfig cfg = small_grpo();
  cfg.a = 0.0;
  ConditionBundle bundle = make_bundle(mc, 8, 1, 5, 901);
  const Window w{4, 4};
  TrajectoryGroup g = rollout_group(p, bundle, cfg, w, 77);
  for (int i = 1; i < cfg.group_size; i++)
    for (int64_t k = 0; k < g.finals[0].numel(); k++)
      CHECK(g.finals[size_t(i)].data[size_t(k)] == g.finals[0].data[size_t(k)]);
  for (const auto& recs : g.records) CHECK(recs.empty());

  // without noise every step is the plain Euler update of the base sampler
  const Tensor z0 = init_latent(bundle, mc.d_latent, derive_seed(77, 0xC000));
  VelocityFn vfn = [&](const Tensor& z, double t) { return velocity(p, z, t, bundle); };
  const Tensor want = ode_sample_fn(vfn, z0, bundle.mask, cfg.n_steps);
  for (int64_t k = 0; k < want.numel(); k++)
    CHECK(g.finals[0].data[size_t(k)] == want.data[size_t(k)]);

  // a group without stochastic records cannot be scored
  std::vector<double> adv(size_t(cfg.group_size), 0.0);
  CHECK_THROWS_AS(grpo_loss(g, adv, p, p, p, cfg), std::invalid_argument);
}

TEST_CASE("a window covering step zero records one step fewer") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 33);
  GrpoConfig cfg = small_grpo();
  cfg.w_s = cfg.n_steps;  // all 8 steps in the window
  ConditionBundle bundle = make_bundle(mc, 6, 1, 4, 902);
  TrajectoryGroup g = rollout_group(p, bundle, cfg, select_window(0, cfg, {}), 5);
  for (const auto& recs : g.records) {
    CHECK(recs.size() == size_t(cfg.n_steps - 1));
    CHECK(recs.front().step == 1);
  }
}

TEST_CASE("loss at the identity is minus the mean advantage") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 34);
  GrpoConfig cfg = small_grpo();
  ConditionBundle bundle = make_bundle(mc, 8, 2, 4, 903);
  TrajectoryGroup g = rollout_group(p, bundle, cfg, select_window(0, cfg, {}), 11);

  // centered advantages: identity loss vanishes
  const std::vector<double> adv{0.4, -0.1, -0.3};
  double kl = -1;
  const double loss = grpo_loss(g, adv, p, p, p, cfg, nullptr, &kl);
  CHECK(kl == 0.0);
  const double mean_adv = (0.4 - 0.1 - 0.3) / 3.0;
  CHECK(loss == doctest::Approx(-mean_adv).epsilon(1e-12));
  CHECK(std::abs(loss) < 1e-9);

  // a distinct reference policy only shifts the loss by beta * mean KL
  ModelParams ref = init_params(mc, 99);
  double kl_ref = -1;
  const double loss_ref = grpo_loss(g, adv, p, p, ref, cfg, nullptr, &kl_ref);
  CHECK(kl_ref > 0.0);
  CHECK(loss_ref == doctest::Approx(-mean_adv + cfg.beta * kl_ref).epsilon(1e-12));
}

TEST_CASE("loss matches an independently coded scalar evaluation") {
  ModelConfig mc = tiny_config();
  ModelParams p_old = init_params(mc, 35);
  ModelParams p_cur = p_old;
  ModelParams p_ref = p_old;
  {
    Rng rng(777);
    for (auto& [name, t] : p_cur.tensors)
      for (auto& x : t.data) x += 0.01 * rng.normal();
    for (auto& [name, t] : p_ref.tensors)
      for (auto& x : t.data) x += 0.02 * rng.normal();
  }
  GrpoConfig cfg = small_grpo();
  cfg.group_size = 2;
  cfg.n_steps = 4;
  cfg.w_s = 2;
  const int T = 3;
  ConditionBundle bundle = make_bundle(mc, T, 1, 2, 904);
  const double dt = 1.0 / double(cfg.n_steps);

  // hand-built group: one record per rollout at step 2 (t = 0.5)
  TrajectoryGroup g;
  g.window = Window{2, 2};
  g.bundle = bundle;
  g.rewards = Tensor(Shape{2, cfg.n_rewards});
  Rng noise(555);
  for (int i = 0; i < 2; i++) {
    SdeStepRecord rec;
    rec.step = 2;
    rec.t = 0.5;
    rec.z_in = Tensor::randn(Shape{T, mc.d_latent}, noise);
    const Tensor v_old = velocity(p_old, rec.z_in, rec.t, bundle);
    double c1, c2;
    sde_mean_coeffs(rec.step, cfg.n_steps, cfg.a, c1, c2);
    rec.mean = rec.z_in;
    for (int f = 0; f < T; f++)
      if (bundle.mask[size_t(f)])
        for (int j = 0; j < mc.d_latent; j++)
          rec.mean.at(f, j) = c1 * rec.z_in.at(f, j) + c2 * v_old.at(f, j);
    rec.sigma = sigma_t(cfg.a, rec.t) * std::sqrt(dt);
    rec.sample = rec.mean;
    for (int f = 0; f < T; f++)
      if (bundle.mask[size_t(f)])
        for (int j = 0; j < mc.d_latent; j++) rec.sample.at(f, j) += rec.sigma * noise.normal();
    rec.logp = gauss_logp(rec.sample, rec.mean, rec.sigma, bundle.mask);
    g.records.push_back({rec});
    g.finals.push_back(rec.sample);
  }
  const std::vector<double> adv{0.7, -0.7};

  double kl_out = 0;
  const double got = grpo_loss(g, adv, p_cur, p_old, p_ref, cfg, nullptr, &kl_out);

  // independent scalar evaluation of the same objective
  double want = 0, want_kl = 0;
  for (int i = 0; i < 2; i++) {
    const SdeStepRecord& rec = g.records[size_t(i)][0];
    double c1, c2;
    sde_mean_coeffs(rec.step, cfg.n_steps, cfg.a, c1, c2);
    const Tensor v_cur = velocity(p_cur, rec.z_in, rec.t, bundle);
    const Tensor v_old = velocity(p_old, rec.z_in, rec.t, bundle);
    const Tensor v_ref = velocity(p_ref, rec.z_in, rec.t, bundle);
    double ssd_cur = 0, ssd_old = 0, klq = 0;
    for (int f = 0; f < T; f++) {
      if (!bundle.mask[size_t(f)]) continue;
      for (int j = 0; j < mc.d_latent; j++) {
        const double mu_c = c1 * rec.z_in.at(f, j) + c2 * v_cur.at(f, j);
        const double mu_o = c1 * rec.z_in.at(f, j) + c2 * v_old.at(f, j);
        const double mu_r = c1 * rec.z_in.at(f, j) + c2 * v_ref.at(f, j);
        ssd_cur += (rec.sample.at(f, j) - mu_c) * (rec.sample.at(f, j) - mu_c);
        ssd_old += (rec.sample.at(f, j) - mu_o) * (rec.sample.at(f, j) - mu_o);
        klq += (mu_c - mu_r) * (mu_c - mu_r);
      }
    }
    const double inv = 1.0 / (2.0 * rec.sigma * rec.sigma);
    const double rho = std::exp((ssd_old - ssd_cur) * inv);
    const double clipped = std::min(std::max(rho, 1.0 - cfg.eps_clip), 1.0 + cfg.eps_clip);
    const double surr = std::min(rho * adv[size_t(i)], clipped * adv[size_t(i)]);
    const double kl = klq * inv;
    want += (-surr + cfg.beta * kl) / 2.0;  // G = 2, one record each
    want_kl += kl / 2.0;
  }
  CHECK(got == doctest::Approx(want).epsilon(1e-10));
  CHECK(kl_out == doctest::Approx(want_kl).epsilon(1e-10));
}

TEST_CASE("loss gradient matches finite differences through the ratio path") {
  ModelConfig mc = tiny_config();
  ModelParams p_old = init_params(mc, 36);
  ModelParams p_cur = p_old;
  ModelParams p_ref = p_old;
  {
    Rng rng(888);
    for (auto& [name, t] : p_cur.tensors)
      for (auto& x : t.data) x += 0.01 * rng.normal();
    for (auto& [name, t] : p_ref.tensors)
      for (auto& x : t.data) x += 0.015 * rng.normal();
  }
  GrpoConfig cfg = small_grpo();
  cfg.group_size = 2;
  cfg.n_steps = 4;
  cfg.w_s = 2;
  ConditionBundle bundle = make_bundle(mc, 2, 1, 1, 905);
  TrajectoryGroup g = rollout_group(p_old, bundle, cfg, Window{2, 2}, 13);
  const std::vector<double> adv{0.6, -0.6};

  std::map<std::string, Tensor> grads;
  grpo_loss(g, adv, p_cur, p_old, p_ref, cfg, &grads);

  const double h = 1e-5;
  double worst = 0;
  for (auto& [name, tensor] : p_cur.tensors) {
    REQUIRE(grads.count(name) == 1);
    const Tensor& gt = grads.at(name);
    for (int64_t k = 0; k < tensor.numel(); k++) {
      const double keep = tensor.data[size_t(k)];
      tensor.data[size_t(k)] = keep + h;
      const double up = grpo_loss(g, adv, p_cur, p_old, p_ref, cfg);
      tensor.data[size_t(k)] = keep - h;
      const double dn = grpo_loss(g, adv, p_cur, p_old, p_ref, cfg);
      tensor.data[size_t(k)] = keep;
      const double fd = (up - dn) / (2 * h);
      const double rel = std::abs(fd - gt.data[size_t(k)]) /
                         std::max({std::abs(fd), std::abs(gt.data[size_t(k)]), 1e-6});
      worst = std::max(worst, rel);
    }
  }
  CHECK(worst < 1e-3);
}

TEST_CASE("loss validates group consistency") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 37);
  GrpoConfig cfg = small_grpo();
  ConditionBundle bundle = make_bundle(mc, 8, 2, 4, 906);
  TrajectoryGroup g = rollout_group(p, bundle, cfg, select_window(0, cfg, {}), 21);
  const std::vector<double> adv{0.1, 0.2, -0.3};
  CHECK_NOTHROW(grpo_loss(g, adv, p, p, p, cfg));

  CHECK_THROWS_AS(grpo_loss(g, {0.1, 0.2}, p, p, p, cfg), std::invalid_argument);

  TrajectoryGroup tampered = g;
  tampered.records[0][1].sigma = 0.0;
  CHECK_THROWS_AS(grpo_loss(tampered, adv, p, p, p, cfg), std::invalid_argument);
  tampered = g;
  tampered.records[1][0].sigma *= 1.5;  // inconsistent with the config schedule
  CHECK_THROWS_AS(grpo_loss(tampered, adv, p, p, p, cfg), std::invalid_argument);
  tampered = g;
  tampered.records[2].clear();
  CHECK_THROWS_AS(grpo_loss(tampered, adv, p, p, p, cfg), std::invalid_argument);

  // a policy over a different latent width cannot score these records
  ModelConfig other = mc;
  other.d_latent = 8;
  ModelParams p2 = init_params(other, 37);
  CHECK_THROWS_AS(grpo_loss(g, adv, p2, p2, p2, cfg), std::invalid_argument);
  // configs of the three policies must agree with each other
  ModelParams widened = init_params([&] {
    ModelConfig w = mc;
    w.d_hidden = 16;
    return w;
  }(), 37);
  CHECK_THROWS_AS(grpo_loss(g, adv, p, p, widened, cfg), std::invalid_argument);
}

TEST_CASE("training iterations log, refresh and stay deterministic") {
  ModelConfig mc = tiny_config();
  ModelParams p = init_params(mc, 38);
  GrpoConfig cfg = small_grpo();
  GrpoState state = grpo_init(p, cfg);
  CHECK(params_equal(state.params, state.params_ref));

  std::vector<ConditionBundle> batch{make_bundle(mc, 8, 1, 5, 907), make_bundle(mc, 8, 2, 4, 908)};
  RewardFn fn = [&](const Tensor& final_latent, const ConditionBundle& bundle) {
    double acc = 0;
    int n = 0;
    for (int f = 0; f < bundle.frames(); f++)
      if (bundle.mask[size_t(f)]) {
        for (int j = 0; j < final_latent.shape.d[1]; j++) acc += final_latent.at(f, j);
        n += int(final_latent.shape.d[1]);
      }
    const double m = acc / double(n);
    return std::vector<double>{std::tanh(m), 0.5 * std::tanh(-m) + 0.5};
  };

  GrpoState replay = state;
  for (int it = 0; it < 3; it++) {
    GrpoStats stats = grpo_train_iter(state, batch, fn, 1000 + uint64_t(it));
    CHECK(stats.iter == it);
    CHECK(stats.window_start == 4);
    REQUIRE(stats.mean_rewards.size() == 2);
    for (double r : stats.mean_rewards) CHECK(std::isfinite(r));
    CHECK(std::isfinite(stats.loss));
    CHECK(stats.mean_kl >= 0.0);
  }
  CHECK(state.iter == 3);
  CHECK(state.log.size() == 3);
  CHECK(state.reward_std_history.size() == 3);
  CHECK(params_equal(state.params, state.params_old));       // refreshed after update
  CHECK_FALSE(params_equal(state.params, state.params_ref));  // reference frozen

  // CSV rows: iter, one column per reward, kl, window start, loss
  for (const std::string& row : state.log) {
    size_t commas = 0;
    for (char c : row) commas += c == ',';
    CHECK(commas == 2 + 2 + 1);  // 6 fields for M = 2
  }
  CHECK(state.log[0].substr(0, 2) == "0,");

  // bit-exact replay from the same starting state and seeds
  for (int it = 0; it < 3; it++) grpo_train_iter(replay, batch, fn, 1000 + uint64_t(it));
  CHECK(params_equal(state.params, replay.params));
  CHECK(state.log == replay.log);

  // a reward function returning the wrong arity is rejected
  RewardFn bad = [](const Tensor&, const ConditionBundle&) { return std::vector<double>{1.0}; };
  CHECK_THROWS_AS(grpo_train_iter(state, batch, bad, 7), std::invalid_argument);
  // non-finite rewards abort with a runtime error
  RewardFn inf_fn = [](const Tensor&, const ConditionBundle&) {
    return std::vector<double>{std::numeric_limits<double>::infinity(), 0.0};
  };
  CHECK_THROWS_AS(grpo_train_iter(state, batch, inf_fn, 7), std::runtime_error);
}
