#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>

#include "fgl/model.hpp"

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

// a well-formed bundle with no masked frames (pure forward-pass fodder)
ConditionBundle random_bundle(const ModelConfig& c, int T, uint64_t seed) {
  Rng rng(seed);
  ConditionBundle b;
  b.melody = Tensor::randn(Shape{T, c.d_melody}, rng);
  b.z_ctx = Tensor::randn(Shape{T, c.d_latent}, rng);
  b.mask.assign(size_t(T), 0);
  b.token_grid.resize(size_t(T));
  for (int f = 0; f < T; f++) b.token_grid[size_t(f)] = int(rng.uniform_int(uint64_t(c.n_tokens + 1)));
  return b;
}

}  // namespace

TEST_CASE("config validation") {
  ModelConfig c;
  CHECK_NOTHROW(c.validate());
  c.d_hidden = 65;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.n_layers = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("init_params is deterministic with contracted shapes") {
  ModelConfig c;
  ModelParams a = init_params(c, 5), b = init_params(c, 5), d = init_params(c, 6);
  REQUIRE(a.tensors.size() == b.tensors.size());
  for (const auto& [name, t] : a.tensors) CHECK(t.data == b.tensors.at(name).data);
  bool any_diff = false;
  for (const auto& [name, t] : a.tensors)
    if (t.data != d.tensors.at(name).data) any_diff = true;
  CHECK(any_diff);
  CHECK(a.tensors.at("tok_table").shape == Shape{33, 16});
  CHECK(a.tensors.at("w_out").shape == Shape{64, 16});
  CHECK(a.version == 1);
}

TEST_CASE("velocity output shape, determinism, finiteness") {
  ModelConfig c = tiny_config();
  c.d_latent = 8;
  ModelParams p = init_params(c, 1);
  ConditionBundle b = random_bundle(c, 16, 2);
  Rng rng(3);
  Tensor zt = Tensor::randn(Shape{16, 8}, rng);
  Tensor v1 = velocity(p, zt, 0.4, b);
  CHECK(v1.shape == Shape{16, 8});
  Tensor v2 = velocity(p, zt, 0.4, b);
  CHECK(v1.data == v2.data);

  Tensor zero = Tensor::zeros(Shape{16, 8});
  ConditionBundle bz = b;
  bz.melody = Tensor::zeros(bz.melody.shape);
  bz.z_ctx = Tensor::zeros(bz.z_ctx.shape);
  bz.token_grid.assign(16, 0);
  Tensor vz = velocity(p, zero, 0.0, bz);
  for (double x : vz.data) CHECK(std::isfinite(x));
}

TEST_CASE("velocity rejects malformed inputs") {
  ModelConfig c = tiny_config();
  ModelParams p = init_params(c, 1);
  ConditionBundle b = random_bundle(c, 8, 4);
  Rng rng(5);
  Tensor zt = Tensor::randn(Shape{8, 4}, rng);
  CHECK_THROWS_AS(velocity(p, Tensor(Shape{7, 4}), 0.5, b), std::invalid_argument);
  CHECK_THROWS_AS(velocity(p, zt, 1.5, b), std::invalid_argument);
  CHECK_THROWS_AS(velocity(p, zt, -0.1, b), std::invalid_argument);
  CHECK_THROWS_AS(velocity(p, Tensor(Shape{8, 5}), 0.5, b), std::invalid_argument);
}

TEST_CASE("initial forward output lands at unit order of magnitude") {
  ModelConfig c;
  ModelParams p = init_params(c, 11);
  const int T = 32;
  ConditionBundle b = random_bundle(c, T, 12);
  Rng rng(13);
  Tensor zt = Tensor::randn(Shape{T, c.d_latent}, rng);
  Tensor v = velocity(p, zt, 0.3, b);
  double mean = 0, var = 0;
  for (double x : v.data) mean += x / double(v.numel());
  for (double x : v.data) var += (x - mean) * (x - mean) / double(v.numel());
  const double stddev = std::sqrt(var);
  CHECK(stddev >= 0.1);
  CHECK(stddev <= 10.0);
}

TEST_CASE("velocity gradients match finite differences") {
  ModelConfig c = tiny_config();
  ModelParams p = init_params(c, 21);
  const int T = 3;
  ConditionBundle b = random_bundle(c, T, 22);
  Rng rng(23);
  Tensor zt = Tensor::randn(Shape{T, c.d_latent}, rng);
  Tensor oh = tokens_onehot(b.token_grid, c.n_tokens);
  Tensor tf = time_features(0.37);

  Graph g;
  NodeId out = append_velocity_graph(g, c, T);
  NodeId loss = g.mean(out);
  Bindings bind;
  bind_params(bind, p);
  bind[kLeafZt] = &zt;
  bind[kLeafMelody] = &b.melody;
  bind[kLeafOnehot] = &oh;
  bind[kLeafZctx] = &b.z_ctx;
  bind[kLeafTfeat] = &tf;
  CHECK(grad_check(g, bind, loss, 1e-5) < 1e-4);
}

TEST_CASE("cfg collapses bit-exactly at scales 1 and 0 and extrapolates otherwise") {
  ModelConfig c = tiny_config();
  ModelParams p = init_params(c, 31);
  const int T = 6;
  ConditionBundle b = random_bundle(c, T, 32);
  Rng rng(33);
  Tensor zt = Tensor::randn(Shape{T, c.d_latent}, rng);

  Tensor vc = velocity(p, zt, 0.6, b);
  Tensor vu = velocity(p, zt, 0.6, uncond_bundle(b));
  CHECK(velocity_cfg(p, zt, 0.6, b, 1.0).data == vc.data);
  CHECK(velocity_cfg(p, zt, 0.6, b, 0.0).data == vu.data);
  Tensor v3 = velocity_cfg(p, zt, 0.6, b, 3.0);
  for (int64_t i = 0; i < v3.numel(); i++)
    CHECK(v3.data[size_t(i)] ==
          doctest::Approx(vu.data[size_t(i)] + 3.0 * (vc.data[size_t(i)] - vu.data[size_t(i)]))
              .epsilon(1e-12));
  // the unconditional branch differs from the conditional one
  CHECK(vc.data != vu.data);
  // and keeps the context latent: zeroing z_ctx too would change it
  ConditionBundle stripped = uncond_bundle(b);
  CHECK(stripped.z_ctx.data == b.z_ctx.data);
  for (double x : stripped.melody.data) CHECK(x == 0.0);
}

TEST_CASE("context content hidden behind the mask cannot influence the output") {
  ModelConfig c = tiny_config();
  ModelParams p = init_params(c, 41);
  const int T = 10;
  Rng rng(42);
  Tensor latent_a = Tensor::randn(Shape{T, c.d_latent}, rng);
  Tensor latent_b = latent_a;
  MaskSpec m{3, 5};
  for (int f = m.start; f < m.start + m.length; f++)
    for (int j = 0; j < c.d_latent; j++) latent_b.at(f, j) += 7.0;  // masked-only change
  Tensor mel = Tensor::randn(Shape{4, c.d_melody}, rng);
  std::vector<TokenSentence> sents{{{1, 2}, 0}};
  ConditionBundle ba = build_bundle(latent_a, mel, sents, m);
  ConditionBundle bb = build_bundle(latent_b, mel, sents, m);
  Tensor zt = Tensor::randn(Shape{T, c.d_latent}, rng);
  CHECK(velocity(p, zt, 0.5, ba).data == velocity(p, zt, 0.5, bb).data);
}

TEST_CASE("checkpoints round-trip byte-identically") {
  ModelConfig c = tiny_config();
  ModelParams p = init_params(c, 51);
  p.meta["stage"] = "sft2";
  p.meta["step"] = "1234";
  p.meta["world_seed"] = "7";
  const std::string f1 = "model_ckpt_test1.bin", f2 = "model_ckpt_test2.bin";
  save_checkpoint(f1, p);
  ModelParams q = load_checkpoint(f1);
  CHECK(q.config == p.config);
  CHECK(q.meta == p.meta);
  REQUIRE(q.tensors.size() == p.tensors.size());
  for (const auto& [name, t] : p.tensors) {
    CHECK(q.tensors.at(name).shape == t.shape);
    CHECK(q.tensors.at(name).data == t.data);
  }
  save_checkpoint(f2, q);
  std::ifstream a(f1, std::ios::binary), b(f2, std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  CHECK(!sa.empty());

  {
    std::ofstream bad("model_ckpt_bad.bin", std::ios::binary);
    bad << "NOPE this is not a checkpoint";
  }
  CHECK_THROWS_AS(load_checkpoint("model_ckpt_bad.bin"), std::runtime_error);
  {
    std::ofstream trunc("model_ckpt_trunc.bin", std::ios::binary);
    trunc.write(sa.data(), 40);
  }
  CHECK_THROWS_AS(load_checkpoint("model_ckpt_trunc.bin"), std::runtime_error);
  CHECK_THROWS_AS(load_checkpoint("model_ckpt_missing.bin"), std::runtime_error);
  std::remove(f1.c_str());
  std::remove(f2.c_str());
  std::remove("model_ckpt_bad.bin");
  std::remove("model_ckpt_trunc.bin");
}

TEST_CASE("time features and onehot basics") {
  Tensor f0 = time_features(0.0);
  CHECK(f0.shape == Shape{1, 16});
  for (int k = 0; k < 8; k++) {
    CHECK(f0.at(0, 2 * k) == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
    CHECK(f0.at(0, 2 * k + 1) == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor oh = tokens_onehot({0, 3, 1}, 4);
  CHECK(oh.shape == Shape{3, 5});
  CHECK(oh.at(0, 0) == 1.0);
  CHECK(oh.at(1, 3) == 1.0);
  CHECK(oh.at(2, 1) == 1.0);
  double total = 0;
  for (double v : oh.data) total += v;
  CHECK(total == 3.0);
  CHECK_THROWS_AS(tokens_onehot({5}, 4), std::invalid_argument);
}
