#pragma once
// Velocity network: a small pre-norm transformer over frames whose input is
// the channel-wise concat of the noisy latent and the condition bundle, with
// sinusoidal timestep features added after input projection. Parameters are a
// flat name->tensor map so graphs bind them directly as leaves.
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fgl/conditioning.hpp"
#include "fgl/graph.hpp"
#include "fgl/tensor.hpp"

namespace fgl {

struct ModelConfig {
  int n_layers = 2;
  int n_heads = 2;
  int d_hidden = 64;
  int d_latent = 16;
  int d_melody = 16;
  int d_token_emb = 16;
  int n_tokens = 32;
  int max_frames = 256;

  static constexpr int d_time = 16;  // sinusoidal timestep feature width
  int d_ff() const { return 4 * d_hidden; }
  int d_input() const { return 2 * d_latent + d_melody + d_token_emb; }
  void validate() const;  // throws std::invalid_argument
  bool operator==(const ModelConfig& o) const;
};

struct ModelParams {
  ModelConfig config;
  uint32_t version = 1;
  std::map<std::string, Tensor> tensors;           // ordered by name
  std::map<std::string, std::string> meta;         // stage, step, world seed...
};

// Deterministic init; scales chosen so the initial forward pass has per-entry
// output standard deviation of order 1 on unit-Gaussian input.
ModelParams init_params(const ModelConfig& config, uint64_t seed);

// Per-call leaf names used by the velocity graph (params bind by tensor name).
inline constexpr const char* kLeafZt = "zt";          // (T x D)
inline constexpr const char* kLeafMelody = "melody";  // (T x D_m)
inline constexpr const char* kLeafOnehot = "onehot";  // (T x n_tokens+1)
inline constexpr const char* kLeafZctx = "zctx";      // (T x D)
inline constexpr const char* kLeafTfeat = "tfeat";    // (1 x d_time)

// Appends the whole network to `g`, declaring the five data leaves above plus
// one leaf per parameter tensor; returns the (T x D) output node.
NodeId append_velocity_graph(Graph& g, const ModelConfig& config, int frames);

// Per-call input tensors derived from (cond, t).
Tensor time_features(double t);                                   // (1 x d_time)
Tensor tokens_onehot(const std::vector<int>& grid, int n_tokens); // (T x n_tokens+1)

// Adds params plus the given per-call tensors to `b` (pointers must outlive use).
void bind_params(Bindings& b, const ModelParams& params);

// Eager forward pass (graphs cached per frame count).
Tensor velocity(const ModelParams& params, const Tensor& z_t, double t,
                const ConditionBundle& cond);

// v_u + cfg_scale*(v_c - v_u); the unconditional branch zeroes melody and
// token channels but keeps z_ctx. cfg_scale 1 or 0 returns the single branch
// bit-exactly without evaluating the other.
Tensor velocity_cfg(const ModelParams& params, const Tensor& z_t, double t,
                    const ConditionBundle& cond, double cfg_scale);

ConditionBundle uncond_bundle(const ConditionBundle& cond);

// Checkpoint container: magic "FGL1", version, JSON config/meta block, then
// (name, shape, little-endian f64 data) records ordered by name. Reserializing
// an unchanged model is byte-identical.
void save_checkpoint(const std::string& path, const ModelParams& params);
ModelParams load_checkpoint(const std::string& path);

}  // namespace fgl
