#pragma once
// Group-relative policy optimization over windowed stochastic sampling:
// group rollouts, multi-reward advantages, clipped likelihood-ratio loss with
// a reference-policy KL term, and the online training iteration.

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "fgl/flowmatch.hpp"
#include "fgl/optim.hpp"

namespace fgl {

struct GrpoConfig {
  int group_size = 8;            // G: rollouts per bundle
  int n_rewards = 4;             // M: reward dimensions
  std::vector<double> weights;   // empty = uniform 1/M; must sum to 1
  double a = 0.8;                // noise scale of the stochastic steps
  int w_min = 1;                 // minimum stochastic steps kept in any window
  int w_s = 8;                   // window length
  double eps_u = 0.01;           // reward-std ceiling: retreat when exceeded
  double eps_l = 0.002;          // reward-std floor: advance when undercut
  double beta = 1.0;             // KL weight
  double eps_clip = 0.2;         // likelihood-ratio clip half-width
  int n_steps = 32;              // sampler steps per rollout
  double lr = 1e-4;
  int total_iters = 500;

  void validate() const;
  // weights resolved to length n_rewards (uniform when unset)
  std::vector<double> norm_weights() const;
};

struct Window {
  int start = 0;
  int length = 0;
  bool contains(int step) const { return step >= start && step < start + length; }
};

// Contiguous stochastic window for iteration `iter`. The position starts at
// the latest possible steps (n_steps - w_s) and is replayed forward from the
// per-iteration history of group reward std: it advances one step earlier
// when the trailing-20-iteration mean falls below eps_l (only while at least
// w_min steps with t > 0 remain in the window) and retreats one step later,
// never beyond its starting position, when that mean exceeds eps_u.
// `reward_std_history` must hold one entry per completed iteration.
Window select_window(int iter, const GrpoConfig& cfg,
                     const std::vector<double>& reward_std_history);

struct TrajectoryGroup {
  Window window;
  // per rollout: records of the genuinely stochastic steps (sigma > 0),
  // in step order; steps outside the window run as plain Euler updates
  std::vector<std::vector<SdeStepRecord>> records;
  std::vector<Tensor> finals;  // G final latents
  Tensor rewards;              // (G x M), zero until scored
  ConditionBundle bundle;
};

// G rollouts from a shared masked-noise start, stochastic inside the window,
// deterministic elsewhere, without guidance; per-rollout noise streams are
// derived from (seed, rollout index).
TrajectoryGroup rollout_group(const ModelParams& params_old, const ConditionBundle& bundle,
                              const GrpoConfig& cfg, Window window, uint64_t seed);

// Weighted per-column population z-scores; a column whose population std is
// below eps_std contributes zero for every sample.
std::vector<double> compute_advantages(const Tensor& rewards, const std::vector<double>& weights,
                                       double eps_std = 1e-8);

// (1/G) sum_i (1/|S_i|) sum_t [ -min(rho*A_i, clip(rho, 1-eps, 1+eps)*A_i)
//                               + beta*KL_t ]
// with rho the current-to-old Gaussian transition density ratio of the
// recorded sample (same sigma, re-computed mean) and KL the closed-form
// same-sigma Gaussian divergence toward the reference policy over masked
// frames. Throws if any trajectory has no records or a record has sigma = 0.
// When mean_kl is non-null it receives the average KL over all (i, t).
double grpo_loss(const TrajectoryGroup& group, const std::vector<double>& advantages,
                 const ModelParams& params, const ModelParams& params_old,
                 const ModelParams& params_ref, const GrpoConfig& cfg,
                 std::map<std::string, Tensor>* grads = nullptr, double* mean_kl = nullptr);

// Scores one rollout final. The bundle reference aliases the caller's batch
// element, so implementations may identify the task by address.
using RewardFn =
    std::function<std::vector<double>(const Tensor& final_latent, const ConditionBundle& bundle)>;

struct GrpoState {
  GrpoConfig cfg;
  ModelParams params;      // current policy
  ModelParams params_old;  // behavior policy, refreshed after every iteration
  ModelParams params_ref;  // frozen reference
  Adam opt;
  int iter = 0;
  std::vector<double> reward_std_history;  // mean per-group weighted-reward std
  std::vector<std::string> log;            // CSV rows (see grpo_log_header)
};

struct GrpoStats {
  int iter = 0;
  std::vector<double> mean_rewards;  // per reward dimension
  double mean_weighted_reward = 0;
  double mean_kl = 0;
  int window_start = 0;
  double loss = 0;
};

inline const char* grpo_log_header() { return "iter,r1,r2,r3,r4,kl,window_start,loss"; }

GrpoState grpo_init(const ModelParams& sft_params, const GrpoConfig& cfg);

// One online iteration: refresh-from-current behavior policy, rollout each
// bundle, score with reward_fn (must return n_rewards finite values), take
// one optimizer step on the batch-averaged loss, append a CSV stats row.
// Throws on a non-finite loss with diagnostics in the message.
GrpoStats grpo_train_iter(GrpoState& state, const std::vector<ConditionBundle>& batch,
                          const RewardFn& reward_fn, uint64_t seed);

}  // namespace fgl
