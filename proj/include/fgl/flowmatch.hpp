#pragma once
// Flow-matching path construction, the masked CFM loss, Euler ODE sampling
// with guidance, and the per-step ODE->SDE conversion used by post-training.
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "fgl/model.hpp"

namespace fgl {

// guard width for the velocity->score identity near t = 1
constexpr double kEpsT = 1e-3;

struct PathSample {
  Tensor z0, z1;
  double t = 0;
  Tensor z_t;  // (1-t)*z0 + t*z1 exactly
};

PathSample sample_path(const Tensor& z0, const Tensor& z1, double t);

struct TrainItem {
  Tensor z1;               // clean data latent (T x D)
  ConditionBundle bundle;  // same frame count
};

// Draws z0 ~ N(0, I) and t ~ U(0,1) per item, runs the velocity net on the
// interpolant, and returns the squared error against (z1 - z0) averaged over
// masked entries and the batch. When `grads` is non-null, parameter gradients
// (same averaging) are accumulated into it.
// Weight tensor used by the masked losses: extra_scale/(count*d) on masked
// rows, 0 elsewhere; all-zero mask yields an all-zero tensor.
Tensor mask_weights(const std::vector<uint8_t>& mask, int d, double extra_scale = 1.0);

// Adds scale * d(out)/d(leaf) into grads for every graph leaf that names one
// of params' tensors. Requires a completed backward pass on the tape.
void accumulate_param_grads(const Graph& g, Tape& tape, const ModelParams& params, double scale,
                            std::map<std::string, Tensor>* grads);

double cfm_loss(const ModelParams& params, const std::vector<TrainItem>& batch, uint64_t seed,
                std::map<std::string, Tensor>* grads = nullptr);

using VelocityFn = std::function<Tensor(const Tensor& z, double t)>;

// Noise in masked frames, context values elsewhere: the integration start.
Tensor init_latent(const ConditionBundle& bundle, int d_latent, uint64_t seed);

// Uniform-step Euler integration from t=0 to t=1; unmasked frames are held
// fixed bit-exactly. The stub-driven variant backs tests and rollouts.
Tensor ode_sample(const ModelParams& params, const ConditionBundle& bundle, int n_steps,
                  double cfg_scale, uint64_t seed);
Tensor ode_sample_fn(const VelocityFn& vfn, const Tensor& z_init, const std::vector<uint8_t>& mask,
                     int n_steps);

// s = -(z - t*v)/(1 - t): the marginal score when v is the true velocity of
// the linear path with standard-Gaussian z0. Throws for t >= 1 - kEpsT.
Tensor score_from_velocity(const Tensor& z, const Tensor& v, double t);

// noise schedule sigma_t = a * sqrt(t / (1 - t + kEpsT))
double sigma_t(double a, double t);

// Transition mean as an affine map mean = c1*z + c2*v on masked frames; the
// same coefficients drive the eager step and the loss graphs so both produce
// identical arithmetic. a = 0 gives the plain Euler step (c1 = 1, c2 = dt).
void sde_mean_coeffs(int step_index, int n_steps, double a, double& c1, double& c2);

struct SdeStepRecord {
  int step = 0;
  double t = 0;
  Tensor z_in;       // state entering the step
  Tensor mean;       // transition mean; unmasked rows equal z_in rows
  double sigma = 0;  // per-entry stddev on masked rows (0 for ODE steps)
  Tensor sample;
  double logp = 0;   // Gaussian log-density over masked entries (0 if sigma=0)
};

SdeStepRecord sde_step_fn(const VelocityFn& vfn, const Tensor& z, const std::vector<uint8_t>& mask,
                          int step_index, int n_steps, double a, bool stochastic, uint64_t seed);
SdeStepRecord sde_step(const ModelParams& params, const Tensor& z, const ConditionBundle& bundle,
                       int step_index, int n_steps, double a, bool stochastic, uint64_t seed);

// log N(sample; mean, sigma^2 I) summed over masked rows
double gauss_logp(const Tensor& sample, const Tensor& mean, double sigma,
                  const std::vector<uint8_t>& mask);

}  // namespace fgl
