#pragma once
// Synthetic singing world with closed-form generation and oracle decoding.
// Frame latents are a linear mix of token, pitch-feature, and timbre blocks
// drawn from an orthonormal basis, plus isotropic observation noise, so a
// least-squares projection recovers every factor and off-subspace residual
// energy measures sample quality.
#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "fgl/tensor.hpp"

namespace fgl {

struct WorldSpec {
  uint64_t seed = 7;
  int d_latent = 16;
  int n_tokens = 32;  // two 16-token language sub-alphabets; id 0 is padding
  int d_token = 4;
  int d_pitch = 8;    // sin/cos at 4 frequencies
  int d_timbre = 2;
  int d_melody = 16;
  int n_techniques = 7;
  int n_timbres_per_gender = 6;
  int pitch_grid = 1024;
  double sigma_obs = 0.05;
  double melody_leak = 0.7;  // scale of the token residue in melody features
  double token_scale = 1.25;
};

struct SampleLabels {
  int language = 0;   // 0 or 1
  int gender = 0;     // 0 or 1
  int timbre = 0;     // global id in [0, 2*n_timbres_per_gender)
  int technique = 0;  // 0..6
  bool speech = false;  // pretrain variant: pitch block zeroed in the latent
};

struct ToySample {
  uint64_t seed = 0;
  int frames = 0;
  SampleLabels labels;
  std::vector<int> tokens;                 // frame grid, 0 = padding
  std::vector<std::vector<int>> sentences; // token sequences, no frame padding
  std::vector<int> onsets;                 // one per sentence, strictly increasing
  std::vector<double> pitch;               // per frame, in [0, 1]
  std::vector<int> note_durs;              // generation metadata
  Tensor latent;                           // (frames x d_latent)
  Tensor melody;                           // (L x d_melody), L = max(2, frames/2)
  Tensor timbre;                           // (d_timbre), the true unit timbre vector
  int mask_start = -1;                     // edit-task layout: onset of the target sentence
};

struct DecodeResult {
  std::vector<int> tokens;    // per frame
  std::vector<double> pitch;  // per frame
  Tensor timbre;              // normalized mean timbre coefficient
  std::vector<double> resid;  // per-frame off-subspace energy
  double mean_resid = 0;
};

struct RewardRefs {
  std::vector<int> target_tokens;   // nonempty
  std::vector<double> ref_pitch;    // one per generated frame
  Tensor ctx_timbre;                // (d_timbre)
};

class World {
public:
  explicit World(WorldSpec spec);

  const WorldSpec& spec() const { return spec_; }

  // generic layout: sentences tile the grid with gaps, labels drawn from seed
  ToySample gen_sample(int frames, uint64_t seed) const;
  ToySample gen_sample(int frames, uint64_t seed, const SampleLabels& labels) const;
  // edit-task layout: one prompt sentence, then one target sentence whose
  // onset becomes mask_start (gamma lands in [0.7, 0.9) for frames >= 40)
  ToySample gen_edit_base(int frames, uint64_t seed, const SampleLabels& labels) const;
  // ground truth for an edited clip: the target sentence of an edit-layout
  // sample is replaced, pitch and layout stay fixed, the latent is re-rendered
  // (optionally under another timbre) with observation noise drawn from seed
  ToySample edited_variant(const ToySample& base, const std::vector<int>& new_target,
                           int timbre_id, uint64_t seed) const;

  DecodeResult decode(const Tensor& latent) const;

  // R1 = 1 - min(1, per), R2 = pitch pearson, R3 = timbre cosine,
  // R4 = exp(-mean off-subspace residual energy); all on the given rows
  std::array<double, 4> rewards(const Tensor& gen, const RewardRefs& refs) const;

  const Tensor& signal_basis() const { return basis_; }  // (d_latent x 14), orthonormal
  const Tensor& token_vectors() const { return tokvec_; }
  const Tensor& timbre_vectors() const { return timbrevec_; }
  Tensor timbre_of(int timbre_id) const;

  // token id at a melody grid position maps to this latent frame
  int melody_frame(int l, int L, int frames) const;

private:
  Tensor melody_features(const ToySample& s) const;
  void fill_latent(ToySample& s, Rng& rng) const;

  WorldSpec spec_;
  Tensor basis_;      // (D x d_token+d_pitch+d_timbre) orthonormal columns
  Tensor tokvec_;     // (n_tokens+1 x d_token), row 0 = zeros
  Tensor timbrevec_;  // (2*n_timbres_per_gender x d_timbre), unit rows
  Tensor qmel_;       // (d_melody x d_melody) orthogonal melody mixing
  Tensor grid_feats_; // (pitch_grid x d_pitch) for nearest-match inversion
};

// --- metrics -----------------------------------------------------------------
// PER = Levenshtein(ref, hyp) / len(ref); ref must be nonempty.
double per(const std::vector<int>& ref, const std::vector<int>& hyp);
// Pearson correlation; inputs of length >= 2; constant input yields 0.
double pearson(const std::vector<double>& x, const std::vector<double>& y);
// Cosine similarity; zero-norm input yields 0.
double cosine(const Tensor& a, const Tensor& b);
// Drop padding (0) frames, then merge consecutive identical tokens.
std::vector<int> collapse_tokens(const std::vector<int>& frame_tokens);

// sinusoidal pitch feature maps (world and melody-extractor variants)
void pitch_features(double p, double* out8);
void melody_pitch_features(double p, double* out8);

// --- dataset files -----------------------------------------------------------
// Line-delimited: a header object then one record per line; latents are
// regenerated from seeds on load.
struct DatasetRecord {
  uint64_t seed = 0;
  int frames = 0;
  SampleLabels labels;
  bool edit_layout = false;
};

void save_dataset(const std::string& path, const World& world,
                  const std::vector<DatasetRecord>& records);
std::vector<ToySample> load_dataset(const std::string& path, const World& world);

}  // namespace fgl
