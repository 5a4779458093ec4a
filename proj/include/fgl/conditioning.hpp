#pragma once
// Condition-bundle construction: sentence-level token alignment onto the frame
// grid, linear melody interpolation to the latent frame rate, temporal dropout,
// and contiguous-span masking with zero-filled context latents.
#include <cstdint>
#include <vector>

#include "fgl/tensor.hpp"

namespace fgl {

struct TokenSentence {
  std::vector<int> tokens;  // ids in [1, n_tokens], nonempty
  int onset = 0;            // first frame of the sentence
};

struct MaskSpec {
  int start = 0;
  int length = 0;
};

struct ConditionBundle {
  Tensor melody;                // (T x d_melody)
  std::vector<int> token_grid;  // (T), 0 = padding
  Tensor z_ctx;                 // (T x d_latent), exactly zero on masked frames
  std::vector<uint8_t> mask;    // (T), 1 = to-generate
  int frames() const { return int(token_grid.size()); }
  int mask_count() const {
    int n = 0;
    for (uint8_t m : mask) n += m != 0;
    return n;
  }
};

// Places each sentence at its onset; frames outside any sentence hold 0.
// Sentences must be sorted by onset, non-overlapping, and inside the grid.
std::vector<int> align_tokens(const std::vector<TokenSentence>& sentences, int frames);

// Piecewise-linear resampling along the frame axis; endpoints map exactly.
// A single input row is repeated.
Tensor interp_melody(const Tensor& h, int frames);

// Independently zeroes each frame with probability p (training-time only).
Tensor temporal_dropout(const Tensor& h, double p, uint64_t seed);

// Contiguous span: length = round(gamma * frames) with gamma ~ U[gamma_min,
// gamma_max] (at least 1 frame), start uniform over valid positions.
MaskSpec make_mask(int frames, double gamma_min, double gamma_max, uint64_t seed);

// Assembles the bundle; dropout_p > 0 applies temporal dropout to the
// interpolated melody using the given seed.
ConditionBundle build_bundle(const Tensor& latent, const Tensor& melody_raw,
                             const std::vector<TokenSentence>& sentences, const MaskSpec& mask,
                             double dropout_p = 0.0, uint64_t seed = 0);

// Editing-time placement: prompt lyrics at frame 0, target lyrics at the start
// of the masked region.
// Returns (start, length) of the masked span. Throws if the mask is empty,
// has no set frames, or the set frames are not one contiguous run.
std::pair<int, int> mask_span(const std::vector<uint8_t>& mask);

std::vector<TokenSentence> edit_sentences(const std::vector<int>& prompt,
                                          const std::vector<int>& target, int mask_start);

}  // namespace fgl
