#include "fgl/conditioning.hpp"

#include <cmath>
#include <stdexcept>

namespace fgl {

std::vector<int> align_tokens(const std::vector<TokenSentence>& sentences, int frames) {
  if (frames <= 0) throw std::invalid_argument("align_tokens: frames must be positive");
  std::vector<int> grid(size_t(frames), 0);
  int prev_end = 0;
  bool first = true;
  for (const auto& s : sentences) {
    if (s.tokens.empty()) throw std::invalid_argument("align_tokens: empty sentence");
    if (s.onset < 0 || s.onset >= frames)
      throw std::invalid_argument("align_tokens: onset outside grid");
    if (!first && s.onset < prev_end) throw std::invalid_argument("align_tokens: sentences overlap");
    if (s.onset + int(s.tokens.size()) > frames)
      throw std::invalid_argument("align_tokens: sentence exceeds grid");
    for (size_t i = 0; i < s.tokens.size(); i++)
      grid[size_t(s.onset) + i] = s.tokens[i];
    prev_end = s.onset + int(s.tokens.size());
    first = false;
  }
  return grid;
}

Tensor interp_melody(const Tensor& h, int frames) {
  if (h.shape.rank != 2 || h.shape.d[0] < 1)
    throw std::invalid_argument("interp_melody: need a (L x d) input with L >= 1");
  if (frames < 1) throw std::invalid_argument("interp_melody: frames must be positive");
  const int L = h.shape.d[0], d = h.shape.d[1];
  Tensor out(Shape{frames, d});
  for (int f = 0; f < frames; f++) {
    double pos = 0.0;
    if (L > 1 && frames > 1) pos = double(f) * double(L - 1) / double(frames - 1);
    else if (L > 1) pos = double(L - 1);  // single output frame takes the tail
    int i0 = int(std::floor(pos));
    if (i0 >= L - 1) i0 = L - 1;
    const double a = pos - double(i0);
    for (int j = 0; j < d; j++) {
      const double v0 = h.at(i0, j);
      out.at(f, j) = a == 0.0 ? v0 : (1.0 - a) * v0 + a * h.at(i0 + 1, j);
    }
  }
  return out;
}

Tensor temporal_dropout(const Tensor& h, double p, uint64_t seed) {
  if (h.shape.rank != 2) throw std::invalid_argument("temporal_dropout: need a (T x d) input");
  if (p < 0.0 || p > 1.0) throw std::invalid_argument("temporal_dropout: p must be in [0,1]");
  Tensor out = h;
  Rng rng(derive_seed(seed, 0xD201));
  for (int f = 0; f < h.shape.d[0]; f++)
    if (rng.bernoulli(p))
      for (int j = 0; j < h.shape.d[1]; j++) out.at(f, j) = 0.0;
  return out;
}

MaskSpec make_mask(int frames, double gamma_min, double gamma_max, uint64_t seed) {
  if (!(gamma_min > 0.0) || gamma_min > gamma_max || gamma_max > 1.0)
    throw std::invalid_argument("make_mask: need 0 < gamma_min <= gamma_max <= 1");
  if (frames < 1) throw std::invalid_argument("make_mask: frames must be positive");
  Rng rng(derive_seed(seed, 0xD202));
  const double gamma = rng.uniform(gamma_min, gamma_max);
  int length = int(std::lround(gamma * double(frames)));
  length = std::max(1, std::min(frames, length));
  MaskSpec m;
  m.length = length;
  m.start = int(rng.uniform_int(uint64_t(frames - length + 1)));
  return m;
}

ConditionBundle build_bundle(const Tensor& latent, const Tensor& melody_raw,
                             const std::vector<TokenSentence>& sentences, const MaskSpec& mask,
                             double dropout_p, uint64_t seed) {
  if (latent.shape.rank != 2) throw std::invalid_argument("build_bundle: latent must be (T x D)");
  const int T = latent.shape.d[0];
  if (mask.start < 0 || mask.length < 1 || mask.start + mask.length > T)
    throw std::invalid_argument("build_bundle: mask span outside the grid");

  ConditionBundle b;
  b.token_grid = align_tokens(sentences, T);
  b.melody = interp_melody(melody_raw, T);
  if (dropout_p > 0.0) b.melody = temporal_dropout(b.melody, dropout_p, seed);
  b.z_ctx = latent;
  b.mask.assign(size_t(T), 0);
  for (int f = mask.start; f < mask.start + mask.length; f++) {
    b.mask[size_t(f)] = 1;
    for (int j = 0; j < latent.shape.d[1]; j++) b.z_ctx.at(f, j) = 0.0;
  }
  return b;
}

std::pair<int, int> mask_span(const std::vector<uint8_t>& mask) {
  int start = -1, stop = -1;
  for (size_t f = 0; f < mask.size(); f++) {
    if (!mask[f]) continue;
    if (start < 0) start = int(f);
    stop = int(f);
  }
  if (start < 0) throw std::invalid_argument("mask_span: mask has no set frames");
  for (int f = start; f <= stop; f++)
    if (!mask[size_t(f)]) throw std::invalid_argument("mask_span: mask is not contiguous");
  return {start, stop - start + 1};
}

std::vector<TokenSentence> edit_sentences(const std::vector<int>& prompt,
                                          const std::vector<int>& target, int mask_start) {
  std::vector<TokenSentence> out;
  if (!prompt.empty()) out.push_back({prompt, 0});
  if (!target.empty()) out.push_back({target, mask_start});
  return out;
}

}  // namespace fgl
