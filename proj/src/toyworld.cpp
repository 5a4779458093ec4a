#include "fgl/toyworld.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace fgl {

namespace {

constexpr double kTwoPi = 6.283185307179586476925287;

// note duration range, per-frame pitch jitter, vibrato amplitude/period,
// whether levels come from the top of the scale
struct Tech {
  int dur_lo, dur_hi;
  double jitter, vib_amp;
  int vib_period;
  bool high;
};

constexpr Tech kTech[7] = {
    {6, 12, 0.002, 0.000, 1, false},  // plain
    {10, 16, 0.002, 0.000, 1, false}, // legato
    {3, 5, 0.002, 0.000, 1, false},   // staccato
    {8, 14, 0.002, 0.035, 6, false},  // vibrato
    {6, 12, 0.012, 0.000, 1, false},  // breathy
    {5, 9, 0.005, 0.000, 1, true},    // belt
    {4, 6, 0.003, 0.050, 3, false},   // trill
};

using EMat = Eigen::MatrixXd;

Tensor orthogonal_from_seed(int n, uint64_t seed) {
  Rng rng(seed);
  EMat z(n, n);
  for (int i = 0; i < n; i++)
    for (int j = 0; j < n; j++) z(i, j) = rng.normal();
  Eigen::HouseholderQR<EMat> qr(z);
  EMat q = qr.householderQ();
  EMat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; j++)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  Tensor out(Shape{n, n});
  for (int i = 0; i < n; i++)
    for (int j = 0; j < n; j++) out.at(i, j) = q(i, j);
  return out;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

}  // namespace

void pitch_features(double p, double* out8) {
  static constexpr double f[4] = {0.5, 1.0, 2.0, 4.0};
  for (int i = 0; i < 4; i++) {
    out8[2 * i] = std::sin(kTwoPi * f[i] * p);
    out8[2 * i + 1] = std::cos(kTwoPi * f[i] * p);
  }
}

void melody_pitch_features(double p, double* out8) {
  static constexpr double f[4] = {0.7, 1.3, 2.6, 5.2};
  for (int i = 0; i < 4; i++) {
    out8[2 * i] = std::sin(kTwoPi * f[i] * p);
    out8[2 * i + 1] = std::cos(kTwoPi * f[i] * p);
  }
}

// ------------------------------ world setup ---------------------------------

World::World(WorldSpec spec) : spec_(spec) {
  const int D = spec_.d_latent;
  const int m = spec_.d_token + spec_.d_pitch + spec_.d_timbre;
  if (m >= D)
    throw std::invalid_argument("world: token+pitch+timbre blocks must leave residual dims");
  if (spec_.n_tokens % 2 != 0) throw std::invalid_argument("world: n_tokens must be even");

  // orthonormal signal basis: least-squares decoding is exactly the transpose
  Tensor q = orthogonal_from_seed(D, derive_seed(spec_.seed, 1));
  basis_ = Tensor(Shape{D, m});
  for (int i = 0; i < D; i++)
    for (int j = 0; j < m; j++) basis_.at(i, j) = q.at(i, j);

  // token vectors: greedy farthest-point packing on the unit sphere, scaled;
  // id 0 (padding / no lyric) is the origin
  const int V = spec_.n_tokens + 1;
  tokvec_ = Tensor(Shape{V, spec_.d_token});
  {
    Rng rng(derive_seed(spec_.seed, 2));
    const int n_cand = 4096;
    std::vector<std::vector<double>> cand(n_cand, std::vector<double>(spec_.d_token));
    for (auto& c : cand) {
      double nrm = 0;
      for (auto& v : c) {
        v = rng.normal();
        nrm += v * v;
      }
      nrm = std::sqrt(nrm);
      for (auto& v : c) v /= nrm > 0 ? nrm : 1.0;
    }
    std::vector<int> chosen{0};
    std::vector<double> mind(n_cand, 1e30);
    for (int k = 1; k < spec_.n_tokens; k++) {
      int best = -1;
      double bestd = -1;
      for (int i = 0; i < n_cand; i++) {
        double d2 = 0;
        const auto& a = cand[size_t(chosen.back())];
        for (int j = 0; j < spec_.d_token; j++) {
          double d = cand[size_t(i)][size_t(j)] - a[size_t(j)];
          d2 += d * d;
        }
        mind[size_t(i)] = std::min(mind[size_t(i)], d2);
        if (mind[size_t(i)] > bestd) {
          bestd = mind[size_t(i)];
          best = i;
        }
      }
      chosen.push_back(best);
    }
    for (int k = 0; k < spec_.n_tokens; k++)
      for (int j = 0; j < spec_.d_token; j++)
        tokvec_.at(k + 1, j) = spec_.token_scale * cand[size_t(chosen[size_t(k)])][size_t(j)];
  }

  // unit timbre vectors on per-gender arcs
  const int n_tim = 2 * spec_.n_timbres_per_gender;
  timbrevec_ = Tensor(Shape{n_tim, spec_.d_timbre});
  for (int g = 0; g < 2; g++)
    for (int k = 0; k < spec_.n_timbres_per_gender; k++) {
      const double lo = (g == 0 ? 0.15 : 1.15) * 3.14159265358979323846;
      const double hi = (g == 0 ? 0.85 : 1.85) * 3.14159265358979323846;
      const double th = lo + (hi - lo) * (spec_.n_timbres_per_gender == 1
                                              ? 0.5
                                              : double(k) / double(spec_.n_timbres_per_gender - 1));
      timbrevec_.at(g * spec_.n_timbres_per_gender + k, 0) = std::cos(th);
      timbrevec_.at(g * spec_.n_timbres_per_gender + k, 1) = std::sin(th);
    }

  qmel_ = orthogonal_from_seed(spec_.d_melody, derive_seed(spec_.seed, 3));

  grid_feats_ = Tensor(Shape{spec_.pitch_grid, spec_.d_pitch});
  for (int i = 0; i < spec_.pitch_grid; i++)
    pitch_features(double(i) / double(spec_.pitch_grid - 1), &grid_feats_.at(i, 0));
}

Tensor World::timbre_of(int timbre_id) const {
  Tensor u(Shape{spec_.d_timbre});
  for (int j = 0; j < spec_.d_timbre; j++) u.at(j) = timbrevec_.at(timbre_id, j);
  return u;
}

int World::melody_frame(int l, int L, int frames) const {
  if (L <= 1) return 0;
  return int(std::lround(double(l) * double(frames - 1) / double(L - 1)));
}

// ------------------------------ generation ----------------------------------

namespace {

SampleLabels labels_from_seed(const WorldSpec& spec, Rng& rng) {
  SampleLabels lb;
  lb.language = int(rng.uniform_int(2));
  lb.gender = int(rng.uniform_int(2));
  lb.timbre = lb.gender * spec.n_timbres_per_gender + int(rng.uniform_int(uint64_t(spec.n_timbres_per_gender)));
  lb.technique = int(rng.uniform_int(uint64_t(spec.n_techniques)));
  return lb;
}

void gen_pitch(const WorldSpec&, const SampleLabels& lb, int frames, Rng& rng,
               std::vector<double>& pitch, std::vector<int>& durs) {
  const Tech& tc = kTech[lb.technique];
  pitch.assign(size_t(frames), 0.0);
  durs.clear();
  int f = 0;
  while (f < frames) {
    int dur = tc.dur_lo + int(rng.uniform_int(uint64_t(tc.dur_hi - tc.dur_lo + 1)));
    dur = std::min(dur, frames - f);
    durs.push_back(dur);
    const int lv_lo = tc.high ? 6 : 0;
    const int lv = lv_lo + int(rng.uniform_int(uint64_t(12 - lv_lo)));
    const double level = 0.1 + double(lv) * (0.8 / 11.0);
    const int f0 = f;
    for (int k = 0; k < dur; k++, f++) {
      double v = level;
      if (tc.vib_amp > 0) v += tc.vib_amp * std::sin(kTwoPi * double(f - f0) / double(tc.vib_period));
      v += tc.jitter * rng.normal();
      pitch[size_t(f)] = clamp01(v);
    }
  }
}

int draw_token(const SampleLabels& lb, Rng& rng, int prev) {
  const int base = 1 + 16 * lb.language;
  for (;;) {
    int t = base + int(rng.uniform_int(16));
    if (t != prev) return t;
  }
}

void place_sentence(std::vector<int>& grid, const std::vector<int>& toks, int onset) {
  for (size_t i = 0; i < toks.size(); i++) grid[size_t(onset) + i] = toks[i];
}

}  // namespace

Tensor World::melody_features(const ToySample& s) const {
  const int L = std::max(2, s.frames / 2);
  Tensor raw(Shape{L, spec_.d_melody});
  for (int l = 0; l < L; l++) {
    const int f = melody_frame(l, L, s.frames);
    double feats[8];
    melody_pitch_features(s.pitch[size_t(f)], feats);
    for (int j = 0; j < 8; j++) raw.at(l, j) = feats[j];
    const int tok = s.tokens[size_t(f)];
    for (int j = 0; j < spec_.d_token; j++)
      raw.at(l, 8 + j) = spec_.melody_leak * tokvec_.at(tok, j);
    // remaining dims stay zero
  }
  // h = raw * Qmel^T  (orthogonal mixing keeps the Gram matrix unchanged)
  Tensor h(Shape{L, spec_.d_melody});
  for (int l = 0; l < L; l++)
    for (int i = 0; i < spec_.d_melody; i++) {
      double acc = 0;
      for (int j = 0; j < spec_.d_melody; j++) acc += qmel_.at(i, j) * raw.at(l, j);
      h.at(l, i) = acc;
    }
  return h;
}

void World::fill_latent(ToySample& s, Rng& rng) const {
  const int D = spec_.d_latent;
  s.latent = Tensor(Shape{s.frames, D});
  s.timbre = timbre_of(s.labels.timbre);
  for (int f = 0; f < s.frames; f++) {
    double feats[8];
    pitch_features(s.pitch[size_t(f)], feats);
    const int tok = s.tokens[size_t(f)];
    for (int i = 0; i < D; i++) {
      double v = 0;
      for (int j = 0; j < spec_.d_token; j++) v += basis_.at(i, j) * tokvec_.at(tok, j);
      if (!s.labels.speech)
        for (int j = 0; j < spec_.d_pitch; j++) v += basis_.at(i, spec_.d_token + j) * feats[j];
      for (int j = 0; j < spec_.d_timbre; j++)
        v += basis_.at(i, spec_.d_token + spec_.d_pitch + j) * s.timbre.at(j);
      s.latent.at(f, i) = v + spec_.sigma_obs * rng.normal();
    }
  }
  s.melody = melody_features(s);
}

ToySample World::gen_sample(int frames, uint64_t seed) const {
  Rng rng(derive_seed(seed, 0xA001));
  SampleLabels lb = labels_from_seed(spec_, rng);
  return gen_sample(frames, seed, lb);
}

ToySample World::gen_sample(int frames, uint64_t seed, const SampleLabels& labels) const {
  if (frames < 8) throw std::invalid_argument("gen_sample: frames must be >= 8");
  ToySample s;
  s.seed = seed;
  s.frames = frames;
  s.labels = labels;
  Rng rng(derive_seed(seed, 0xA002));

  gen_pitch(spec_, s.labels, frames, rng, s.pitch, s.note_durs);

  s.tokens.assign(size_t(frames), 0);
  int pos = 1 + int(rng.uniform_int(3));
  int prev = 0;
  bool first = true;
  while (pos < frames - 3) {
    int len = first ? 4 + int(rng.uniform_int(4)) : 5 + int(rng.uniform_int(6));
    first = false;
    len = std::min(len, frames - pos);
    if (len < 3) break;
    std::vector<int> toks;
    for (int i = 0; i < len; i++) {
      prev = draw_token(s.labels, rng, prev);
      toks.push_back(prev);
    }
    place_sentence(s.tokens, toks, pos);
    s.sentences.push_back(std::move(toks));
    s.onsets.push_back(pos);
    pos += len + 2 + int(rng.uniform_int(4));
  }
  if (s.sentences.empty()) {  // tiny grids still get one short sentence
    std::vector<int> toks;
    for (int i = 0; i < 3; i++) {
      prev = draw_token(s.labels, rng, prev);
      toks.push_back(prev);
    }
    place_sentence(s.tokens, toks, 1);
    s.sentences.push_back(std::move(toks));
    s.onsets.push_back(1);
  }

  fill_latent(s, rng);
  return s;
}

ToySample World::gen_edit_base(int frames, uint64_t seed, const SampleLabels& labels) const {
  if (frames < 32) throw std::invalid_argument("gen_edit_base: frames must be >= 32");
  ToySample s;
  s.seed = seed;
  s.frames = frames;
  s.labels = labels;
  Rng rng(derive_seed(seed, 0xA003));

  gen_pitch(spec_, s.labels, frames, rng, s.pitch, s.note_durs);

  s.tokens.assign(size_t(frames), 0);
  const int onset1 = 1 + int(rng.uniform_int(2));
  const int len1 = 4 + int(rng.uniform_int(3));
  const int gap = 2 + int(rng.uniform_int(3));
  const int onset2 = onset1 + len1 + gap;
  const int len2 = frames - onset2 - 10;  // tail head-room for insertion edits
  if (len2 < 6) throw std::invalid_argument("gen_edit_base: frames too small for layout");

  int prev = 0;
  std::vector<int> s1, s2;
  for (int i = 0; i < len1; i++) {
    prev = draw_token(s.labels, rng, prev);
    s1.push_back(prev);
  }
  for (int i = 0; i < len2; i++) {
    prev = draw_token(s.labels, rng, prev);
    s2.push_back(prev);
  }
  place_sentence(s.tokens, s1, onset1);
  place_sentence(s.tokens, s2, onset2);
  s.sentences = {s1, s2};
  s.onsets = {onset1, onset2};
  s.mask_start = onset2;

  fill_latent(s, rng);
  return s;
}

ToySample World::edited_variant(const ToySample& base, const std::vector<int>& new_target,
                                int timbre_id, uint64_t seed) const {
  if (base.mask_start < 0 || base.sentences.size() != 2 || base.onsets.size() != 2)
    throw std::invalid_argument("edited_variant: edit-layout sample required");
  if (new_target.empty()) throw std::invalid_argument("edited_variant: empty target");
  const int onset = base.onsets[1];
  if (onset + int(new_target.size()) > base.frames)
    throw std::invalid_argument("edited_variant: edited sentence does not fit the grid");
  if (timbre_id < 0 || timbre_id >= 2 * spec_.n_timbres_per_gender)
    throw std::invalid_argument("edited_variant: timbre id out of range");

  ToySample s = base;
  s.labels.timbre = timbre_id;
  s.sentences[1] = new_target;
  std::fill(s.tokens.begin() + onset, s.tokens.end(), 0);
  place_sentence(s.tokens, new_target, onset);
  Rng rng(derive_seed(seed, 0xA004));
  fill_latent(s, rng);
  return s;
}

// ------------------------------ decoding ------------------------------------

DecodeResult World::decode(const Tensor& latent) const {
  if (latent.shape.rank != 2 || latent.shape.d[1] != spec_.d_latent)
    throw std::invalid_argument("decode: latent must be (frames x d_latent)");
  const int T = latent.shape.d[0];
  const int D = spec_.d_latent;
  const int m = spec_.d_token + spec_.d_pitch + spec_.d_timbre;

  DecodeResult out;
  out.tokens.resize(size_t(T));
  out.pitch.resize(size_t(T));
  out.resid.resize(size_t(T));
  out.timbre = Tensor(Shape{spec_.d_timbre});

  std::vector<double> coeff(static_cast<size_t>(m));
  for (int f = 0; f < T; f++) {
    // orthonormal basis: least-squares coefficients are basis^T z
    for (int j = 0; j < m; j++) {
      double acc = 0;
      for (int i = 0; i < D; i++) acc += basis_.at(i, j) * latent.at(f, i);
      coeff[size_t(j)] = acc;
    }
    // nearest token vector (id 0 = origin included)
    int best_tok = 0;
    double best_d = 1e300;
    for (int k = 0; k <= spec_.n_tokens; k++) {
      double d2 = 0;
      for (int j = 0; j < spec_.d_token; j++) {
        const double d = coeff[size_t(j)] - tokvec_.at(k, j);
        d2 += d * d;
      }
      if (d2 < best_d) {
        best_d = d2;
        best_tok = k;
      }
    }
    out.tokens[size_t(f)] = best_tok;
    // nearest grid point in pitch-feature space
    int best_p = 0;
    best_d = 1e300;
    for (int g = 0; g < spec_.pitch_grid; g++) {
      double d2 = 0;
      for (int j = 0; j < spec_.d_pitch; j++) {
        const double d = coeff[size_t(spec_.d_token + j)] - grid_feats_.at(g, j);
        d2 += d * d;
      }
      if (d2 < best_d) {
        best_d = d2;
        best_p = g;
      }
    }
    out.pitch[size_t(f)] = double(best_p) / double(spec_.pitch_grid - 1);
    for (int j = 0; j < spec_.d_timbre; j++)
      out.timbre.at(j) += coeff[size_t(spec_.d_token + spec_.d_pitch + j)] / double(T);
    // off-subspace residual energy
    double r2 = 0;
    for (int i = 0; i < D; i++) {
      double recon = 0;
      for (int j = 0; j < m; j++) recon += basis_.at(i, j) * coeff[size_t(j)];
      const double d = latent.at(f, i) - recon;
      r2 += d * d;
    }
    out.resid[size_t(f)] = r2;
    out.mean_resid += r2 / double(T);
  }
  double nrm = 0;
  for (int j = 0; j < spec_.d_timbre; j++) nrm += out.timbre.at(j) * out.timbre.at(j);
  if (nrm > 0) {
    nrm = std::sqrt(nrm);
    for (int j = 0; j < spec_.d_timbre; j++) out.timbre.at(j) /= nrm;
  }
  return out;
}

std::array<double, 4> World::rewards(const Tensor& gen, const RewardRefs& refs) const {
  if (gen.shape.rank != 2 || gen.shape.d[0] < 2)
    throw std::invalid_argument("rewards: generated latent must have >= 2 frames");
  if (refs.target_tokens.empty()) throw std::invalid_argument("rewards: empty target tokens");
  if (int(refs.ref_pitch.size()) != gen.shape.d[0])
    throw std::invalid_argument("rewards: reference pitch length mismatch");

  DecodeResult dec = decode(gen);
  const double p = per(refs.target_tokens, collapse_tokens(dec.tokens));
  const double r1 = 1.0 - std::min(1.0, p);
  double r2 = pearson(dec.pitch, refs.ref_pitch);
  r2 = std::min(1.0, std::max(-1.0, r2));
  double r3 = cosine(dec.timbre, refs.ctx_timbre);
  r3 = std::min(1.0, std::max(-1.0, r3));
  const double r4 = std::exp(-dec.mean_resid);
  return {r1, r2, r3, r4};
}

// ------------------------------ metrics -------------------------------------

double per(const std::vector<int>& ref, const std::vector<int>& hyp) {
  if (ref.empty()) throw std::invalid_argument("per: empty reference");
  const size_t n = ref.size(), m = hyp.size();
  std::vector<size_t> prev(m + 1), cur(m + 1);
  for (size_t j = 0; j <= m; j++) prev[j] = j;
  for (size_t i = 1; i <= n; i++) {
    cur[0] = i;
    for (size_t j = 1; j <= m; j++) {
      const size_t sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return double(prev[m]) / double(n);
}

double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw std::invalid_argument("pearson: length mismatch");
  if (x.size() < 2) throw std::invalid_argument("pearson: need at least 2 points");
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < x.size(); i++) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < x.size(); i++) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;  // constant input convention
  return sxy / std::sqrt(sxx * syy);
}

double cosine(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw std::invalid_argument("cosine: shape mismatch");
  double ab = 0, aa = 0, bb = 0;
  for (int64_t i = 0; i < a.numel(); i++) {
    ab += a.data[size_t(i)] * b.data[size_t(i)];
    aa += a.data[size_t(i)] * a.data[size_t(i)];
    bb += b.data[size_t(i)] * b.data[size_t(i)];
  }
  if (aa == 0 || bb == 0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

std::vector<int> collapse_tokens(const std::vector<int>& frame_tokens) {
  std::vector<int> out;
  for (int t : frame_tokens) {
    if (t == 0) continue;
    if (out.empty() || out.back() != t) out.push_back(t);
  }
  return out;
}

// ------------------------------ dataset files -------------------------------

void save_dataset(const std::string& path, const World& world,
                  const std::vector<DatasetRecord>& records) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_dataset: cannot open " + path);
  nlohmann::json header{{"version", 1},
                        {"kind", "fgl-dataset"},
                        {"world_seed", world.spec().seed},
                        {"count", records.size()}};
  os << header.dump() << "\n";
  for (const auto& r : records) {
    nlohmann::json j{{"seed", r.seed},
                     {"frames", r.frames},
                     {"language", r.labels.language},
                     {"gender", r.labels.gender},
                     {"timbre", r.labels.timbre},
                     {"technique", r.labels.technique},
                     {"speech", r.labels.speech},
                     {"edit_layout", r.edit_layout}};
    os << j.dump() << "\n";
  }
}

std::vector<ToySample> load_dataset(const std::string& path, const World& world) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_dataset: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("load_dataset: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("kind", "") != "fgl-dataset" || header.value("version", 0) != 1)
    throw std::runtime_error("load_dataset: not a version-1 dataset file");
  if (header.value("world_seed", uint64_t(0)) != world.spec().seed)
    throw std::runtime_error("load_dataset: world seed mismatch");

  std::vector<ToySample> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    SampleLabels lb;
    lb.language = j.at("language").get<int>();
    lb.gender = j.at("gender").get<int>();
    lb.timbre = j.at("timbre").get<int>();
    lb.technique = j.at("technique").get<int>();
    lb.speech = j.at("speech").get<bool>();
    const uint64_t seed = j.at("seed").get<uint64_t>();
    const int frames = j.at("frames").get<int>();
    ToySample s = j.at("edit_layout").get<bool>() ? world.gen_edit_base(frames, seed, lb)
                                                  : world.gen_sample(frames, seed, lb);
    out.push_back(std::move(s));
  }
  if (out.size() != header.at("count").get<size_t>())
    throw std::runtime_error("load_dataset: record count mismatch");
  return out;
}

}  // namespace fgl
