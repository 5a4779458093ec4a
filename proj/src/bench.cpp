#include "fgl/bench.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "fgl/flowmatch.hpp"

namespace fgl {

// ------------------------------ edit taxonomy --------------------------------

const char* edit_type_name(EditType e) {
  switch (e) {
    case EditType::PSub: return "PSub";
    case EditType::FSub: return "FSub";
    case EditType::Del: return "Del";
    case EditType::Ins: return "Ins";
    case EditType::Trans: return "Trans";
    case EditType::Mix: return "Mix";
  }
  throw std::invalid_argument("edit_type_name: bad enum value");
}

EditType edit_type_from_name(const std::string& name) {
  for (EditType e : kEditTypes)
    if (name == edit_type_name(e)) return e;
  throw std::invalid_argument("edit_type_from_name: unknown type '" + name + "'");
}

int translate_token(int token, int per) {
  if (token < 1 || token > 2 * per) throw std::invalid_argument("translate_token: out of range");
  return token <= per ? token + per : token - per;
}

namespace {

int lang_of(int token, int per) { return token > per ? 1 : 0; }

// same-language token distinct from up to three avoided values
int draw_avoiding(Rng& rng, int lang, int per, int a0, int a1, int a2) {
  for (int tries = 0; tries < 512; tries++) {
    const int t = 1 + lang * per + int(rng.uniform_int(uint64_t(per)));
    if (t != a0 && t != a1 && t != a2) return t;
  }
  throw std::runtime_error("apply_edit: token draw failed");
}

// m distinct positions in [0, n), in draw order
std::vector<int> draw_positions(Rng& rng, int n, int m) {
  std::vector<int> pool(static_cast<size_t>(n), 0);
  for (int i = 0; i < n; i++) pool[size_t(i)] = i;
  for (int j = 0; j < m; j++) {
    const int r = j + int(rng.uniform_int(uint64_t(n - j)));
    std::swap(pool[size_t(j)], pool[size_t(r)]);
  }
  pool.resize(size_t(m));
  return pool;
}

bool has_adjacent_dupes(const std::vector<int>& v) {
  for (size_t i = 1; i < v.size(); i++)
    if (v[i] == v[i - 1]) return true;
  return false;
}

}  // namespace

std::vector<int> apply_edit(const std::vector<int>& tokens, EditType edit, double intensity,
                            uint64_t seed, int per) {
  if (tokens.empty()) throw std::invalid_argument("apply_edit: empty token sequence");
  if (!(intensity > 0.0 && intensity <= 1.0))
    throw std::invalid_argument("apply_edit: intensity must be in (0, 1]");
  if (per < 3) throw std::invalid_argument("apply_edit: need at least 3 tokens per language");
  for (int t : tokens)
    if (t < 1 || t > 2 * per) throw std::invalid_argument("apply_edit: token id out of range");

  const int n = int(tokens.size());
  const int m = int(std::lround(intensity * double(n)));
  Rng rng(derive_seed(seed, 0xB0ED));
  std::vector<int> out = tokens;

  switch (edit) {
    case EditType::PSub: {
      for (int pos : draw_positions(rng, n, m)) {
        const int left = pos > 0 ? out[size_t(pos) - 1] : 0;
        const int right = pos + 1 < n ? out[size_t(pos) + 1] : 0;
        out[size_t(pos)] = draw_avoiding(rng, lang_of(tokens[size_t(pos)], per), per,
                                         out[size_t(pos)], left, right);
      }
      return out;
    }
    case EditType::FSub: {
      for (int i = 0; i < n; i++) {
        const int prev = i > 0 ? out[size_t(i) - 1] : 0;
        out[size_t(i)] = draw_avoiding(rng, lang_of(tokens[size_t(i)], per), per, prev, 0, 0);
      }
      return out;
    }
    case EditType::Del: {
      if (n - m < 1) throw std::invalid_argument("apply_edit: deletion would empty the sequence");
      for (int tries = 0; tries < 256; tries++) {
        std::vector<int> pos = draw_positions(rng, n, m);
        std::vector<uint8_t> drop(size_t(n), 0);
        for (int p : pos) drop[size_t(p)] = 1;
        std::vector<int> kept;
        for (int i = 0; i < n; i++)
          if (!drop[size_t(i)]) kept.push_back(tokens[size_t(i)]);
        if (!has_adjacent_dupes(kept)) return kept;
      }
      throw std::runtime_error("apply_edit: no valid deletion found");
    }
    case EditType::Ins: {
      for (int j = 0; j < m; j++) {
        const int cur = int(out.size());
        const int pos = int(rng.uniform_int(uint64_t(cur + 1)));
        const int left = pos > 0 ? out[size_t(pos) - 1] : 0;
        const int right = pos < cur ? out[size_t(pos)] : 0;
        const int lang = lang_of(left != 0 ? left : right, per);
        out.insert(out.begin() + pos, draw_avoiding(rng, lang, per, left, right, 0));
      }
      return out;
    }
    case EditType::Trans: {
      for (int& t : out) t = translate_token(t, per);
      return out;
    }
    case EditType::Mix: {
      const int span = std::min(n, int(std::lround(intensity * double(n))));
      if (span < 1) return out;
      const int start = int(rng.uniform_int(uint64_t(n - span + 1)));
      for (int i = start; i < start + span; i++) out[size_t(i)] = translate_token(out[size_t(i)], per);
      return out;
    }
  }
  throw std::invalid_argument("apply_edit: bad edit type");
}

// ------------------------------ manifest building ----------------------------

SampleLabels instance_labels(const BenchInstance& inst, const WorldSpec& spec) {
  SampleLabels lb;
  lb.language = inst.language;
  lb.gender = inst.gender;
  lb.technique = inst.technique;
  lb.timbre = inst.gender * spec.n_timbres_per_gender +
              int(inst.melody_seed % uint64_t(spec.n_timbres_per_gender));
  return lb;
}

SampleLabels prompt_labels(const BenchInstance& inst, const WorldSpec& spec) {
  SampleLabels lb;
  lb.language = inst.language;
  lb.gender = inst.gender;
  lb.technique = 0;
  lb.timbre = inst.gender * spec.n_timbres_per_gender +
              int(inst.prompt_seed % uint64_t(spec.n_timbres_per_gender));
  return lb;
}

BenchManifest build_manifest(const World& world, const BenchCounts& counts, uint64_t seed) {
  if (counts.k < 1) throw std::invalid_argument("build_manifest: k must be >= 1");
  if (counts.technique_free_mult < 0)
    throw std::invalid_argument("build_manifest: negative technique-free multiplier");
  if (!(counts.intensity > 0.0 && counts.intensity <= 1.0))
    throw std::invalid_argument("build_manifest: intensity must be in (0, 1]");
  const int named = world.spec().n_techniques - 1;
  if (named < 1) throw std::invalid_argument("build_manifest: world has no named techniques");
  const int per_lang = world.spec().n_tokens / 2;

  BenchManifest m;
  m.world_seed = world.spec().seed;
  m.counts = counts;

  // random draw without replacement from the reserved timbre-prompt pool
  std::vector<int> pool(size_t(counts.prompt_pool));
  for (int i = 0; i < counts.prompt_pool; i++) pool[size_t(i)] = i;
  Rng pool_rng(derive_seed(seed, 0xB00F));
  int drawn = 0;
  auto next_prompt_seed = [&]() {
    if (drawn >= counts.prompt_pool) throw std::runtime_error("build_manifest: prompt pool exhausted");
    const int r = drawn + int(pool_rng.uniform_int(uint64_t(counts.prompt_pool - drawn)));
    std::swap(pool[size_t(drawn)], pool[size_t(r)]);
    return derive_seed(seed, 0xB100, uint64_t(pool[size_t(drawn++)]));
  };

  uint64_t counter = 0;
  for (int gender = 0; gender < 2; gender++)
    for (int language = 0; language < 2; language++)
      for (EditType type : kEditTypes) {
        // k instances per named technique, then technique_free_mult*k plain ones
        std::vector<int> slots;
        for (int t = 1; t <= named; t++)
          for (int j = 0; j < counts.k; j++) slots.push_back(t);
        for (int j = 0; j < counts.technique_free_mult * counts.k; j++) slots.push_back(0);

        for (int technique : slots) {
          BenchInstance inst;
          inst.melody_seed = derive_seed(seed, 0xB000, counter);
          inst.prompt_seed = next_prompt_seed();
          inst.edit = type;
          inst.language = language;
          inst.gender = gender;
          inst.technique = technique;
          const SampleLabels lb = instance_labels(inst, world.spec());
          const ToySample base = world.gen_edit_base(counts.frames, inst.melody_seed, lb);
          inst.original = base.sentences[1];
          inst.edited = apply_edit(inst.original, type, counts.intensity,
                                   derive_seed(seed, 0xB200, counter), per_lang);
          if (base.onsets[1] + int(inst.edited.size()) > counts.frames)
            throw std::runtime_error("build_manifest: edited sentence does not fit the grid");
          m.instances.push_back(std::move(inst));
          counter++;
        }
      }
  return m;
}

// ------------------------------ manifest files -------------------------------

void save_manifest(const std::string& path, const BenchManifest& m) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_manifest: cannot open " + path);
  nlohmann::json header{{"kind", "fgl-bench-manifest"},
                        {"version", m.version},
                        {"world_seed", m.world_seed},
                        {"count", m.instances.size()},
                        {"counts",
                         {{"k", m.counts.k},
                          {"technique_free_mult", m.counts.technique_free_mult},
                          {"frames", m.counts.frames},
                          {"intensity", m.counts.intensity},
                          {"prompt_pool", m.counts.prompt_pool}}}};
  os << header.dump() << "\n";
  for (const auto& inst : m.instances) {
    nlohmann::json j{{"melody_seed", inst.melody_seed}, {"prompt_seed", inst.prompt_seed},
                     {"original", inst.original},       {"edited", inst.edited},
                     {"edit", edit_type_name(inst.edit)}, {"language", inst.language},
                     {"gender", inst.gender},           {"technique", inst.technique}};
    os << j.dump() << "\n";
  }
}

BenchManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("load_manifest: cannot open " + path);
  std::string line;
  if (!std::getline(is, line)) throw std::runtime_error("load_manifest: empty file");
  nlohmann::json header = nlohmann::json::parse(line);
  if (header.value("kind", "") != "fgl-bench-manifest" || header.value("version", 0) != 1)
    throw std::runtime_error("load_manifest: not a version-1 manifest file");

  BenchManifest m;
  m.version = 1;
  m.world_seed = header.at("world_seed").get<uint64_t>();
  const auto& c = header.at("counts");
  m.counts.k = c.at("k").get<int>();
  m.counts.technique_free_mult = c.at("technique_free_mult").get<int>();
  m.counts.frames = c.at("frames").get<int>();
  m.counts.intensity = c.at("intensity").get<double>();
  m.counts.prompt_pool = c.at("prompt_pool").get<int>();

  while (std::getline(is, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    BenchInstance inst;
    inst.melody_seed = j.at("melody_seed").get<uint64_t>();
    inst.prompt_seed = j.at("prompt_seed").get<uint64_t>();
    inst.original = j.at("original").get<std::vector<int>>();
    inst.edited = j.at("edited").get<std::vector<int>>();
    inst.edit = edit_type_from_name(j.at("edit").get<std::string>());
    inst.language = j.at("language").get<int>();
    inst.gender = j.at("gender").get<int>();
    inst.technique = j.at("technique").get<int>();
    m.instances.push_back(std::move(inst));
  }
  if (m.instances.size() != header.at("count").get<size_t>())
    throw std::runtime_error("load_manifest: instance count mismatch");
  return m;
}

// ------------------------------ evaluation -----------------------------------

namespace {

struct JobResult {
  int setting = 0;  // 0 = sing_edit, 1 = melody_control
  EditType type = EditType::PSub;
  int language = 0;
  double p = 0, f = 0, s = 0, v = 0;
};

constexpr const char* kSettingNames[2] = {"sing_edit", "melody_control"};

}  // namespace

BenchReport evaluate_manifest_fn(const GeneratorFn& gen, const World& world,
                                 const BenchManifest& m, const EvalConfig& cfg) {
  if (m.instances.empty()) throw std::invalid_argument("evaluate_manifest: empty manifest");
  if (m.world_seed != world.spec().seed)
    throw std::invalid_argument("evaluate_manifest: manifest built for another world");
  const int frames = m.counts.frames;
  const int d = world.spec().d_latent;
  const int n_jobs = int(m.instances.size()) * 2;
  std::vector<JobResult> results(static_cast<size_t>(n_jobs));

  std::atomic<int> next{0};
  auto worker = [&]() {
    for (;;) {
      const int job = next.fetch_add(1);
      if (job >= n_jobs) return;
      const int setting = job % 2;
      const BenchInstance& inst = m.instances[size_t(job / 2)];

      const SampleLabels lb = instance_labels(inst, world.spec());
      const ToySample base = world.gen_edit_base(frames, inst.melody_seed, lb);
      const int onset = base.onsets[1];

      int truth_timbre = lb.timbre;
      const Tensor* ctx_latent = &base.latent;
      ToySample prompt;
      if (setting == 1) {
        const SampleLabels pl = prompt_labels(inst, world.spec());
        prompt = world.gen_sample(frames, inst.prompt_seed, pl);
        truth_timbre = pl.timbre;
        ctx_latent = &prompt.latent;
      }
      const ToySample truth = world.edited_variant(base, inst.edited, truth_timbre,
                                                   derive_seed(cfg.seed, 0xB400, uint64_t(job)));

      std::vector<TokenSentence> sents{{base.sentences[0], base.onsets[0]},
                                       {inst.edited, onset}};
      const ConditionBundle bundle =
          build_bundle(*ctx_latent, base.melody, sents, MaskSpec{onset, frames - onset});

      const Tensor full = gen(inst, bundle, truth, derive_seed(cfg.seed, 0xB300, uint64_t(job)));
      if (full.shape != Shape{frames, d})
        throw std::runtime_error("evaluate_manifest: generator returned a bad shape");

      const int len = frames - onset;
      Tensor slice(Shape{len, d});
      Tensor truth_slice(Shape{len, d});
      for (int f = 0; f < len; f++)
        for (int j = 0; j < d; j++) {
          slice.at(f, j) = full.at(onset + f, j);
          truth_slice.at(f, j) = truth.latent.at(onset + f, j);
        }

      RewardRefs refs;
      refs.target_tokens = inst.edited;
      refs.ref_pitch = world.decode(truth_slice).pitch;
      refs.ctx_timbre = world.timbre_of(truth_timbre);
      const std::array<double, 4> r = world.rewards(slice, refs);

      JobResult& out = results[size_t(job)];
      out.setting = setting;
      out.type = inst.edit;
      out.language = inst.language;
      out.p = 1.0 - r[0];  // clamped phoneme error rate, lower is better
      out.f = r[1];
      out.s = r[2];
      out.v = r[3];
    }
  };

  int n_threads = cfg.threads > 0 ? cfg.threads : int(std::thread::hardware_concurrency());
  n_threads = std::max(1, std::min(n_threads, n_jobs));
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> threads;
    for (int i = 0; i < n_threads; i++) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
  }

  // aggregate in fixed cell order: setting, type, language, metric
  BenchReport report;
  for (int setting = 0; setting < 2; setting++)
    for (EditType type : kEditTypes)
      for (int language = 0; language < 2; language++) {
        double sum[4] = {0, 0, 0, 0};
        int count = 0;
        for (const JobResult& r : results) {
          if (r.setting != setting || r.type != type || r.language != language) continue;
          sum[0] += r.p;
          sum[1] += r.f;
          sum[2] += r.s;
          sum[3] += r.v;
          count++;
        }
        if (count == 0) continue;
        const char* metric[4] = {"P", "F", "S", "V"};
        for (int k = 0; k < 4; k++)
          report.rows.push_back(ReportRow{kSettingNames[setting], edit_type_name(type), language,
                                          metric[k], sum[k] / double(count)});
      }
  return report;
}

BenchReport evaluate_manifest(const ModelParams& params, const World& world,
                              const BenchManifest& m, const EvalConfig& cfg) {
  const WorldSpec& ws = world.spec();
  if (params.config.d_latent != ws.d_latent || params.config.d_melody != ws.d_melody ||
      params.config.n_tokens != ws.n_tokens)
    throw std::invalid_argument("evaluate_manifest: checkpoint does not match the world");
  if (m.counts.frames > params.config.max_frames)
    throw std::invalid_argument("evaluate_manifest: manifest frames exceed model max_frames");
  GeneratorFn engine = [&params, &cfg](const BenchInstance&, const ConditionBundle& bundle,
                                       const ToySample&, uint64_t seed) {
    return ode_sample(params, bundle, cfg.ode_steps, cfg.cfg_scale, seed);
  };
  return evaluate_manifest_fn(engine, world, m, cfg);
}

void save_report_csv(const std::string& path, const BenchReport& report) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("save_report_csv: cannot open " + path);
  os << "setting,type,language,metric,value\n";
  char buf[64];
  for (const ReportRow& r : report.rows) {
    std::snprintf(buf, sizeof(buf), "%.10g", r.value);
    os << r.setting << ',' << r.type << ',' << r.language << ',' << r.metric << ',' << buf << "\n";
  }
}

}  // namespace fgl
