#include "fgl/curriculum.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "fgl/flowmatch.hpp"
#include "fgl/rng.hpp"

namespace fgl {

const char* stage_name(StageId id) {
  switch (id) {
    case StageId::Pretrain: return "pretrain";
    case StageId::Sft1: return "sft1";
    case StageId::Sft2: return "sft2";
    case StageId::Grpo: return "grpo";
  }
  throw std::invalid_argument("stage_name: unknown stage id");
}

StageId stage_from_name(const std::string& name) {
  for (StageId id : {StageId::Pretrain, StageId::Sft1, StageId::Sft2, StageId::Grpo})
    if (name == stage_name(id)) return id;
  throw std::invalid_argument("stage_from_name: unknown stage '" + name + "'");
}

void StagePlan::validate() const {
  if (steps <= 0) throw std::invalid_argument("StagePlan: steps must be > 0");
  if (!(lr > 0.0)) throw std::invalid_argument("StagePlan: lr must be > 0");
  if (n_train <= 0 || batch_size <= 0)
    throw std::invalid_argument("StagePlan: dataset sizes must be > 0");
  if (frames < 2) throw std::invalid_argument("StagePlan: frames must be >= 2");
  if (!(gamma_min > 0.0 && gamma_min <= gamma_max && gamma_max <= 1.0))
    throw std::invalid_argument("StagePlan: need 0 < gamma_min <= gamma_max <= 1");
  if (temporal_dropout_p < 0.0 || temporal_dropout_p >= 1.0 || cond_dropout_p < 0.0 ||
      cond_dropout_p >= 1.0)
    throw std::invalid_argument("StagePlan: dropout probabilities must lie in [0, 1)");
  if (log_every <= 0) throw std::invalid_argument("StagePlan: log_every must be > 0");
  if (eval_every < 0) throw std::invalid_argument("StagePlan: eval_every must be >= 0");
  if ((stage == StageId::Pretrain || stage == StageId::Sft1) && melody_enabled)
    throw std::invalid_argument("StagePlan: melody conditioning is off before sft2");
  if (stage == StageId::Sft2 && !melody_enabled)
    throw std::invalid_argument("StagePlan: sft2 trains with melody conditioning");
  if (cka_enabled && !melody_enabled)
    throw std::invalid_argument("StagePlan: the alignment loss needs melody conditioning");
  if (speech_data && stage != StageId::Pretrain)
    throw std::invalid_argument("StagePlan: speech-style data is the pretrain variant");
  if (stage == StageId::Grpo && grpo.n_rewards != 4)
    throw std::invalid_argument("StagePlan: the toy world scores exactly 4 rewards");
  model.validate();
}

StagePlan default_plan(StageId stage) {
  StagePlan p;
  p.stage = stage;
  switch (stage) {
    case StageId::Pretrain:
      p.steps = 3000;
      p.lr = 1e-3;
      p.speech_data = true;
      p.cond_dropout_p = 0.2;
      p.eval_every = 1000;
      break;
    case StageId::Sft1:
      p.steps = 2000;
      p.lr = 2.5e-4;
      p.cond_dropout_p = 0.2;
      p.eval_every = 1000;
      break;
    case StageId::Sft2:
      p.steps = 2000;
      p.lr = 7e-5;
      p.melody_enabled = true;
      p.cka_enabled = true;
      p.temporal_dropout_p = 0.1;
      p.cond_dropout_p = 0.2;
      p.eval_every = 1000;
      break;
    case StageId::Grpo:
      p.steps = 300;
      p.lr = 1e-4;
      p.melody_enabled = true;
      p.n_train = 64;
      p.batch_size = 2;
      p.grpo.n_steps = 16;
      p.log_every = 1;
      p.eval_every = 100;
      break;
  }
  return p;
}

// ---- held-out evaluation ----------------------------------------------------

namespace {

// One edit task with oracle references; shared by the held-out sets and the
// reward-training pool.
EvalItem make_edit_task(const World& world, int frames, uint64_t i, uint64_t seed,
                        EvalSetting setting) {
  const WorldSpec& ws = world.spec();
  Rng lr(derive_seed(seed, 0xE000, i));
  SampleLabels lb;
  lb.language = int(i % 2);
  lb.gender = int((i / 2) % 2);
  lb.technique = int(lr.uniform_int(uint64_t(ws.n_techniques)));
  lb.timbre = lb.gender * ws.n_timbres_per_gender +
              int(lr.uniform_int(uint64_t(ws.n_timbres_per_gender)));

  const ToySample base = world.gen_edit_base(frames, derive_seed(seed, 0xE001, i), lb);
  const EditType type = kEditTypes[i % 6];
  const std::vector<int> edited =
      apply_edit(base.sentences[1], type, 0.3, derive_seed(seed, 0xE002, i));
  const int onset = base.onsets[1];

  int truth_timbre = lb.timbre;
  const Tensor* ctx = &base.latent;
  ToySample prompt;
  if (setting == EvalSetting::MelodyControl) {
    SampleLabels pl = lb;
    pl.technique = 0;
    pl.timbre = lb.gender * ws.n_timbres_per_gender +
                int(lr.uniform_int(uint64_t(ws.n_timbres_per_gender)));
    prompt = world.gen_sample(frames, derive_seed(seed, 0xE003, i), pl);
    truth_timbre = pl.timbre;
    ctx = &prompt.latent;
  }
  const ToySample truth =
      world.edited_variant(base, edited, truth_timbre, derive_seed(seed, 0xE004, i));

  std::vector<TokenSentence> sents{{base.sentences[0], base.onsets[0]}, {edited, onset}};
  EvalItem item;
  item.bundle = build_bundle(*ctx, base.melody, sents, MaskSpec{onset, frames - onset});

  const int len = frames - onset;
  const int d = ws.d_latent;
  Tensor truth_slice(Shape{len, d});
  for (int f = 0; f < len; f++)
    for (int j = 0; j < d; j++) truth_slice.at(f, j) = truth.latent.at(onset + f, j);
  item.refs.target_tokens = edited;
  item.refs.ref_pitch = world.decode(truth_slice).pitch;
  item.refs.ctx_timbre = world.timbre_of(truth_timbre);
  return item;
}

Tensor masked_slice(const Tensor& full, const std::vector<uint8_t>& mask) {
  const auto [start, len] = mask_span(mask);
  const int d = int(full.shape.d[1]);
  Tensor out(Shape{len, d});
  for (int f = 0; f < len; f++)
    for (int j = 0; j < d; j++) out.at(f, j) = full.at(start + f, j);
  return out;
}

std::string format_row(const char* fmt, ...) {
  char buf[512];
  va_list args;
  va_start(args, fmt);
  vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

}  // namespace

std::vector<EvalItem> make_heldout(const World& world, int n, int frames, uint64_t seed,
                                   EvalSetting setting) {
  if (n <= 0) throw std::invalid_argument("make_heldout: n must be > 0");
  std::vector<EvalItem> items;
  items.reserve(size_t(n));
  const uint64_t base = derive_seed(seed, 0x11E7D);
  for (int i = 0; i < n; i++) items.push_back(make_edit_task(world, frames, uint64_t(i), base, setting));
  return items;
}

EvalSummary eval_items(const ModelParams& params, const World& world,
                       const std::vector<EvalItem>& items, int ode_steps, double cfg_scale,
                       uint64_t seed) {
  if (items.empty()) throw std::invalid_argument("eval_items: empty item list");
  EvalSummary sum;
  for (size_t i = 0; i < items.size(); i++) {
    const EvalItem& item = items[i];
    const Tensor full =
        ode_sample(params, item.bundle, ode_steps, cfg_scale, derive_seed(seed, 0xE500, i));
    const Tensor slice = masked_slice(full, item.bundle.mask);
    const std::array<double, 4> r = world.rewards(slice, item.refs);
    sum.p += 1.0 - r[0];
    sum.f += r[1];
    sum.s += r[2];
    sum.v += r[3];
  }
  const double n = double(items.size());
  sum.p /= n;
  sum.f /= n;
  sum.s /= n;
  sum.v /= n;
  sum.n = int(items.size());
  return sum;
}

// ---- data plumbing ----------------------------------------------------------

std::vector<ToySample> make_train_pool(const World& world, const StagePlan& plan, uint64_t seed) {
  const WorldSpec& ws = world.spec();
  std::vector<ToySample> pool;
  pool.reserve(size_t(plan.n_train));
  const uint64_t tag = uint64_t(plan.stage);
  for (int i = 0; i < plan.n_train; i++) {
    Rng lr(derive_seed(seed, 0xD100, tag, uint64_t(i)));
    SampleLabels lb;
    lb.language = int(lr.uniform_int(2));
    lb.gender = int(lr.uniform_int(2));
    lb.timbre = lb.gender * ws.n_timbres_per_gender +
                int(lr.uniform_int(uint64_t(ws.n_timbres_per_gender)));
    lb.technique = int(lr.uniform_int(uint64_t(ws.n_techniques)));
    lb.speech = plan.speech_data;
    pool.push_back(world.gen_sample(plan.frames, derive_seed(seed, 0xD101, tag, uint64_t(i)), lb));
  }
  return pool;
}

std::vector<TrainItem> make_batch(const World& world, const StagePlan& plan,
                                  const std::vector<ToySample>& pool, int step, uint64_t seed) {
  if (pool.empty()) throw std::invalid_argument("make_batch: empty sample pool");
  (void)world;
  Rng rng(derive_seed(seed, 0xD200, uint64_t(plan.stage), uint64_t(step)));
  std::vector<TrainItem> batch;
  batch.reserve(size_t(plan.batch_size));
  for (int b = 0; b < plan.batch_size; b++) {
    const ToySample& s = pool[size_t(rng.uniform_int(pool.size()))];
    const MaskSpec mask = make_mask(s.frames, plan.gamma_min, plan.gamma_max, rng.next_u64());
    std::vector<TokenSentence> sents;
    for (size_t j = 0; j < s.sentences.size(); j++)
      sents.push_back(TokenSentence{s.sentences[j], s.onsets[j]});
    const double dp = plan.melody_enabled ? plan.temporal_dropout_p : 0.0;
    ConditionBundle bundle = build_bundle(s.latent, s.melody, sents, mask, dp, rng.next_u64());
    if (!plan.melody_enabled) bundle.melody = Tensor::zeros(bundle.melody.shape);
    if (plan.cond_dropout_p > 0.0 && rng.bernoulli(plan.cond_dropout_p))
      bundle = uncond_bundle(bundle);
    batch.push_back(TrainItem{s.latent, std::move(bundle)});
  }
  return batch;
}

std::vector<EvalItem> make_grpo_pool(const World& world, const StagePlan& plan, uint64_t seed) {
  std::vector<EvalItem> pool;
  pool.reserve(size_t(plan.n_train));
  const uint64_t base = derive_seed(seed, 0x6120, uint64_t(plan.stage));
  for (int i = 0; i < plan.n_train; i++)
    pool.push_back(
        make_edit_task(world, plan.frames, uint64_t(i), base, EvalSetting::SingEdit));
  return pool;
}

// ---- single stage -----------------------------------------------------------

const char* prerequisite_stage(StageId stage) {
  switch (stage) {
    case StageId::Pretrain: return nullptr;
    case StageId::Sft1: return "pretrain";
    case StageId::Sft2: return "sft1";
    case StageId::Grpo: return "sft2";
  }
  return nullptr;
}

namespace {

std::string meta_or(const ModelParams& p, const std::string& key, const std::string& fallback) {
  auto it = p.meta.find(key);
  return it == p.meta.end() ? fallback : it->second;
}

void check_world_compat(const ModelConfig& cfg, const World& world, int frames) {
  const WorldSpec& ws = world.spec();
  if (cfg.d_latent != ws.d_latent || cfg.d_melody != ws.d_melody || cfg.n_tokens != ws.n_tokens)
    throw std::invalid_argument("run_stage: model dimensions do not match the world");
  if (frames > cfg.max_frames)
    throw std::invalid_argument("run_stage: training frames exceed the model's max_frames");
}

struct StageStreams {
  uint64_t loss, eval_set, eval_gen;
};

StageStreams stage_streams(uint64_t seed, StageId stage) {
  return StageStreams{derive_seed(seed, 0xD300, uint64_t(stage)),
                      derive_seed(seed, 0xE7A1),  // shared across stages
                      derive_seed(seed, 0xE7A2)};
}

std::string eval_row_sft(bool with_cka, int step, const EvalSummary& ev) {
  return with_cka ? format_row("%d,eval,,,%.10g,%.10g,%.10g,%.10g", step, ev.p, ev.s, ev.f, ev.v)
                  : format_row("%d,eval,,%.10g,%.10g,%.10g,%.10g", step, ev.p, ev.s, ev.f, ev.v);
}

StageResult run_grpo_stage(const World& world, const StagePlan& plan, const ModelParams& init,
                           const EvalSpec& eval, uint64_t seed) {
  GrpoConfig gcfg = plan.grpo;
  gcfg.lr = plan.lr;
  gcfg.total_iters = plan.steps;
  gcfg.validate();

  GrpoState state = grpo_init(init, gcfg);
  const std::vector<EvalItem> pool = make_grpo_pool(world, plan, seed);
  const StageStreams streams = stage_streams(seed, plan.stage);
  const std::vector<EvalItem> heldout =
      make_heldout(world, eval.n, eval.frames, streams.eval_set, EvalSetting::SingEdit);

  StageResult result;
  result.metrics.push_back("iter,kind,r1,r2,r3,r4,kl,window_start,loss,p,s,f,v");
  for (int iter = 0; iter < plan.steps; iter++) {
    Rng br(derive_seed(seed, 0xE200, uint64_t(iter)));
    std::vector<ConditionBundle> bundles;
    std::vector<const RewardRefs*> refs;
    for (int b = 0; b < plan.batch_size; b++) {
      const EvalItem& item = pool[size_t(br.uniform_int(pool.size()))];
      bundles.push_back(item.bundle);
      refs.push_back(&item.refs);
    }
    RewardFn reward_fn = [&](const Tensor& final_latent, const ConditionBundle& bundle) {
      const size_t idx = size_t(&bundle - bundles.data());
      if (idx >= bundles.size())
        throw std::logic_error("grpo reward: bundle is not part of the current batch");
      const Tensor slice = masked_slice(final_latent, bundle.mask);
      const std::array<double, 4> r = world.rewards(slice, *refs[idx]);
      return std::vector<double>(r.begin(), r.end());
    };
    const GrpoStats st =
        grpo_train_iter(state, bundles, reward_fn, derive_seed(seed, 0xE300, uint64_t(iter)));
    if ((iter + 1) % plan.log_every == 0 || iter + 1 == plan.steps)
      result.metrics.push_back(format_row(
          "%d,train,%.10g,%.10g,%.10g,%.10g,%.10g,%d,%.10g,,,,", st.iter, st.mean_rewards[0],
          st.mean_rewards[1], st.mean_rewards[2], st.mean_rewards[3], st.mean_kl, st.window_start,
          st.loss));
    if (plan.eval_every > 0 && (iter + 1) % plan.eval_every == 0 && iter + 1 < plan.steps) {
      const EvalSummary ev = eval_items(state.params, world, heldout, eval.ode_steps,
                                        eval.cfg_scale, streams.eval_gen);
      result.metrics.push_back(format_row("%d,eval,,,,,,,,%.10g,%.10g,%.10g,%.10g", iter + 1, ev.p,
                                          ev.s, ev.f, ev.v));
    }
  }
  result.final_eval =
      eval_items(state.params, world, heldout, eval.ode_steps, eval.cfg_scale, streams.eval_gen);
  result.metrics.push_back(format_row("%d,eval,,,,,,,,%.10g,%.10g,%.10g,%.10g", plan.steps,
                                      result.final_eval.p, result.final_eval.s,
                                      result.final_eval.f, result.final_eval.v));
  result.params = std::move(state.params);
  result.params.meta["stage"] = stage_name(plan.stage);
  result.params.meta["step"] = std::to_string(plan.steps);
  result.params.meta["world_seed"] = std::to_string(world.spec().seed);
  return result;
}

}  // namespace

StageResult run_stage(const World& world, const StagePlan& plan, const ModelParams* init,
                      const EvalSpec& eval, uint64_t seed, int start_step) {
  plan.validate();
  if (start_step < 0 || start_step >= plan.steps)
    throw std::invalid_argument("run_stage: start_step out of range");

  // prerequisite / resume checks
  if (start_step > 0) {
    if (plan.stage == StageId::Grpo)
      throw std::invalid_argument("run_stage: the grpo stage does not support resume");
    if (!init || meta_or(*init, "stage", "") != stage_name(plan.stage))
      throw std::invalid_argument("run_stage: resume needs this stage's own checkpoint");
    if (meta_or(*init, "step", "") != std::to_string(start_step))
      throw std::invalid_argument("run_stage: checkpoint step does not match start_step");
  } else if (plan.stage == StageId::Pretrain) {
    if (init) throw std::invalid_argument("run_stage: pretrain starts from a fresh model");
  } else {
    const char* prev = prerequisite_stage(plan.stage);
    if (!init || meta_or(*init, "stage", "") != prev)
      throw std::invalid_argument(std::string("run_stage: ") + stage_name(plan.stage) +
                                  " requires a " + prev + " checkpoint");
  }

  const ModelConfig cfg = init ? init->config : plan.model;
  check_world_compat(cfg, world, std::max(plan.frames, eval.frames));

  if (plan.stage == StageId::Grpo) return run_grpo_stage(world, plan, *init, eval, seed);

  ModelParams params =
      init ? *init : init_params(cfg, derive_seed(seed, 0xD0A0, uint64_t(plan.stage)));
  const std::vector<ToySample> pool = make_train_pool(world, plan, seed);
  const StageStreams streams = stage_streams(seed, plan.stage);
  const std::vector<EvalItem> heldout =
      make_heldout(world, eval.n, eval.frames, streams.eval_set, EvalSetting::SingEdit);

  Adam opt(AdamConfig{plan.lr, 0.9, 0.999, 1e-8});
  StageResult result;
  const bool with_cka = plan.cka_enabled;
  result.metrics.push_back(with_cka ? "step,kind,loss,cka,p,s,f,v" : "step,kind,loss,p,s,f,v");

  for (int step = start_step; step < plan.steps; step++) {
    const std::vector<TrainItem> batch = make_batch(world, plan, pool, step, seed);
    std::map<std::string, Tensor> grads;
    double cka_val = 0.0;
    const uint64_t lseed = derive_seed(streams.loss, uint64_t(step));
    const double loss = with_cka
                            ? sft2_loss(params, batch, plan.lambda, step, lseed, &grads, &cka_val)
                            : cfm_loss(params, batch, lseed, &grads);
    if (!std::isfinite(loss))
      throw std::runtime_error(format_row("run_stage: %s diverged at step %d (loss=%g)",
                                          stage_name(plan.stage), step, loss));
    opt.step(params.tensors, grads);

    if ((step + 1) % plan.log_every == 0 || step + 1 == plan.steps)
      result.metrics.push_back(
          with_cka ? format_row("%d,train,%.10g,%.10g,,,,", step + 1, loss, cka_val)
                   : format_row("%d,train,%.10g,,,,", step + 1, loss));
    if (plan.eval_every > 0 && (step + 1) % plan.eval_every == 0 && step + 1 < plan.steps) {
      const EvalSummary ev =
          eval_items(params, world, heldout, eval.ode_steps, eval.cfg_scale, streams.eval_gen);
      result.metrics.push_back(eval_row_sft(with_cka, step + 1, ev));
    }
  }

  result.final_eval =
      eval_items(params, world, heldout, eval.ode_steps, eval.cfg_scale, streams.eval_gen);
  result.metrics.push_back(eval_row_sft(with_cka, plan.steps, result.final_eval));
  result.params = std::move(params);
  result.params.meta["stage"] = stage_name(plan.stage);
  result.params.meta["step"] = std::to_string(plan.steps);
  result.params.meta["world_seed"] = std::to_string(world.spec().seed);
  return result;
}

// ---- full pipeline ----------------------------------------------------------

PipelineConfig default_pipeline() {
  PipelineConfig cfg;
  cfg.stages = {default_plan(StageId::Pretrain), default_plan(StageId::Sft1),
                default_plan(StageId::Sft2), default_plan(StageId::Grpo)};
  return cfg;
}

std::string variant_name(const PipelineConfig& cfg) {
  if (cfg.no_cka && cfg.no_dropout) return "w/o CKA+Dist";
  if (cfg.no_cka) return "w/o CKA";
  if (cfg.no_dropout) return "w/o Dist";
  return "full";
}

const char* report_header() {
  return "variant,stage,P_edit,S_edit,F_edit,V_edit,P_ctl,S_ctl,F_ctl,V_ctl";
}

namespace {

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path);
  for (const std::string& line : lines) os << line << "\n";
}

std::string pipeline_snapshot(const PipelineConfig& cfg, uint64_t seed) {
  nlohmann::json stages = nlohmann::json::array();
  for (const StagePlan& p : cfg.stages)
    stages.push_back({{"stage", stage_name(p.stage)},
                      {"steps", p.steps},
                      {"lr", p.lr},
                      {"melody_enabled", p.melody_enabled},
                      {"cka_enabled", p.cka_enabled},
                      {"n_train", p.n_train},
                      {"frames", p.frames},
                      {"batch_size", p.batch_size}});
  nlohmann::json j{{"kind", "fgl-pipeline-snapshot"},
                   {"seed", seed},
                   {"variant", variant_name(cfg)},
                   {"stages", stages}};
  return j.dump(2) + "\n";
}

}  // namespace

PipelineResult run_pipeline(const World& world, const PipelineConfig& cfg,
                            const std::string& run_dir, uint64_t seed,
                            const std::string& snapshot) {
  if (cfg.stages.empty()) throw std::invalid_argument("run_pipeline: no stages configured");

  namespace fs = std::filesystem;
  if (!run_dir.empty()) {
    fs::create_directories(fs::path(run_dir) / "checkpoints");
    std::ofstream os(fs::path(run_dir) / "config.snapshot", std::ios::binary);
    if (!os) throw std::runtime_error("run_pipeline: cannot write the config snapshot");
    os << (snapshot.empty() ? pipeline_snapshot(cfg, seed) : snapshot);
  }

  const std::vector<EvalItem> heldout_ctl = make_heldout(
      world, cfg.eval.n, cfg.eval.frames, derive_seed(seed, 0xE7A1), EvalSetting::MelodyControl);
  const uint64_t ctl_gen_seed = derive_seed(seed, 0xE7A2);

  PipelineResult result;
  result.report.push_back(report_header());
  const std::string variant = variant_name(cfg);

  ModelParams current;
  bool have_params = false;
  for (StagePlan plan : cfg.stages) {
    if (plan.stage == StageId::Sft2) {
      if (cfg.no_cka) plan.cka_enabled = false;
      if (cfg.no_dropout) plan.temporal_dropout_p = 0.0;
    }
    StageResult r = run_stage(world, plan, have_params ? &current : nullptr, cfg.eval, seed);
    current = std::move(r.params);
    have_params = true;

    StageEval se;
    se.stage = stage_name(plan.stage);
    se.edit = r.final_eval;
    se.control = eval_items(current, world, heldout_ctl, cfg.eval.ode_steps, cfg.eval.cfg_scale,
                            ctl_gen_seed);
    result.report.push_back(format_row(
        "%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f", variant.c_str(), se.stage.c_str(),
        se.edit.p, se.edit.s, se.edit.f, se.edit.v, se.control.p, se.control.s, se.control.f,
        se.control.v));
    result.stage_evals.push_back(se);
    result.metrics.emplace_back(se.stage, r.metrics);

    if (!run_dir.empty()) {
      write_lines((fs::path(run_dir) / ("metrics_" + se.stage + ".csv")).string(), r.metrics);
      save_checkpoint((fs::path(run_dir) / "checkpoints" / (se.stage + ".ckpt")).string(),
                      current);
      write_lines((fs::path(run_dir) / "report.csv").string(), result.report);
    }
  }

  result.params = std::move(current);
  return result;
}

}  // namespace fgl
