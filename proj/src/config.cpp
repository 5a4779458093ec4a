#include "fgl/config.hpp"

#include <json.hpp>

#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace fgl {

using nlohmann::json;

namespace {

void reject_unknown(const json& obj, const std::string& where,
                    const std::set<std::string>& allowed) {
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key))
      throw std::invalid_argument("config: unknown key '" + where + key + "'");
}

// Reads obj[key] into out when present, rethrowing type mismatches with the
// key path so the message names the offending entry.
template <class T>
void get_if(const json& obj, const std::string& where, const char* key, T& out) {
  auto it = obj.find(key);
  if (it == obj.end()) return;
  try {
    out = it->get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config: bad value for key '" + where + key + "'");
  }
}

json world_json(const WorldSpec& w) {
  return json{{"seed", w.seed},
              {"d_latent", w.d_latent},
              {"n_tokens", w.n_tokens},
              {"d_token", w.d_token},
              {"d_pitch", w.d_pitch},
              {"d_timbre", w.d_timbre},
              {"d_melody", w.d_melody},
              {"n_techniques", w.n_techniques},
              {"n_timbres_per_gender", w.n_timbres_per_gender},
              {"pitch_grid", w.pitch_grid},
              {"sigma_obs", w.sigma_obs},
              {"melody_leak", w.melody_leak},
              {"token_scale", w.token_scale}};
}

WorldSpec world_from(const json& j, const std::string& where) {
  reject_unknown(j, where,
                 {"seed", "d_latent", "n_tokens", "d_token", "d_pitch", "d_timbre", "d_melody",
                  "n_techniques", "n_timbres_per_gender", "pitch_grid", "sigma_obs", "melody_leak",
                  "token_scale"});
  WorldSpec w;
  get_if(j, where, "seed", w.seed);
  get_if(j, where, "d_latent", w.d_latent);
  get_if(j, where, "n_tokens", w.n_tokens);
  get_if(j, where, "d_token", w.d_token);
  get_if(j, where, "d_pitch", w.d_pitch);
  get_if(j, where, "d_timbre", w.d_timbre);
  get_if(j, where, "d_melody", w.d_melody);
  get_if(j, where, "n_techniques", w.n_techniques);
  get_if(j, where, "n_timbres_per_gender", w.n_timbres_per_gender);
  get_if(j, where, "pitch_grid", w.pitch_grid);
  get_if(j, where, "sigma_obs", w.sigma_obs);
  get_if(j, where, "melody_leak", w.melody_leak);
  get_if(j, where, "token_scale", w.token_scale);
  return w;
}

json model_json(const ModelConfig& m) {
  return json{{"n_layers", m.n_layers},   {"n_heads", m.n_heads},
              {"d_hidden", m.d_hidden},   {"d_latent", m.d_latent},
              {"d_melody", m.d_melody},   {"d_token_emb", m.d_token_emb},
              {"n_tokens", m.n_tokens},   {"max_frames", m.max_frames}};
}

ModelConfig model_from(const json& j, const std::string& where) {
  reject_unknown(j, where,
                 {"n_layers", "n_heads", "d_hidden", "d_latent", "d_melody", "d_token_emb",
                  "n_tokens", "max_frames"});
  ModelConfig m;
  get_if(j, where, "n_layers", m.n_layers);
  get_if(j, where, "n_heads", m.n_heads);
  get_if(j, where, "d_hidden", m.d_hidden);
  get_if(j, where, "d_latent", m.d_latent);
  get_if(j, where, "d_melody", m.d_melody);
  get_if(j, where, "d_token_emb", m.d_token_emb);
  get_if(j, where, "n_tokens", m.n_tokens);
  get_if(j, where, "max_frames", m.max_frames);
  return m;
}

json stage_json(const StagePlan& p) {
  json j{{"stage", stage_name(p.stage)},
         {"steps", p.steps},
         {"lr", p.lr},
         {"melody_enabled", p.melody_enabled},
         {"cka_enabled", p.cka_enabled},
         {"speech_data", p.speech_data},
         {"n_train", p.n_train},
         {"frames", p.frames},
         {"batch_size", p.batch_size},
         {"gamma_min", p.gamma_min},
         {"gamma_max", p.gamma_max},
         {"temporal_dropout_p", p.temporal_dropout_p},
         {"cond_dropout_p", p.cond_dropout_p},
         {"log_every", p.log_every},
         {"eval_every", p.eval_every}};
  if (p.stage == StageId::Sft2)
    j["lambda"] = json{{"start", p.lambda.lambda_start},
                       {"end", p.lambda.lambda_end},
                       {"decay_steps", p.lambda.decay_steps}};
  return j;
}

StagePlan stage_from(const json& j, const std::string& where) {
  reject_unknown(j, where,
                 {"stage", "steps", "lr", "melody_enabled", "cka_enabled", "speech_data",
                  "n_train", "frames", "batch_size", "gamma_min", "gamma_max",
                  "temporal_dropout_p", "cond_dropout_p", "lambda", "log_every", "eval_every"});
  auto it = j.find("stage");
  if (it == j.end())
    throw std::invalid_argument("config: stage entry is missing the key '" + where + "stage'");
  StagePlan p = default_plan(stage_from_name(it->get<std::string>()));
  get_if(j, where, "steps", p.steps);
  get_if(j, where, "lr", p.lr);
  get_if(j, where, "melody_enabled", p.melody_enabled);
  get_if(j, where, "cka_enabled", p.cka_enabled);
  get_if(j, where, "speech_data", p.speech_data);
  get_if(j, where, "n_train", p.n_train);
  get_if(j, where, "frames", p.frames);
  get_if(j, where, "batch_size", p.batch_size);
  get_if(j, where, "gamma_min", p.gamma_min);
  get_if(j, where, "gamma_max", p.gamma_max);
  get_if(j, where, "temporal_dropout_p", p.temporal_dropout_p);
  get_if(j, where, "cond_dropout_p", p.cond_dropout_p);
  get_if(j, where, "log_every", p.log_every);
  get_if(j, where, "eval_every", p.eval_every);
  if (auto lam = j.find("lambda"); lam != j.end()) {
    const std::string lw = where + "lambda.";
    reject_unknown(*lam, lw, {"start", "end", "decay_steps"});
    get_if(*lam, lw, "start", p.lambda.lambda_start);
    get_if(*lam, lw, "end", p.lambda.lambda_end);
    get_if(*lam, lw, "decay_steps", p.lambda.decay_steps);
  }
  return p;
}

json grpo_json(const GrpoConfig& g) {
  return json{{"group_size", g.group_size},
              {"n_rewards", g.n_rewards},
              {"weights", g.weights},
              {"a", g.a},
              {"w_min", g.w_min},
              {"w_s", g.w_s},
              {"eps_u", g.eps_u},
              {"eps_l", g.eps_l},
              {"beta", g.beta},
              {"eps_clip", g.eps_clip},
              {"n_steps", g.n_steps}};
}

GrpoConfig grpo_from(const json& j, const std::string& where, const GrpoConfig& base) {
  reject_unknown(j, where,
                 {"group_size", "n_rewards", "weights", "a", "w_min", "w_s", "eps_u", "eps_l",
                  "beta", "eps_clip", "n_steps"});
  GrpoConfig g = base;  // lr/total_iters live on the stage plan
  get_if(j, where, "group_size", g.group_size);
  get_if(j, where, "n_rewards", g.n_rewards);
  get_if(j, where, "weights", g.weights);
  get_if(j, where, "a", g.a);
  get_if(j, where, "w_min", g.w_min);
  get_if(j, where, "w_s", g.w_s);
  get_if(j, where, "eps_u", g.eps_u);
  get_if(j, where, "eps_l", g.eps_l);
  get_if(j, where, "beta", g.beta);
  get_if(j, where, "eps_clip", g.eps_clip);
  get_if(j, where, "n_steps", g.n_steps);
  return g;
}

}  // namespace

void RunConfig::validate() const {
  if (version != 1) throw std::invalid_argument("config: unsupported version");
  model.validate();
  if (model.d_latent != world.d_latent || model.d_melody != world.d_melody ||
      model.n_tokens != world.n_tokens)
    throw std::invalid_argument("config: model dimensions do not match the world");
  if (pipeline.stages.empty()) throw std::invalid_argument("config: no stages configured");
  for (const StagePlan& p : pipeline.stages) p.validate();
  if (bench.frames > model.max_frames || pipeline.eval.frames > model.max_frames)
    throw std::invalid_argument("config: evaluation frames exceed the model's max_frames");
  if (bench_eval.ode_steps <= 0 || pipeline.eval.ode_steps <= 0)
    throw std::invalid_argument("config: ode_steps must be > 0");
}

RunConfig default_config() {
  RunConfig cfg;
  cfg.pipeline = default_pipeline();
  cfg.grpo = default_plan(StageId::Grpo).grpo;
  for (StagePlan& p : cfg.pipeline.stages) {
    p.model = cfg.model;
    if (p.stage == StageId::Grpo) p.grpo = cfg.grpo;
  }
  return cfg;
}

std::string serialize_config(const RunConfig& cfg) {
  json stages = json::array();
  for (const StagePlan& p : cfg.pipeline.stages) stages.push_back(stage_json(p));
  json j{{"version", cfg.version},
         {"seed", cfg.seed},
         {"out_dir", cfg.out_dir},
         {"world", world_json(cfg.world)},
         {"model", model_json(cfg.model)},
         {"stages", stages},
         {"grpo", grpo_json(cfg.grpo)},
         {"ablation", {{"no_cka", cfg.pipeline.no_cka}, {"no_dropout", cfg.pipeline.no_dropout}}},
         {"heldout",
          {{"n", cfg.pipeline.eval.n},
           {"frames", cfg.pipeline.eval.frames},
           {"ode_steps", cfg.pipeline.eval.ode_steps},
           {"cfg_scale", cfg.pipeline.eval.cfg_scale}}},
         {"bench",
          {{"k", cfg.bench.k},
           {"technique_free_mult", cfg.bench.technique_free_mult},
           {"frames", cfg.bench.frames},
           {"intensity", cfg.bench.intensity},
           {"prompt_pool", cfg.bench.prompt_pool}}},
         {"bench_eval",
          {{"ode_steps", cfg.bench_eval.ode_steps},
           {"cfg_scale", cfg.bench_eval.cfg_scale},
           {"threads", cfg.bench_eval.threads}}}};
  return j.dump(2) + "\n";
}

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("config: not valid JSON (") + e.what() + ")");
  }
  if (!j.is_object()) throw std::invalid_argument("config: top level must be an object");
  reject_unknown(j, "",
                 {"version", "seed", "out_dir", "world", "model", "stages", "grpo", "ablation",
                  "heldout", "bench", "bench_eval"});
  if (!j.contains("version"))
    throw std::invalid_argument("config: missing the required key 'version'");

  RunConfig cfg = default_config();
  get_if(j, "", "version", cfg.version);
  if (cfg.version != 1) throw std::invalid_argument("config: unsupported version");
  get_if(j, "", "seed", cfg.seed);
  get_if(j, "", "out_dir", cfg.out_dir);
  if (j.contains("world")) cfg.world = world_from(j["world"], "world.");
  if (j.contains("model")) cfg.model = model_from(j["model"], "model.");
  if (j.contains("grpo")) cfg.grpo = grpo_from(j["grpo"], "grpo.", cfg.grpo);
  if (auto ab = j.find("ablation"); ab != j.end()) {
    reject_unknown(*ab, "ablation.", {"no_cka", "no_dropout"});
    get_if(*ab, "ablation.", "no_cka", cfg.pipeline.no_cka);
    get_if(*ab, "ablation.", "no_dropout", cfg.pipeline.no_dropout);
  }
  if (auto he = j.find("heldout"); he != j.end()) {
    reject_unknown(*he, "heldout.", {"n", "frames", "ode_steps", "cfg_scale"});
    get_if(*he, "heldout.", "n", cfg.pipeline.eval.n);
    get_if(*he, "heldout.", "frames", cfg.pipeline.eval.frames);
    get_if(*he, "heldout.", "ode_steps", cfg.pipeline.eval.ode_steps);
    get_if(*he, "heldout.", "cfg_scale", cfg.pipeline.eval.cfg_scale);
  }
  if (auto be = j.find("bench"); be != j.end()) {
    reject_unknown(*be, "bench.", {"k", "technique_free_mult", "frames", "intensity",
                                   "prompt_pool"});
    get_if(*be, "bench.", "k", cfg.bench.k);
    get_if(*be, "bench.", "technique_free_mult", cfg.bench.technique_free_mult);
    get_if(*be, "bench.", "frames", cfg.bench.frames);
    get_if(*be, "bench.", "intensity", cfg.bench.intensity);
    get_if(*be, "bench.", "prompt_pool", cfg.bench.prompt_pool);
  }
  if (auto bv = j.find("bench_eval"); bv != j.end()) {
    reject_unknown(*bv, "bench_eval.", {"ode_steps", "cfg_scale", "threads"});
    get_if(*bv, "bench_eval.", "ode_steps", cfg.bench_eval.ode_steps);
    get_if(*bv, "bench_eval.", "cfg_scale", cfg.bench_eval.cfg_scale);
    get_if(*bv, "bench_eval.", "threads", cfg.bench_eval.threads);
  }
  if (auto st = j.find("stages"); st != j.end()) {
    if (!st->is_array()) throw std::invalid_argument("config: 'stages' must be an array");
    cfg.pipeline.stages.clear();
    for (size_t i = 0; i < st->size(); i++) {
      const std::string where = "stages[" + std::to_string(i) + "].";
      cfg.pipeline.stages.push_back(stage_from((*st)[i], where));
    }
  }
  for (StagePlan& p : cfg.pipeline.stages) {
    p.model = cfg.model;
    if (p.stage == StageId::Grpo) p.grpo = cfg.grpo;
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("config: cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

void save_config(const std::string& path, const RunConfig& cfg) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("config: cannot write " + path);
  os << serialize_config(cfg);
}

}  // namespace fgl
