// Command-line entry point: train / bench / eval / report, all driven by one
// JSON config. Every command is deterministic given (config, seed); the
// FGL_SEED environment variable overrides the config seed and --seed
// overrides both. Exit codes: 0 success, 1 config or usage error, 2 training
// failure (non-finite loss).
#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "fgl/bench.hpp"
#include "fgl/config.hpp"
#include "fgl/curriculum.hpp"

namespace fs = std::filesystem;
using namespace fgl;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::invalid_argument("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (const std::string& line : lines) os << line << "\n";
}

uint64_t resolve_seed(const RunConfig& cfg, bool seed_set, uint64_t seed_flag) {
  if (seed_set) return seed_flag;
  if (const char* env = std::getenv("FGL_SEED")) {
    char* end = nullptr;
    const uint64_t v = std::strtoull(env, &end, 10);
    if (end == env || *end != '\0')
      throw std::invalid_argument("FGL_SEED is not an unsigned integer");
    return v;
  }
  return cfg.seed;
}

// Maps exceptions to the documented exit codes. Training failures carry
// "diverged" or "non-finite" in their message and exit 2; everything else is
// a config/usage error.
int guarded(const std::function<void()>& body) {
  try {
    body();
    return 0;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    const std::string m = e.what();
    std::fprintf(stderr, "error: %s\n", m.c_str());
    const bool training_failure =
        m.find("diverged") != std::string::npos || m.find("non-finite") != std::string::npos;
    return training_failure ? 2 : 1;
  }
}

struct TrainArgs {
  std::string config_path, stage, resume, out;
  bool seed_set = false;
  uint64_t seed = 0;
};

void cmd_train(const TrainArgs& args) {
  const std::string config_text = slurp(args.config_path);
  RunConfig cfg = parse_config(config_text);
  const uint64_t seed = resolve_seed(cfg, args.seed_set, args.seed);
  const std::string out_dir = args.out.empty() ? cfg.out_dir : args.out;
  World world{cfg.world};

  if (args.stage.empty()) {
    if (!args.resume.empty())
      throw std::invalid_argument("--resume needs --stage (pipelines restart from scratch)");
    PipelineResult r = run_pipeline(world, cfg.pipeline, out_dir, seed, config_text);
    for (const std::string& line : r.report) std::printf("%s\n", line.c_str());
    std::printf("run directory: %s\n", out_dir.c_str());
    return;
  }

  const StageId id = stage_from_name(args.stage);
  StagePlan plan;
  bool found = false;
  for (const StagePlan& p : cfg.pipeline.stages)
    if (p.stage == id) {
      plan = p;
      found = true;
    }
  if (!found)
    throw std::invalid_argument("config has no '" + args.stage + "' stage");
  if (id == StageId::Sft2) {
    if (cfg.pipeline.no_cka) plan.cka_enabled = false;
    if (cfg.pipeline.no_dropout) plan.temporal_dropout_p = 0.0;
  }

  ModelParams init;
  const ModelParams* init_ptr = nullptr;
  int start_step = 0;
  if (!args.resume.empty()) {
    init = load_checkpoint(args.resume);
    auto it = init.meta.find("step");
    if (it == init.meta.end())
      throw std::invalid_argument("checkpoint has no recorded step counter");
    start_step = std::stoi(it->second);
    if (start_step >= plan.steps)
      throw std::invalid_argument("nothing to resume: the checkpoint already has " + it->second +
                                  " steps and the plan stops at " + std::to_string(plan.steps));
    init_ptr = &init;
  } else if (const char* prev = prerequisite_stage(id)) {
    const fs::path ckpt = fs::path(out_dir) / "checkpoints" / (std::string(prev) + ".ckpt");
    if (!fs::exists(ckpt))
      throw std::invalid_argument("missing prerequisite checkpoint " + ckpt.string() +
                                  " (run --stage " + prev + " first)");
    init = load_checkpoint(ckpt.string());
    init_ptr = &init;
  }

  StageResult r = run_stage(world, plan, init_ptr, cfg.pipeline.eval, seed, start_step);

  fs::create_directories(fs::path(out_dir) / "checkpoints");
  write_text(fs::path(out_dir) / "config.snapshot", config_text);
  write_lines(fs::path(out_dir) / ("metrics_" + args.stage + ".csv"), r.metrics);
  save_checkpoint((fs::path(out_dir) / "checkpoints" / (args.stage + ".ckpt")).string(),
                  r.params);
  std::printf("stage %s: %d steps, held-out P=%.4f S=%.4f F=%.4f V=%.4f\n", args.stage.c_str(),
              plan.steps, r.final_eval.p, r.final_eval.s, r.final_eval.f, r.final_eval.v);
  std::printf("run directory: %s\n", out_dir.c_str());
}

struct BenchArgs {
  std::string config_path, out;
  bool paper_scale = false;
  bool seed_set = false;
  uint64_t seed = 0;
};

void cmd_bench(const BenchArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  const uint64_t seed = resolve_seed(cfg, args.seed_set, args.seed);
  BenchCounts counts = cfg.bench;
  if (args.paper_scale) counts.k = BenchCounts::paper().k;
  World world{cfg.world};

  BenchManifest m = build_manifest(world, counts, seed);
  if (const fs::path parent = fs::path(args.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_manifest(args.out, m);

  std::map<std::string, int> per_type;
  for (const auto& inst : m.instances) per_type[edit_type_name(inst.edit)]++;
  std::printf("%-12s %s\n", "edit_type", "instances");
  for (EditType e : kEditTypes)
    std::printf("%-12s %d\n", edit_type_name(e), per_type[edit_type_name(e)]);
  std::printf("%-12s %zu\n", "total", m.instances.size());
  std::printf("manifest: %s\n", args.out.c_str());
}

struct EvalArgs {
  std::string config_path, checkpoint, manifest, out;
  bool seed_set = false;
  uint64_t seed = 0;
  int threads = -1;
};

void cmd_eval(const EvalArgs& args) {
  RunConfig cfg = load_config(args.config_path);
  EvalConfig ec = cfg.bench_eval;
  ec.seed = resolve_seed(cfg, args.seed_set, args.seed);
  if (args.threads >= 0) ec.threads = args.threads;
  World world{cfg.world};

  ModelParams params = load_checkpoint(args.checkpoint);
  BenchManifest m = load_manifest(args.manifest);
  BenchReport rep = evaluate_manifest(params, world, m, ec);
  if (const fs::path parent = fs::path(args.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  save_report_csv(args.out, rep);

  // compact per-setting means over the type x language cells
  std::printf("%-16s %8s %8s %8s %8s\n", "setting", "P", "F", "S", "V");
  for (const char* setting : {"sing_edit", "melody_control"}) {
    std::map<std::string, double> sum;
    std::map<std::string, int> cnt;
    for (const ReportRow& r : rep.rows)
      if (r.setting == setting) {
        sum[r.metric] += r.value;
        cnt[r.metric]++;
      }
    if (cnt.empty()) continue;
    std::printf("%-16s %8.4f %8.4f %8.4f %8.4f\n", setting, sum["P"] / cnt["P"],
                sum["F"] / cnt["F"], sum["S"] / cnt["S"], sum["V"] / cnt["V"]);
  }
  std::printf("report: %s\n", args.out.c_str());
}

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};

void cmd_report(const ReportArgs& args) {
  constexpr const char* kBenchHeader = "setting,type,language,metric,value";
  std::vector<std::string> merged;
  int kind = 0;  // 0 undecided, 1 pipeline, 2 bench

  for (const std::string& path : args.inputs) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot open " + path);
    std::string header;
    if (!std::getline(is, header)) throw std::invalid_argument(path + " is empty");

    if (header == report_header()) {
      if (kind == 2) throw std::invalid_argument("cannot mix report kinds: " + path);
      kind = 1;
      if (merged.empty()) merged.push_back(header);
      std::string line;
      while (std::getline(is, line))
        if (!line.empty()) merged.push_back(line);
    } else if (header == kBenchHeader) {
      if (kind == 1) throw std::invalid_argument("cannot mix report kinds: " + path);
      kind = 2;
      if (merged.empty()) merged.push_back("source,setting,P,S,F,V");
      std::map<std::pair<std::string, std::string>, std::pair<double, int>> agg;
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string setting, type, language, metric, value;
        std::getline(ss, setting, ',');
        std::getline(ss, type, ',');
        std::getline(ss, language, ',');
        std::getline(ss, metric, ',');
        std::getline(ss, value, ',');
        auto& slot = agg[{setting, metric}];
        slot.first += std::stod(value);
        slot.second++;
      }
      for (const char* setting : {"sing_edit", "melody_control"}) {
        char row[256];
        auto mean = [&](const char* metric) {
          const auto it = agg.find({setting, metric});
          return it == agg.end() ? 0.0 : it->second.first / it->second.second;
        };
        std::snprintf(row, sizeof(row), "%s,%s,%.6f,%.6f,%.6f,%.6f", path.c_str(), setting,
                      mean("P"), mean("S"), mean("F"), mean("V"));
        merged.push_back(row);
      }
    } else {
      throw std::invalid_argument(path + " has an unrecognized report header");
    }
  }

  if (const fs::path parent = fs::path(args.out).parent_path(); !parent.empty())
    fs::create_directories(parent);
  write_lines(args.out, merged);
  for (const std::string& line : merged) std::printf("%s\n", line.c_str());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy singing-edit laboratory: staged training, benchmark, evaluation"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto* train = app.add_subcommand("train", "run the full pipeline or one stage");
  train->add_option("--config", train_args.config_path, "JSON config file")->required();
  train->add_option("--stage", train_args.stage, "run only this stage (pretrain|sft1|sft2|grpo)");
  train->add_option("--resume", train_args.resume, "stage checkpoint to continue from");
  train->add_option("--out", train_args.out, "run directory (default: config out_dir)");
  train->add_option("--seed", train_args.seed, "override the config seed");

  BenchArgs bench_args;
  auto* bench = app.add_subcommand("bench", "build a benchmark manifest");
  bench->add_option("--config", bench_args.config_path, "JSON config file")->required();
  bench->add_option("--out", bench_args.out, "manifest file to write")->required();
  bench->add_flag("--paper-scale", bench_args.paper_scale, "full 7200-instance scale");
  bench->add_option("--seed", bench_args.seed, "override the config seed");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a manifest");
  eval->add_option("--config", eval_args.config_path, "JSON config file")->required();
  eval->add_option("--checkpoint", eval_args.checkpoint, "model checkpoint")->required();
  eval->add_option("--manifest", eval_args.manifest, "benchmark manifest")->required();
  eval->add_option("--out", eval_args.out, "report CSV to write")->required();
  eval->add_option("--seed", eval_args.seed, "override the config seed");
  eval->add_option("--threads", eval_args.threads, "worker threads (0 = hardware)");

  ReportArgs report_args;
  auto* report = app.add_subcommand("report", "merge report CSVs into one comparison");
  report->add_option("--out", report_args.out, "merged CSV to write")->required();
  report->add_option("inputs", report_args.inputs, "report.csv files")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  if (*train) {
    train_args.seed_set = train->count("--seed") > 0;
    return guarded([&] { cmd_train(train_args); });
  }
  if (*bench) {
    bench_args.seed_set = bench->count("--seed") > 0;
    return guarded([&] { cmd_bench(bench_args); });
  }
  if (*eval) {
    eval_args.seed_set = eval->count("--seed") > 0;
    return guarded([&] { cmd_eval(eval_args); });
  }
  if (*report) return guarded([&] { cmd_report(report_args); });
  return 1;
}
