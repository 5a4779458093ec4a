#pragma once
// One human-readable JSON config drives every command: world, model, stage
// plans, reward-training settings, benchmark counts, output dir, global seed.
// Parsing rejects unknown keys by name; serialize -> parse is the identity.
#include <cstdint>
#include <string>

#include "fgl/bench.hpp"
#include "fgl/curriculum.hpp"

namespace fgl {

struct RunConfig {
  int version = 1;
  uint64_t seed = 7;             // drives training/bench/eval streams
  std::string out_dir = "runs/default";
  WorldSpec world;
  ModelConfig model;             // copied into every stage plan
  PipelineConfig pipeline;       // stages, ablation flags, held-out eval spec
  GrpoConfig grpo;               // applied to the grpo stage plan
  BenchCounts bench;
  EvalConfig bench_eval;         // benchmark evaluation settings

  void validate() const;  // cross-field coherence; throws std::invalid_argument
};

RunConfig default_config();

// Deterministic, human-readable JSON (sorted keys, 2-space indent).
std::string serialize_config(const RunConfig& cfg);
// Throws std::invalid_argument naming the offending key/value.
RunConfig parse_config(const std::string& text);

RunConfig load_config(const std::string& path);
void save_config(const std::string& path, const RunConfig& cfg);

}  // namespace fgl
