#pragma once
// Benchmark builder and evaluator for the lyric-editing task: six edit
// transformations over the token alphabet, a balanced manifest sampler over
// (gender x language x edit type x technique) cells, and a two-setting
// evaluation (shared clip vs. separate timbre prompt) producing a plot-ready
// metric table.
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fgl/conditioning.hpp"
#include "fgl/model.hpp"
#include "fgl/toyworld.hpp"

namespace fgl {

enum class EditType { PSub, FSub, Del, Ins, Trans, Mix };

inline constexpr EditType kEditTypes[6] = {EditType::PSub, EditType::FSub, EditType::Del,
                                           EditType::Ins,  EditType::Trans, EditType::Mix};

const char* edit_type_name(EditType e);
EditType edit_type_from_name(const std::string& name);

// the fixed involutive bijection between the two language sub-alphabets
int translate_token(int token, int tokens_per_language);

// One lyric-edit transformation, deterministic per seed. Edited sequences
// keep the grid invariants: tokens stay in [1, 2*tokens_per_language] and no
// two adjacent tokens are equal (one frame per token makes adjacent
// duplicates unrepresentable).
//   PSub  replace round(intensity*n) positions, same language
//   FSub  resample every token, same language and length
//   Del   remove round(intensity*n) positions (error if nothing would remain)
//   Ins   insert round(intensity*n) tokens at random positions
//   Trans map every token through the bijection
//   Mix   map one contiguous span of round(intensity*n) tokens
std::vector<int> apply_edit(const std::vector<int>& tokens, EditType edit, double intensity,
                            uint64_t seed, int tokens_per_language = 16);

struct BenchCounts {
  int k = 1;                   // instances per named technique; paper scale is 30
  int technique_free_mult = 4; // technique-free slot gets 4k
  int frames = 48;             // clip length for every instance
  double intensity = 0.3;      // edit knob for PSub/Del/Ins/Mix
  int prompt_pool = 8192;      // reserved timbre-prompt seed pool
  static BenchCounts desk() { return BenchCounts{}; }
  static BenchCounts paper() {
    BenchCounts c;
    c.k = 30;
    return c;
  }
};

struct BenchInstance {
  uint64_t melody_seed = 0;  // regenerates the melody-reference clip
  uint64_t prompt_seed = 0;  // regenerates the timbre-prompt clip
  std::vector<int> original; // target sentence before the edit
  std::vector<int> edited;
  EditType edit = EditType::PSub;
  int language = 0;
  int gender = 0;
  int technique = 0;  // 0 = technique-free
};

struct BenchManifest {
  int version = 1;
  uint64_t world_seed = 0;
  BenchCounts counts;
  std::vector<BenchInstance> instances;
};

// deterministic reconstruction of the labels an instance was built with
SampleLabels instance_labels(const BenchInstance& inst, const WorldSpec& spec);
SampleLabels prompt_labels(const BenchInstance& inst, const WorldSpec& spec);

BenchManifest build_manifest(const World& world, const BenchCounts& counts, uint64_t seed);

void save_manifest(const std::string& path, const BenchManifest& m);
BenchManifest load_manifest(const std::string& path);

struct EvalConfig {
  int ode_steps = 32;
  double cfg_scale = 3.0;
  uint64_t seed = 0;
  int threads = 0;  // 0 = hardware concurrency
};

struct ReportRow {
  std::string setting;  // "sing_edit" | "melody_control"
  std::string type;     // edit type name
  int language = 0;
  std::string metric;   // "P" | "F" | "S" | "V"
  double value = 0;
};

struct BenchReport {
  std::vector<ReportRow> rows;  // fixed order: setting, type, language, metric
};

// Generation hook: given the instance, its condition bundle, and the rendered
// ground-truth edited clip, return a full (frames x d_latent) latent. The
// checkpoint-backed engine ignores the truth argument.
using GeneratorFn = std::function<Tensor(const BenchInstance& inst, const ConditionBundle& bundle,
                                         const ToySample& truth, uint64_t seed)>;

BenchReport evaluate_manifest_fn(const GeneratorFn& gen, const World& world,
                                 const BenchManifest& m, const EvalConfig& cfg);
// ODE sampling from a trained checkpoint as the generator
BenchReport evaluate_manifest(const ModelParams& params, const World& world,
                              const BenchManifest& m, const EvalConfig& cfg);

void save_report_csv(const std::string& path, const BenchReport& report);

}  // namespace fgl
