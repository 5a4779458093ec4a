#pragma once
// Staged training orchestration: speech-style pretraining, singing-domain
// fine-tuning without melody control, melody-conditioned fine-tuning with the
// alignment loss, then reward post-training — with per-stage metrics logs,
// checkpoint hand-off, held-out evaluation, and an ablation-table report.
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fgl/bench.hpp"
#include "fgl/grpo.hpp"
#include "fgl/objectives.hpp"
#include "fgl/toyworld.hpp"

namespace fgl {

enum class StageId { Pretrain, Sft1, Sft2, Grpo };

const char* stage_name(StageId id);
StageId stage_from_name(const std::string& name);
// Stage whose checkpoint this one trains from; null for pretrain.
const char* prerequisite_stage(StageId stage);

struct StagePlan {
  StageId stage = StageId::Pretrain;
  int steps = 0;       // optimizer steps; reward-training iterations for grpo
  double lr = 1e-3;
  bool melody_enabled = false;  // false: melody channels zeroed before entry
  bool cka_enabled = false;     // true: alignment term added to the loss
  bool speech_data = false;     // true: pitch-free pretraining variant
  ModelConfig model;            // architecture for the fresh pretrain init

  // dataset spec
  int n_train = 256;    // generated training samples in the pool
  int frames = 32;      // frames per training sample
  int batch_size = 8;   // items per optimizer step (grpo: bundles per iter)
  double gamma_min = 0.7, gamma_max = 1.0;  // masked-span fraction range
  double temporal_dropout_p = 0.0;  // per-frame melody dropout (sft2 only)
  double cond_dropout_p = 0.0;      // full condition dropout for guidance
  LambdaSchedule lambda;            // alignment-weight decay (sft2 only)

  GrpoConfig grpo;     // grpo stage only; lr/total_iters come from lr/steps
  int log_every = 50;  // train-row cadence in metrics.csv
  int eval_every = 0;  // held-out eval cadence; 0 = final eval only

  void validate() const;  // throws std::invalid_argument
};

// Desk-scale defaults per stage: pretrain 3000 steps at 1e-3 on speech-like
// data, sft1 2000 at 2.5e-4 on singing data, sft2 2000 at 7e-5 with melody,
// alignment loss and dropout, grpo 300 iterations.
StagePlan default_plan(StageId stage);

// ---- held-out evaluation ----------------------------------------------------

// One evaluation task: a masked edit bundle plus the oracle references for
// scoring the generated span.
struct EvalItem {
  ConditionBundle bundle;
  RewardRefs refs;
};

enum class EvalSetting { SingEdit, MelodyControl };

// n edit tasks cycling through the six edit types; SingEdit keeps the source
// clip's context and timbre, MelodyControl swaps in another singer's context.
std::vector<EvalItem> make_heldout(const World& world, int n, int frames, uint64_t seed,
                                   EvalSetting setting);

struct EvalSummary {
  double p = 0;  // token error rate of the generated span (lower is better)
  double s = 0;  // timbre cosine to the context singer
  double f = 0;  // pitch correlation to the reference melody
  double v = 0;  // off-subspace quality score
  int n = 0;
};

// Guided sampling on every item, scored on the masked span.
EvalSummary eval_items(const ModelParams& params, const World& world,
                       const std::vector<EvalItem>& items, int ode_steps, double cfg_scale,
                       uint64_t seed);

struct EvalSpec {
  int n = 16;
  int frames = 48;
  int ode_steps = 16;
  double cfg_scale = 3.0;
};

// ---- single stage -----------------------------------------------------------

// Training-data plumbing (exposed for verification): a pool of world samples
// for the stage, and the batch assembled for one step. Disabled melody zeroes
// the bundle's melody tensor; condition dropout fully unconditions an item.
std::vector<ToySample> make_train_pool(const World& world, const StagePlan& plan, uint64_t seed);
std::vector<TrainItem> make_batch(const World& world, const StagePlan& plan,
                                  const std::vector<ToySample>& pool, int step, uint64_t seed);
// Edit-task pool driving the reward stage (bundle + scoring references).
std::vector<EvalItem> make_grpo_pool(const World& world, const StagePlan& plan, uint64_t seed);

struct StageResult {
  ModelParams params;                // meta records stage and step count
  std::vector<std::string> metrics;  // CSV lines, header first, append-only
  EvalSummary final_eval;            // held-out SingEdit eval at stage end
};

// Runs one stage. `init` must be the previous stage's checkpoint (null only
// for pretrain); resuming passes the same stage's checkpoint plus the step it
// stopped at. Throws std::invalid_argument on a wrong prerequisite and
// std::runtime_error on a non-finite loss.
StageResult run_stage(const World& world, const StagePlan& plan, const ModelParams* init,
                      const EvalSpec& eval, uint64_t seed, int start_step = 0);

// ---- full pipeline ----------------------------------------------------------

struct PipelineConfig {
  std::vector<StagePlan> stages;  // run in order; prerequisites enforced
  bool no_cka = false;            // ablation: drop the alignment term in sft2
  bool no_dropout = false;        // ablation: disable temporal dropout in sft2
  EvalSpec eval;
};

PipelineConfig default_pipeline();
// "full", "w/o CKA", "w/o Dist", or "w/o CKA+Dist" from the ablation flags.
std::string variant_name(const PipelineConfig& cfg);

struct StageEval {
  std::string stage;
  EvalSummary edit;     // SingEdit setting
  EvalSummary control;  // MelodyControl setting
};

struct PipelineResult {
  ModelParams params;                 // final checkpoint
  std::vector<StageEval> stage_evals; // one per completed stage, in order
  std::vector<std::string> report;    // CSV lines: variant,stage,P/S/F/V x setting
  std::vector<std::pair<std::string, std::vector<std::string>>> metrics;  // per stage
};

// Runs the configured stages in order, evaluating both settings on the same
// held-out tasks after each stage. When run_dir is nonempty the layout is
//   config.snapshot, metrics_<stage>.csv, checkpoints/<stage>.ckpt, report.csv
// written incrementally as stages finish; `snapshot` overrides the
// config.snapshot content (empty = a generated summary of the pipeline).
PipelineResult run_pipeline(const World& world, const PipelineConfig& cfg,
                            const std::string& run_dir, uint64_t seed,
                            const std::string& snapshot = "");

const char* report_header();  // the report.csv column line

}  // namespace fgl
