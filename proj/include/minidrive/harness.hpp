#pragma once
// Run configuration, the assembled model, the four-stage training pipeline,
// closed-loop evaluation, sensor ablations, and rendering.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "minidrive/dataset.hpp"
#include "minidrive/encoder.hpp"
#include "minidrive/fusion.hpp"
#include "minidrive/language.hpp"
#include "minidrive/metrics.hpp"
#include "minidrive/planner.hpp"
#include "minidrive/scenario_library.hpp"
#include "minidrive/sim.hpp"

namespace md::harness {

struct StageConfig {
  double lr = 5e-4;
  int epochs = 30;
  int batch = 8;
};

struct RunConfig {
  std::uint64_t seed = 42;
  enc::EncoderConfig encoder;
  plan::PlannerConfig planner;
  fusion::FusionConfig fusion;
  sim::SimConfig sim;
  double sample_hz = 2.0;
  StageConfig stage1{5e-4, 30, 8};
  StageConfig stage2{5e-4, 10, 8};
  StageConfig stage4{1e-4, 20, 8};
  double weight_decay = 0.01;
  double warmup_frac = 0.05;  // stage-4 linear warmup fraction
  int val_stride = 6;         // every n-th sample is validation
  int eval_routes = 20;
  int eval_reps = 3;
  int ablate_routes = 5;
  bool planner_from_bev = false;   // closed-loop planner semantics source
  bool unfreeze_encoder = false;   // stage-4 joint fine-tuning variant
  metrics::PenaltyTable penalties = metrics::PenaltyTable::defaults();

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig load(const std::string& path);
  void save(const std::string& path) const;
  std::uint64_t hash() const;  // FNV-1a of the canonical serialization
};

// The full parameter bundle. All modules share one registry; stage training
// toggles trainability by prefix.
struct Model {
  nn::ParamRegistry reg;
  lang::Vocabulary vocab;
  lang::InstructionEmbedding lang_embed;  // "lang."
  enc::VisionEncoder encoder;             // "encoder."
  plan::CorridorTokenizer tokenizer;      // "planner.tokenizer"
  plan::PolicyHead policy_head;           // "planner.head"
  fusion::FusionModel fusion;             // "fusion."

  Model(const RunConfig& cfg, const sim::SensorRig& rig);
};

struct StageReport {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;
  std::vector<double> val_metric;  // M_prec (stage 1), accuracy (2), L1 (4)
  std::uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
  std::string checkpoint_path;
};

StageReport stage1_pretrain_bev(Model& model, const Dataset& data, const RunConfig& cfg,
                                const std::string& out_dir);
StageReport stage2_train_planner(Model& model, const Dataset& data, const RunConfig& cfg,
                                 const std::string& out_dir);
StageReport stage4_train_e2e(Model& model, const Dataset& data, const RunConfig& cfg,
                             const std::string& out_dir);

// Closed-loop policies for evaluation.
enum class PolicyKind { kModel, kExpert, kStop };

struct EvalResult {
  std::vector<std::vector<metrics::RouteResult>> runs;  // [rep][route]
  metrics::AggregateReport aggregate;
  std::string report_path;
};

sim::DrivingLog run_route(const RunConfig& cfg, const sim::Scenario& scenario, Model* model,
                          PolicyKind policy, const sim::SensorRig& rig);

EvalResult evaluate(const RunConfig& cfg, Model* model, PolicyKind policy,
                    const std::vector<sim::Scenario>& suite, int reps, const std::string& out_dir,
                    const std::string& tag);

// Sensor-perturbation study. Each named setting perturbs the rig the
// simulator renders with; encoders keep their nominal-rig reference points.
struct AblationSetting {
  std::string name;
  sim::SensorRig rig;
};
std::vector<AblationSetting> ablation_settings();

struct AblationRow {
  std::string setting;
  std::string model_name;
  double m_prec = 0.0;
  double m_prec_drop = 0.0;
  std::optional<double> rc, rc_drop;
};

struct AblationReport {
  std::vector<AblationRow> rows;
  double mean_drop_da = 0.0, mean_drop_fixed = 0.0;
  std::string report_path;
};

// Probes M_prec for both encoders under every setting; closed-loop RC only
// for models with a full pipeline checkpoint (the deformable one).
AblationReport ablate_sensors(const RunConfig& cfg, Model& model_da, Model& model_fixed,
                              bool rc_for_da, const std::string& out_dir);

// BEV replay renderer: PPM keyframes + manifest.json.
std::vector<std::string> render_log(const RunConfig& cfg, const sim::Scenario& scenario,
                                    const sim::DrivingLog& log, const std::string& out_dir,
                                    int keyframe_stride = 20, int scale = 4);

}  // namespace md::harness
