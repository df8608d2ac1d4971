#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "dynaseg/data.hpp"
#include "dynaseg/dgl.hpp"
#include "dynaseg/mit.hpp"
#include "dynaseg/pruning.hpp"

namespace dynaseg {

enum class PruneMode { kDynamic, kStatic };
enum class KdMode { kNone, kStage1, kStage2, kBoth };

const char* to_string(PruneMode mode);
const char* to_string(KdMode mode);
PruneMode parse_prune_mode(const std::string& s);  // UsageError on unknown values
KdMode parse_kd_mode(const std::string& s);

struct OptimConfig {
  double base_lr = 2e-3;
  double poly_power = 1.0;
  double weight_decay = 0.0;
  int batch_size = 4;
};

struct DistillConfig {
  double lambda_s = 0.5;
  double lambda_m = kDefaultLambdaM;
  int64_t stage1_steps = 1000;
  int64_t stage2_steps = 2000;
  double target_sparsity = 0.5;  // r
  double anneal_fraction = 0.5;  // T as a fraction of all steps
  bool anneal = true;
  KdMode kd = KdMode::kBoth;
  PruneMode mode = PruneMode::kDynamic;
  OptimConfig optim;

  int64_t total_steps() const { return stage1_steps + stage2_steps; }
  // Schedule at global step t; without annealing the target applies from t = 0.
  SparsitySchedule schedule_at(int64_t step) const;
};

struct LossReport {
  int64_t step = 0;
  std::string stage;  // "teacher", "stage1" or "stage2"
  double ce = 0.0;
  double sce = 0.0;
  double mse = 0.0;
  double l_m = 0.0;
  double total = 0.0;
  double keep_fraction = 1.0;
};

void write_loss_csv_header(std::ostream& out);
void write_loss_csv_row(std::ostream& out, const LossReport& r);

// Sum over the four stages of the element-mean squared feature difference.
Tensor stage1_loss(const std::array<FeatureMap, 4>& student, const std::array<FeatureMap, 4>& teacher);

// CE(student, labels) + lambda_s * SCE(student, teacher), both averaged over
// non-void pixels. Logits are [P, K] at label resolution.
Tensor stage2_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                   std::span<const uint8_t> labels, double lambda_s);

using ReportSink = std::function<void(const LossReport&)>;
// Called with "stage1" / "stage2" after a stage that ran at least one step.
using StageHook = std::function<void(const std::string& stage)>;

// Dense supervised training with cross-entropy.
std::vector<LossReport> train_teacher(MitModel& model, const Dataset& train, int64_t steps,
                                      const OptimConfig& optim, uint64_t seed,
                                      const ReportSink& sink = {});

// Copy of the teacher's weights plus freshly initialized gate predictors.
MitModel make_student(const MitModel& teacher, uint64_t seed);

struct StudentResult {
  std::vector<LossReport> reports;
  double final_keep_fraction = 1.0;
  std::map<std::string, StaticMask> static_masks;  // static mode only
};

// Two-stage distillation with sparsity regularization; see docs/training.md
// for how the KD modes allocate steps.
StudentResult train_two_stage(const MitModel& teacher, MitModel& student, const Dataset& train,
                              const DistillConfig& cfg, uint64_t seed,
                              const ReportSink& sink = {}, const StageHook& on_stage_end = {});

// Dataset-level mIoU (one confusion matrix over all samples). `gater` may be
// null for a dense model.
double evaluate_miou(const MitModel& model, const Dataset& data, Gater* gater = nullptr);

// Gater matching a trained student's inference path.
std::unique_ptr<Gater> inference_gater(const MitModel& model, PruneMode mode, double keep_fraction,
                                       const std::map<std::string, StaticMask>& static_masks);

// Sum over gated layers of ||G||_1, averaged over the given samples.
double mean_gate_mass(const MitModel& student, const Dataset& data, double keep_fraction);

}  // namespace dynaseg
