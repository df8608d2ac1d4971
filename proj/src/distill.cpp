#include "dynaseg/distill.hpp"

#include <cmath>
#include <cstdio>
#include <optional>
#include <random>

#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"
#include "dynaseg/optim.hpp"

namespace dynaseg {

namespace {

constexpr uint64_t kBatchStream = 0x5851F42D4C957F2Dull;
constexpr uint64_t kGateStream = 0x14057B7EF767814Full;

struct TeacherTargets {
  std::array<FeatureMap, 4> features;
  Tensor logits;  // full resolution [H*W, K]
};

std::vector<int64_t> draw_batch(std::mt19937_64& rng, size_t n, int batch) {
  std::uniform_int_distribution<int64_t> pick(0, static_cast<int64_t>(n) - 1);
  std::vector<int64_t> idx(static_cast<size_t>(batch));
  for (auto& i : idx) i = pick(rng);
  return idx;
}

void check_finite_loss(double v, const std::string& stage, int64_t step) {
  if (!std::isfinite(v)) {
    throw NumericalError("training diverged: non-finite loss in " + stage + " at step " +
                         std::to_string(step));
  }
}

void validate(const DistillConfig& cfg) {
  if (cfg.target_sparsity < 0.0 || cfg.target_sparsity >= 1.0) {
    throw UsageError("config field 'sparsity.target' must lie in [0, 1)");
  }
  if (cfg.stage1_steps < 0 || cfg.stage2_steps < 0) {
    throw UsageError("config field 'distill.stage1_steps/stage2_steps' must be >= 0");
  }
  if (cfg.lambda_s < 0.0) throw UsageError("config field 'distill.lambda_s' must be >= 0");
  if (cfg.lambda_m < 0.0) throw UsageError("config field 'distill.lambda_m' must be >= 0");
  if (cfg.optim.batch_size < 1) throw UsageError("config field 'optim.batch_size' must be >= 1");
  if (cfg.anneal_fraction < 0.0) throw UsageError("config field 'sparsity.anneal_fraction' must be >= 0");
}

}  // namespace

const char* to_string(PruneMode mode) { return mode == PruneMode::kDynamic ? "dynamic" : "static"; }

const char* to_string(KdMode mode) {
  switch (mode) {
    case KdMode::kNone: return "none";
    case KdMode::kStage1: return "stage1";
    case KdMode::kStage2: return "stage2";
    case KdMode::kBoth: return "both";
  }
  return "both";
}

PruneMode parse_prune_mode(const std::string& s) {
  if (s == "dynamic") return PruneMode::kDynamic;
  if (s == "static") return PruneMode::kStatic;
  throw UsageError("unknown pruning mode '" + s + "' (expected dynamic or static)");
}

KdMode parse_kd_mode(const std::string& s) {
  if (s == "none") return KdMode::kNone;
  if (s == "stage1") return KdMode::kStage1;
  if (s == "stage2") return KdMode::kStage2;
  if (s == "both") return KdMode::kBoth;
  throw UsageError("unknown kd mode '" + s + "' (expected none, stage1, stage2 or both)");
}

SparsitySchedule DistillConfig::schedule_at(int64_t step) const {
  SparsitySchedule s;
  s.target_sparsity = target_sparsity;
  s.step = step;
  s.anneal_steps = anneal ? static_cast<int64_t>(std::llround(anneal_fraction * total_steps())) : 0;
  return s;
}

void write_loss_csv_header(std::ostream& out) {
  out << "step,stage,ce,sce,mse,l_m,total,keep_fraction\n";
}

void write_loss_csv_row(std::ostream& out, const LossReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), "%lld,%s,%.9g,%.9g,%.9g,%.9g,%.9g,%.6g\n",
                static_cast<long long>(r.step), r.stage.c_str(), r.ce, r.sce, r.mse, r.l_m,
                r.total, r.keep_fraction);
  out << buf;
}

Tensor stage1_loss(const std::array<FeatureMap, 4>& student, const std::array<FeatureMap, 4>& teacher) {
  Tensor total;
  for (int i = 0; i < 4; ++i) {
    if (student[i].tokens.shape() != teacher[i].tokens.shape()) {
      throw DimensionError("stage1_loss: stage " + std::to_string(i + 1) + " student " +
                           shape_str(student[i].tokens.shape()) + " vs teacher " +
                           shape_str(teacher[i].tokens.shape()));
    }
    Tensor l = mse(student[i].tokens, teacher[i].tokens);
    total = total.defined() ? add(total, l) : l;
  }
  return total;
}

Tensor stage2_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                   std::span<const uint8_t> labels, double lambda_s) {
  Tensor ce = cross_entropy(student_logits, labels);
  if (lambda_s == 0.0) return ce;
  return add(ce, scale(soft_cross_entropy(student_logits, teacher_logits, labels), lambda_s));
}

std::vector<LossReport> train_teacher(MitModel& model, const Dataset& train, int64_t steps,
                                      const OptimConfig& optim, uint64_t seed,
                                      const ReportSink& sink) {
  if (steps < 0) throw UsageError("config field 'teacher.steps' must be >= 0");
  if (optim.batch_size < 1) throw UsageError("config field 'teacher.batch_size' must be >= 1");
  std::vector<LossReport> reports;
  if (steps == 0) return reports;
  if (train.empty()) throw EmptyInputError("teacher training needs at least one sample");
  model.set_trainable(true);
  Adam adam(model.backbone_params(), {0.9, 0.999, 1e-8, optim.weight_decay});
  std::mt19937_64 rng(seed ^ kBatchStream);
  const MitConfig& cfg = model.config();
  for (int64_t step = 0; step < steps; ++step) {
    adam.zero_grad();
    Tensor total;
    for (int64_t i : draw_batch(rng, train.size(), optim.batch_size)) {
      const SegSample& s = train[static_cast<size_t>(i)];
      Tensor logits = full_resolution_logits(segment(model, s.image), cfg);
      Tensor l = cross_entropy(logits, s.label);
      total = total.defined() ? add(total, l) : l;
    }
    total = scale(total, 1.0 / optim.batch_size);
    check_finite_loss(total.item(), "teacher", step);
    backward(total);
    adam.step(poly_lr(optim.base_lr, step, steps, optim.poly_power));
    LossReport r;
    r.step = step;
    r.stage = "teacher";
    r.ce = r.total = total.item();
    reports.push_back(r);
    if (sink) sink(r);
  }
  return reports;
}

MitModel make_student(const MitModel& teacher, uint64_t seed) {
  MitModel student = teacher.clone();
  student.set_trainable(true);
  std::mt19937_64 rng(seed ^ kGateStream);
  add_gate_predictors(student, rng);
  return student;
}

StudentResult train_two_stage(const MitModel& teacher, MitModel& student, const Dataset& train,
                              const DistillConfig& cfg, uint64_t seed, const ReportSink& sink,
                              const StageHook& on_stage_end) {
  validate(cfg);
  if (!student.config().same_architecture(teacher.config())) {
    throw DimensionError("student architecture differs from the teacher's");
  }
  if (cfg.mode == PruneMode::kDynamic && !has_gate_predictors(student)) {
    throw ContractError("dynamic pruning needs a student with gate predictors");
  }
  StudentResult result;
  result.final_keep_fraction = 1.0 - cfg.target_sparsity;
  if (cfg.total_steps() == 0) return result;
  if (train.empty()) throw EmptyInputError("distillation needs at least one sample");

  const MitConfig& mc = student.config();
  std::vector<std::optional<TeacherTargets>> cache(train.size());
  auto targets = [&](int64_t i) -> const TeacherTargets& {
    auto& slot = cache[static_cast<size_t>(i)];
    if (!slot) {
      NoGradGuard no_grad;
      SegOutput out = segment(teacher, train[static_cast<size_t>(i)].image);
      slot = TeacherTargets{out.features, full_resolution_logits(out, teacher.config())};
    }
    return *slot;
  };

  const bool feature_stage = cfg.kd == KdMode::kStage1 || cfg.kd == KdMode::kBoth;
  const double sce_weight = (cfg.kd == KdMode::kStage2 || cfg.kd == KdMode::kBoth) ? cfg.lambda_s : 0.0;
  const int64_t s1 = feature_stage ? cfg.stage1_steps : 0;
  const int64_t s2 = cfg.total_steps() - s1;

  student.set_trainable(true);
  StaticGater static_gater(student);
  std::mt19937_64 rng(seed ^ kBatchStream);
  int64_t global = 0;

  auto run_stage = [&](const std::string& tag, int64_t steps, std::vector<Tensor> params) {
    if (steps == 0) return;
    Adam adam(std::move(params), {0.9, 0.999, 1e-8, cfg.optim.weight_decay});
    const bool features_only = tag == "stage1";
    for (int64_t step = 0; step < steps; ++step, ++global) {
      const double keep = anneal(cfg.schedule_at(global));
      if (cfg.mode == PruneMode::kStatic) static_gater.set_keep_fraction(keep);
      adam.zero_grad();

      Tensor total;
      double ce_sum = 0.0, sce_sum = 0.0, mse_sum = 0.0, lm_sum = 0.0;
      for (int64_t i : draw_batch(rng, train.size(), cfg.optim.batch_size)) {
        const SegSample& s = train[static_cast<size_t>(i)];
        const TeacherTargets& t = targets(i);
        DynamicGater dyn(student.params(), keep);
        Gater* gater = cfg.mode == PruneMode::kDynamic ? static_cast<Gater*>(&dyn) : &static_gater;

        Tensor loss;
        if (features_only) {
          auto feats = encoder_forward(student, s.image, gater);
          loss = stage1_loss(feats, t.features);
          mse_sum += loss.item();
        } else {
          Tensor logits = full_resolution_logits(segment(student, s.image, gater), mc);
          Tensor ce = cross_entropy(logits, s.label);
          ce_sum += ce.item();
          loss = ce;
          if (sce_weight > 0.0) {
            Tensor sce = soft_cross_entropy(logits, t.logits, s.label);
            sce_sum += sce.item();
            loss = add(loss, scale(sce, sce_weight));
          }
        }
        if (cfg.mode == PruneMode::kDynamic && cfg.lambda_m > 0.0) {
          Tensor lm = sparsity_loss(dyn.gates(), cfg.lambda_m);
          lm_sum += lm.item();
          loss = add(loss, lm);
        }
        total = total.defined() ? add(total, loss) : loss;
      }
      const double inv = 1.0 / cfg.optim.batch_size;
      total = scale(total, inv);
      check_finite_loss(total.item(), tag, global);
      backward(total);
      adam.step(poly_lr(cfg.optim.base_lr, step, steps, cfg.optim.poly_power));

      LossReport r;
      r.step = global;
      r.stage = tag;
      r.ce = ce_sum * inv;
      r.sce = sce_sum * inv;
      r.mse = mse_sum * inv;
      r.l_m = lm_sum * inv;
      r.total = total.item();
      r.keep_fraction = keep;
      result.reports.push_back(r);
      if (sink) sink(r);
    }
    if (on_stage_end) on_stage_end(tag);
  };

  // The decoder never sees the feature loss, so stage 1 leaves it untouched.
  std::vector<Tensor> stage1_params = student.encoder_params();
  for (const Tensor& g : student.params_with_prefix("gate.")) stage1_params.push_back(g);
  run_stage("stage1", s1, stage1_params);

  std::vector<Tensor> all;
  for (const auto& [name, t] : student.params()) all.push_back(t);
  run_stage("stage2", s2, all);

  if (cfg.mode == PruneMode::kStatic) {
    static_gater.set_keep_fraction(result.final_keep_fraction);
    result.static_masks = static_gater.masks();
  }
  return result;
}

double evaluate_miou(const MitModel& model, const Dataset& data, Gater* gater) {
  if (data.empty()) throw EmptyInputError("evaluation needs at least one sample");
  NoGradGuard no_grad;
  ConfusionMatrix cm(model.config().num_classes);
  auto* dyn = dynamic_cast<DynamicGater*>(gater);
  for (const SegSample& s : data) {
    if (dyn) dyn->clear();
    cm.add(predict_labels(segment(model, s.image, gater), model.config()), s.label);
  }
  return cm.mean_iou();
}

std::unique_ptr<Gater> inference_gater(const MitModel& model, PruneMode mode, double keep_fraction,
                                       const std::map<std::string, StaticMask>& static_masks) {
  if (mode == PruneMode::kDynamic) {
    if (!has_gate_predictors(model)) throw ContractError("model has no gate predictors");
    return std::make_unique<DynamicGater>(model.params(), keep_fraction);
  }
  auto g = std::make_unique<StaticGater>(model);
  if (static_masks.empty()) {
    g->set_keep_fraction(keep_fraction);
  } else {
    g->set_masks(static_masks, keep_fraction);
  }
  return g;
}

double mean_gate_mass(const MitModel& student, const Dataset& data, double keep_fraction) {
  if (data.empty()) throw EmptyInputError("gate mass needs at least one sample");
  NoGradGuard no_grad;
  double total = 0.0;
  for (const SegSample& s : data) {
    DynamicGater g(student.params(), keep_fraction);
    encoder_forward(student, s.image, &g);
    for (const GateRecord& r : g.records()) {
      for (double v : r.gate.logits.data()) total += std::fabs(v);
    }
  }
  return total / static_cast<double>(data.size());
}

}  // namespace dynaseg
