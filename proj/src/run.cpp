#include "dynaseg/run.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dynaseg/checkpoint.hpp"
#include "dynaseg/errors.hpp"

namespace dynaseg {

namespace fs = std::filesystem;

namespace {

constexpr int64_t kGateLogSamples = 16;

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

fs::path prepare_dir(const std::string& out_dir) {
  if (out_dir.empty()) throw UsageError("an output directory is required (--out)");
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory '" + out_dir + "': " + ec.message());
  return fs::path(out_dir);
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void write_text(const fs::path& path, const std::string& text) { open_out(path) << text; }

void write_resolved(const fs::path& dir, const RunConfig& config) {
  write_text(dir / "resolved_config.cfg", serialize_config(config));
}

using Metrics = std::vector<std::pair<std::string, std::string>>;

void write_metrics(const fs::path& path, const Metrics& metrics) {
  std::ofstream out = open_out(path);
  out << "metric,value\n";
  for (const auto& [k, v] : metrics) out << k << ',' << v << '\n';
}

void log_line(std::ostream* log, const std::string& line) {
  if (log) *log << line << '\n';
}

Dataset make_split(const RunConfig& c, int64_t offset, int64_t count) {
  Dataset out;
  for (int64_t i = 0; i < count; ++i) {
    out.push_back(gen_sample(c.data.seed, offset + i, c.model.input_height, c.model.input_width,
                             c.model.num_classes, c.data.synth));
  }
  return out;
}

Dataset analysis_data(const SavedModel& m, const std::string& data_dir, int64_t samples) {
  Dataset data = data_dir.empty() ? val_split(m.config) : read_dataset(data_dir);
  if (samples > 0 && static_cast<int64_t>(data.size()) > samples) data.resize(static_cast<size_t>(samples));
  return data;
}

// Per-instance gate log in one schema for both pruning modes; static masks
// appear as binary logits.
void write_gate_log(const fs::path& path, const SavedModel& m, const Dataset& data) {
  std::ofstream out = open_out(path);
  out << "sample,layer,neuron,logit,kept\n";
  const auto n = std::min<int64_t>(kGateLogSamples, static_cast<int64_t>(data.size()));
  NoGradGuard no_grad;
  for (int64_t i = 0; i < n; ++i) {
    if (m.mode == PruneMode::kDynamic) {
      DynamicGater g(m.model.params(), m.keep_fraction);
      encoder_forward(m.model, data[static_cast<size_t>(i)].image, &g);
      for (const GateRecord& r : g.records()) {
        auto logits = r.gate.logits.data();
        auto mask = r.gate.mask.data();
        for (size_t j = 0; j < logits.size(); ++j) {
          out << i << ',' << r.layer << ',' << j << ',' << fmt(logits[j]) << ','
              << (mask[j] != 0.0 ? 1 : 0) << '\n';
        }
      }
    } else {
      for (const auto& [layer, sm] : m.static_masks) {
        auto mask = sm.mask.data();
        for (size_t j = 0; j < mask.size(); ++j) {
          out << i << ',' << layer << ',' << j << ',' << fmt(mask[j]) << ',' << (mask[j] != 0.0 ? 1 : 0)
              << '\n';
        }
      }
    }
  }
}

void write_gate_summary(const fs::path& path, const std::vector<GateActivationCount>& counts,
                        double keep) {
  std::ofstream out = open_out(path);
  out << "layer,width,kept_count,always_active,never_active,mean_active\n";
  for (const GateActivationCount& c : counts) {
    int64_t always = 0, never = 0, total = 0;
    for (int64_t v : c.counts) {
      always += v == c.instance_count ? 1 : 0;
      never += v == 0 ? 1 : 0;
      total += v;
    }
    const auto width = static_cast<int64_t>(c.counts.size());
    out << c.layer << ',' << width << ',' << kept_count_for(keep, width) << ',' << always << ','
        << never << ',' << fmt(static_cast<double>(total) / std::max<int64_t>(1, c.instance_count))
        << '\n';
  }
}

}  // namespace

std::unique_ptr<Gater> SavedModel::make_gater() const {
  if (!gated()) return nullptr;
  return inference_gater(model, mode, keep_fraction, static_masks);
}

void save_model(const std::string& path, const SavedModel& saved) {
  Checkpoint ckpt;
  for (const auto& [name, t] : saved.model.params()) ckpt.tensors[name] = t;
  for (const auto& [layer, sm] : saved.static_masks) ckpt.tensors["mask." + layer] = sm.mask;
  ckpt.blobs["config"] = serialize_config(saved.config);
  ckpt.blobs["kind"] = saved.kind;
  ckpt.blobs["mode"] = to_string(saved.mode);
  char keep[64];
  std::snprintf(keep, sizeof(keep), "%.17g", saved.keep_fraction);
  ckpt.blobs["keep_fraction"] = keep;
  write_checkpoint(path, ckpt);
}

SavedModel load_model(const std::string& path) {
  Checkpoint ckpt = read_checkpoint(path);
  for (const char* key : {"config", "kind", "mode", "keep_fraction"}) {
    if (!ckpt.blobs.count(key)) throw IoError("checkpoint " + path + " lacks '" + key + "' metadata");
  }
  SavedModel m;
  m.config = parse_config(ckpt.blobs.at("config"));
  m.kind = ckpt.blobs.at("kind");
  if (m.kind != "teacher" && m.kind != "student") throw IoError("checkpoint kind '" + m.kind + "' unknown");
  m.mode = parse_prune_mode(ckpt.blobs.at("mode"));
  m.keep_fraction = std::strtod(ckpt.blobs.at("keep_fraction").c_str(), nullptr);

  // Reference layout from a fresh model of the embedded architecture.
  std::mt19937_64 rng(0);
  MitModel reference = MitModel::init(m.config.model, rng);
  if (m.gated() && m.mode == PruneMode::kDynamic) add_gate_predictors(reference, rng);
  ParamStore params;
  for (const auto& [name, ref] : reference.params()) {
    auto it = ckpt.tensors.find(name);
    if (it == ckpt.tensors.end()) throw DimensionError("checkpoint " + path + " lacks tensor '" + name + "'");
    if (it->second.shape() != ref.shape()) {
      throw DimensionError("checkpoint tensor '" + name + "' has shape " + shape_str(it->second.shape()) +
                           ", architecture needs " + shape_str(ref.shape()));
    }
    params[name] = it->second;
  }
  for (const auto& [name, t] : ckpt.tensors) {
    if (name.rfind("mask.", 0) == 0) {
      const std::string layer = name.substr(5);
      StaticMask sm;
      sm.layer = layer;
      sm.mask = t;
      for (int64_t j = 0; j < t.numel(); ++j) {
        if (t[j] != 0.0) sm.kept.push_back(j);
      }
      sm.kept_count = static_cast<int64_t>(sm.kept.size());
      m.static_masks[layer] = sm;
    } else if (!params.count(name)) {
      throw DimensionError("checkpoint " + path + " has unexpected tensor '" + name + "'");
    }
  }
  m.model = MitModel(m.config.model, std::move(params));
  m.model.set_trainable(false);
  return m;
}

Dataset train_split(const RunConfig& config) { return make_split(config, 0, config.data.train_samples); }

Dataset val_split(const RunConfig& config) {
  return make_split(config, config.data.train_samples, config.data.val_samples);
}

void cmd_train_teacher(const RunConfig& config, const std::string& out_dir, std::ostream* log) {
  validate_config(config);
  const fs::path dir = prepare_dir(out_dir);
  write_resolved(dir, config);
  const Dataset train = train_split(config);
  const Dataset val = val_split(config);

  std::mt19937_64 rng(config.seed);
  MitModel model = MitModel::init(config.model, rng);
  std::ofstream loss = open_out(dir / "loss.csv");
  write_loss_csv_header(loss);
  train_teacher(model, train, config.teacher.steps, config.teacher.optim, config.seed,
                [&](const LossReport& r) { write_loss_csv_row(loss, r); });

  const double train_miou = evaluate_miou(model, train);
  const double val_miou = evaluate_miou(model, val);
  write_metrics(dir / "metrics.csv", {{"steps", std::to_string(config.teacher.steps)},
                                      {"num_params", std::to_string(model.num_params())},
                                      {"train_miou", fmt(train_miou)},
                                      {"val_miou", fmt(val_miou)}});
  SavedModel saved{config, model, "teacher", PruneMode::kDynamic, 1.0, {}};
  save_model((dir / "teacher.ckpt").string(), saved);
  log_line(log, "teacher: train mIoU " + fmt(train_miou) + ", val mIoU " + fmt(val_miou));
}

void cmd_prune_train(const RunConfig& config, const std::string& teacher_ckpt,
                     const std::string& out_dir, std::ostream* log) {
  validate_config(config);
  SavedModel teacher = load_model(teacher_ckpt);
  if (teacher.gated()) throw UsageError("'" + teacher_ckpt + "' is a student checkpoint, not a teacher");
  if (!teacher.config.model.same_architecture(config.model)) {
    throw DimensionError("teacher checkpoint architecture does not match the configured model");
  }
  const fs::path dir = prepare_dir(out_dir);
  write_resolved(dir, config);
  const Dataset train = train_split(config);
  const Dataset val = val_split(config);
  const DistillConfig& dc = config.distill;

  MitModel student = dc.mode == PruneMode::kDynamic ? make_student(teacher.model, config.seed)
                                                    : teacher.model.clone();
  SavedModel saved{config, student, "student", dc.mode, 1.0 - dc.target_sparsity, {}};
  const bool dynamic = dc.mode == PruneMode::kDynamic;
  const double mass_init = dynamic ? mean_gate_mass(student, val, saved.keep_fraction) : 0.0;

  std::ofstream loss = open_out(dir / "loss.csv");
  write_loss_csv_header(loss);
  StudentResult result = train_two_stage(
      teacher.model, student, train, dc, config.seed,
      [&](const LossReport& r) { write_loss_csv_row(loss, r); },
      [&](const std::string& stage) {
        SavedModel snapshot = saved;
        snapshot.model = student;
        save_model((dir / ("student_" + stage + ".ckpt")).string(), snapshot);
      });
  saved.model = student;
  saved.static_masks = result.static_masks;
  save_model((dir / "student.ckpt").string(), saved);

  auto gater = saved.make_gater();
  const double val_miou = evaluate_miou(student, val, gater.get());
  const double train_miou = evaluate_miou(student, train, gater.get());
  const double teacher_miou = evaluate_miou(teacher.model, val);
  Metrics metrics = {{"mode", to_string(dc.mode)},
                     {"kd", to_string(dc.kd)},
                     {"anneal", dc.anneal ? "on" : "off"},
                     {"target_sparsity", fmt(dc.target_sparsity)},
                     {"keep_fraction", fmt(saved.keep_fraction)},
                     {"teacher_val_miou", fmt(teacher_miou)},
                     {"train_miou", fmt(train_miou)},
                     {"val_miou", fmt(val_miou)}};
  if (dynamic) {
    metrics.push_back({"gate_mass_init", fmt(mass_init)});
    metrics.push_back({"gate_mass_final", fmt(mean_gate_mass(student, val, saved.keep_fraction))});
    write_gate_summary(dir / "gate_stats.csv", count_gate_activations(student, val, saved.keep_fraction),
                       saved.keep_fraction);
  }
  write_metrics(dir / "metrics.csv", metrics);
  write_gate_log(dir / "gates.csv", saved, val);
  log_line(log, std::string("student (") + to_string(dc.mode) + ", kd " + to_string(dc.kd) + ", anneal " +
                    (dc.anneal ? "on" : "off") + "): val mIoU " + fmt(val_miou) + ", teacher " +
                    fmt(teacher_miou));
}

void cmd_analyze(const std::string& ckpt, const AnalyzeOptions& options, const std::string& out_dir,
                 std::ostream* log) {
  SavedModel m = load_model(ckpt);
  const int64_t samples = options.samples > 0 ? options.samples : m.config.analysis.samples;
  const Dataset data = analysis_data(m, options.data_dir, samples);
  auto gater = m.make_gater();
  const NeuronStats stats = collect_neuron_stats(m.model, data, options.layer, gater.get());

  auto [median_default, range_default] = default_thresholds(stats);
  double median_thresh = options.median_thresh > 0 ? options.median_thresh : m.config.analysis.median_thresh;
  double range_thresh = options.range_thresh > 0 ? options.range_thresh : m.config.analysis.range_thresh;
  // A degenerate layer (all magnitudes equal) has zero spread; keep the
  // threshold positive so every neuron still gets a type.
  if (!(median_thresh > 0)) median_thresh = std::max(median_default, 1e-12);
  if (!(range_thresh > 0)) range_thresh = std::max(range_default, 1e-12);
  const NeuronTypes types = classify_neurons(stats, median_thresh, range_thresh);

  const fs::path dir = prepare_dir(out_dir);
  RunConfig resolved = m.config;
  resolved.analysis.median_thresh = median_thresh;
  resolved.analysis.range_thresh = range_thresh;
  resolved.analysis.samples = static_cast<int64_t>(data.size());
  write_resolved(dir, resolved);
  {
    std::ofstream out = open_out(dir / "stats.csv");
    write_stats_csv(out, stats, types);
  }
  int64_t n1 = 0, n2 = 0, n3 = 0;
  for (NeuronType t : types.types) {
    n1 += t == NeuronType::kTypeI;
    n2 += t == NeuronType::kTypeII;
    n3 += t == NeuronType::kTypeIII;
  }
  write_metrics(dir / "types.csv", {{"layer", options.layer},
                                    {"instances", std::to_string(stats.instance_count)},
                                    {"median_thresh", fmt(median_thresh)},
                                    {"range_thresh", fmt(range_thresh)},
                                    {"type_i", std::to_string(n1)},
                                    {"type_ii", std::to_string(n2)},
                                    {"type_iii", std::to_string(n3)}});
  if (m.gated() && m.mode == PruneMode::kDynamic) {
    std::ofstream out = open_out(dir / "counts.csv");
    write_counts_csv(out, count_gate_activations(m.model, data, m.keep_fraction));
  }
  log_line(log, options.layer + ": " + std::to_string(n1) + " type I, " + std::to_string(n2) +
                    " type II, " + std::to_string(n3) + " type III over " +
                    std::to_string(stats.instance_count) + " instances");
}

KeepProfile load_keep_profile(const std::string& path, double default_keep) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read keep profile '" + path + "'");
  KeepProfile p;
  p.default_keep = default_keep;
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const auto eq = line.find('=');
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    if (eq == std::string::npos) throw UsageError("keep profile line '" + line + "' lacks '='");
    std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    auto strip = [](std::string& s) {
      s.erase(0, s.find_first_not_of(" \t\r"));
      s.erase(s.find_last_not_of(" \t\r") + 1);
    };
    strip(key);
    strip(value);
    char* end = nullptr;
    const double keep = std::strtod(value.c_str(), &end);
    if (value.empty() || *end != '\0') throw UsageError("keep profile value for '" + key + "' is not a number");
    p.per_layer[key] = keep;
  }
  return p;
}

FlopsReport cmd_flops(const RunConfig& config, const KeepProfile& profile, const std::string& out_dir,
                      std::ostream* log) {
  config.model.validate();
  const FlopsReport report = flops_report(config.model, profile);
  if (!out_dir.empty()) {
    const fs::path dir = prepare_dir(out_dir);
    write_resolved(dir, config);
    {
      std::ofstream out = open_out(dir / "flops.csv");
      write_flops_csv(out, report);
    }
    std::ofstream txt = open_out(dir / "flops.txt");
    write_flops_summary(txt, report, config.model);
  }
  if (log) write_flops_summary(*log, report, config.model);
  return report;
}

double cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
                std::ostream* log) {
  SavedModel m = load_model(ckpt);
  const Dataset data = data_dir.empty() ? val_split(m.config) : read_dataset(data_dir);
  auto gater = m.make_gater();
  auto* dyn = dynamic_cast<DynamicGater*>(gater.get());
  ConfusionMatrix cm(m.config.model.num_classes);
  {
    NoGradGuard no_grad;
    for (const SegSample& s : data) {
      if (dyn) dyn->clear();
      cm.add(predict_labels(segment(m.model, s.image, gater.get()), m.config.model), s.label);
    }
  }
  const double miou = cm.mean_iou();
  if (!out_dir.empty()) {
    const fs::path dir = prepare_dir(out_dir);
    write_resolved(dir, m.config);
    Metrics metrics = {{"samples", std::to_string(data.size())}, {"miou", fmt(miou)}};
    const auto per_class = cm.per_class_iou();
    for (size_t c = 0; c < per_class.size(); ++c) {
      metrics.push_back({"iou_class_" + std::to_string(c), fmt(per_class[c])});
    }
    write_metrics(dir / "metrics.csv", metrics);
  }
  log_line(log, "mIoU " + fmt(miou) + " over " + std::to_string(data.size()) + " samples");
  return miou;
}

void cmd_gen_data(const RunConfig& config, const std::string& split, const std::string& out_dir) {
  validate_config(config);
  Dataset data;
  if (split == "train") {
    data = train_split(config);
  } else if (split == "val") {
    data = val_split(config);
  } else {
    throw UsageError("unknown split '" + split + "' (expected train or val)");
  }
  prepare_dir(out_dir);
  write_dataset(out_dir, data);
}

}  // namespace dynaseg
