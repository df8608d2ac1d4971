// Command-line front end; talks to the library only through the C API.
#include <cmath>
#include <cstdio>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "dynaseg/dynaseg.h"

namespace {

struct Common {
  std::string config;
  std::optional<long long> seed;
  std::optional<long long> steps;
  std::string out;
  std::vector<std::string> sets;
};

int report(dsg_status status) {
  if (status != DSG_OK) std::fprintf(stderr, "error: %s\n", dsg_last_error());
  return static_cast<int>(status);
}

class ConfigHandle {
 public:
  ~ConfigHandle() { dsg_config_free(cfg_); }
  dsg_run_config* get() const { return cfg_; }
  dsg_run_config** out() { return &cfg_; }

 private:
  dsg_run_config* cfg_ = nullptr;
};

dsg_status set_value(dsg_run_config* cfg, const std::string& key, const std::string& value) {
  return dsg_config_set(cfg, key.c_str(), value.c_str());
}

dsg_status get_int(dsg_run_config* cfg, const std::string& key, long long* out) {
  char buf[64];
  size_t needed = 0;
  const dsg_status st = dsg_config_get(cfg, key.c_str(), buf, sizeof(buf), &needed);
  if (st != DSG_OK) return st;
  *out = std::stoll(buf);
  return DSG_OK;
}

// Loads the config (or the built-in default) and applies --seed, --set.
dsg_status build_config(const Common& c, ConfigHandle& cfg) {
  dsg_status st = c.config.empty() ? dsg_config_default(cfg.out()) : dsg_config_load(c.config.c_str(), cfg.out());
  if (st != DSG_OK) return st;
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      std::fprintf(stderr, "error: --set expects section.key=value, got '%s'\n", kv.c_str());
      return DSG_ERR_USAGE;
    }
    st = set_value(cfg.get(), kv.substr(0, eq), kv.substr(eq + 1));
    if (st != DSG_OK) return st;
  }
  if (c.seed) st = set_value(cfg.get(), "run.seed", std::to_string(*c.seed));
  return st;
}

void add_common(CLI::App* app, Common& c, bool with_steps) {
  app->add_option("--config", c.config, "Run configuration file (default: built-in tiny config)");
  app->add_option("--seed", c.seed, "Run seed");
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--set", c.sets, "Override a config field, section.key=value (repeatable)");
  if (with_steps) app->add_option("--steps", c.steps, "Training steps")->check(CLI::NonNegativeNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic pruning of a tiny segmentation transformer"};
  app.require_subcommand(1);
  app.fallthrough();
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress output");

  Common teacher_args;
  auto* teacher = app.add_subcommand("train-teacher", "Train the dense teacher");
  add_common(teacher, teacher_args, true);

  Common prune_args;
  std::string teacher_ckpt, mode, kd, anneal;
  std::optional<double> sparsity;
  auto* prune = app.add_subcommand("prune-train", "Distill a pruned student from a teacher");
  add_common(prune, prune_args, true);
  prune->add_option("--teacher", teacher_ckpt, "Teacher checkpoint")->required();
  prune->add_option("--mode", mode, "dynamic or static")->check(CLI::IsMember({"dynamic", "static"}));
  prune->add_option("--kd", kd, "Distillation stages")->check(CLI::IsMember({"none", "stage1", "stage2", "both"}));
  prune->add_option("--anneal", anneal, "Sparsity annealing")->check(CLI::IsMember({"on", "off"}));
  prune->add_option("--sparsity", sparsity, "Pruned fraction r")->check(CLI::Range(0.0, 0.999999));

  std::string analyze_ckpt, analyze_out, layer = "s1.b1.ffn", analyze_data;
  double median_thresh = 0, range_thresh = 0;
  long long samples = 0;
  auto* analyze = app.add_subcommand("analyze", "Neuron statistics, types and gate activation counts");
  analyze->add_option("--checkpoint", analyze_ckpt, "Model checkpoint")->required();
  analyze->add_option("--layer", layer, "Layer id, e.g. s1.b1.ffn or s2.b1.q");
  analyze->add_option("--data", analyze_data, "Dataset directory (default: validation split)");
  analyze->add_option("--median-thresh", median_thresh, "Type threshold on the median (0: data median)");
  analyze->add_option("--range-thresh", range_thresh, "Type threshold on the IQR (0: data median)");
  analyze->add_option("--samples", samples, "Number of instances (0: configured)");
  analyze->add_option("--out", analyze_out, "Output directory")->required();

  std::string flops_config, flops_ckpt, flops_out, profile;
  std::optional<double> keep;
  auto* flops = app.add_subcommand("flops", "FLOPs and MACs per layer");
  flops->add_option("--config", flops_config, "Run configuration file");
  flops->add_option("--checkpoint", flops_ckpt, "Use the architecture and keep fraction of a checkpoint");
  flops->add_option("--keep", keep, "Keep fraction for every gated pair")->check(CLI::Range(1e-9, 1.0));
  flops->add_option("--profile", profile, "Per-pair keep fractions, 'layer = keep' lines");
  flops->add_option("--out", flops_out, "Output directory");
  flops->get_option("--config")->excludes("--checkpoint");

  std::string eval_ckpt, eval_data, eval_out;
  auto* eval = app.add_subcommand("eval", "Dataset mIoU of a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required();
  eval->add_option("--data", eval_data, "Dataset directory (default: validation split)");
  eval->add_option("--out", eval_out, "Output directory");

  Common gen_args;
  std::string split = "val";
  auto* gen = app.add_subcommand("gen-data", "Write the synthetic dataset as sample files");
  add_common(gen, gen_args, false);
  gen->add_option("--split", split, "train or val")->check(CLI::IsMember({"train", "val"}));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }
  dsg_set_verbose(quiet ? 0 : 1);

  if (teacher->parsed()) {
    ConfigHandle cfg;
    dsg_status st = build_config(teacher_args, cfg);
    if (st == DSG_OK && teacher_args.steps) st = set_value(cfg.get(), "teacher.steps", std::to_string(*teacher_args.steps));
    if (st == DSG_OK) st = dsg_train_teacher(cfg.get(), teacher_args.out.c_str());
    return report(st);
  }

  if (prune->parsed()) {
    ConfigHandle cfg;
    dsg_status st = build_config(prune_args, cfg);
    if (st == DSG_OK && prune_args.steps) {
      // Split the budget in the configured stage1:stage2 proportion.
      long long s1 = 0, s2 = 0;
      st = get_int(cfg.get(), "distill.stage1_steps", &s1);
      if (st == DSG_OK) st = get_int(cfg.get(), "distill.stage2_steps", &s2);
      const long long total = *prune_args.steps;
      const long long new_s1 = s1 + s2 > 0 ? static_cast<long long>(std::llround(
                                                 static_cast<double>(total) * s1 / static_cast<double>(s1 + s2)))
                                           : 0;
      if (st == DSG_OK) st = set_value(cfg.get(), "distill.stage1_steps", std::to_string(new_s1));
      if (st == DSG_OK) st = set_value(cfg.get(), "distill.stage2_steps", std::to_string(total - new_s1));
    }
    if (st != DSG_OK) return report(st);
    dsg_prune_options opts;
    dsg_prune_options_init(&opts);
    if (!mode.empty()) opts.mode = mode.c_str();
    if (!kd.empty()) opts.kd = kd.c_str();
    if (!anneal.empty()) opts.anneal = anneal == "on" ? 1 : 0;
    if (sparsity) opts.sparsity = *sparsity;
    return report(dsg_prune_train(cfg.get(), teacher_ckpt.c_str(), &opts, prune_args.out.c_str()));
  }

  if (analyze->parsed()) {
    dsg_analyze_options opts;
    dsg_analyze_options_init(&opts);
    opts.layer = layer.c_str();
    opts.data_dir = analyze_data.empty() ? nullptr : analyze_data.c_str();
    opts.median_thresh = median_thresh;
    opts.range_thresh = range_thresh;
    opts.samples = samples;
    return report(dsg_analyze(analyze_ckpt.c_str(), &opts, analyze_out.c_str()));
  }

  if (flops->parsed()) {
    ConfigHandle cfg;
    double k = keep.value_or(1.0);
    dsg_status st = DSG_OK;
    if (!flops_ckpt.empty()) {
      dsg_model* model = nullptr;
      st = dsg_model_load(flops_ckpt.c_str(), &model);
      if (st == DSG_OK) {
        if (!keep) k = dsg_model_keep_fraction(model);
        st = dsg_model_config(model, cfg.out());
        dsg_model_free(model);
      }
    } else if (!flops_config.empty()) {
      st = dsg_config_load(flops_config.c_str(), cfg.out());
    } else {
      st = dsg_config_default(cfg.out());
    }
    if (st == DSG_OK) {
      st = dsg_flops(cfg.get(), k, profile.empty() ? nullptr : profile.c_str(),
                     flops_out.empty() ? nullptr : flops_out.c_str(), nullptr);
    }
    return report(st);
  }

  if (eval->parsed()) {
    double miou = 0;
    return report(dsg_eval(eval_ckpt.c_str(), eval_data.empty() ? nullptr : eval_data.c_str(),
                           eval_out.empty() ? nullptr : eval_out.c_str(), &miou));
  }

  if (gen->parsed()) {
    ConfigHandle cfg;
    dsg_status st = build_config(gen_args, cfg);
    if (st == DSG_OK) st = dsg_gen_data(cfg.get(), split.c_str(), gen_args.out.c_str());
    return report(st);
  }
  return 1;
}
