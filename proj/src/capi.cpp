#include "dynaseg/dynaseg.h"

#include <cstring>
#include <iostream>
#include <memory>
#include <new>
#include <string>

#include "dynaseg/errors.hpp"
#include "dynaseg/run.hpp"

struct dsg_run_config {
  dynaseg::RunConfig value;
};

struct dsg_model {
  dynaseg::SavedModel saved;
};

struct dsg_flops_report {
  dynaseg::FlopsReport value;
};

namespace {

thread_local std::string g_last_error;
bool g_verbose = false;

dsg_status fail(dsg_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename F>
dsg_status guarded(F&& body) {
  g_last_error.clear();
  try {
    body();
    return DSG_OK;
  } catch (const dynaseg::Error& e) {
    return fail(static_cast<dsg_status>(e.kind()), e.what());
  } catch (const std::bad_alloc&) {
    return fail(DSG_ERR_DATA, "out of memory");
  } catch (const std::exception& e) {
    return fail(DSG_ERR_DATA, e.what());
  }
}

std::ostream* log_stream() { return g_verbose ? &std::cerr : nullptr; }

std::string str_or(const char* s, const std::string& fallback = {}) { return s ? s : fallback; }

void require(const void* p, const char* what) {
  if (!p) throw dynaseg::UsageError(std::string(what) + " must not be null");
}

}  // namespace

extern "C" {

const char* dsg_version(void) { return "0.1.0"; }

const char* dsg_last_error(void) { return g_last_error.c_str(); }

void dsg_set_verbose(int enabled) { g_verbose = enabled != 0; }

dsg_status dsg_config_default(dsg_run_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = new dsg_run_config{};
  });
}

dsg_status dsg_config_load(const char* path, dsg_run_config** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto cfg = std::make_unique<dsg_run_config>();
    cfg->value = dynaseg::load_config(path);
    *out = cfg.release();
  });
}

dsg_status dsg_config_parse(const char* text, dsg_run_config** out) {
  return guarded([&] {
    require(text, "text");
    require(out, "out");
    auto cfg = std::make_unique<dsg_run_config>();
    cfg->value = dynaseg::parse_config(text);
    *out = cfg.release();
  });
}

dsg_status dsg_config_set(dsg_run_config* cfg, const char* key, const char* value) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    require(value, "value");
    dynaseg::set_config_value(cfg->value, key, value);
  });
}

dsg_status dsg_config_get(const dsg_run_config* cfg, const char* key, char* buf, size_t cap,
                          size_t* needed) {
  return guarded([&] {
    require(cfg, "cfg");
    require(key, "key");
    const std::string text = dynaseg::get_config_value(cfg->value, key);
    if (needed) *needed = text.size() + 1;
    if (buf && cap >= text.size() + 1) std::memcpy(buf, text.c_str(), text.size() + 1);
  });
}

dsg_status dsg_config_serialize(const dsg_run_config* cfg, char* buf, size_t cap, size_t* needed) {
  return guarded([&] {
    require(cfg, "cfg");
    const std::string text = dynaseg::serialize_config(cfg->value);
    if (needed) *needed = text.size() + 1;
    if (buf && cap >= text.size() + 1) std::memcpy(buf, text.c_str(), text.size() + 1);
  });
}

void dsg_config_free(dsg_run_config* cfg) { delete cfg; }

dsg_status dsg_train_teacher(const dsg_run_config* cfg, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    dynaseg::cmd_train_teacher(cfg->value, str_or(out_dir), log_stream());
  });
}

void dsg_prune_options_init(dsg_prune_options* opts) {
  if (!opts) return;
  opts->mode = nullptr;
  opts->kd = nullptr;
  opts->anneal = -1;
  opts->sparsity = -1.0;
}

dsg_status dsg_prune_train(const dsg_run_config* cfg, const char* teacher_ckpt,
                           const dsg_prune_options* opts, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    require(teacher_ckpt, "teacher_ckpt");
    dynaseg::RunConfig run = cfg->value;
    if (opts) {
      if (opts->mode) run.distill.mode = dynaseg::parse_prune_mode(opts->mode);
      if (opts->kd) run.distill.kd = dynaseg::parse_kd_mode(opts->kd);
      if (opts->anneal >= 0) run.distill.anneal = opts->anneal != 0;
      if (opts->sparsity >= 0.0) run.distill.target_sparsity = opts->sparsity;
    }
    dynaseg::cmd_prune_train(run, teacher_ckpt, str_or(out_dir), log_stream());
  });
}

void dsg_analyze_options_init(dsg_analyze_options* opts) {
  if (!opts) return;
  opts->layer = "s1.b1.ffn";
  opts->data_dir = nullptr;
  opts->median_thresh = 0.0;
  opts->range_thresh = 0.0;
  opts->samples = 0;
}

dsg_status dsg_analyze(const char* ckpt, const dsg_analyze_options* opts, const char* out_dir) {
  return guarded([&] {
    require(ckpt, "ckpt");
    dynaseg::AnalyzeOptions o;
    if (opts) {
      o.layer = str_or(opts->layer, o.layer);
      o.data_dir = str_or(opts->data_dir);
      o.median_thresh = opts->median_thresh;
      o.range_thresh = opts->range_thresh;
      o.samples = opts->samples;
    }
    dynaseg::cmd_analyze(ckpt, o, str_or(out_dir), log_stream());
  });
}

dsg_status dsg_flops(const dsg_run_config* cfg, double keep, const char* profile_path,
                     const char* out_dir, dsg_flops_report** report) {
  return guarded([&] {
    require(cfg, "cfg");
    dynaseg::KeepProfile profile;
    profile.default_keep = keep;
    if (profile_path) profile = dynaseg::load_keep_profile(profile_path, keep);
    auto result = std::make_unique<dsg_flops_report>();
    result->value = dynaseg::cmd_flops(cfg->value, profile, str_or(out_dir), log_stream());
    if (report) *report = result.release();
  });
}

size_t dsg_flops_report_rows(const dsg_flops_report* report) {
  return report ? report->value.rows.size() : 0;
}

dsg_status dsg_flops_report_row(const dsg_flops_report* report, size_t index, const char** layer,
                                int64_t* dense_flops, int64_t* gated_flops, int64_t* predictor_flops) {
  return guarded([&] {
    require(report, "report");
    if (index >= report->value.rows.size()) throw dynaseg::UsageError("row index out of range");
    const dynaseg::FlopsRow& r = report->value.rows[index];
    if (layer) *layer = r.layer.c_str();
    if (dense_flops) *dense_flops = r.dense_flops;
    if (gated_flops) *gated_flops = r.gated_flops;
    if (predictor_flops) *predictor_flops = r.predictor_flops;
  });
}

dsg_status dsg_flops_report_totals(const dsg_flops_report* report, int64_t* dense_flops,
                                   int64_t* total_flops, int64_t* dense_macs, int64_t* total_macs) {
  return guarded([&] {
    require(report, "report");
    const dynaseg::FlopsReport& r = report->value;
    if (dense_flops) *dense_flops = r.dense_flops;
    if (total_flops) *total_flops = r.total_flops();
    if (dense_macs) *dense_macs = r.dense_macs;
    if (total_macs) *total_macs = r.total_macs();
  });
}

void dsg_flops_report_free(dsg_flops_report* report) { delete report; }

dsg_status dsg_eval(const char* ckpt, const char* data_dir, const char* out_dir, double* miou) {
  return guarded([&] {
    require(ckpt, "ckpt");
    const double v = dynaseg::cmd_eval(ckpt, str_or(data_dir), str_or(out_dir), log_stream());
    if (miou) *miou = v;
  });
}

dsg_status dsg_gen_data(const dsg_run_config* cfg, const char* split, const char* out_dir) {
  return guarded([&] {
    require(cfg, "cfg");
    require(split, "split");
    dynaseg::cmd_gen_data(cfg->value, split, str_or(out_dir));
  });
}

dsg_status dsg_model_load(const char* path, dsg_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    auto m = std::make_unique<dsg_model>();
    m->saved = dynaseg::load_model(path);
    *out = m.release();
  });
}

void dsg_model_free(dsg_model* model) { delete model; }

int64_t dsg_model_num_params(const dsg_model* model) {
  return model ? model->saved.model.num_params() : 0;
}

dsg_status dsg_model_config(const dsg_model* model, dsg_run_config** out) {
  return guarded([&] {
    require(model, "model");
    require(out, "out");
    *out = new dsg_run_config{model->saved.config};
  });
}

double dsg_model_keep_fraction(const dsg_model* model) {
  return model && model->saved.gated() ? model->saved.keep_fraction : 1.0;
}

dsg_status dsg_model_input_shape(const dsg_model* model, int64_t* channels, int64_t* height,
                                 int64_t* width) {
  return guarded([&] {
    require(model, "model");
    const dynaseg::MitConfig& c = model->saved.config.model;
    if (channels) *channels = c.in_channels;
    if (height) *height = c.input_height;
    if (width) *width = c.input_width;
  });
}

dsg_status dsg_model_predict(const dsg_model* model, const float* image, size_t image_len,
                             uint8_t* labels, size_t labels_len) {
  return guarded([&] {
    require(model, "model");
    require(image, "image");
    require(labels, "labels");
    const dynaseg::MitConfig& c = model->saved.config.model;
    const auto pixels = static_cast<size_t>(c.input_height) * static_cast<size_t>(c.input_width);
    if (image_len != pixels * static_cast<size_t>(c.in_channels)) {
      throw dynaseg::DimensionError("image buffer holds " + std::to_string(image_len) + " values, model needs " +
                                    std::to_string(pixels * c.in_channels));
    }
    if (labels_len < pixels) throw dynaseg::DimensionError("label buffer too small");
    std::vector<double> values(image, image + image_len);
    dynaseg::Tensor t = dynaseg::Tensor::from({c.in_channels, c.input_height, c.input_width}, std::move(values));
    auto gater = model->saved.make_gater();
    dynaseg::NoGradGuard no_grad;
    const auto pred = dynaseg::predict_labels(dynaseg::segment(model->saved.model, t, gater.get()), c);
    std::memcpy(labels, pred.data(), pred.size());
  });
}

}  // extern "C"
