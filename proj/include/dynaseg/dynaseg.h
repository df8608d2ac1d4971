/* C interface to the dynaseg library.
 *
 * Every fallible call returns a dsg_status; on failure dsg_last_error()
 * describes the problem (thread-local, valid until the next call on the same
 * thread). Handles are opaque and owned by the caller once returned. */
#ifndef DYNASEG_DYNASEG_H
#define DYNASEG_DYNASEG_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#  if defined(DYNASEG_BUILDING)
#    define DSG_API __declspec(dllexport)
#  else
#    define DSG_API __declspec(dllimport)
#  endif
#else
#  define DSG_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum dsg_status {
  DSG_OK = 0,
  DSG_ERR_USAGE = 1,   /* bad arguments or configuration */
  DSG_ERR_DATA = 2,    /* shape, file or dataset problems */
  DSG_ERR_NUMERIC = 3  /* training diverged */
} dsg_status;

typedef struct dsg_run_config dsg_run_config;
typedef struct dsg_model dsg_model;
typedef struct dsg_flops_report dsg_flops_report;

DSG_API const char* dsg_version(void);
DSG_API const char* dsg_last_error(void);

/* Progress lines go to stderr when enabled (default off). */
DSG_API void dsg_set_verbose(int enabled);

/* ---- run configuration ---- */
DSG_API dsg_status dsg_config_default(dsg_run_config** out);
DSG_API dsg_status dsg_config_load(const char* path, dsg_run_config** out);
DSG_API dsg_status dsg_config_parse(const char* text, dsg_run_config** out);
/* key is "section.field", e.g. "sparsity.target". */
DSG_API dsg_status dsg_config_set(dsg_run_config* cfg, const char* key, const char* value);
/* Copies one field's value as text into buf (same size protocol as below). */
DSG_API dsg_status dsg_config_get(const dsg_run_config* cfg, const char* key, char* buf, size_t cap,
                                  size_t* needed);
/* Copies the serialized config into buf (NUL-terminated) if it fits;
 * *needed receives the required size including the terminator. */
DSG_API dsg_status dsg_config_serialize(const dsg_run_config* cfg, char* buf, size_t cap, size_t* needed);
DSG_API void dsg_config_free(dsg_run_config* cfg);

/* ---- commands ---- */
DSG_API dsg_status dsg_train_teacher(const dsg_run_config* cfg, const char* out_dir);

/* Fields left NULL (or negative for numbers) keep the config's value. */
typedef struct dsg_prune_options {
  const char* mode;  /* "dynamic" | "static" */
  const char* kd;    /* "none" | "stage1" | "stage2" | "both" */
  int anneal;        /* 1 on, 0 off, -1 from config */
  double sparsity;   /* pruned fraction r in [0, 1) */
} dsg_prune_options;

DSG_API void dsg_prune_options_init(dsg_prune_options* opts);
DSG_API dsg_status dsg_prune_train(const dsg_run_config* cfg, const char* teacher_ckpt,
                                   const dsg_prune_options* opts, const char* out_dir);

typedef struct dsg_analyze_options {
  const char* layer;     /* e.g. "s1.b1.ffn" */
  const char* data_dir;  /* NULL: the checkpoint's validation split */
  double median_thresh;  /* <= 0: data-driven default */
  double range_thresh;   /* <= 0: data-driven default */
  int64_t samples;       /* <= 0: configured sample count */
} dsg_analyze_options;

DSG_API void dsg_analyze_options_init(dsg_analyze_options* opts);
DSG_API dsg_status dsg_analyze(const char* ckpt, const dsg_analyze_options* opts, const char* out_dir);

/* keep applies to every gated pair; profile_path (may be NULL) overrides
 * individual pairs. out_dir may be NULL to skip file output; report may be
 * NULL when the caller only wants files. */
DSG_API dsg_status dsg_flops(const dsg_run_config* cfg, double keep, const char* profile_path,
                             const char* out_dir, dsg_flops_report** report);
DSG_API size_t dsg_flops_report_rows(const dsg_flops_report* report);
DSG_API dsg_status dsg_flops_report_row(const dsg_flops_report* report, size_t index, const char** layer,
                                        int64_t* dense_flops, int64_t* gated_flops,
                                        int64_t* predictor_flops);
DSG_API dsg_status dsg_flops_report_totals(const dsg_flops_report* report, int64_t* dense_flops,
                                           int64_t* total_flops, int64_t* dense_macs, int64_t* total_macs);
DSG_API void dsg_flops_report_free(dsg_flops_report* report);

/* data_dir NULL: the checkpoint's validation split. out_dir may be NULL. */
DSG_API dsg_status dsg_eval(const char* ckpt, const char* data_dir, const char* out_dir, double* miou);

/* split is "train" or "val". */
DSG_API dsg_status dsg_gen_data(const dsg_run_config* cfg, const char* split, const char* out_dir);

/* ---- inference ---- */
DSG_API dsg_status dsg_model_load(const char* path, dsg_model** out);
DSG_API void dsg_model_free(dsg_model* model);
DSG_API int64_t dsg_model_num_params(const dsg_model* model);
/* Copy of the run configuration embedded in the checkpoint. */
DSG_API dsg_status dsg_model_config(const dsg_model* model, dsg_run_config** out);
/* Keep fraction the model was trained for (1 for a dense teacher). */
DSG_API double dsg_model_keep_fraction(const dsg_model* model);
DSG_API dsg_status dsg_model_input_shape(const dsg_model* model, int64_t* channels, int64_t* height,
                                         int64_t* width);
/* image: channels*height*width floats in [0, 1], channel-major.
 * labels: height*width class ids. */
DSG_API dsg_status dsg_model_predict(const dsg_model* model, const float* image, size_t image_len,
                                     uint8_t* labels, size_t labels_len);

#ifdef __cplusplus
}
#endif

#endif /* DYNASEG_DYNASEG_H */
