#pragma once

#include <map>
#include <ostream>
#include <string>

#include "dynaseg/analysis.hpp"
#include "dynaseg/config.hpp"
#include "dynaseg/distill.hpp"

namespace dynaseg {

// A model checkpoint with the metadata needed to rebuild its inference path.
struct SavedModel {
  RunConfig config;
  MitModel model;
  std::string kind = "teacher";  // "teacher" or "student"
  PruneMode mode = PruneMode::kDynamic;
  double keep_fraction = 1.0;
  std::map<std::string, StaticMask> static_masks;

  bool gated() const { return kind == "student"; }
  // Null for a dense teacher.
  std::unique_ptr<Gater> make_gater() const;
};

void save_model(const std::string& path, const SavedModel& saved);
// Throws IoError for unreadable files and DimensionError when the stored
// tensors do not match the embedded architecture.
SavedModel load_model(const std::string& path);

// Deterministic splits: validation samples follow the training indices.
Dataset train_split(const RunConfig& config);
Dataset val_split(const RunConfig& config);

void cmd_train_teacher(const RunConfig& config, const std::string& out_dir, std::ostream* log = nullptr);

// Overrides for the ablation cell are applied to `config` by the caller.
void cmd_prune_train(const RunConfig& config, const std::string& teacher_ckpt,
                     const std::string& out_dir, std::ostream* log = nullptr);

struct AnalyzeOptions {
  std::string layer = "s1.b1.ffn";
  std::string data_dir;  // empty: regenerate the checkpoint's validation split
  double median_thresh = 0.0;  // 0 selects the data-driven default
  double range_thresh = 0.0;
  int64_t samples = 0;  // 0: use the configured analysis sample count
};

void cmd_analyze(const std::string& ckpt, const AnalyzeOptions& options, const std::string& out_dir,
                 std::ostream* log = nullptr);

// Reads "layer = keep" lines ('#' comments allowed).
KeepProfile load_keep_profile(const std::string& path, double default_keep);

FlopsReport cmd_flops(const RunConfig& config, const KeepProfile& profile, const std::string& out_dir,
                      std::ostream* log = nullptr);

// Returns the dataset-level mIoU.
double cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& out_dir,
                std::ostream* log = nullptr);

// Writes the configured train or val split as sample files.
void cmd_gen_data(const RunConfig& config, const std::string& split, const std::string& out_dir);

}  // namespace dynaseg
