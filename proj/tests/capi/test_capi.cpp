#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include "dynaseg/dynaseg.h"

namespace fs = std::filesystem;

namespace {

// A small architecture so training through the C interface takes milliseconds.
const char* kMicroConfig = R"(
[model]
decoder_dim = 8
num_classes = 3
[stage1]
hidden_dim = 4
reduction = 2
ffn_expansion = 2
[stage2]
hidden_dim = 8
num_heads = 2
reduction = 2
ffn_expansion = 2
[stage3]
hidden_dim = 8
num_heads = 2
ffn_expansion = 2
[stage4]
hidden_dim = 8
num_heads = 2
ffn_expansion = 2
[data]
train_samples = 8
val_samples = 4
[teacher]
steps = 10
[distill]
stage1_steps = 2
stage2_steps = 4
[analysis]
samples = 4
)";

std::string get(const dsg_run_config* cfg, const char* key) {
  size_t needed = 0;
  REQUIRE(dsg_config_get(cfg, key, nullptr, 0, &needed) == DSG_OK);
  std::string buf(needed, '\0');
  REQUIRE(dsg_config_get(cfg, key, buf.data(), buf.size(), &needed) == DSG_OK);
  buf.resize(needed - 1);
  return buf;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) : path(fs::temp_directory_path() / name) { fs::remove_all(path); }
  ~TempDir() { fs::remove_all(path); }
  std::string sub(const char* s) const { return (path / s).string(); }
};

}  // namespace

TEST_CASE("version and error reporting") {
  CHECK(std::strlen(dsg_version()) > 0);
  dsg_run_config* cfg = nullptr;
  CHECK(dsg_config_load("/nonexistent/dir/x.cfg", &cfg) == DSG_ERR_USAGE);
  CHECK(cfg == nullptr);
  CHECK(std::strlen(dsg_last_error()) > 0);
  CHECK(dsg_config_parse("[model]\nnum_classes = zero\n", &cfg) == DSG_ERR_USAGE);
  CHECK(std::string(dsg_last_error()).find("num_classes") != std::string::npos);
  CHECK(dsg_config_default(nullptr) == DSG_ERR_USAGE);
}

TEST_CASE("config get, set and serialize") {
  dsg_run_config* cfg = nullptr;
  REQUIRE(dsg_config_default(&cfg) == DSG_OK);
  CHECK(get(cfg, "sparsity.target") == "0.5");
  CHECK(dsg_config_set(cfg, "sparsity.target", "0.25") == DSG_OK);
  CHECK(get(cfg, "sparsity.target") == "0.25");
  CHECK(dsg_config_set(cfg, "sparsity.bogus", "1") == DSG_ERR_USAGE);
  CHECK(dsg_config_set(cfg, "distill.kd", "sometimes") == DSG_ERR_USAGE);

  size_t needed = 0;
  CHECK(dsg_config_serialize(cfg, nullptr, 0, &needed) == DSG_OK);
  REQUIRE(needed > 1);
  std::vector<char> small(4, 'x');
  size_t needed_small = 0;
  dsg_config_serialize(cfg, small.data(), small.size(), &needed_small);
  CHECK(needed_small == needed);
  std::vector<char> buf(needed);
  REQUIRE(dsg_config_serialize(cfg, buf.data(), buf.size(), &needed) == DSG_OK);
  CHECK(buf.back() == '\0');

  dsg_run_config* back = nullptr;
  REQUIRE(dsg_config_parse(buf.data(), &back) == DSG_OK);
  CHECK(get(back, "sparsity.target") == "0.25");
  dsg_config_free(back);
  dsg_config_free(cfg);
  dsg_config_free(nullptr);
}

TEST_CASE("flops report") {
  dsg_run_config* cfg = nullptr;
  REQUIRE(dsg_config_default(&cfg) == DSG_OK);
  dsg_flops_report* dense = nullptr;
  dsg_flops_report* half = nullptr;
  REQUIRE(dsg_flops(cfg, 1.0, nullptr, nullptr, &dense) == DSG_OK);
  REQUIRE(dsg_flops(cfg, 0.5, nullptr, nullptr, &half) == DSG_OK);
  const size_t rows = dsg_flops_report_rows(dense);
  REQUIRE(rows > 12u);

  int64_t d = 0, t = 0, dm = 0, tm = 0;
  REQUIRE(dsg_flops_report_totals(dense, &d, &t, &dm, &tm) == DSG_OK);
  CHECK(d == 798460);
  CHECK(t == d);
  CHECK(dm == 323136);
  int64_t hd = 0, ht = 0;
  REQUIRE(dsg_flops_report_totals(half, &hd, &ht, &dm, &tm) == DSG_OK);
  CHECK(hd == d);
  CHECK(ht < d);

  const char* layer = nullptr;
  int64_t rd = 0, rg = 0, rp = 0;
  size_t found = rows;
  for (size_t i = 0; i < rows; ++i) {
    REQUIRE(dsg_flops_report_row(half, i, &layer, &rd, &rg, &rp) == DSG_OK);
    if (std::string(layer) == "s1.b1.qk") found = i;
  }
  REQUIRE(found < rows);
  REQUIRE(dsg_flops_report_row(half, found, &layer, &rd, &rg, &rp) == DSG_OK);
  CHECK(rg < rd);
  CHECK(rp > 0);
  CHECK(dsg_flops_report_row(half, rows, &layer, &rd, &rg, &rp) == DSG_ERR_USAGE);
  CHECK(dsg_flops(cfg, 0.0, nullptr, nullptr, &half) == DSG_ERR_USAGE);
  dsg_flops_report_free(dense);
  dsg_flops_report_free(half);
  dsg_config_free(cfg);
}

TEST_CASE("train, prune, analyze and predict") {
  TempDir tmp("dynaseg_capi");
  dsg_run_config* cfg = nullptr;
  REQUIRE(dsg_config_parse(kMicroConfig, &cfg) == DSG_OK);
  REQUIRE(dsg_train_teacher(cfg, tmp.sub("teacher").c_str()) == DSG_OK);
  const std::string teacher = tmp.sub("teacher/teacher.ckpt");

  dsg_prune_options opts;
  dsg_prune_options_init(&opts);
  CHECK(opts.mode == nullptr);
  CHECK(opts.anneal == -1);
  opts.sparsity = 0.5;
  REQUIRE(dsg_prune_train(cfg, teacher.c_str(), &opts, tmp.sub("student").c_str()) == DSG_OK);
  const std::string student = tmp.sub("student/student.ckpt");
  opts.mode = "sideways";
  CHECK(dsg_prune_train(cfg, teacher.c_str(), &opts, tmp.sub("bad").c_str()) == DSG_ERR_USAGE);

  dsg_analyze_options aopts;
  dsg_analyze_options_init(&aopts);
  aopts.layer = "s1.b1.ffn";
  CHECK(dsg_analyze(student.c_str(), &aopts, tmp.sub("an").c_str()) == DSG_OK);
  CHECK(fs::exists(tmp.path / "an" / "counts.csv"));

  double miou = -1;
  CHECK(dsg_eval(student.c_str(), nullptr, nullptr, &miou) == DSG_OK);
  CHECK(miou >= 0.0);
  CHECK(miou <= 1.0);
  CHECK(dsg_eval("/nonexistent.ckpt", nullptr, nullptr, &miou) == DSG_ERR_DATA);

  dsg_model* model = nullptr;
  REQUIRE(dsg_model_load(student.c_str(), &model) == DSG_OK);
  CHECK(dsg_model_num_params(model) > 0);
  CHECK(dsg_model_keep_fraction(model) == 0.5);
  int64_t c = 0, h = 0, w = 0;
  REQUIRE(dsg_model_input_shape(model, &c, &h, &w) == DSG_OK);
  CHECK(c == 3);
  CHECK(h == 32);
  CHECK(w == 32);
  std::vector<float> image(static_cast<size_t>(c * h * w), 0.5f);
  std::vector<uint8_t> labels(static_cast<size_t>(h * w), 255);
  REQUIRE(dsg_model_predict(model, image.data(), image.size(), labels.data(), labels.size()) == DSG_OK);
  for (uint8_t l : labels) CHECK(l < 3);
  CHECK(dsg_model_predict(model, image.data(), image.size() - 1, labels.data(), labels.size()) ==
        DSG_ERR_DATA);

  dsg_run_config* embedded = nullptr;
  REQUIRE(dsg_model_config(model, &embedded) == DSG_OK);
  CHECK(get(embedded, "model.num_classes") == "3");
  dsg_config_free(embedded);
  dsg_model_free(model);

  CHECK(dsg_gen_data(cfg, "val", tmp.sub("val").c_str()) == DSG_OK);
  CHECK(dsg_gen_data(cfg, "holdout", tmp.sub("x").c_str()) == DSG_ERR_USAGE);
  dsg_config_free(cfg);
}

TEST_CASE("null handles are rejected") {
  CHECK(dsg_train_teacher(nullptr, "/tmp/x") == DSG_ERR_USAGE);
  CHECK(dsg_config_set(nullptr, "a.b", "1") == DSG_ERR_USAGE);
  CHECK(dsg_model_predict(nullptr, nullptr, 0, nullptr, 0) == DSG_ERR_USAGE);
  CHECK(dsg_model_input_shape(nullptr, nullptr, nullptr, nullptr) == DSG_ERR_USAGE);
  CHECK(dsg_flops_report_rows(nullptr) == 0u);
  CHECK(dsg_flops_report_totals(nullptr, nullptr, nullptr, nullptr, nullptr) == DSG_ERR_USAGE);
  dsg_model_free(nullptr);
  dsg_flops_report_free(nullptr);
}
