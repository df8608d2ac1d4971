#include "dynaseg/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "dynaseg/errors.hpp"

namespace dynaseg {

namespace {

struct Field {
  std::string key;  // "section.name"
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
  char buf[64];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) break;
  }
  return buf;
}

int64_t parse_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || errno != 0 || *end != '\0') {
    throw UsageError("config field '" + key + "' expects an integer, got '" + v + "'");
  }
  return x;
}

double parse_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || errno != 0 || *end != '\0') {
    throw UsageError("config field '" + key + "' expects a number, got '" + v + "'");
  }
  return x;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw UsageError("config field '" + key + "' expects on/off, got '" + v + "'");
}

template <typename T>
Field integer(const std::string& key, std::function<T&(RunConfig&)> ref) {
  return {key, [ref](RunConfig c) { return std::to_string(ref(c)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = static_cast<T>(parse_int(key, v)); }};
}

Field real(const std::string& key, std::function<double&(RunConfig&)> ref) {
  return {key, [ref](RunConfig c) { return fmt_double(ref(c)); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_double(key, v); }};
}

Field flag(const std::string& key, std::function<bool&(RunConfig&)> ref) {
  return {key, [ref](RunConfig c) { return std::string(ref(c) ? "on" : "off"); },
          [ref, key](RunConfig& c, const std::string& v) { ref(c) = parse_bool(key, v); }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f;
    f.push_back(integer<uint64_t>("run.seed", [](RunConfig& c) -> uint64_t& { return c.seed; }));

    f.push_back(integer<int>("model.decoder_dim", [](RunConfig& c) -> int& { return c.model.decoder_dim; }));
    f.push_back({"model.decoder_fusion",
                 [](const RunConfig& c) {
                   return std::string(c.model.decoder_fusion == DecoderFusion::kConcat ? "concat" : "add");
                 },
                 [](RunConfig& c, const std::string& v) {
                   if (v == "concat") {
                     c.model.decoder_fusion = DecoderFusion::kConcat;
                   } else if (v == "add") {
                     c.model.decoder_fusion = DecoderFusion::kAdd;
                   } else {
                     throw UsageError("config field 'model.decoder_fusion' expects concat or add, got '" + v + "'");
                   }
                 }});
    f.push_back(integer<int>("model.num_classes", [](RunConfig& c) -> int& { return c.model.num_classes; }));
    f.push_back(integer<int>("model.input_height", [](RunConfig& c) -> int& { return c.model.input_height; }));
    f.push_back(integer<int>("model.input_width", [](RunConfig& c) -> int& { return c.model.input_width; }));
    f.push_back(integer<int>("model.in_channels", [](RunConfig& c) -> int& { return c.model.in_channels; }));
    for (int i = 0; i < 4; ++i) {
      const std::string s = "stage" + std::to_string(i + 1) + ".";
      f.push_back(integer<int>(s + "hidden_dim", [i](RunConfig& c) -> int& { return c.model.stages[i].hidden_dim; }));
      f.push_back(integer<int>(s + "depth", [i](RunConfig& c) -> int& { return c.model.stages[i].depth; }));
      f.push_back(integer<int>(s + "num_heads", [i](RunConfig& c) -> int& { return c.model.stages[i].num_heads; }));
      f.push_back(integer<int>(s + "reduction", [i](RunConfig& c) -> int& { return c.model.stages[i].reduction; }));
      f.push_back(integer<int>(s + "patch_kernel", [i](RunConfig& c) -> int& { return c.model.stages[i].patch.kernel; }));
      f.push_back(integer<int>(s + "patch_stride", [i](RunConfig& c) -> int& { return c.model.stages[i].patch.stride; }));
      f.push_back(integer<int>(s + "patch_padding", [i](RunConfig& c) -> int& { return c.model.stages[i].patch.padding; }));
      f.push_back(integer<int>(s + "ffn_expansion", [i](RunConfig& c) -> int& { return c.model.stages[i].ffn_expansion; }));
    }

    f.push_back(integer<uint64_t>("data.seed", [](RunConfig& c) -> uint64_t& { return c.data.seed; }));
    f.push_back(integer<int64_t>("data.train_samples", [](RunConfig& c) -> int64_t& { return c.data.train_samples; }));
    f.push_back(integer<int64_t>("data.val_samples", [](RunConfig& c) -> int64_t& { return c.data.val_samples; }));
    f.push_back(integer<int>("data.min_shapes", [](RunConfig& c) -> int& { return c.data.synth.min_shapes; }));
    f.push_back(integer<int>("data.max_shapes", [](RunConfig& c) -> int& { return c.data.synth.max_shapes; }));
    f.push_back(real("data.noise_sigma", [](RunConfig& c) -> double& { return c.data.synth.noise_sigma; }));

    f.push_back(integer<int64_t>("teacher.steps", [](RunConfig& c) -> int64_t& { return c.teacher.steps; }));
    f.push_back(integer<int>("teacher.batch_size", [](RunConfig& c) -> int& { return c.teacher.optim.batch_size; }));
    f.push_back(real("teacher.lr", [](RunConfig& c) -> double& { return c.teacher.optim.base_lr; }));
    f.push_back(real("teacher.poly_power", [](RunConfig& c) -> double& { return c.teacher.optim.poly_power; }));
    f.push_back(real("teacher.weight_decay", [](RunConfig& c) -> double& { return c.teacher.optim.weight_decay; }));

    f.push_back({"distill.mode", [](const RunConfig& c) { return std::string(to_string(c.distill.mode)); },
                 [](RunConfig& c, const std::string& v) { c.distill.mode = parse_prune_mode(v); }});
    f.push_back({"distill.kd", [](const RunConfig& c) { return std::string(to_string(c.distill.kd)); },
                 [](RunConfig& c, const std::string& v) { c.distill.kd = parse_kd_mode(v); }});
    f.push_back(real("distill.lambda_s", [](RunConfig& c) -> double& { return c.distill.lambda_s; }));
    f.push_back(real("distill.lambda_m", [](RunConfig& c) -> double& { return c.distill.lambda_m; }));
    f.push_back(integer<int64_t>("distill.stage1_steps", [](RunConfig& c) -> int64_t& { return c.distill.stage1_steps; }));
    f.push_back(integer<int64_t>("distill.stage2_steps", [](RunConfig& c) -> int64_t& { return c.distill.stage2_steps; }));
    f.push_back(integer<int>("distill.batch_size", [](RunConfig& c) -> int& { return c.distill.optim.batch_size; }));
    f.push_back(real("distill.lr", [](RunConfig& c) -> double& { return c.distill.optim.base_lr; }));
    f.push_back(real("distill.poly_power", [](RunConfig& c) -> double& { return c.distill.optim.poly_power; }));
    f.push_back(real("distill.weight_decay", [](RunConfig& c) -> double& { return c.distill.optim.weight_decay; }));

    f.push_back(real("sparsity.target", [](RunConfig& c) -> double& { return c.distill.target_sparsity; }));
    f.push_back(flag("sparsity.anneal", [](RunConfig& c) -> bool& { return c.distill.anneal; }));
    f.push_back(real("sparsity.anneal_fraction", [](RunConfig& c) -> double& { return c.distill.anneal_fraction; }));

    f.push_back(real("analysis.median_thresh", [](RunConfig& c) -> double& { return c.analysis.median_thresh; }));
    f.push_back(real("analysis.range_thresh", [](RunConfig& c) -> double& { return c.analysis.range_thresh; }));
    f.push_back(integer<int64_t>("analysis.samples", [](RunConfig& c) -> int64_t& { return c.analysis.samples; }));
    return f;
  }();
  return table;
}

const Field& find_field(const std::string& key) {
  for (const Field& f : fields()) {
    if (f.key == key) return f;
  }
  throw UsageError("unknown config field '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const Field& f : fields()) out.push_back(f.key);
  return out;
}

void set_config_value(RunConfig& config, const std::string& dotted_key, const std::string& value) {
  find_field(dotted_key).set(config, value);
}

std::string get_config_value(const RunConfig& config, const std::string& dotted_key) {
  return find_field(dotted_key).get(config);
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line, section;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw UsageError("config line " + std::to_string(lineno) + ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw UsageError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    if (section.empty()) {
      throw UsageError("config line " + std::to_string(lineno) + ": key outside any [section]");
    }
    set_config_value(base, section + "." + trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot read config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string serialize_config(const RunConfig& config) {
  std::string out, section;
  for (const Field& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = f.key.substr(0, dot);
    if (sec != section) {
      if (!out.empty()) out += "\n";
      out += "[" + sec + "]\n";
      section = sec;
    }
    out += f.key.substr(dot + 1) + " = " + f.get(config) + "\n";
  }
  return out;
}

void validate_config(const RunConfig& c) {
  c.model.validate();
  try {
    stage_geometry(c.model);
  } catch (const DimensionError& e) {
    throw UsageError(std::string("config section 'model': ") + e.what());
  }
  if (c.data.train_samples < 1) throw UsageError("config field 'data.train_samples' must be >= 1");
  if (c.data.val_samples < 1) throw UsageError("config field 'data.val_samples' must be >= 1");
  if (c.data.synth.min_shapes < 0) throw UsageError("config field 'data.min_shapes' must be >= 0");
  if (c.data.synth.max_shapes < c.data.synth.min_shapes) {
    throw UsageError("config field 'data.max_shapes' must be >= data.min_shapes");
  }
  if (c.data.synth.noise_sigma < 0) throw UsageError("config field 'data.noise_sigma' must be >= 0");
  if (c.model.in_channels != 3) throw UsageError("config field 'model.in_channels' must be 3 for RGB data");
  if (c.model.num_classes < 2) throw UsageError("config field 'model.num_classes' must be >= 2");
  if (c.teacher.steps < 0) throw UsageError("config field 'teacher.steps' must be >= 0");
  if (c.teacher.optim.batch_size < 1) throw UsageError("config field 'teacher.batch_size' must be >= 1");
  if (!(c.teacher.optim.base_lr > 0)) throw UsageError("config field 'teacher.lr' must be > 0");
  if (!(c.distill.optim.base_lr > 0)) throw UsageError("config field 'distill.lr' must be > 0");
  if (c.distill.optim.batch_size < 1) throw UsageError("config field 'distill.batch_size' must be >= 1");
  if (c.distill.stage1_steps < 0) throw UsageError("config field 'distill.stage1_steps' must be >= 0");
  if (c.distill.stage2_steps < 0) throw UsageError("config field 'distill.stage2_steps' must be >= 0");
  if (c.distill.lambda_s < 0) throw UsageError("config field 'distill.lambda_s' must be >= 0");
  if (c.distill.lambda_m < 0) throw UsageError("config field 'distill.lambda_m' must be >= 0");
  if (c.distill.target_sparsity < 0 || c.distill.target_sparsity >= 1) {
    throw UsageError("config field 'sparsity.target' must lie in [0, 1)");
  }
  if (c.distill.anneal_fraction < 0) throw UsageError("config field 'sparsity.anneal_fraction' must be >= 0");
  if (c.analysis.median_thresh < 0) throw UsageError("config field 'analysis.median_thresh' must be >= 0");
  if (c.analysis.range_thresh < 0) throw UsageError("config field 'analysis.range_thresh' must be >= 0");
  if (c.analysis.samples < 2) throw UsageError("config field 'analysis.samples' must be >= 2");
}

}  // namespace dynaseg
