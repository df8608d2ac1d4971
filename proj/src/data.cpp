#include "dynaseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "dynaseg/errors.hpp"
#include "dynaseg/ops.hpp"

namespace dynaseg {

namespace {

constexpr char kSampleMagic[8] = {'D', 'S', 'G', 'S', 'A', 'M', 'P', '1'};

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

}  // namespace

std::array<double, 3> class_color(int cls) {
  static constexpr std::array<std::array<double, 3>, 8> kPalette = {{
      {0.15, 0.15, 0.15},
      {0.90, 0.20, 0.20},
      {0.20, 0.80, 0.25},
      {0.25, 0.35, 0.90},
      {0.90, 0.85, 0.20},
      {0.80, 0.30, 0.85},
      {0.20, 0.85, 0.85},
      {0.95, 0.60, 0.20},
  }};
  if (cls >= 0 && cls < static_cast<int>(kPalette.size())) return kPalette[cls];
  // Golden-angle hue walk for larger label sets.
  const double hue = std::fmod(cls * 0.618033988749895, 1.0) * 6.0;
  const double x = 1.0 - std::fabs(std::fmod(hue, 2.0) - 1.0);
  std::array<double, 3> rgb{};
  switch (static_cast<int>(hue)) {
    case 0: rgb = {1, x, 0}; break;
    case 1: rgb = {x, 1, 0}; break;
    case 2: rgb = {0, 1, x}; break;
    case 3: rgb = {0, x, 1}; break;
    case 4: rgb = {x, 0, 1}; break;
    default: rgb = {1, 0, x}; break;
  }
  for (double& v : rgb) v = 0.15 + 0.75 * v;
  return rgb;
}

SegSample gen_sample(uint64_t seed, int64_t index, int64_t height, int64_t width, int num_classes,
                     const SynthOptions& options) {
  if (num_classes < 2) throw ContractError("gen_synthetic needs at least 2 classes");
  if (height < 1 || width < 1) throw DimensionError("gen_synthetic: empty image size");
  std::mt19937_64 rng(splitmix64(seed ^ splitmix64(static_cast<uint64_t>(index))));
  std::vector<uint8_t> label(static_cast<size_t>(height * width), 0);

  const int lo = std::max(0, options.min_shapes);
  const int hi = std::max(lo, options.max_shapes);
  const int shapes = std::uniform_int_distribution<int>(lo, hi)(rng);
  const double extent = static_cast<double>(std::min(height, width));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < shapes; ++s) {
    const auto cls = static_cast<uint8_t>(std::uniform_int_distribution<int>(1, num_classes - 1)(rng));
    const bool circle = unit(rng) < 0.5;
    if (circle) {
      const double radius = extent * (0.12 + 0.16 * unit(rng));
      const double cy = unit(rng) * static_cast<double>(height);
      const double cx = unit(rng) * static_cast<double>(width);
      for (int64_t y = 0; y < height; ++y) {
        for (int64_t x = 0; x < width; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          if (dy * dy + dx * dx <= radius * radius) label[y * width + x] = cls;
        }
      }
    } else {
      const auto rh = static_cast<int64_t>(extent * (0.2 + 0.3 * unit(rng)));
      const auto rw = static_cast<int64_t>(extent * (0.2 + 0.3 * unit(rng)));
      const auto y0 = static_cast<int64_t>(unit(rng) * static_cast<double>(height - rh + 1));
      const auto x0 = static_cast<int64_t>(unit(rng) * static_cast<double>(width - rw + 1));
      for (int64_t y = y0; y < std::min(height, y0 + rh); ++y)
        for (int64_t x = x0; x < std::min(width, x0 + rw); ++x) label[y * width + x] = cls;
    }
  }

  std::normal_distribution<double> noise(0.0, options.noise_sigma);
  std::vector<double> pixels(static_cast<size_t>(3 * height * width));
  for (int64_t p = 0; p < height * width; ++p) {
    const auto color = class_color(label[p]);
    for (int ch = 0; ch < 3; ++ch) {
      const double v = color[ch] + (options.noise_sigma > 0 ? noise(rng) : 0.0);
      pixels[ch * height * width + p] = std::clamp(v, 0.0, 1.0);
    }
  }
  return {Tensor::from({3, height, width}, std::move(pixels)), std::move(label), height, width};
}

Dataset gen_synthetic(uint64_t seed, int64_t n, int64_t height, int64_t width, int num_classes,
                      const SynthOptions& options) {
  Dataset out;
  out.reserve(static_cast<size_t>(std::max<int64_t>(n, 0)));
  for (int64_t i = 0; i < n; ++i) {
    out.push_back(gen_sample(seed, i, height, width, num_classes, options));
  }
  return out;
}

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : num_classes_(num_classes),
      counts_(static_cast<size_t>(num_classes * num_classes), 0),
      missed_(static_cast<size_t>(num_classes), 0) {
  if (num_classes < 1) throw ContractError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(std::span<const uint8_t> pred, std::span<const uint8_t> truth) {
  if (pred.size() != truth.size()) {
    throw DimensionError("miou: prediction has " + std::to_string(pred.size()) +
                         " pixels, truth has " + std::to_string(truth.size()));
  }
  for (size_t i = 0; i < truth.size(); ++i) {
    const int t = truth[i];
    if (t == kVoidLabel) continue;
    if (t >= num_classes_) throw ContractError("miou: truth label " + std::to_string(t) + " out of range");
    const int p = pred[i];
    if (p == kVoidLabel) {
      ++missed_[t];
      continue;
    }
    if (p >= num_classes_) throw ContractError("miou: predicted label " + std::to_string(p) + " out of range");
    ++counts_[t * num_classes_ + p];
  }
}

std::vector<double> ConfusionMatrix::per_class_iou() const {
  std::vector<double> iou(static_cast<size_t>(num_classes_), std::numeric_limits<double>::quiet_NaN());
  for (int c = 0; c < num_classes_; ++c) {
    int64_t tp = counts_[c * num_classes_ + c];
    int64_t fn = missed_[c], fp = 0;
    for (int o = 0; o < num_classes_; ++o) {
      if (o == c) continue;
      fn += counts_[c * num_classes_ + o];
      fp += counts_[o * num_classes_ + c];
    }
    const int64_t denom = tp + fp + fn;
    if (denom > 0) iou[c] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return iou;
}

double ConfusionMatrix::mean_iou() const {
  double total = 0.0;
  int present = 0;
  for (double v : per_class_iou()) {
    if (std::isnan(v)) continue;
    total += v;
    ++present;
  }
  if (present == 0) throw EmptyInputError("miou: no valid pixels");
  return total / present;
}

double miou(std::span<const uint8_t> pred, std::span<const uint8_t> truth, int num_classes) {
  ConfusionMatrix cm(num_classes);
  cm.add(pred, truth);
  return cm.mean_iou();
}

void write_sample(const std::string& path, const SegSample& sample) {
  std::string bytes(kSampleMagic, sizeof(kSampleMagic));
  auto put_u32 = [&](uint32_t v) {
    char b[4];
    std::memcpy(b, &v, 4);
    bytes.append(b, 4);
  };
  put_u32(static_cast<uint32_t>(sample.height));
  put_u32(static_cast<uint32_t>(sample.width));
  put_u32(static_cast<uint32_t>(sample.image.dim(0)));
  for (double v : sample.image.data()) {
    const auto f = static_cast<float>(v);
    char b[4];
    std::memcpy(b, &f, 4);
    bytes.append(b, 4);
  }
  bytes.append(reinterpret_cast<const char*>(sample.label.data()), sample.label.size());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write sample file " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

SegSample read_sample(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open sample file " + path);
  const std::string bytes(std::istreambuf_iterator<char>(in), {});
  if (bytes.size() < 20 || std::memcmp(bytes.data(), kSampleMagic, 8) != 0) {
    throw IoError("not a dynaseg sample file: " + path);
  }
  uint32_t h, w, c;
  std::memcpy(&h, bytes.data() + 8, 4);
  std::memcpy(&w, bytes.data() + 12, 4);
  std::memcpy(&c, bytes.data() + 16, 4);
  const size_t pixels = static_cast<size_t>(h) * w;
  if (bytes.size() != 20 + pixels * c * 4 + pixels) throw IoError("truncated sample file " + path);
  std::vector<double> image(pixels * c);
  for (size_t i = 0; i < image.size(); ++i) {
    float f;
    std::memcpy(&f, bytes.data() + 20 + i * 4, 4);
    image[i] = f;
  }
  const char* lab = bytes.data() + 20 + pixels * c * 4;
  SegSample s;
  s.image = Tensor::from({c, h, w}, std::move(image));
  s.label.assign(reinterpret_cast<const uint8_t*>(lab), reinterpret_cast<const uint8_t*>(lab) + pixels);
  s.height = h;
  s.width = w;
  return s;
}

void write_dataset(const std::string& dir, const Dataset& data) {
  std::filesystem::create_directories(dir);
  for (size_t i = 0; i < data.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%06zu.bin", i);
    write_sample((std::filesystem::path(dir) / name).string(), data[i]);
  }
}

Dataset read_dataset(const std::string& dir) {
  std::vector<std::filesystem::path> files;
  std::error_code ec;
  for (const auto& entry : std::filesystem::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("sample_", 0) == 0 && entry.path().extension() == ".bin") files.push_back(entry.path());
  }
  if (ec) throw IoError("cannot list dataset directory " + dir);
  std::sort(files.begin(), files.end());
  Dataset out;
  for (const auto& f : files) out.push_back(read_sample(f.string()));
  if (out.empty()) throw EmptyInputError("no sample files in " + dir);
  return out;
}

}  // namespace dynaseg
