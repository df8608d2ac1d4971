#include "dynaseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "dynaseg/errors.hpp"

namespace dynaseg {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace {

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)), sizeof(T));
    return value;
  }

  const char* take(size_t n) {
    if (pos_ + n > bytes_.size()) throw IoError("truncated checkpoint: " + path_);
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string path_;
  size_t pos_ = 0;
};

size_t dtype_size(DType t) {
  switch (t) {
    case DType::kF64: return 8;
    case DType::kF32: return 4;
    case DType::kU8: return 1;
  }
  throw IoError("unknown dtype tag");
}

}  // namespace

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::string header(kCheckpointMagic, sizeof(kCheckpointMagic));
  put<uint32_t>(header, kCheckpointVersion);
  put<uint32_t>(header, static_cast<uint32_t>(ckpt.tensors.size() + ckpt.blobs.size()));
  std::string payload;
  auto put_name = [&](const std::string& name) {
    if (name.size() > 0xFFFF) throw ContractError("checkpoint entry name too long");
    put<uint16_t>(header, static_cast<uint16_t>(name.size()));
    header += name;
  };
  for (const auto& [name, t] : ckpt.tensors) {
    put_name(name);
    put<uint8_t>(header, static_cast<uint8_t>(DType::kF64));
    put<uint8_t>(header, static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) put<uint64_t>(header, static_cast<uint64_t>(d));
    for (double v : t.data()) put<double>(payload, v);
  }
  for (const auto& [name, blob] : ckpt.blobs) {
    put_name(name);
    put<uint8_t>(header, static_cast<uint8_t>(DType::kU8));
    put<uint8_t>(header, 1);
    put<uint64_t>(header, blob.size());
    payload += blob;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  Reader r(std::string(std::istreambuf_iterator<char>(in), {}), path);
  if (std::memcmp(r.take(sizeof(kCheckpointMagic)), kCheckpointMagic, sizeof(kCheckpointMagic))) {
    throw IoError("not a dynaseg checkpoint: " + path);
  }
  const auto version = r.get<uint32_t>();
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version) + " in " + path);
  }
  struct Entry {
    std::string name;
    DType dtype;
    Shape shape;
  };
  const auto count = r.get<uint32_t>();
  std::vector<Entry> manifest;
  for (uint32_t i = 0; i < count; ++i) {
    Entry e;
    const auto len = r.get<uint16_t>();
    e.name.assign(r.take(len), len);
    const auto tag = r.get<uint8_t>();
    if (tag > static_cast<uint8_t>(DType::kU8)) throw IoError("unknown dtype tag in " + path);
    e.dtype = static_cast<DType>(tag);
    const auto rank = r.get<uint8_t>();
    for (uint8_t d = 0; d < rank; ++d) e.shape.push_back(static_cast<int64_t>(r.get<uint64_t>()));
    manifest.push_back(std::move(e));
  }
  Checkpoint ckpt;
  for (const Entry& e : manifest) {
    const int64_t n = shape_numel(e.shape);
    const char* p = r.take(static_cast<size_t>(n) * dtype_size(e.dtype));
    if (e.dtype == DType::kU8) {
      ckpt.blobs[e.name].assign(p, static_cast<size_t>(n));
      continue;
    }
    std::vector<double> values(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      if (e.dtype == DType::kF64) {
        std::memcpy(&values[i], p + i * 8, 8);
      } else {
        float f;
        std::memcpy(&f, p + i * 4, 4);
        values[i] = f;
      }
    }
    ckpt.tensors[e.name] = Tensor::from(e.shape, std::move(values));
  }
  if (!r.at_end()) throw IoError("trailing bytes after checkpoint payload: " + path);
  return ckpt;
}

}  // namespace dynaseg
