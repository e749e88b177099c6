#include "dubox/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace dubox {

namespace {

constexpr char kMagic[7] = {'D', 'B', 'C', 'K', 'P', 'T', '\0'};
constexpr std::string_view kHeaderEntry = "#header";

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename U>
  void scalar(U v) {
    bytes(&v, sizeof(U));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  void bytes(void* p, std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what, pos_);
    }
    std::memcpy(p, in_.data() + pos_, n);
    pos_ += n;
  }
  template <typename U>
  U scalar(const char* what) {
    U v;
    bytes(&v, sizeof(U), what);
    return v;
  }
  std::size_t pos() const { return pos_; }
  bool done() const { return pos_ == in_.size(); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

}  // namespace

const CheckpointEntry* Checkpoint::find(std::string_view name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, sizeof(kMagic));
  w.scalar<std::uint16_t>(kCheckpointVersion);
  std::vector<CheckpointEntry> header_entry;
  if (!ckpt.header.empty()) {
    CheckpointEntry h{std::string(kHeaderEntry), Shape{ckpt.header.size()}, {}};
    for (unsigned char c : ckpt.header) h.values.push_back(static_cast<float>(c));
    header_entry.push_back(std::move(h));
  }
  w.scalar<std::uint32_t>(static_cast<std::uint32_t>(header_entry.size() + ckpt.entries.size()));
  auto put_entry = [&](const CheckpointEntry& e) {
    if (e.name.size() > 0xFFFF) throw ContractError("checkpoint entry name too long");
    if (e.shape.size() > 0xFF) throw ContractError("checkpoint entry rank too large");
    if (shape_numel(e.shape) != e.values.size()) {
      throw ShapeError("checkpoint entry " + e.name + " has inconsistent shape");
    }
    w.scalar<std::uint16_t>(static_cast<std::uint16_t>(e.name.size()));
    w.bytes(e.name.data(), e.name.size());
    w.scalar<std::uint8_t>(static_cast<std::uint8_t>(e.shape.size()));
    for (std::size_t d : e.shape) w.scalar<std::uint32_t>(static_cast<std::uint32_t>(d));
    w.bytes(e.values.data(), e.values.size() * sizeof(float));
  };
  for (const auto& e : header_entry) put_entry(e);
  for (const auto& e : ckpt.entries) {
    if (e.name == kHeaderEntry) throw ContractError("entry name #header is reserved");
    put_entry(e);
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  char magic[sizeof(kMagic)];
  r.bytes(magic, sizeof(magic), "magic");
  if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) throw FormatError("bad checkpoint magic", 0);
  const std::size_t version_at = r.pos();
  const auto version = r.scalar<std::uint16_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version), version_at);
  }
  Checkpoint ckpt;
  const auto count = r.scalar<std::uint32_t>("entry count");
  for (std::uint32_t k = 0; k < count; ++k) {
    CheckpointEntry e;
    const auto name_len = r.scalar<std::uint16_t>("name length");
    e.name.resize(name_len);
    r.bytes(e.name.data(), name_len, "name");
    const auto rank = r.scalar<std::uint8_t>("rank");
    for (std::uint8_t d = 0; d < rank; ++d) e.shape.push_back(r.scalar<std::uint32_t>("dims"));
    e.values.resize(shape_numel(e.shape));
    const std::size_t payload_at = r.pos();
    r.bytes(e.values.data(), e.values.size() * sizeof(float), "payload");
    if (e.name == kHeaderEntry) {
      for (float v : e.values) {
        if (!(v >= 0 && v <= 255 && v == static_cast<float>(static_cast<int>(v)))) {
          throw FormatError("checkpoint header entry holds a non-byte value", payload_at);
        }
        ckpt.header.push_back(static_cast<char>(static_cast<int>(v)));
      }
      continue;
    }
    ckpt.entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint entries", r.pos());
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IOError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IOError("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

template <typename T>
Checkpoint make_checkpoint(std::span<const Parameter<T>> params, std::string header) {
  Checkpoint ckpt;
  ckpt.header = std::move(header);
  auto to_entry = [](const std::string& name, const BasicTensor<T>& t) {
    CheckpointEntry e{name, t.shape(), {}};
    e.values.reserve(t.numel());
    for (T v : t.data()) e.values.push_back(static_cast<float>(v));
    return e;
  };
  for (const auto& p : params) ckpt.entries.push_back(to_entry(p.name, p.value));
  for (const auto& p : params) ckpt.entries.push_back(to_entry(p.name + "#m", p.momentum));
  return ckpt;
}

template <typename T>
void restore_parameters(const Checkpoint& ckpt, std::span<Parameter<T>> params) {
  auto copy_into = [](const CheckpointEntry& e, BasicTensor<T>& t) {
    if (e.shape != t.shape()) {
      throw ContractError("checkpoint entry " + e.name + " has shape " + shape_to_string(e.shape) +
                          ", model expects " + shape_to_string(t.shape()));
    }
    auto dst = t.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = static_cast<T>(e.values[i]);
  };
  for (auto& p : params) {
    const CheckpointEntry* e = ckpt.find(p.name);
    if (!e) throw ContractError("checkpoint lacks parameter " + p.name);
    copy_into(*e, p.value);
    if (const CheckpointEntry* m = ckpt.find(p.name + "#m")) copy_into(*m, p.momentum);
  }
}

template Checkpoint make_checkpoint<float>(std::span<const Parameter<float>>, std::string);
template Checkpoint make_checkpoint<double>(std::span<const Parameter<double>>, std::string);
template void restore_parameters<float>(const Checkpoint&, std::span<Parameter<float>>);
template void restore_parameters<double>(const Checkpoint&, std::span<Parameter<double>>);

}  // namespace dubox
