#include "nowcast/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>

#include "nowcast/error.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace nowcast {

namespace {

constexpr char kMagic[4] = {'S', 'Q', 'M', 'U'};

template <class U>
void put(std::string& buf, U value) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &value, sizeof(U));
  buf.append(bytes, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

  template <class U>
  U get(const char* what) {
    U value;
    take(&value, sizeof(U), what);
    return value;
  }
  void take(void* dst, std::size_t n, const char* what) {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("checkpoint truncated while reading ") + what);
    }
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::size_t pos_ = 0;
};

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

std::vector<std::uint32_t> dims_of(const Shape& s) {
  return {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
          static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
}

}  // namespace

void write_checkpoint(const std::filesystem::path& path, std::vector<CheckpointEntry> entries) {
  std::sort(entries.begin(), entries.end(),
            [](const auto& a, const auto& b) { return a.name < b.name; });
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, kCheckpointVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(entries.size()));
  for (const auto& e : entries) {
    if (e.name.size() > UINT16_MAX) throw FormatError("tensor name too long: " + e.name);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(e.name.size()));
    buf += e.name;
    put<std::uint8_t>(buf, static_cast<std::uint8_t>(e.dims.size()));
    std::uint64_t count = 1;
    for (auto d : e.dims) {
      put<std::uint32_t>(buf, d);
      count *= d;
    }
    if (count != e.values.size()) throw FormatError("payload size mismatch for " + e.name);
    buf.append(reinterpret_cast<const char*>(e.values.data()), e.values.size() * sizeof(float));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw IoError("write to '" + path.string() + "' failed");
}

std::vector<CheckpointEntry> read_checkpoint(const std::filesystem::path& path) {
  Reader r(read_all(path));
  char magic[4];
  r.take(magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>("tensor count");
  std::vector<CheckpointEntry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    const auto len = r.get<std::uint16_t>("name length");
    e.name.resize(len);
    r.take(e.name.data(), len, "name");
    const auto rank = r.get<std::uint8_t>("rank");
    std::uint64_t n = 1;
    for (std::uint8_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.get<std::uint32_t>("dims"));
      n *= e.dims.back();
    }
    e.values.resize(n);
    r.take(e.values.data(), n * sizeof(float), "payload");
    entries.push_back(std::move(e));
  }
  if (!r.done()) throw FormatError("trailing bytes after checkpoint payload");
  return entries;
}

template <class T>
void save_checkpoint(const std::filesystem::path& path, const Registry<T>& registry) {
  std::vector<CheckpointEntry> entries;
  entries.reserve(registry.size());
  for (const auto& nt : registry) {
    CheckpointEntry e;
    e.name = nt.name;
    e.dims = dims_of(nt.tensor.shape());
    const auto data = nt.tensor.data();
    e.values.assign(data.begin(), data.end());
    entries.push_back(std::move(e));
  }
  write_checkpoint(path, std::move(entries));
}

template <class T>
void load_checkpoint(const std::filesystem::path& path, const Registry<T>& registry) {
  std::vector<CheckpointEntry> entries = read_checkpoint(path);
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : entries) {
    if (!by_name.emplace(e.name, &e).second) {
      throw FormatError("duplicate tensor '" + e.name + "' in checkpoint");
    }
  }
  std::set<std::string> expected;
  for (const auto& nt : registry) {
    expected.insert(nt.name);
    auto it = by_name.find(nt.name);
    if (it == by_name.end()) {
      throw FormatError("registry mismatch: checkpoint lacks '" + nt.name + "'");
    }
    if (it->second->dims != dims_of(nt.tensor.shape())) {
      throw FormatError("registry mismatch: dims differ for '" + nt.name + "'");
    }
  }
  for (const auto& e : entries) {
    if (!expected.count(e.name)) {
      throw FormatError("registry mismatch: unexpected tensor '" + e.name + "'");
    }
  }
  for (const auto& nt : registry) {
    Tensor<T> target = nt.tensor;
    const auto& values = by_name.at(nt.name)->values;
    std::copy(values.begin(), values.end(), target.mutable_data().begin());
  }
}

std::optional<Variant> infer_variant(const std::vector<CheckpointEntry>& entries) {
  bool vq = false, mix = false, dsc = false;
  for (const auto& e : entries) {
    if (e.name == "vq.codebook") vq = true;
    if (e.name.rfind("enc4.block.stage1.mix3", 0) == 0) mix = true;
    if (e.name.rfind("enc4.block.stage1.depthwise", 0) == 0) dsc = true;
  }
  if (mix == dsc) return std::nullopt;
  if (mix) return vq ? Variant::QMix : Variant::Mix;
  return vq ? Variant::Q : Variant::Baseline;
}

template <class T>
void load_checkpoint(const std::filesystem::path& path, UNet<T>& model) {
  const auto found = infer_variant(read_checkpoint(path));
  const Variant expected = model.config().variant;
  if (found && *found != expected) {
    throw VariantMismatchError("checkpoint holds variant '" + std::string(variant_name(*found)) +
                               "' but the model is '" + std::string(variant_name(expected)) + "'");
  }
  load_checkpoint(path, model.registry());
}

template void load_checkpoint(const std::filesystem::path&, UNet<float>&);
template void load_checkpoint(const std::filesystem::path&, UNet<double>&);
template void save_checkpoint(const std::filesystem::path&, const Registry<float>&);
template void save_checkpoint(const std::filesystem::path&, const Registry<double>&);
template void load_checkpoint(const std::filesystem::path&, const Registry<float>&);
template void load_checkpoint(const std::filesystem::path&, const Registry<double>&);

}  // namespace nowcast
