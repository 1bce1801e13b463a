#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "mseg/unet.hpp"

namespace mseg {
namespace {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    raw(buf, sizeof(T));
  }
  void str(const std::string& s) {
    le<std::uint32_t>(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> b) : bytes_(b) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n)
      throw CheckpointError(CheckpointErrorKind::truncated,
                            std::string("checkpoint truncated while reading ") + what + " (need " +
                                std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                                ", " + std::to_string(bytes_.size() - pos_) + " left)");
  }
  template <typename T>
  T le(const char* what) {
    need(sizeof(T), what);
    std::uint8_t buf[sizeof(T)];
    std::memcpy(buf, bytes_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
  }
  std::string str(const char* what) {
    const auto n = le<std::uint32_t>(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::span<const std::uint8_t> take(std::size_t n, const char* what) {
    need(n, what);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

void write_strings(ByteWriter& w, const std::vector<std::string>& v) {
  w.le<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
  for (const auto& s : v) w.str(s);
}

std::vector<std::string> read_strings(ByteReader& r, const char* what) {
  const auto n = r.le<std::uint32_t>(what);
  // every string carries at least its 4-byte length
  r.need(std::size_t(n) * 4, what);
  std::vector<std::string> v;
  v.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) v.push_back(r.str(what));
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize(const ModelCheckpoint& ck) {
  ByteWriter w;
  w.raw(kCheckpointMagic, 4);
  w.le<std::uint8_t>(kCheckpointVersion);

  const UNetConfig& c = ck.config;
  w.le<std::int32_t>(c.depth);
  w.le<std::int32_t>(c.base_channels);
  w.le<std::int32_t>(c.max_channels);
  w.le<std::int32_t>(c.in_channels);
  w.le<std::int32_t>(c.out_classes);
  w.le<double>(c.leaky_slope);
  w.le<std::uint8_t>(static_cast<std::uint8_t>(c.norm));
  w.le<std::uint64_t>(c.seed);

  w.le<std::int32_t>(ck.epoch);
  w.le<double>(ck.best_val_metric);
  write_strings(w, ck.provenance.sources);
  w.le<std::int32_t>(ck.provenance.fold);
  w.le<std::uint64_t>(ck.provenance.training_seed);
  write_strings(w, ck.provenance.train_ids);

  w.le<std::uint32_t>(static_cast<std::uint32_t>(ck.weights.size()));
  for (const auto& t : ck.weights) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (Index d : t.shape()) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
    for (Index i = 0; i < t.size(); ++i) w.le<float>(t[i]);
  }
  return w.take();
}

ModelCheckpoint deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0)
    throw CheckpointError(CheckpointErrorKind::bad_magic, "not a checkpoint: missing AXF1 magic");
  ByteReader r(bytes.subspan(4));
  const auto version = r.le<std::uint8_t>("version");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::bad_version,
                          "unsupported checkpoint version " + std::to_string(version));

  ModelCheckpoint ck;
  UNetConfig& c = ck.config;
  c.depth = r.le<std::int32_t>("config");
  c.base_channels = r.le<std::int32_t>("config");
  c.max_channels = r.le<std::int32_t>("config");
  c.in_channels = r.le<std::int32_t>("config");
  c.out_classes = r.le<std::int32_t>("config");
  c.leaky_slope = r.le<double>("config");
  const auto norm = r.le<std::uint8_t>("config");
  if (norm > static_cast<std::uint8_t>(NormKind::none))
    throw CheckpointError(CheckpointErrorKind::malformed, "unknown normalization kind in checkpoint");
  c.norm = static_cast<NormKind>(norm);
  c.seed = r.le<std::uint64_t>("config");
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("checkpoint config: ") + e.what());
  }

  ck.epoch = r.le<std::int32_t>("metadata");
  ck.best_val_metric = r.le<double>("metadata");
  ck.provenance.sources = read_strings(r, "provenance");
  ck.provenance.fold = r.le<std::int32_t>("provenance");
  ck.provenance.training_seed = r.le<std::uint64_t>("provenance");
  ck.provenance.train_ids = read_strings(r, "provenance");

  const auto count = r.le<std::uint32_t>("weight count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto rank = r.le<std::uint8_t>("weight shape");
    Shape shape;
    std::size_t n = 1;
    for (int k = 0; k < rank; ++k) {
      shape.push_back(r.le<std::uint32_t>("weight shape"));
      n *= static_cast<std::size_t>(shape.back());
      if (n > bytes.size())
        throw CheckpointError(CheckpointErrorKind::truncated, "weight blob larger than checkpoint");
    }
    auto blob = r.take(n * sizeof(float), "weight blob");
    Tensor<float> t(shape);
    for (std::size_t k = 0; k < n; ++k) {
      std::uint8_t buf[4];
      std::memcpy(buf, blob.data() + 4 * k, 4);
      if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + 4);
      std::memcpy(&t[static_cast<Index>(k)], buf, 4);
    }
    ck.weights.push_back(std::move(t));
  }
  if (!r.done())
    throw CheckpointError(CheckpointErrorKind::malformed, "trailing bytes after checkpoint payload");
  return ck;
}

void save_checkpoint(const ModelCheckpoint& ck, const std::string& path) {
  const auto bytes = serialize(ck);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("failed writing checkpoint " + path);
  }
  std::filesystem::rename(tmp, path);
}

ModelCheckpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(DataErrorKind::missing_file, "checkpoint not found: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace mseg
