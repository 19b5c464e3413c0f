#include "pbad/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>

#include "pbad/error.hpp"

namespace pbad {

namespace {

constexpr char kMagic[4] = {'P', 'B', 'A', 'D'};

std::size_t dtype_size(DType t) { return t == DType::f32 ? 4 : 8; }

template <class U>
void put_le(std::vector<std::uint8_t>& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<std::uint8_t>((value >> (8 * i)) & 0xFF));
}

template <class V, class Bits>
std::vector<std::uint8_t> encode_values(std::span<const V> values) {
  std::vector<std::uint8_t> out;
  out.reserve(values.size() * sizeof(V));
  for (V v : values) {
    Bits bits;
    std::memcpy(&bits, &v, sizeof bits);
    put_le(out, bits);
  }
  return out;
}

template <class V, class Bits>
std::vector<V> decode_values(const TensorRecord& r) {
  std::vector<V> out(static_cast<std::size_t>(r.numel()));
  for (std::size_t k = 0; k < out.size(); ++k) {
    Bits bits = 0;
    for (std::size_t i = 0; i < sizeof(Bits); ++i) bits |= static_cast<Bits>(r.payload[k * sizeof(Bits) + i]) << (8 * i);
    std::memcpy(&out[k], &bits, sizeof bits);
  }
  return out;
}

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <class U>
  U get() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes_[pos_ + i]) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::vector<std::uint8_t> take(std::uint64_t n) {
    need(n);
    std::vector<std::uint8_t> out(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_),
                                  bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += static_cast<std::size_t>(n);
    return out;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(std::uint64_t n) const {
    if (n > bytes_.size() - pos_) throw DataError("truncated container '" + origin_ + "'");
  }

  std::span<const std::uint8_t> bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

std::uint64_t TensorRecord::numel() const {
  std::uint64_t n = 1;
  for (auto d : dims) n *= d;
  return n;
}

std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t state) {
  for (auto b : bytes) {
    state ^= b;
    state *= 0x100000001B3ULL;
  }
  return state;
}

std::string hash_hex(std::uint64_t hash) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

void Container::put(TensorRecord record) {
  for (auto& r : records_) {
    if (r.name == record.name) {
      r = std::move(record);
      return;
    }
  }
  records_.push_back(std::move(record));
}

void Container::put_f32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values) {
  put({name, DType::f32, std::move(dims), encode_values<float, std::uint32_t>(values)});
}

void Container::put_f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> values) {
  put({name, DType::f64, std::move(dims), encode_values<double, std::uint64_t>(values)});
}

void Container::put_i64(const std::string& name, std::vector<std::uint64_t> dims,
                        std::span<const std::int64_t> values) {
  put({name, DType::i64, std::move(dims), encode_values<std::int64_t, std::uint64_t>(values)});
}

bool Container::has(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return true;
  }
  return false;
}

const TensorRecord& Container::record(const std::string& name) const {
  for (const auto& r : records_) {
    if (r.name == name) return r;
  }
  throw DataError("container has no tensor '" + name + "'");
}

namespace {

const TensorRecord& typed(const Container& c, const std::string& name, DType t, std::vector<std::uint64_t>* dims) {
  const auto& r = c.record(name);
  if (r.dtype != t) throw DataError("tensor '" + name + "' has dtype " + std::to_string(static_cast<int>(r.dtype)));
  if (dims) *dims = r.dims;
  return r;
}

}  // namespace

std::vector<float> Container::get_f32(const std::string& name, std::vector<std::uint64_t>* dims) const {
  return decode_values<float, std::uint32_t>(typed(*this, name, DType::f32, dims));
}

std::vector<double> Container::get_f64(const std::string& name, std::vector<std::uint64_t>* dims) const {
  return decode_values<double, std::uint64_t>(typed(*this, name, DType::f64, dims));
}

std::vector<std::int64_t> Container::get_i64(const std::string& name, std::vector<std::uint64_t>* dims) const {
  return decode_values<std::int64_t, std::uint64_t>(typed(*this, name, DType::i64, dims));
}

double Container::get_scalar(const std::string& name) const {
  auto v = get_f64(name);
  if (v.size() != 1) throw DataError("tensor '" + name + "' is not a scalar");
  return v[0];
}

std::uint64_t Container::content_hash() const {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (const auto& r : records_) {
    std::vector<std::uint8_t> head(r.name.begin(), r.name.end());
    head.push_back(static_cast<std::uint8_t>(r.dtype));
    for (auto d : r.dims) put_le(head, d);
    h = fnv1a64(head, h);
    h = fnv1a64(r.payload, h);
  }
  return h;
}

std::vector<std::uint8_t> Container::serialize() const {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_le(out, kContainerVersion);
  put_le(out, static_cast<std::uint32_t>(records_.size()));
  for (const auto& r : records_) {
    put_le(out, static_cast<std::uint32_t>(r.name.size()));
    out.insert(out.end(), r.name.begin(), r.name.end());
    out.push_back(static_cast<std::uint8_t>(r.dtype));
    put_le(out, static_cast<std::uint32_t>(r.dims.size()));
    for (auto d : r.dims) put_le(out, d);
    out.insert(out.end(), r.payload.begin(), r.payload.end());
  }
  const std::string meta = metadata.dump();
  put_le(out, static_cast<std::uint32_t>(meta.size()));
  out.insert(out.end(), meta.begin(), meta.end());
  return out;
}

Container Container::deserialize(std::span<const std::uint8_t> bytes, const std::string& origin) {
  Reader in(bytes, origin);
  auto magic = in.take(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("'" + origin + "' is not a PBAD container");
  const auto version = in.get<std::uint32_t>();
  if (version != kContainerVersion) {
    throw DataError("'" + origin + "' has container version " + std::to_string(version) + ", this build reads version " +
                    std::to_string(kContainerVersion));
  }
  Container c;
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    TensorRecord r;
    const auto name_len = in.get<std::uint32_t>();
    auto name = in.take(name_len);
    r.name.assign(name.begin(), name.end());
    const auto code = in.get<std::uint8_t>();
    if (code > 2) throw DataError("'" + origin + "': unknown dtype code " + std::to_string(code));
    r.dtype = static_cast<DType>(code);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 16) throw DataError("'" + origin + "': implausible rank " + std::to_string(rank));
    for (std::uint32_t d = 0; d < rank; ++d) r.dims.push_back(in.get<std::uint64_t>());
    r.payload = in.take(r.numel() * dtype_size(r.dtype));
    c.records_.push_back(std::move(r));
  }
  const auto meta_len = in.get<std::uint32_t>();
  auto meta = in.take(meta_len);
  if (!in.at_end()) throw DataError("'" + origin + "': trailing bytes after metadata");
  try {
    c.metadata = nlohmann::json::parse(meta.begin(), meta.end());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("'" + origin + "': corrupt metadata (" + e.what() + ")");
  }
  return c;
}

void write_container(const std::filesystem::path& path, const Container& container) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto bytes = container.serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing '" + path.string() + "'");
}

Container read_container(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return Container::deserialize(bytes, path.string());
}

}  // namespace pbad
