#pragma once

// Shared binary container for models, SVMs, priors and score maps.
//
//   "PBAD" | version u32 | record count u32
//   record: name (u32 length + UTF-8) | dtype u8 | rank u32 | dims u64[rank] | payload
//   metadata: u32 length + UTF-8 JSON
//
// All integers and payloads are little-endian. dtype 0 = float32,
// 1 = int64, 2 = float64.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace pbad {

inline constexpr std::uint32_t kContainerVersion = 1;

enum class DType : std::uint8_t { f32 = 0, i64 = 1, f64 = 2 };

struct TensorRecord {
  std::string name;
  DType dtype = DType::f32;
  std::vector<std::uint64_t> dims;
  std::vector<std::uint8_t> payload;

  std::uint64_t numel() const;
};

class Container {
 public:
  nlohmann::json metadata = nlohmann::json::object();

  void put_f32(const std::string& name, std::vector<std::uint64_t> dims, std::span<const float> values);
  void put_f64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const double> values);
  void put_i64(const std::string& name, std::vector<std::uint64_t> dims, std::span<const std::int64_t> values);
  void put_scalar(const std::string& name, double value) { put_f64(name, {}, std::span<const double>(&value, 1)); }

  bool has(const std::string& name) const;
  const TensorRecord& record(const std::string& name) const;
  std::vector<float> get_f32(const std::string& name, std::vector<std::uint64_t>* dims = nullptr) const;
  std::vector<double> get_f64(const std::string& name, std::vector<std::uint64_t>* dims = nullptr) const;
  std::vector<std::int64_t> get_i64(const std::string& name, std::vector<std::uint64_t>* dims = nullptr) const;
  double get_scalar(const std::string& name) const;

  const std::vector<TensorRecord>& records() const { return records_; }

  /// FNV-1a over record names, dtypes, dims and payloads (metadata excluded).
  std::uint64_t content_hash() const;

  std::vector<std::uint8_t> serialize() const;
  static Container deserialize(std::span<const std::uint8_t> bytes, const std::string& origin = "<memory>");

 private:
  void put(TensorRecord record);
  std::vector<TensorRecord> records_;
};

void write_container(const std::filesystem::path& path, const Container& container);
Container read_container(const std::filesystem::path& path);

std::string hash_hex(std::uint64_t hash);
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes, std::uint64_t state = 0xCBF29CE484222325ULL);

}  // namespace pbad
