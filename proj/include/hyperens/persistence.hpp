#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "hyperens/tensor.hpp"
#include "json.hpp"

namespace hyperens {

using json = nlohmann::json;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public std::invalid_argument {
 public:
  ConfigError(std::string key, const std::string& what) : std::invalid_argument(key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const { return key_; }

 private:
  std::string key_;
};

// Checkpoint layout, all integers little-endian:
//   u32 version, u64 array count,
//   per array: u32 name length, name bytes, u8 dtype (1 = f64), u32 rank,
//              u64 dims[rank], f64 payload,
//   u32 CRC32 of every preceding byte.
inline constexpr std::uint32_t kCheckpointVersion = 1;
using NamedArrays = std::vector<std::pair<std::string, Tensor>>;

std::vector<std::uint8_t> encode_checkpoint(const NamedArrays& arrays);
NamedArrays decode_checkpoint(std::span<const std::uint8_t> bytes);
/// Written to a temporary sibling and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const NamedArrays& arrays);
NamedArrays load_checkpoint(const std::filesystem::path& path);
const Tensor& find_array(const NamedArrays& arrays, const std::string& name);

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Result ledger: one JSON object per line. Appends take an exclusive advisory
// lock and land in a single write, so concurrent writers never interleave.
struct LedgerScan {
  std::vector<json> records;
  /// Complete lines that failed to parse as a JSON object.
  std::size_t malformed = 0;
  /// The file ended in an unterminated line (an interrupted append).
  bool partial_tail = false;
};
void append_record(const std::filesystem::path& path, const json& record);
/// A missing file scans as empty.
LedgerScan scan_records(const std::filesystem::path& path);

// Configuration: a JSON tree whose shape is fixed by a defaults tree. User
// files and `a.b.c=value` overrides may only touch existing keys, and values
// must keep the default's type.
json merge_config(const json& defaults, const json& user, const std::string& prefix = "");
void apply_override(json& config, const std::string& assignment);
json load_config(const json& defaults, const std::filesystem::path& path, const std::vector<std::string>& overrides);

}  // namespace hyperens
