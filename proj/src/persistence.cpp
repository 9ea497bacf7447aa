#include "hyperens/persistence.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>
#include <zlib.h>

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>

namespace hyperens {

namespace {

class Writer {
 public:
  void u8(std::uint8_t v) { out.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(std::uint8_t(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(const std::string& s) { out.insert(out.end(), s.begin(), s.end()); }

  std::vector<std::uint8_t> out;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : buf(b) {}
  void need(std::size_t n, const char* what) const {
    if (buf.size() - pos < n) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return buf[pos++];
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(buf[pos++]) << (8 * i);
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t(buf[pos++]) << (8 * i);
    return v;
  }
  std::string text(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(buf.data() + pos), n);
    pos += n;
    return s;
  }
  std::size_t remaining() const { return buf.size() - pos; }

 private:
  std::span<const std::uint8_t> buf;
  std::size_t pos = 0;
};

std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in chunks for very large files.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t chunk = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, uInt(chunk));
    off += chunk;
  }
  return std::uint32_t(crc);
}

constexpr std::uint8_t kDtypeF64 = 1;

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedArrays& arrays) {
  Writer w;
  w.u32(kCheckpointVersion);
  w.u64(arrays.size());
  for (const auto& [name, t] : arrays) {
    w.u32(std::uint32_t(name.size()));
    w.bytes(name);
    w.u8(kDtypeF64);
    w.u32(std::uint32_t(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.data()) w.f64(v);
  }
  w.u32(crc32_of(w.out));
  return std::move(w.out);
}

NamedArrays decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16) throw CheckpointError("checkpoint too short for header and checksum");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32("checksum");
  Reader r(body);
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  if (crc32_of(body) != stored) throw CheckpointError("checkpoint checksum mismatch");
  const std::uint64_t count = r.u64("array count");
  NamedArrays out;
  for (std::uint64_t a = 0; a < count; ++a) {
    std::string name = r.text(r.u32("name length"), "name");
    const std::uint8_t dtype = r.u8("dtype");
    if (dtype != kDtypeF64) throw CheckpointError("array '" + name + "': unknown dtype " + std::to_string(dtype));
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape.push_back(r.u64("dims"));
      total *= shape.back();
    }
    r.need(total * 8, "payload");
    std::vector<double> values(total);
    for (auto& v : values) v = std::bit_cast<double>(r.u64("payload"));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (r.remaining() != 0) throw CheckpointError("checkpoint has trailing bytes");
  return out;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  auto tmp = path;
  tmp += ".tmp" + std::to_string(::getpid());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw std::runtime_error("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

void save_checkpoint(const std::filesystem::path& path, const NamedArrays& arrays) {
  write_file_atomic(path, encode_checkpoint(arrays));
}

NamedArrays load_checkpoint(const std::filesystem::path& path) {
  try {
    return decode_checkpoint(read_file(path));
  } catch (const CheckpointError& e) {
    throw CheckpointError(path.string() + ": " + e.what());
  }
}

const Tensor& find_array(const NamedArrays& arrays, const std::string& name) {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no array named '" + name + "'");
}

// ---------------------------------------------------------------------------
// Ledger

void append_record(const std::filesystem::path& path, const json& record) {
  if (!record.is_object()) throw std::invalid_argument("ledger records must be JSON objects");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const int fd = ::open(path.c_str(), O_RDWR | O_APPEND | O_CREAT | O_CLOEXEC, 0644);
  if (fd < 0) throw std::runtime_error("cannot open ledger " + path.string() + ": " + std::strerror(errno));
  struct Closer {
    int fd;
    ~Closer() { ::close(fd); }
  } closer{fd};
  if (::flock(fd, LOCK_EX) != 0) throw std::runtime_error("cannot lock ledger " + path.string());
  std::string line = record.dump() + "\n";
  // Terminate a line left open by an interrupted writer so this record stays
  // parseable on its own.
  const off_t end = ::lseek(fd, 0, SEEK_END);
  if (end > 0) {
    char last = '\n';
    if (::pread(fd, &last, 1, end - 1) == 1 && last != '\n') line.insert(line.begin(), '\n');
  }
  std::size_t done = 0;
  while (done < line.size()) {
    const ssize_t n = ::write(fd, line.data() + done, line.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error("ledger write failed: " + std::string(std::strerror(errno)));
    }
    done += std::size_t(n);
  }
  ::flock(fd, LOCK_UN);
}

LedgerScan scan_records(const std::filesystem::path& path) {
  LedgerScan scan;
  if (!std::filesystem::exists(path)) return scan;
  const int fd = ::open(path.c_str(), O_RDONLY | O_CLOEXEC);
  if (fd < 0) throw std::runtime_error("cannot open ledger " + path.string());
  // A shared lock gives readers a consistent prefix while writers append.
  ::flock(fd, LOCK_SH);
  std::string text;
  char buf[1 << 16];
  for (;;) {
    const ssize_t n = ::read(fd, buf, sizeof buf);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    text.append(buf, std::size_t(n));
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);

  std::size_t start = 0;
  while (start < text.size()) {
    const std::size_t nl = text.find('\n', start);
    if (nl == std::string::npos) {
      scan.partial_tail = true;
      break;
    }
    const std::string_view line(text.data() + start, nl - start);
    start = nl + 1;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      ++scan.malformed;
      continue;
    }
    scan.records.push_back(std::move(j));
  }
  return scan;
}

// ---------------------------------------------------------------------------
// Config

namespace {

std::string join_key(const std::string& prefix, const std::string& key) { return prefix.empty() ? key : prefix + "." + key; }

const char* kind_name(const json& j) {
  if (j.is_boolean()) return "boolean";
  if (j.is_number_unsigned()) return "nonnegative integer";
  if (j.is_number_integer()) return "integer";
  if (j.is_number()) return "number";
  if (j.is_string()) return "string";
  if (j.is_array()) return "array";
  if (j.is_object()) return "object";
  return "null";
}

void check_type(const json& def, const json& value, const std::string& key) {
  if (def.is_null()) return;
  bool ok = false;
  if (def.is_boolean()) ok = value.is_boolean();
  else if (def.is_number_unsigned()) ok = value.is_number_unsigned() || (value.is_number_integer() && value.get<std::int64_t>() >= 0);
  else if (def.is_number_integer()) ok = value.is_number_integer();
  else if (def.is_number()) ok = value.is_number();
  else if (def.is_string()) ok = value.is_string();
  else if (def.is_array()) ok = value.is_array();
  else if (def.is_object()) ok = value.is_object();
  if (!ok) throw ConfigError(key, std::string("expected ") + kind_name(def) + ", got " + kind_name(value));
}

}  // namespace

json merge_config(const json& defaults, const json& user, const std::string& prefix) {
  if (!user.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected an object");
  json out = defaults;
  for (const auto& [key, value] : user.items()) {
    const std::string full = join_key(prefix, key);
    if (!defaults.contains(key)) throw ConfigError(full, "unknown key");
    const json& def = defaults.at(key);
    check_type(def, value, full);
    out[key] = def.is_object() ? merge_config(def, value, full) : value;
  }
  return out;
}

void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
  const std::string key = assignment.substr(0, eq), raw = assignment.substr(eq + 1);
  json* node = &config;
  std::size_t start = 0;
  for (;;) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError(key, "unknown key");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  json value;
  if (node->is_string()) {
    value = raw;
  } else {
    value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) throw ConfigError(key, "cannot parse value '" + raw + "'");
  }
  check_type(*node, value, key);
  *node = node->is_object() ? merge_config(*node, value, key) : value;
}

json load_config(const json& defaults, const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json cfg = defaults;
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw ConfigError(path.string(), "cannot open config file");
    json user = json::parse(in, nullptr, false);
    if (user.is_discarded()) throw ConfigError(path.string(), "not valid JSON");
    cfg = merge_config(defaults, user);
  }
  for (const auto& o : overrides) apply_override(cfg, o);
  return cfg;
}

}  // namespace hyperens
