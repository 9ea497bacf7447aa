#include "hyperens/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "hyperens/rng.hpp"

namespace hyperens {

Dataset Dataset::subset(std::span<const std::size_t> rows) const {
  Dataset out;
  out.classes = classes;
  Shape shape = features.shape();
  if (shape.empty()) shape = {0};
  const std::size_t width = row_size();
  shape[0] = rows.size();
  std::vector<double> values;
  values.reserve(rows.size() * width);
  for (std::size_t r : rows) {
    if (r >= size()) throw std::out_of_range("Dataset::subset: row " + std::to_string(r));
    values.insert(values.end(), features.data().begin() + r * width, features.data().begin() + (r + 1) * width);
    if (!labels.empty()) out.labels.push_back(labels[r]);
    if (!targets.empty()) out.targets.push_back(targets[r]);
  }
  out.features = Tensor(shape, std::move(values));
  return out;
}

void Dataset::validate() const {
  const std::size_t n = size();
  if (!labels.empty() && labels.size() != n) throw ShapeError("dataset: label count does not match rows");
  if (!targets.empty() && targets.size() != n) throw ShapeError("dataset: target count does not match rows");
  for (std::size_t l : labels)
    if (l >= classes) throw std::out_of_range("dataset: label " + std::to_string(l) + " outside [0, classes)");
}

DataSplit split_dataset(const Dataset& data, double val_fraction, double test_fraction, std::uint64_t seed) {
  if (!(val_fraction > 0.0 && test_fraction >= 0.0 && val_fraction + test_fraction < 1.0))
    throw std::invalid_argument("split_dataset: fractions must satisfy 0 < val, 0 <= test, val + test < 1");
  const std::size_t n = data.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng = Rng(seed).derive("split");
  rng.shuffle(std::span<std::size_t>(perm));
  const std::size_t n_test = std::size_t(std::floor(test_fraction * double(n)));
  const std::size_t n_val = std::size_t(std::floor(val_fraction * double(n)));
  auto block = [&](std::size_t from, std::size_t to) {
    return data.subset(std::span<const std::size_t>(perm.data() + from, to - from));
  };
  DataSplit s;
  s.test = block(0, n_test);
  s.val = block(n_test, n_test + n_val);
  s.train = block(n_test + n_val, n);
  return s;
}

// ---------------------------------------------------------------------------
// IDX

IdxArray parse_idx(std::span<const std::uint8_t> raw) {
  if (raw.size() < 4) throw ParseError("idx: truncated header");
  if (raw[0] != 0 || raw[1] != 0 || raw[2] != 0x08) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%02x%02x%02x%02x", raw[0], raw[1], raw[2], raw[3]);
    throw ParseError(std::string("idx: bad magic 0x") + buf + " (expected unsigned-byte data)");
  }
  const std::size_t ndim = raw[3];
  if (ndim == 0) throw ParseError("idx: zero dimensions");
  if (raw.size() < 4 + 4 * ndim) throw ParseError("idx: truncated dimension table");
  IdxArray a;
  std::size_t total = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    const std::uint8_t* p = raw.data() + 4 + 4 * i;
    const std::size_t d = (std::size_t(p[0]) << 24) | (std::size_t(p[1]) << 16) | (std::size_t(p[2]) << 8) | p[3];
    a.dims.push_back(d);
    total *= d;
  }
  const std::size_t offset = 4 + 4 * ndim;
  if (raw.size() - offset < total)
    throw ParseError("idx: truncated payload, expected " + std::to_string(total) + " bytes, found " +
                     std::to_string(raw.size() - offset));
  if (raw.size() - offset > total) throw ParseError("idx: trailing bytes after payload");
  a.bytes.assign(raw.begin() + std::ptrdiff_t(offset), raw.end());
  return a;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("idx: cannot open " + path.string());
  std::vector<std::uint8_t> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return parse_idx(raw);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

Tensor idx_images(const IdxArray& images) {
  if (images.dims.size() != 3) throw ParseError("idx: image file must have 3 dimensions (0x00000803)");
  Tensor t({images.dims[0], images.dims[1], images.dims[2], 1});
  for (std::size_t i = 0; i < images.bytes.size(); ++i) t[i] = double(images.bytes[i]) / 255.0;
  return t;
}

std::vector<std::size_t> idx_labels(const IdxArray& labels) {
  if (labels.dims.size() != 1) throw ParseError("idx: label file must have 1 dimension (0x00000801)");
  return std::vector<std::size_t>(labels.bytes.begin(), labels.bytes.end());
}

Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  Dataset d;
  d.features = idx_images(read_idx(images));
  d.labels = idx_labels(read_idx(labels));
  if (d.labels.size() != d.size()) throw ParseError("idx: image and label counts differ");
  d.classes = d.labels.empty() ? 0 : *std::max_element(d.labels.begin(), d.labels.end()) + 1;
  return d;
}

// ---------------------------------------------------------------------------
// CSV

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += c;
      }
      continue;
    }
    if (c == '"') {
      quoted = true;
      any = true;
    } else if (c == ',') {
      row.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (c == '\n' || c == '\r') {
      if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
      }
      row.clear();
      field.clear();
      any = false;
    } else {
      field += c;
      any = true;
    }
  }
  if (quoted) throw ParseError("csv: unterminated quoted field");
  if (any || !field.empty()) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string csv_escape(const std::string& field) {
  if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  auto line = [&](const std::vector<std::string>& r) {
    for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << csv_escape(r[i]);
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::string format_double(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

namespace {

double parse_number(const std::string& s, std::size_t line, const std::string& column) {
  double v = 0.0;
  const char* begin = s.data();
  while (begin < s.data() + s.size() && *begin == ' ') ++begin;
  auto res = std::from_chars(begin, s.data() + s.size(), v);
  if (res.ec != std::errc() || res.ptr != s.data() + s.size())
    throw ParseError("csv line " + std::to_string(line) + ", column '" + column + "': not a number: '" + s + "'");
  return v;
}

}  // namespace

Dataset load_csv(const std::filesystem::path& path, const std::string& target, bool regression) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("csv: cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto rows = parse_csv(ss.str());
  if (rows.empty()) throw ParseError("csv: missing header row");
  const auto& header = rows[0];
  auto it = std::find(header.begin(), header.end(), target);
  if (it == header.end()) throw ParseError("csv: no column named '" + target + "'");
  const std::size_t tcol = std::size_t(it - header.begin());
  const std::size_t n = rows.size() - 1, d = header.size() - 1;
  Dataset data;
  std::vector<double> feats;
  feats.reserve(n * d);
  for (std::size_t r = 1; r <= n; ++r) {
    if (rows[r].size() != header.size())
      throw ParseError("csv line " + std::to_string(r + 1) + ": expected " + std::to_string(header.size()) + " fields");
    for (std::size_t c = 0; c < header.size(); ++c) {
      const double v = parse_number(rows[r][c], r + 1, header[c]);
      if (c != tcol) {
        feats.push_back(v);
      } else if (regression) {
        data.targets.push_back(v);
      } else {
        if (v < 0 || v != std::floor(v))
          throw ParseError("csv line " + std::to_string(r + 1) + ": class id must be a nonnegative integer");
        data.labels.push_back(std::size_t(v));
      }
    }
  }
  data.features = Tensor({n, d}, std::move(feats));
  if (!regression) data.classes = data.labels.empty() ? 0 : *std::max_element(data.labels.begin(), data.labels.end()) + 1;
  return data;
}

// ---------------------------------------------------------------------------
// Synthetic sets

const char* to_string(SynthKind k) {
  switch (k) {
    case SynthKind::two_gaussians: return "two_gaussians";
    case SynthKind::two_regime_regression: return "two_regime_regression";
    case SynthKind::ring: return "ring";
  }
  return "?";
}

SynthKind parse_synth_kind(const std::string& s) {
  if (s == "two_gaussians") return SynthKind::two_gaussians;
  if (s == "two_regime_regression") return SynthKind::two_regime_regression;
  if (s == "ring") return SynthKind::ring;
  throw std::invalid_argument("unknown synthetic dataset '" + s + "'");
}

Dataset synth(SynthKind kind, std::size_t n, std::uint64_t seed, const SynthOptions& opts) {
  Rng rng = Rng(seed).derive(to_string(kind));
  Dataset d;
  d.classes = 2;
  switch (kind) {
    case SynthKind::two_gaussians: {
      const std::size_t dim = 2 + opts.nuisance_dims;
      d.features = Tensor({n, dim});
      const double shift = opts.separation / 2.0 / std::sqrt(2.0);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = rng.bernoulli(0.5) ? 1 : 0;
        d.labels.push_back(y);
        const double sign = y ? 1.0 : -1.0;
        for (std::size_t j = 0; j < dim; ++j) d.features[i * dim + j] = (j < 2 ? sign * shift : 0.0) + rng.normal();
      }
      break;
    }
    case SynthKind::two_regime_regression: {
      const std::size_t m = opts.regime_dims, dim = 1 + 2 * m;
      d.features = Tensor({n, dim});
      std::vector<double> wa(m), wb(m);
      Rng wrng = rng.derive("weights");
      for (std::size_t j = 0; j < m; ++j) {
        wa[j] = j % 2 == 0 ? 2.0 : 0.0;
        wb[j] = 0.3 * wrng.normal();
      }
      for (std::size_t i = 0; i < n; ++i) {
        const bool regime_a = rng.bernoulli(0.5);
        double* x = &d.features.data()[i * dim];
        x[0] = regime_a ? 1.0 : -1.0;
        double y = 0.0;
        for (std::size_t j = 0; j < m; ++j) {
          x[1 + j] = rng.normal();
          x[1 + m + j] = rng.normal();
          y += regime_a ? wa[j] * x[1 + j] : wb[j] * x[1 + m + j];
        }
        y += (regime_a ? 0.1 : 2.0) * opts.noise * rng.normal();
        d.targets.push_back(y);
        d.labels.push_back(y > 0.0 ? 1 : 0);
      }
      break;
    }
    case SynthKind::ring: {
      d.features = Tensor({n, 2});
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t y = rng.bernoulli(0.5) ? 1 : 0;
        d.labels.push_back(y);
        const double radius = y ? rng.uniform(1.5, 2.5) : std::sqrt(rng.uniform());
        const double angle = rng.uniform(0.0, 2.0 * M_PI);
        d.features[i * 2] = radius * std::cos(angle) + 0.1 * opts.noise * rng.normal();
        d.features[i * 2 + 1] = radius * std::sin(angle) + 0.1 * opts.noise * rng.normal();
      }
      break;
    }
  }
  return d;
}

}  // namespace hyperens
