#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "hyperens/tensor.hpp"

namespace hyperens {

class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Features are [n, d] or NHWC images [n, h, w, c]. Classification sets carry
/// labels in [0, classes); regression sets carry targets (and may also carry
/// derived labels).
struct Dataset {
  Tensor features;
  std::vector<std::size_t> labels;
  std::vector<double> targets;
  std::size_t classes = 0;

  std::size_t size() const { return features.rank() == 0 ? 0 : features.dim(0); }
  std::size_t row_size() const { return size() == 0 ? shape_size(features.shape()) : features.size() / size(); }
  /// Rows in the given order (repeats allowed).
  Dataset subset(std::span<const std::size_t> rows) const;
  /// Throws unless labels/targets match the row count and labels are in range.
  void validate() const;
};

struct DataSplit {
  Dataset train, val, test;
};

/// Seeded permutation, then consecutive blocks: test first, then validation,
/// rest train. A pure function of (seed, n) and the fractions.
DataSplit split_dataset(const Dataset& data, double val_fraction, double test_fraction, std::uint64_t seed);

// IDX files: big-endian magic 0x0000080N with N the number of dimensions, the
// dimension sizes as big-endian u32, then unsigned bytes.
struct IdxArray {
  std::vector<std::size_t> dims;
  std::vector<std::uint8_t> bytes;
};
IdxArray read_idx(const std::filesystem::path& path);
IdxArray parse_idx(std::span<const std::uint8_t> raw);
/// Image file [n, rows, cols] -> features [n, rows, cols, 1] scaled to [0, 1].
Tensor idx_images(const IdxArray& images);
std::vector<std::size_t> idx_labels(const IdxArray& labels);
/// Pairs an image file with its label file.
Dataset load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Header row plus numeric rows; RFC 4180 quoting. `target` names the column
/// holding the class id (classification) or the real target (regression).
Dataset load_csv(const std::filesystem::path& path, const std::string& target, bool regression);
std::vector<std::vector<std::string>> parse_csv(const std::string& text);
std::string csv_escape(const std::string& field);
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
/// Shortest decimal that parses back to the same double.
std::string format_double(double v);

enum class SynthKind { two_gaussians, two_regime_regression, ring };
const char* to_string(SynthKind k);
SynthKind parse_synth_kind(const std::string& s);

struct SynthOptions {
  /// two_gaussians: distance between class means in units of the noise sd.
  double separation = 3.0;
  /// two_gaussians: pure-noise feature columns appended after the 2 signal ones.
  std::size_t nuisance_dims = 8;
  /// two_regime_regression: feature count per regime block.
  std::size_t regime_dims = 4;
  double noise = 1.0;
};

/// Deterministic per (kind, n, seed, options).
///  two_gaussians: balanced labels, class means at +-separation/2 along a fixed
///    signal direction, plus nuisance columns.
///  two_regime_regression: a regime flag column and two feature blocks; regime
///    A has a strong sparse signal, regime B a weak signal under heavy noise,
///    so the best ridge strength differs between them. labels = (target > 0).
///  ring: class 1 on a ring around class 0's disc, in 2-d.
Dataset synth(SynthKind kind, std::size_t n, std::uint64_t seed, const SynthOptions& opts = {});

}  // namespace hyperens
