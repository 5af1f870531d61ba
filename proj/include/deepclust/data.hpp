#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <vector>

#include "deepclust/random.hpp"
#include "deepclust/tensor.hpp"

namespace deepclust {

using LabelVector = std::vector<long>;

struct Dataset {
  Tensor samples;                      // [n, ...]
  std::optional<LabelVector> labels;   // evaluation only
  std::string name;
  std::string normalization;           // e.g. "pixels/255"

  std::size_t size() const { return samples.empty() ? 0 : samples.dim(0); }

  void validate() const {
    if (labels && labels->size() != size()) {
      throw std::invalid_argument("dataset " + name + ": " + std::to_string(labels->size()) +
                                  " labels for " + std::to_string(size()) + " samples");
    }
  }
};

// Malformed input files. Subclasses name the failure so callers and tests
// can tell them apart.
struct DataFormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IdxBadMagic : DataFormatError {
  using DataFormatError::DataFormatError;
};
struct IdxTruncated : DataFormatError {
  using DataFormatError::DataFormatError;
};
struct IdxCountMismatch : DataFormatError {
  using DataFormatError::DataFormatError;
};
struct CsvError : DataFormatError {
  CsvError(std::size_t row, const std::string& what)
      : DataFormatError("row " + std::to_string(row) + ": " + what), row(row) {}
  std::size_t row;
};

namespace detail {

inline std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("write to " + path + " failed");
}

inline std::uint32_t be_u32(std::string_view b, std::size_t off) {
  std::uint32_t v = 0;
  for (std::size_t i = 0; i < 4; ++i) v = (v << 8) | static_cast<unsigned char>(b[off + i]);
  return v;
}

inline void put_be_u32(std::string& out, std::uint32_t v) {
  for (int i = 3; i >= 0; --i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

// Header of an unsigned-byte IDX file: magic 0x000008NN, NN dimensions.
inline std::vector<std::size_t> idx_header(std::string_view bytes, std::uint32_t expected_magic,
                                           const std::string& path) {
  if (bytes.size() < 4) throw IdxTruncated(path + ": file shorter than the IDX magic");
  const std::uint32_t magic = be_u32(bytes, 0);
  if (magic != expected_magic) {
    std::ostringstream ss;
    ss << path << ": bad magic 0x" << std::hex << magic << ", expected 0x" << expected_magic;
    throw IdxBadMagic(ss.str());
  }
  const std::size_t rank = magic & 0xFF;
  if (bytes.size() < 4 + 4 * rank) throw IdxTruncated(path + ": truncated dimension header");
  std::vector<std::size_t> dims(rank);
  std::size_t payload = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    dims[i] = be_u32(bytes, 4 + 4 * i);
    payload *= dims[i];
  }
  const std::size_t have = bytes.size() - 4 - 4 * rank;
  if (have < payload) {
    throw IdxTruncated(path + ": truncated payload, " + std::to_string(have) + " of " +
                       std::to_string(payload) + " bytes");
  }
  if (have > payload) {
    throw DataFormatError(path + ": " + std::to_string(have - payload) + " trailing bytes after payload");
  }
  return dims;
}

inline std::vector<std::string_view> split_cells(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    std::string_view cell = line.substr(start, comma == std::string_view::npos ? line.npos : comma - start);
    while (!cell.empty() && (cell.front() == ' ' || cell.front() == '\t')) cell.remove_prefix(1);
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\t' || cell.back() == '\r')) {
      cell.remove_suffix(1);
    }
    out.push_back(cell);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start < text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  return out;
}

inline bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

template <typename T>
std::optional<T> parse_number(std::string_view cell) {
  T v{};
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (!cell.empty() && cell.front() == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || cell.empty()) return std::nullopt;
  if constexpr (std::is_floating_point_v<T>) {
    if (!std::isfinite(v)) return std::nullopt;
  }
  return v;
}

}  // namespace detail

// Shortest round-trip decimal form, independent of the global locale.
inline std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

// Unsigned-byte IDX files: images (magic 0x803, dims n x rows x cols)
// become [n, 1, rows, cols] scaled to [0, 1]; labels (magic 0x801) are kept
// as integers.
inline Dataset load_idx(const std::string& images_path, const std::optional<std::string>& labels_path = {}) {
  const std::string bytes = detail::read_file(images_path);
  const auto dims = detail::idx_header(bytes, 0x00000803, images_path);
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0) throw DataFormatError(images_path + ": empty image set");
  Dataset ds;
  ds.name = images_path;
  ds.normalization = "pixels/255";
  ds.samples = Tensor({dims[0], 1, dims[1], dims[2]});
  const std::size_t off = 16;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    ds.samples[i] = static_cast<unsigned char>(bytes[off + i]) / 255.0;
  }
  if (labels_path) {
    const std::string lb = detail::read_file(*labels_path);
    const auto ldims = detail::idx_header(lb, 0x00000801, *labels_path);
    if (ldims[0] != dims[0]) {
      throw IdxCountMismatch(images_path + " has " + std::to_string(dims[0]) + " images but " + *labels_path +
                             " has " + std::to_string(ldims[0]) + " labels");
    }
    LabelVector labels(ldims[0]);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<unsigned char>(lb[8 + i]);
    ds.labels = std::move(labels);
  }
  return ds;
}

// Inverse of load_idx; pixel values are quantized back to bytes.
inline std::string idx_image_bytes(const Tensor& images) {
  if (images.rank() != 4 || images.dim(1) != 1) {
    throw std::invalid_argument("idx images need shape [n,1,rows,cols], got " + shape_str(images.shape()));
  }
  std::string out;
  out.reserve(16 + images.size());
  detail::put_be_u32(out, 0x00000803);
  detail::put_be_u32(out, static_cast<std::uint32_t>(images.dim(0)));
  detail::put_be_u32(out, static_cast<std::uint32_t>(images.dim(2)));
  detail::put_be_u32(out, static_cast<std::uint32_t>(images.dim(3)));
  for (double v : images.values()) {
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("idx pixel outside [0,1]");
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
  }
  return out;
}

inline std::string idx_label_bytes(const LabelVector& labels) {
  std::string out;
  detail::put_be_u32(out, 0x00000801);
  detail::put_be_u32(out, static_cast<std::uint32_t>(labels.size()));
  for (long l : labels) {
    if (l < 0 || l > 255) throw std::invalid_argument("idx label " + std::to_string(l) + " outside a byte");
    out.push_back(static_cast<char>(static_cast<unsigned char>(l)));
  }
  return out;
}

inline void write_idx(const Dataset& ds, const std::string& images_path,
                      const std::optional<std::string>& labels_path = {}) {
  detail::write_file(images_path, idx_image_bytes(ds.samples));
  if (labels_path) {
    if (!ds.labels) throw std::invalid_argument("write_idx: dataset has no labels");
    detail::write_file(*labels_path, idx_label_bytes(*ds.labels));
  }
}

struct CsvOptions {
  std::optional<std::size_t> label_column;  // 0-based
  bool header = false;
};

// Rectangular numeric CSV, one sample per row. Row numbers in errors are
// 1-based file lines.
inline Dataset load_csv(const std::string& path, const CsvOptions& opts = {}) {
  const std::string text = detail::read_file(path);
  const auto lines = detail::split_lines(text);
  std::vector<double> values;
  LabelVector labels;
  std::size_t width = 0, rows = 0;
  for (std::size_t li = opts.header ? 1 : 0; li < lines.size(); ++li) {
    if (detail::blank(lines[li])) continue;
    const std::size_t row = li + 1;
    const auto cells = detail::split_cells(lines[li]);
    if (rows == 0) {
      width = cells.size();
      if (opts.label_column && *opts.label_column >= width) {
        throw CsvError(row, "label column " + std::to_string(*opts.label_column) + " but only " +
                                std::to_string(width) + " columns");
      }
      if (width - (opts.label_column ? 1 : 0) == 0) throw CsvError(row, "no feature columns");
    } else if (cells.size() != width) {
      throw CsvError(row, "expected " + std::to_string(width) + " cells, found " + std::to_string(cells.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (opts.label_column && c == *opts.label_column) {
        const auto l = detail::parse_number<long>(cells[c]);
        if (!l) throw CsvError(row, "label '" + std::string(cells[c]) + "' is not an integer");
        labels.push_back(*l);
        continue;
      }
      const auto v = detail::parse_number<double>(cells[c]);
      if (!v) {
        throw CsvError(row, "column " + std::to_string(c + 1) + ": '" + std::string(cells[c]) + "' is not a number");
      }
      values.push_back(*v);
    }
    ++rows;
  }
  if (rows == 0) throw DataFormatError(path + ": no data rows");
  Dataset ds;
  ds.name = path;
  ds.normalization = "none";
  ds.samples = Tensor({rows, width - (opts.label_column ? 1 : 0)}, std::move(values));
  if (opts.label_column) ds.labels = std::move(labels);
  return ds;
}

// One integer label per row taken from `column`; a non-numeric first row
// is treated as a header.
inline LabelVector load_labels(const std::string& path, std::size_t column = 0) {
  const std::string text = detail::read_file(path);
  const auto lines = detail::split_lines(text);
  LabelVector out;
  bool first = true;
  for (std::size_t li = 0; li < lines.size(); ++li) {
    if (detail::blank(lines[li])) continue;
    const auto cells = detail::split_cells(lines[li]);
    if (column >= cells.size()) {
      throw CsvError(li + 1, "no column " + std::to_string(column) + " in " + path);
    }
    const auto l = detail::parse_number<long>(cells[column]);
    if (!l) {
      if (first) {
        first = false;
        continue;
      }
      throw CsvError(li + 1, "label '" + std::string(cells[column]) + "' is not an integer");
    }
    first = false;
    out.push_back(*l);
  }
  if (out.empty()) throw DataFormatError(path + ": no labels");
  return out;
}

inline void write_labels(const std::string& path, const std::vector<std::size_t>& labels) {
  std::string out;
  for (std::size_t l : labels) out += std::to_string(l) + "\n";
  detail::write_file(path, out);
}

enum class Nonlinearity { none, tanh_mix };

struct BlobSpec {
  std::size_t n_per_cluster = 100;
  std::size_t k = 3;
  std::size_t dim = 2;
  double separation = 10.0;
  Nonlinearity nonlinearity = Nonlinearity::none;
  std::uint64_t seed = 0;
};

namespace detail {

// |det| via partial-pivot elimination, used to reject near-singular maps.
inline double min_pivot(std::vector<double> a, std::size_t d) {
  double smallest = INFINITY;
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t p = c;
    for (std::size_t r = c + 1; r < d; ++r) {
      if (std::abs(a[r * d + c]) > std::abs(a[p * d + c])) p = r;
    }
    for (std::size_t j = 0; j < d; ++j) std::swap(a[c * d + j], a[p * d + j]);
    const double piv = a[c * d + c];
    smallest = std::min(smallest, std::abs(piv));
    if (piv == 0.0) return 0.0;
    for (std::size_t r = c + 1; r < d; ++r) {
      const double f = a[r * d + c] / piv;
      for (std::size_t j = c; j < d; ++j) a[r * d + j] -= f * a[c * d + j];
    }
  }
  return smallest;
}

}  // namespace detail

// k unit-variance Gaussian clusters; cluster c is centred at
// separation * (1 + c / dim) * e_(c mod dim). tanh_mix then applies
// x -> tanh(A x) with A a fixed random invertible matrix, entries N(0, 4/dim).
inline Dataset synth_blobs(const BlobSpec& spec) {
  if (spec.k < 1) throw std::invalid_argument("synth_blobs: k must be at least 1");
  if (spec.dim < 2) throw std::invalid_argument("synth_blobs: dim must be at least 2");
  if (spec.n_per_cluster < 1) throw std::invalid_argument("synth_blobs: n_per_cluster must be at least 1");
  if (!std::isfinite(spec.separation)) throw std::invalid_argument("synth_blobs: separation must be finite");
  const std::size_t n = spec.k * spec.n_per_cluster, d = spec.dim;
  Rng rng(derive_seed(spec.seed, 0));
  Dataset ds;
  ds.name = "blobs";
  ds.normalization = "none";
  ds.samples = Tensor({n, d});
  LabelVector labels(n);
  for (std::size_t c = 0; c < spec.k; ++c) {
    const double offset = spec.separation * static_cast<double>(1 + c / d);
    for (std::size_t m = 0; m < spec.n_per_cluster; ++m) {
      const std::size_t i = c * spec.n_per_cluster + m;
      auto r = ds.samples.row(i);
      for (double& v : r) v = rng.normal();
      r[c % d] += offset;
      labels[i] = static_cast<long>(c);
    }
  }
  if (spec.nonlinearity == Nonlinearity::tanh_mix) {
    Rng mix(derive_seed(spec.seed, 1));
    const double sd = 2.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> a(d * d);
    do {
      for (double& v : a) v = sd * mix.normal();
    } while (detail::min_pivot(a, d) < 1e-3);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < n; ++i) {
      auto r = ds.samples.row(i);
      for (std::size_t p = 0; p < d; ++p) {
        double s = 0.0;
        for (std::size_t q = 0; q < d; ++q) s += a[p * d + q] * r[q];
        y[p] = std::tanh(s);
      }
      std::copy(y.begin(), y.end(), r.begin());
    }
    ds.normalization = "tanh_mix";
  }
  ds.labels = std::move(labels);
  return ds;
}

// Principal axes of the row-centred data by cyclic Jacobi on the
// covariance. Each axis is signed so its largest-magnitude entry is
// positive, which makes the projection deterministic.
inline Tensor pca_project(const Tensor& x, std::size_t components = 2) {
  if (x.rank() != 2) throw std::invalid_argument("pca: expected [n,d]");
  const std::size_t n = x.dim(0), d = x.dim(1);
  if (components == 0 || components > d) throw std::invalid_argument("pca: bad component count");
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  }
  for (double& m : mean) m /= static_cast<double>(n);
  std::vector<double> c(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t p = 0; p < d; ++p) {
      const double xp = x(i, p) - mean[p];
      for (std::size_t q = 0; q < d; ++q) c[p * d + q] += xp * (x(i, q) - mean[q]);
    }
  }
  std::vector<double> v(d * d, 0.0);
  for (std::size_t i = 0; i < d; ++i) v[i * d + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0, diag = 0.0;
    for (std::size_t p = 0; p < d; ++p) {
      diag += c[p * d + p] * c[p * d + p];
      for (std::size_t q = p + 1; q < d; ++q) off += c[p * d + q] * c[p * d + q];
    }
    if (off <= 1e-30 * diag || off == 0.0) break;
    for (std::size_t p = 0; p < d; ++p) {
      for (std::size_t q = p + 1; q < d; ++q) {
        const double apq = c[p * d + q];
        if (apq == 0.0) continue;
        const double theta = (c[q * d + q] - c[p * d + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double cs = 1.0 / std::sqrt(t * t + 1.0), sn = t * cs;
        for (std::size_t k = 0; k < d; ++k) {
          const double akp = c[k * d + p], akq = c[k * d + q];
          c[k * d + p] = cs * akp - sn * akq;
          c[k * d + q] = sn * akp + cs * akq;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double apk = c[p * d + k], aqk = c[q * d + k];
          c[p * d + k] = cs * apk - sn * aqk;
          c[q * d + k] = sn * apk + cs * aqk;
        }
        for (std::size_t k = 0; k < d; ++k) {
          const double vkp = v[k * d + p], vkq = v[k * d + q];
          v[k * d + p] = cs * vkp - sn * vkq;
          v[k * d + q] = sn * vkp + cs * vkq;
        }
      }
    }
  }
  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return c[a * d + a] > c[b * d + b]; });
  Tensor out({n, components});
  for (std::size_t k = 0; k < components; ++k) {
    const std::size_t col = order[k];
    std::size_t big = 0;
    for (std::size_t j = 1; j < d; ++j) {
      if (std::abs(v[j * d + col]) > std::abs(v[big * d + col])) big = j;
    }
    const double sign = v[big * d + col] < 0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += (x(i, j) - mean[j]) * v[j * d + col];
      out(i, k) = sign * s;
    }
  }
  return out;
}

// sample_id,assigned_cluster,z_0..z_{d-1}; plus sample_id,pc_0,pc_1.
inline void export_embeddings(const Tensor& z, const std::vector<std::size_t>& assignments,
                              const std::string& csv_path, const std::string& pca_path) {
  if (z.rank() != 2 || z.dim(0) != assignments.size()) {
    throw std::invalid_argument("export_embeddings: " + std::to_string(assignments.size()) +
                                " assignments for embeddings " + shape_str(z.shape()));
  }
  std::string out = "sample_id,assigned_cluster";
  for (std::size_t j = 0; j < z.dim(1); ++j) out += ",z_" + std::to_string(j);
  out += "\n";
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    out += std::to_string(i) + "," + std::to_string(assignments[i]);
    for (double v : z.row(i)) out += "," + format_double(v);
    out += "\n";
  }
  detail::write_file(csv_path, out);
  // A one-dimensional embedding gets a zero second column.
  Tensor pc({z.dim(0), 2});
  const Tensor proj = pca_project(z, std::min<std::size_t>(2, z.dim(1)));
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    for (std::size_t k = 0; k < proj.dim(1); ++k) pc(i, k) = proj(i, k);
  }
  std::string p = "sample_id,pc_0,pc_1\n";
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    p += std::to_string(i) + "," + format_double(pc(i, 0)) + "," + format_double(pc(i, 1)) + "\n";
  }
  detail::write_file(pca_path, p);
}

}  // namespace deepclust
