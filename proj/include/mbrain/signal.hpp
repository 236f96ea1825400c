#pragma once

// Raw multi-channel recordings: data model, standardization, windowing,
// segment labels and the two on-disk formats (CSV and the "mbrn" binary).

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mbrain/matrix.hpp"

namespace mbrain {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t row = 0, std::size_t column = 0)
      : std::runtime_error(what + (row ? " (row " + std::to_string(row) + ", column " + std::to_string(column) + ")" : "")),
        row_(row),
        column_(column) {}
  std::size_t row() const { return row_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t row_, column_;
};

class InvalidWindowError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Row-major 0/1 matrix.
struct BinaryMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> data;

  BinaryMatrix() = default;
  BinaryMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint8_t& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::uint8_t operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t count() const { return static_cast<std::size_t>(std::count(data.begin(), data.end(), std::uint8_t{1})); }
  bool operator==(const BinaryMatrix&) const = default;
};

struct Recording {
  Matrix samples;  // L x C
  double sample_rate_hz = 1.0;
  std::vector<std::string> channel_names;
  BinaryMatrix point_labels;  // L x C

  std::size_t length() const { return samples.rows; }
  std::size_t channels() const { return samples.cols; }
};

struct SegmentSeries {
  std::vector<Matrix> segments;  // each W x C
  BinaryMatrix segment_labels;   // |S| x C
  std::size_t window_len = 0;
  std::string source_id;

  std::size_t size() const { return segments.size(); }
  std::size_t channels() const { return segment_labels.cols; }
};

struct NormalizationStats {
  std::vector<double> per_channel_mean;
  std::vector<double> per_channel_std;
  std::vector<std::string> warnings;
};

inline constexpr double kStdFloor = 1e-8;

inline Recording make_recording(Matrix samples, double sample_rate_hz, std::vector<std::string> names = {}) {
  Recording rec;
  if (names.empty())
    for (std::size_t c = 0; c < samples.cols; ++c) names.push_back("ch" + std::to_string(c));
  rec.point_labels = BinaryMatrix(samples.rows, samples.cols);
  rec.samples = std::move(samples);
  rec.sample_rate_hz = sample_rate_hz;
  rec.channel_names = std::move(names);
  return rec;
}

inline void validate(const Recording& rec) {
  if (rec.length() < 1) throw std::invalid_argument("Recording: needs at least one time point");
  if (rec.channels() < 2) throw std::invalid_argument("Recording: needs at least two channels");
  if (!(rec.sample_rate_hz > 0)) throw std::invalid_argument("Recording: sample rate must be positive");
  if (rec.channel_names.size() != rec.channels()) throw std::invalid_argument("Recording: one name per channel required");
  if (std::set<std::string>(rec.channel_names.begin(), rec.channel_names.end()).size() != rec.channels())
    throw std::invalid_argument("Recording: channel names must be unique");
  if (rec.point_labels.rows != rec.length() || rec.point_labels.cols != rec.channels())
    throw std::invalid_argument("Recording: label shape differs from sample shape");
  for (auto v : rec.point_labels.data)
    if (v > 1) throw std::invalid_argument("Recording: labels must be 0 or 1");
  for (double v : rec.samples.data)
    if (!std::isfinite(v)) throw std::invalid_argument("Recording: non-finite sample");
}

// ---- normalization --------------------------------------------------------

/// Per-channel standardization with the population (divide-by-L) std.
/// Constant channels map to zeros and are reported in the warnings.
inline std::pair<Recording, NormalizationStats> normalize_channels(const Recording& rec) {
  if (rec.length() < 2) throw std::invalid_argument("normalize_channels: needs at least two time points");
  const std::size_t len = rec.length(), ch = rec.channels();
  NormalizationStats stats;
  stats.per_channel_mean.assign(ch, 0.0);
  stats.per_channel_std.assign(ch, 0.0);
  Recording out = rec;
  for (std::size_t c = 0; c < ch; ++c) {
    double mean = 0.0;
    for (std::size_t l = 0; l < len; ++l) mean += rec.samples(l, c);
    mean /= static_cast<double>(len);
    double var = 0.0;
    for (std::size_t l = 0; l < len; ++l) {
      const double d = rec.samples(l, c) - mean;
      var += d * d;
    }
    double sd = std::sqrt(var / static_cast<double>(len));
    if (sd < kStdFloor) {
      stats.warnings.push_back("channel '" + rec.channel_names[c] + "' is constant; mapped to zeros");
      sd = kStdFloor;
      for (std::size_t l = 0; l < len; ++l) out.samples(l, c) = 0.0;
    } else {
      for (std::size_t l = 0; l < len; ++l) out.samples(l, c) = (rec.samples(l, c) - mean) / sd;
    }
    stats.per_channel_mean[c] = mean;
    stats.per_channel_std[c] = sd;
  }
  return {std::move(out), std::move(stats)};
}

inline Recording denormalize_channels(const Recording& rec, const NormalizationStats& stats) {
  if (stats.per_channel_mean.size() != rec.channels()) throw ShapeError("denormalize_channels: channel count mismatch");
  Recording out = rec;
  for (std::size_t l = 0; l < rec.length(); ++l)
    for (std::size_t c = 0; c < rec.channels(); ++c)
      out.samples(l, c) = rec.samples(l, c) * stats.per_channel_std[c] + stats.per_channel_mean[c];
  return out;
}

// ---- segmentation ---------------------------------------------------------

/// Window labels: entry (t, i) is the max of the `window` point labels of
/// channel i in window t. Trailing points beyond the last full window are
/// ignored.
inline BinaryMatrix derive_segment_labels(const BinaryMatrix& point_labels, std::size_t window) {
  if (window == 0) throw InvalidWindowError("derive_segment_labels: window must be positive");
  const std::size_t count = point_labels.rows / window;
  BinaryMatrix out(count, point_labels.cols);
  for (std::size_t t = 0; t < count; ++t)
    for (std::size_t c = 0; c < point_labels.cols; ++c) {
      std::uint8_t v = 0;
      for (std::size_t w = 0; w < window; ++w) v = std::max(v, point_labels(t * window + w, c));
      out(t, c) = v;
    }
  return out;
}

inline SegmentSeries segment_recording(const Recording& rec, std::size_t window, std::string source_id = {}) {
  if (window == 0) throw InvalidWindowError("segment_recording: window must be positive");
  if (window > rec.length())
    throw InvalidWindowError("segment_recording: window " + std::to_string(window) + " exceeds recording length " +
                             std::to_string(rec.length()));
  SegmentSeries s;
  s.window_len = window;
  s.source_id = std::move(source_id);
  const std::size_t count = rec.length() / window, ch = rec.channels();
  s.segments.reserve(count);
  for (std::size_t t = 0; t < count; ++t) {
    Matrix seg(window, ch);
    std::copy_n(rec.samples.data.begin() + static_cast<std::ptrdiff_t>(t * window * ch), window * ch, seg.data.begin());
    s.segments.push_back(std::move(seg));
  }
  s.segment_labels = derive_segment_labels(rec.point_labels, window);
  return s;
}

// ---- CSV ------------------------------------------------------------------

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) {
    const auto b = cell.find_first_not_of(" \t\r");
    const auto e = cell.find_last_not_of(" \t\r");
    cells.push_back(b == std::string::npos ? std::string{} : cell.substr(b, e - b + 1));
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline double parse_double(const std::string& cell, std::size_t row, std::size_t col) {
  if (cell.empty()) throw ParseError("empty numeric cell", row, col);
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(cell, &used);
  } catch (const std::exception&) {
    throw ParseError("non-numeric cell '" + cell + "'", row, col);
  }
  if (used != cell.size()) throw ParseError("non-numeric cell '" + cell + "'", row, col);
  return v;
}

inline long long parse_int(const std::string& cell, std::size_t row, std::size_t col) {
  std::size_t used = 0;
  long long v = 0;
  try {
    v = std::stoll(cell, &used);
  } catch (const std::exception&) {
    throw ParseError("non-integer cell '" + cell + "'", row, col);
  }
  if (used != cell.size()) throw ParseError("non-integer cell '" + cell + "'", row, col);
  return v;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Label CSV: rows (channel_name, start_index, end_index) marking the
/// half-open point range [start, end) as seizure. An optional header row
/// whose second cell is non-numeric is skipped.
inline void apply_label_csv(Recording& rec, const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t row = 0;
  std::map<std::string, std::size_t> index;
  for (std::size_t c = 0; c < rec.channel_names.size(); ++c) index[rec.channel_names[c]] = c;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != 3) throw ParseError("label row must have 3 cells", row, cells.size());
    if (row == 1 && cells[1] == "start_index") continue;
    auto it = index.find(cells[0]);
    if (it == index.end()) throw ParseError("unknown channel '" + cells[0] + "'", row, 1);
    const long long start = detail::parse_int(cells[1], row, 2);
    const long long end = detail::parse_int(cells[2], row, 3);
    if (start < 0 || end < start || static_cast<std::size_t>(end) > rec.length())
      throw ParseError("label range [" + cells[1] + ", " + cells[2] + ") outside recording of length " +
                           std::to_string(rec.length()),
                       row, 2);
    for (auto l = static_cast<std::size_t>(start); l < static_cast<std::size_t>(end); ++l) rec.point_labels(l, it->second) = 1;
  }
}

inline Recording parse_recording_csv(const std::string& text, double sample_rate_hz = 1.0) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("empty CSV: missing header", 1, 1);
  auto names = detail::split_csv_line(line);
  for (std::size_t c = 0; c < names.size(); ++c)
    if (names[c].empty()) throw ParseError("malformed header: empty channel name", 1, c + 1);
  if (std::set<std::string>(names.begin(), names.end()).size() != names.size())
    throw ParseError("malformed header: duplicate channel names", 1, 1);
  std::vector<double> values;
  std::size_t row = 1, count = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    auto cells = detail::split_csv_line(line);
    if (cells.size() != names.size())
      throw ParseError("expected " + std::to_string(names.size()) + " cells, found " + std::to_string(cells.size()), row,
                       std::min(cells.size(), names.size()) + 1);
    for (std::size_t c = 0; c < cells.size(); ++c) values.push_back(detail::parse_double(cells[c], row, c + 1));
    ++count;
  }
  Matrix samples(count, names.size(), std::move(values));
  return make_recording(std::move(samples), sample_rate_hz, std::move(names));
}

inline std::string format_recording_csv(const Recording& rec) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t c = 0; c < rec.channels(); ++c) out << (c ? "," : "") << rec.channel_names[c];
  out << "\n";
  for (std::size_t l = 0; l < rec.length(); ++l) {
    for (std::size_t c = 0; c < rec.channels(); ++c) out << (c ? "," : "") << rec.samples(l, c);
    out << "\n";
  }
  return out.str();
}

inline std::string format_label_csv(const Recording& rec) {
  std::ostringstream out;
  out << "channel_name,start_index,end_index\n";
  for (std::size_t c = 0; c < rec.channels(); ++c) {
    std::size_t l = 0;
    while (l < rec.length()) {
      if (!rec.point_labels(l, c)) {
        ++l;
        continue;
      }
      std::size_t e = l;
      while (e < rec.length() && rec.point_labels(e, c)) ++e;
      out << rec.channel_names[c] << "," << l << "," << e << "\n";
      l = e;
    }
  }
  return out.str();
}

/// Sidecar label file used by the CSV format: "<stem>.labels.csv".
inline std::filesystem::path label_path_for(const std::filesystem::path& data_path) {
  auto p = data_path;
  p.replace_extension();
  p += ".labels.csv";
  return p;
}

// ---- mbrn binary ----------------------------------------------------------
// "MBRN" | u8 version=1 | u32 C | u64 L | f64 sample_rate |
// L*C float32 samples (row-major) | L*C uint8 labels. All little-endian.

inline constexpr std::uint8_t kMbrnVersion = 1;

namespace detail {

template <typename U>
void put_le(std::string& out, U v) {
  for (std::size_t b = 0; b < sizeof(U); ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xFF));
}

template <typename U>
U get_le(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(U) > in.size()) throw ParseError("mbrn: truncated file at byte " + std::to_string(pos));
  U v = 0;
  for (std::size_t b = 0; b < sizeof(U); ++b) v |= static_cast<U>(static_cast<unsigned char>(in[pos + b])) << (8 * b);
  pos += sizeof(U);
  return v;
}

}  // namespace detail

inline std::string encode_mbrn(const Recording& rec) {
  std::string out = "MBRN";
  out.reserve(4 + 1 + 4 + 8 + 8 + rec.samples.size() * 5);
  detail::put_le<std::uint8_t>(out, kMbrnVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(rec.channels()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(rec.length()));
  detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(rec.sample_rate_hz));
  for (double v : rec.samples.data) detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  for (auto v : rec.point_labels.data) out.push_back(static_cast<char>(v));
  return out;
}

inline Recording decode_mbrn(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "MBRN") != 0) throw ParseError("mbrn: bad magic bytes");
  std::size_t pos = 4;
  const auto version = detail::get_le<std::uint8_t>(bytes, pos);
  if (version != kMbrnVersion) throw ParseError("mbrn: unsupported version " + std::to_string(version));
  const auto ch = detail::get_le<std::uint32_t>(bytes, pos);
  const auto len = detail::get_le<std::uint64_t>(bytes, pos);
  const double rate = std::bit_cast<double>(detail::get_le<std::uint64_t>(bytes, pos));
  const std::size_t n = static_cast<std::size_t>(len) * ch;
  if (bytes.size() != pos + n * 5)
    throw ParseError("mbrn: payload size " + std::to_string(bytes.size() - pos) + " does not match header (" +
                     std::to_string(n * 5) + " bytes expected)");
  Matrix samples(static_cast<std::size_t>(len), ch);
  for (std::size_t i = 0; i < n; ++i)
    samples.data[i] = static_cast<double>(std::bit_cast<float>(detail::get_le<std::uint32_t>(bytes, pos)));
  Recording rec = make_recording(std::move(samples), rate);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = static_cast<std::uint8_t>(bytes[pos + i]);
    if (v > 1) throw ParseError("mbrn: label byte " + std::to_string(v) + " is not 0/1", i / ch + 1, i % ch + 1);
    rec.point_labels.data[i] = v;
  }
  return rec;
}

enum class RecordingFormat { csv, mbrn };

inline void save_recording(const Recording& rec, const std::filesystem::path& path, RecordingFormat format) {
  auto write = [](const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write '" + p.string() + "'");
    out << s;
  };
  if (format == RecordingFormat::mbrn) {
    write(path, encode_mbrn(rec));
  } else {
    write(path, format_recording_csv(rec));
    if (rec.point_labels.count() > 0) write(label_path_for(path), format_label_csv(rec));
  }
}

/// CSV recordings pick up "<stem>.labels.csv" when present; otherwise all
/// labels are zero.
inline Recording load_recording(const std::filesystem::path& path, RecordingFormat format, double sample_rate_hz = 1.0) {
  const std::string text = detail::read_file(path);
  if (format == RecordingFormat::mbrn) return decode_mbrn(text);
  Recording rec = parse_recording_csv(text, sample_rate_hz);
  const auto labels = label_path_for(path);
  if (std::filesystem::exists(labels)) apply_label_csv(rec, detail::read_file(labels));
  return rec;
}

}  // namespace mbrain
