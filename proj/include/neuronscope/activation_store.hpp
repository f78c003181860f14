#pragma once

// NSAC activation files: per-concept max-pooled unit responses.
//
//   magic "NSAC" | version u16 | flags u16 | D u32 | num_blocks u32 | M u64 |
//   N u32 | concept_id (u16 length + UTF-8) | labels N x u8 |
//   responses N x M f32, row-major |
//   footer: chunk_width u32 | num_chunks u32 | offsets u64 x num_chunks |
//   CRC32 u32 over every preceding byte
//
// All integers little-endian. offsets[k] is the absolute byte offset of
// (row 0, column k * chunk_width); together with M it locates every column
// segment, so a reader can pull column chunks without loading the matrix.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "neuronscope/detail/binary_io.hpp"
#include "neuronscope/error.hpp"
#include "neuronscope/unit_catalog.hpp"

namespace nscope {

inline constexpr std::array<char, 4> kActivationMagic = {'N', 'S', 'A', 'C'};
inline constexpr std::uint16_t kActivationVersion = 1;
inline constexpr std::uint32_t kDefaultChunkWidth = 64;

struct ActivationMatrix {
  std::string concept_id;
  UnitCatalog catalog;
  std::vector<std::uint8_t> labels;
  std::vector<float> responses;  // rows() x cols(), row-major

  std::size_t rows() const noexcept { return labels.size(); }
  std::size_t cols() const noexcept { return static_cast<std::size_t>(catalog.total_units()); }

  float at(std::size_t row, std::size_t col) const { return responses[row * cols() + col]; }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(responses).subspan(r * cols(), cols());
  }

  std::vector<float> column(std::size_t col) const {
    std::vector<float> out(rows());
    for (std::size_t r = 0; r < rows(); ++r) out[r] = at(r, col);
    return out;
  }

  friend bool operator==(const ActivationMatrix&, const ActivationMatrix&) = default;
};

inline void validate_labels(std::span<const std::uint8_t> labels) {
  std::size_t pos = 0;
  for (auto b : labels) {
    require(b == 0 || b == 1, ErrorCode::FormatError, "labels must be 0 or 1");
    pos += b;
  }
  require(pos > 0 && pos < labels.size(), ErrorCode::DegenerateLabels,
          "labels need at least one positive and one negative");
}

inline void validate(const ActivationMatrix& m) {
  require(m.catalog.total_units() > 0, ErrorCode::InvalidArgument, "empty unit catalog");
  validate_labels(m.labels);
  require(m.responses.size() == m.rows() * m.cols(), ErrorCode::ShapeMismatch,
          "response matrix size does not match N x M");
  for (float v : m.responses)
    require(std::isfinite(v), ErrorCode::NonFiniteScore, "non-finite response in " + m.concept_id);
}

namespace detail {

inline std::uint64_t chunk_count(std::uint64_t total_units, std::uint32_t chunk_width) {
  return (total_units + chunk_width - 1) / chunk_width;
}

inline std::uint64_t header_bytes(std::size_t concept_id_len) {
  return 4 + 2 + 2 + 4 + 4 + 8 + 4 + 2 + concept_id_len;
}

}  // namespace detail

// Total file size for a given shape; used for truncation checks and tests.
inline std::uint64_t activation_file_size(std::size_t concept_id_len, std::uint64_t rows,
                                          std::uint64_t total_units,
                                          std::uint32_t chunk_width = kDefaultChunkWidth) {
  return detail::header_bytes(concept_id_len) + rows + 4 * rows * total_units + 8 +
         8 * detail::chunk_count(total_units, chunk_width) + 4;
}

// Row-streaming writer: header and labels go out on construction, rows are
// appended one sentence at a time, finish() writes footer and checksum.
class ActivationWriter {
 public:
  ActivationWriter(std::ostream& out, std::string concept_id, const UnitCatalog& catalog,
                   std::vector<std::uint8_t> labels, std::uint32_t chunk_width = kDefaultChunkWidth)
      : writer_(out), catalog_(catalog), rows_(labels.size()), chunk_width_(chunk_width) {
    require(catalog.total_units() > 0, ErrorCode::InvalidArgument, "empty unit catalog");
    require(chunk_width > 0, ErrorCode::InvalidArgument, "chunk width must be positive");
    require(labels.size() <= 0xFFFFFFFFu, ErrorCode::OutOfRange, "too many rows");
    validate_labels(labels);
    writer_.bytes(kActivationMagic.data(), kActivationMagic.size());
    writer_.u16(kActivationVersion);
    writer_.u16(0);
    writer_.u32(catalog.model_dim());
    writer_.u32(catalog.num_blocks());
    writer_.u64(catalog.total_units());
    writer_.u32(static_cast<std::uint32_t>(labels.size()));
    writer_.short_string(concept_id);
    data_offset_ = writer_.bytes_written() + labels.size();
    writer_.array(std::span<const std::uint8_t>(labels));
  }

  void append_row(std::span<const float> row) {
    require(row.size() == catalog_.total_units(), ErrorCode::ShapeMismatch,
            "row length does not match M");
    require(written_rows_ < rows_, ErrorCode::OutOfRange, "more rows than labels");
    for (float v : row) require(std::isfinite(v), ErrorCode::NonFiniteScore, "non-finite response");
    writer_.array(row);
    ++written_rows_;
  }

  void finish() {
    require(written_rows_ == rows_, ErrorCode::ShapeMismatch,
            "wrote " + std::to_string(written_rows_) + " of " + std::to_string(rows_) + " rows");
    require(!finished_, ErrorCode::Internal, "writer already finished");
    const auto chunks = detail::chunk_count(catalog_.total_units(), chunk_width_);
    writer_.u32(chunk_width_);
    writer_.u32(static_cast<std::uint32_t>(chunks));
    for (std::uint64_t k = 0; k < chunks; ++k)
      writer_.u64(data_offset_ + 4 * k * static_cast<std::uint64_t>(chunk_width_));
    writer_.finish_with_crc();
    finished_ = true;
  }

  std::uint64_t bytes_written() const noexcept { return writer_.bytes_written(); }

 private:
  detail::BinaryWriter writer_;
  UnitCatalog catalog_;
  std::size_t rows_;
  std::size_t written_rows_ = 0;
  std::uint32_t chunk_width_;
  std::uint64_t data_offset_ = 0;
  bool finished_ = false;
};

inline void write_activations(const ActivationMatrix& matrix, std::ostream& out,
                              std::uint32_t chunk_width = kDefaultChunkWidth) {
  validate(matrix);
  ActivationWriter writer(out, matrix.concept_id, matrix.catalog, matrix.labels, chunk_width);
  for (std::size_t r = 0; r < matrix.rows(); ++r) writer.append_row(matrix.row(r));
  writer.finish();
}

inline void write_activations_file(const ActivationMatrix& matrix, const std::string& path,
                                   std::uint32_t chunk_width = kDefaultChunkWidth) {
  validate(matrix);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot create " + path);
  write_activations(matrix, out, chunk_width);
  out.flush();
  if (!out) fail(ErrorCode::Io, "failed writing " + path);
}

struct ActivationHeader {
  std::string concept_id;
  UnitCatalog catalog;
  std::uint32_t rows = 0;
  std::uint64_t data_offset = 0;  // absolute offset of the first response
};

namespace detail {

inline ActivationHeader read_activation_header(BinaryReader& reader) {
  std::array<char, 4> magic{};
  reader.bytes(magic.data(), magic.size());
  if (magic != kActivationMagic) fail(ErrorCode::BadMagic, "not an NSAC activation file");
  const auto version = reader.u16();
  if (version != kActivationVersion)
    fail(ErrorCode::UnsupportedVersion, "NSAC version " + std::to_string(version));
  if (reader.u16() != 0) fail(ErrorCode::FormatError, "unknown NSAC flags");
  const auto dim = reader.u32();
  const auto blocks = reader.u32();
  const auto total = reader.u64();
  if (dim == 0 || blocks == 0) fail(ErrorCode::FormatError, "empty catalog in header");
  if (dim > (1u << 24) || blocks > (1u << 20))
    fail(ErrorCode::FormatError, "implausible catalog dimensions in header");
  ActivationHeader h;
  h.catalog = UnitCatalog(dim, blocks);
  if (total != h.catalog.total_units())
    fail(ErrorCode::FormatError, "header M disagrees with blocks * 9 * D");
  h.rows = reader.u32();
  // Any file this large cannot exist; rejecting early also keeps the size
  // arithmetic below free of overflow.
  if (total > (1ULL << 40) || total * std::max<std::uint64_t>(h.rows, 1) > (1ULL << 60))
    fail(ErrorCode::TruncatedFile, "header declares an implausibly large matrix");
  h.concept_id = reader.short_string();
  h.data_offset = reader.consumed() + h.rows;
  return h;
}

inline void check_footer(BinaryReader& reader, const ActivationHeader& h) {
  const auto chunk_width = reader.u32();
  const auto chunks = reader.u32();
  if (chunk_width == 0 || chunks != chunk_count(h.catalog.total_units(), chunk_width))
    fail(ErrorCode::FormatError, "inconsistent column chunk table");
  for (std::uint32_t k = 0; k < chunks; ++k)
    if (reader.u64() != h.data_offset + 4ULL * k * chunk_width)
      fail(ErrorCode::FormatError, "column chunk offset mismatch");
}

}  // namespace detail

// Reads a complete file into memory. Seekable streams are size-checked before
// allocating so a damaged header cannot trigger a huge allocation.
inline ActivationMatrix read_activations(std::istream& in) {
  const auto available = detail::remaining_bytes(in);
  detail::BinaryReader reader(in);
  auto h = detail::read_activation_header(reader);
  const auto total = h.catalog.total_units();

  if (available >= 0) {
    const auto consumed = reader.consumed();
    // The footer width is unknown until it is read, so compare against the
    // smallest possible footer first and the exact size after.
    const auto min_size = consumed + h.rows + 4ULL * h.rows * total + 8 + 8 + 4;
    if (static_cast<std::uint64_t>(available) < min_size)
      fail(ErrorCode::TruncatedFile, "file shorter than its header declares");
  }

  ActivationMatrix m;
  m.concept_id = std::move(h.concept_id);
  m.catalog = h.catalog;
  m.labels.resize(h.rows);
  reader.bytes(m.labels.data(), m.labels.size());
  m.responses.resize(static_cast<std::size_t>(h.rows) * total);
  reader.bytes(m.responses.data(), m.responses.size() * sizeof(float));
  h.concept_id = m.concept_id;
  detail::check_footer(reader, h);
  reader.expect_crc_and_end();
  validate_labels(m.labels);
  for (float v : m.responses)
    if (!std::isfinite(v)) fail(ErrorCode::FormatError, "non-finite response stored in file");
  return m;
}

inline ActivationMatrix read_activations_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path);
  return read_activations(in);
}

// A block of consecutive columns, stored column-major: values[j * rows + r].
struct ColumnChunk {
  std::uint64_t first = 0;
  std::size_t count = 0;
  std::size_t rows = 0;
  std::vector<float> values;

  std::span<const float> column(std::size_t j) const {
    return std::span<const float>(values).subspan(j * rows, rows);
  }
};

class ColumnCursor;

// Random-access view of a verified NSAC file. Opening checks size, footer,
// labels and the CRC with a bounded buffer; the matrix itself is never held.
// Instances are immutable; each worker obtains its own cursor.
class ActivationFile {
 public:
  explicit ActivationFile(std::string path) : path_(std::move(path)) {
    std::ifstream in(path_, std::ios::binary);
    if (!in) fail(ErrorCode::Io, "cannot open " + path_);
    in.seekg(0, std::ios::end);
    const auto size = static_cast<std::uint64_t>(in.tellg());
    in.seekg(0);

    detail::BinaryReader reader(in);
    header_ = detail::read_activation_header(reader);
    labels_.resize(header_.rows);
    reader.bytes(labels_.data(), labels_.size());
    validate_labels(labels_);

    const auto total = header_.catalog.total_units();
    const auto matrix_bytes = 4ULL * header_.rows * total;
    const auto min_size = header_.data_offset + matrix_bytes + 8 + 8 + 4;
    if (size < min_size) fail(ErrorCode::TruncatedFile, "file shorter than its header declares");

    // Stream the matrix through the CRC without keeping it.
    std::vector<char> buffer(kVerifyBuffer);
    auto remaining = matrix_bytes;
    while (remaining > 0) {
      const auto step = static_cast<std::size_t>(std::min<std::uint64_t>(remaining, buffer.size()));
      reader.bytes(buffer.data(), step);
      remaining -= step;
    }
    detail::check_footer(reader, header_);
    reader.expect_crc_and_end();
  }

  const std::string& path() const noexcept { return path_; }
  const std::string& concept_id() const noexcept { return header_.concept_id; }
  const UnitCatalog& catalog() const noexcept { return header_.catalog; }
  std::size_t rows() const noexcept { return header_.rows; }
  std::uint64_t cols() const noexcept { return header_.catalog.total_units(); }
  const std::vector<std::uint8_t>& labels() const noexcept { return labels_; }
  std::uint64_t data_offset() const noexcept { return header_.data_offset; }

  inline ColumnCursor cursor(std::size_t chunk_columns = kDefaultChunkWidth, std::uint64_t first = 0,
                             std::uint64_t last = UINT64_MAX) const;

  // Loads the whole matrix; convenient for small files.
  ActivationMatrix load() const { return read_activations_file(path_); }

  static constexpr std::size_t kVerifyBuffer = 1 << 16;

 private:
  std::string path_;
  ActivationHeader header_;
  std::vector<std::uint8_t> labels_;
};

// Yields column chunks of [first, last) in flattened-index order. Memory is
// one chunk buffer (rows x chunk floats) plus one row segment.
class ColumnCursor {
 public:
  ColumnCursor(const ActivationFile& file, std::size_t chunk_columns, std::uint64_t first,
               std::uint64_t last)
      : file_(&file), in_(file.path(), std::ios::binary), chunk_(chunk_columns),
        next_(first), last_(std::min(last, file.cols())) {
    require(chunk_columns > 0, ErrorCode::InvalidArgument, "chunk must be positive");
    if (!in_) fail(ErrorCode::Io, "cannot open " + file.path());
    buffer_.values.reserve(file.rows() * chunk_);
    segment_.reserve(chunk_);
  }

  bool next(ColumnChunk*& out) {
    if (next_ >= last_) return false;
    const auto count = static_cast<std::size_t>(std::min<std::uint64_t>(chunk_, last_ - next_));
    const auto rows = file_->rows();
    const auto total = file_->cols();
    buffer_.first = next_;
    buffer_.count = count;
    buffer_.rows = rows;
    buffer_.values.resize(rows * count);
    segment_.resize(count);
    for (std::size_t r = 0; r < rows; ++r) {
      const auto offset = file_->data_offset() + 4ULL * (r * total + next_);
      in_.seekg(static_cast<std::streamoff>(offset));
      in_.read(reinterpret_cast<char*>(segment_.data()),
               static_cast<std::streamsize>(count * sizeof(float)));
      if (static_cast<std::size_t>(in_.gcount()) != count * sizeof(float))
        fail(ErrorCode::TruncatedFile, "short read in " + file_->path());
      for (std::size_t j = 0; j < count; ++j) {
        if (!std::isfinite(segment_[j]))
          fail(ErrorCode::FormatError, "non-finite response stored in file");
        buffer_.values[j * rows + r] = segment_[j];
      }
    }
    next_ += count;
    out = &buffer_;
    return true;
  }

  // Bytes currently held by the cursor's buffers.
  std::size_t buffer_bytes() const noexcept {
    return (buffer_.values.capacity() + segment_.capacity()) * sizeof(float);
  }

 private:
  const ActivationFile* file_;
  std::ifstream in_;
  std::size_t chunk_;
  std::uint64_t next_;
  std::uint64_t last_;
  ColumnChunk buffer_;
  std::vector<float> segment_;
};

inline ColumnCursor ActivationFile::cursor(std::size_t chunk_columns, std::uint64_t first,
                                           std::uint64_t last) const {
  return ColumnCursor(*this, chunk_columns, first, last);
}

// Visits every column in flattened order as (UnitId, values).
inline void for_each_column(const ActivationFile& file, std::size_t chunk_columns,
                            const std::function<void(const UnitId&, std::span<const float>)>& fn) {
  auto cursor = file.cursor(chunk_columns);
  ColumnChunk* chunk = nullptr;
  while (cursor.next(chunk))
    for (std::size_t j = 0; j < chunk->count; ++j)
      fn(file.catalog().unflatten(chunk->first + j), chunk->column(j));
}

}  // namespace nscope
