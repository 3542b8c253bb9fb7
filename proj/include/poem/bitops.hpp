#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace poem {

// Row-major bit-packed {-1,+1} matrix. Bit value 1 encodes +1, bit value 0
// encodes -1; sign(0) = -1, so pack() sets a bit only for strictly positive
// entries. Pad bits past `cols` in the last word of each row are kept zero
// (canonical form) so the matmul kernel can XOR whole words without masking.
class PackedBitMatrix {
public:
  PackedBitMatrix() = default;
  PackedBitMatrix(std::size_t rows, std::size_t cols);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t words_per_row() const { return words_per_row_; }

  bool get(std::size_t r, std::size_t c) const;
  void set(std::size_t r, std::size_t c, bool plus_one);

  const std::uint64_t* row(std::size_t r) const { return words_.data() + r * words_per_row_; }
  std::uint64_t* row(std::size_t r) { return words_.data() + r * words_per_row_; }
  std::span<const std::uint64_t> storage() const { return words_; }
  std::span<std::uint64_t> storage() { return words_; }

  // Zeroes every pad bit; call after writing raw words into storage().
  void canonicalize();

  bool operator==(const PackedBitMatrix&) const = default;

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

// Elementwise sign pack: bit set iff m[r*cols + c] > 0.
template <class T>
PackedBitMatrix pack(std::span<const T> m, std::size_t rows, std::size_t cols);

// Writes the {-1,+1} expansion into `out` (size rows*cols, row-major).
template <class T>
void unpack(const PackedBitMatrix& p, std::span<T> out);

std::vector<float> unpack(const PackedBitMatrix& p);

// Number of set bits over the whole span.
std::size_t popcount_words(std::span<const std::uint64_t> w);

struct Int32Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::int32_t> data; // row-major

  std::int32_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

// Exact {-1,+1} dot products: out[i][j] = k - 2*popcount(a.row(i) XOR b.row(j)).
// `b` holds the transposed operand (one output channel per row), so both
// operands share the packed k axis. Throws std::invalid_argument on k mismatch.
Int32Matrix xnor_popcount_matmul(const PackedBitMatrix& a, const PackedBitMatrix& b);

// "PBM1" header (magic, rows, cols, word size in bits; little-endian u64 each)
// followed by raw words row-major, words little-endian.
void save_pbm(const PackedBitMatrix& p, std::ostream& os);
PackedBitMatrix load_pbm(std::istream& is);

extern template PackedBitMatrix pack<float>(std::span<const float>, std::size_t, std::size_t);
extern template PackedBitMatrix pack<double>(std::span<const double>, std::size_t, std::size_t);
extern template void unpack<float>(const PackedBitMatrix&, std::span<float>);
extern template void unpack<double>(const PackedBitMatrix&, std::span<double>);

} // namespace poem
