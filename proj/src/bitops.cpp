#include "poem/bitops.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

namespace poem {

namespace {

constexpr std::size_t kWordBits = 64;

void write_u64_le(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64_le(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw std::runtime_error("pbm: truncated stream");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

} // namespace

PackedBitMatrix::PackedBitMatrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), words_per_row_((cols + kWordBits - 1) / kWordBits),
      words_(rows * words_per_row_, 0) {}

bool PackedBitMatrix::get(std::size_t r, std::size_t c) const {
  return (row(r)[c / kWordBits] >> (c % kWordBits)) & 1u;
}

void PackedBitMatrix::set(std::size_t r, std::size_t c, bool plus_one) {
  std::uint64_t& w = row(r)[c / kWordBits];
  std::uint64_t bit = std::uint64_t{1} << (c % kWordBits);
  if (plus_one)
    w |= bit;
  else
    w &= ~bit;
}

void PackedBitMatrix::canonicalize() {
  if (rows_ == 0 || cols_ % kWordBits == 0) return;
  std::uint64_t mask = (std::uint64_t{1} << (cols_ % kWordBits)) - 1;
  for (std::size_t r = 0; r < rows_; ++r) row(r)[words_per_row_ - 1] &= mask;
}

template <class T>
PackedBitMatrix pack(std::span<const T> m, std::size_t rows, std::size_t cols) {
  if (m.size() != rows * cols) throw std::invalid_argument("pack: data size != rows*cols");
  PackedBitMatrix p(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    std::uint64_t* w = p.row(r);
    const T* src = m.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c)
      if (src[c] > T{0}) w[c / kWordBits] |= std::uint64_t{1} << (c % kWordBits);
  }
  return p;
}

template <class T>
void unpack(const PackedBitMatrix& p, std::span<T> out) {
  if (out.size() != p.rows() * p.cols()) throw std::invalid_argument("unpack: bad output size");
  for (std::size_t r = 0; r < p.rows(); ++r) {
    const std::uint64_t* w = p.row(r);
    T* dst = out.data() + r * p.cols();
    for (std::size_t c = 0; c < p.cols(); ++c)
      dst[c] = ((w[c / kWordBits] >> (c % kWordBits)) & 1u) ? T{1} : T{-1};
  }
}

std::vector<float> unpack(const PackedBitMatrix& p) {
  std::vector<float> out(p.rows() * p.cols());
  unpack<float>(p, out);
  return out;
}

std::size_t popcount_words(std::span<const std::uint64_t> w) {
  std::size_t n = 0;
  for (std::uint64_t x : w) n += static_cast<std::size_t>(std::popcount(x));
  return n;
}

Int32Matrix xnor_popcount_matmul(const PackedBitMatrix& a, const PackedBitMatrix& b) {
  if (a.cols() != b.cols())
    throw std::invalid_argument("xnor_popcount_matmul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " + std::to_string(b.cols()) + ")");
  const std::size_t k = a.cols();
  const std::size_t wpr = a.words_per_row();
  Int32Matrix out;
  out.rows = a.rows();
  out.cols = b.rows();
  out.data.resize(out.rows * out.cols);
  // Pad bits are zero in both operands, so XOR never lights them and the
  // disagreement count stays exact without per-row masking.
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const std::uint64_t* ra = a.row(i);
    std::int32_t* dst = out.data.data() + i * out.cols;
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const std::uint64_t* rb = b.row(j);
      std::size_t diff = 0;
      for (std::size_t w = 0; w < wpr; ++w)
        diff += static_cast<std::size_t>(std::popcount(ra[w] ^ rb[w]));
      dst[j] = static_cast<std::int32_t>(k) - 2 * static_cast<std::int32_t>(diff);
    }
  }
  return out;
}

void save_pbm(const PackedBitMatrix& p, std::ostream& os) {
  os.write("PBM1", 4);
  write_u64_le(os, p.rows());
  write_u64_le(os, p.cols());
  write_u64_le(os, kWordBits);
  for (std::size_t r = 0; r < p.rows(); ++r)
    for (std::size_t w = 0; w < p.words_per_row(); ++w) write_u64_le(os, p.row(r)[w]);
}

PackedBitMatrix load_pbm(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PBM1", 4) != 0) throw std::runtime_error("pbm: bad magic");
  std::uint64_t rows = read_u64_le(is);
  std::uint64_t cols = read_u64_le(is);
  std::uint64_t wbits = read_u64_le(is);
  if (wbits != kWordBits) throw std::runtime_error("pbm: unsupported word size");
  PackedBitMatrix p(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t w = 0; w < p.words_per_row(); ++w) p.row(r)[w] = read_u64_le(is);
  p.canonicalize();
  return p;
}

template PackedBitMatrix pack<float>(std::span<const float>, std::size_t, std::size_t);
template PackedBitMatrix pack<double>(std::span<const double>, std::size_t, std::size_t);
template void unpack<float>(const PackedBitMatrix&, std::span<float>);
template void unpack<double>(const PackedBitMatrix&, std::span<double>);

} // namespace poem
