#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>
#include <sstream>

#include "poem/bitops.hpp"

using namespace poem;

namespace {

std::vector<float> random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> m(rows * cols);
  for (auto& v : m) v = g(rng);
  return m;
}

// scalar loop oracle: the reference ±1 dot product
std::vector<std::int32_t> sign_matmul_oracle(const std::vector<float>& a,
                                             const std::vector<float>& b, std::size_t n,
                                             std::size_t m, std::size_t k) {
  std::vector<std::int32_t> out(n * m, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      std::int32_t acc = 0;
      for (std::size_t q = 0; q < k; ++q) {
        int sa = a[i * k + q] > 0.0f ? 1 : -1;
        int sb = b[j * k + q] > 0.0f ? 1 : -1;
        acc += sa * sb;
      }
      out[i * m + j] = acc;
    }
  return out;
}

} // namespace

TEST_CASE("pack sets bits for strictly positive entries") {
  std::vector<float> pos(9, 2.5f);
  PackedBitMatrix p = pack<float>(pos, 3, 3);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) CHECK(p.get(r, c));

  // sign(0) = -1: zeros encode as clear bits
  std::vector<float> zeros(10, 0.0f);
  PackedBitMatrix z = pack<float>(zeros, 2, 5);
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 5; ++c) CHECK_FALSE(z.get(r, c));
}

TEST_CASE("pack matches elementwise sign oracle on a random 16x70") {
  std::mt19937_64 rng(11);
  auto m = random_matrix(16, 70, rng);
  PackedBitMatrix p = pack<float>(m, 16, 70);
  for (std::size_t r = 0; r < 16; ++r)
    for (std::size_t c = 0; c < 70; ++c) CHECK(p.get(r, c) == (m[r * 70 + c] > 0.0f));
}

TEST_CASE("unpack round trips and reads single bits") {
  PackedBitMatrix one(1, 1);
  one.set(0, 0, true);
  std::vector<float> v = unpack(one);
  REQUIRE(v.size() == 1);
  CHECK(v[0] == 1.0f);

  std::mt19937_64 rng(12);
  auto m = random_matrix(7, 130, rng);
  PackedBitMatrix p = pack<float>(m, 7, 130);
  std::vector<float> u = unpack(p);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 130; ++c) {
      float expect = p.get(r, c) ? 1.0f : -1.0f; // per-bit read oracle
      CHECK(u[r * 130 + c] == expect);
    }
  CHECK(pack<float>(u, 7, 130) == p); // pack(unpack(p)) = p
}

TEST_CASE("unpack-then-pack equals elementwise sign") {
  std::mt19937_64 rng(13);
  auto m = random_matrix(5, 67, rng);
  PackedBitMatrix p = pack<float>(m, 5, 67);
  std::vector<float> u = unpack(p);
  for (std::size_t i = 0; i < m.size(); ++i) CHECK(u[i] == (m[i] > 0.0f ? 1.0f : -1.0f));
}

TEST_CASE("matmul self and negation rows at k=64") {
  std::mt19937_64 rng(21);
  auto row = random_matrix(1, 64, rng);
  PackedBitMatrix a = pack<float>(row, 1, 64);
  CHECK(xnor_popcount_matmul(a, a).at(0, 0) == 64);

  std::vector<float> neg(row);
  for (auto& v : neg) v = v > 0.0f ? -1.0f : 1.0f;
  PackedBitMatrix b = pack<float>(neg, 1, 64);
  CHECK(xnor_popcount_matmul(a, b).at(0, 0) == -64);
}

TEST_CASE("matmul equals float oracle on random 32x100 by 100x24") {
  std::mt19937_64 rng(22);
  auto a = random_matrix(32, 100, rng);
  auto b = random_matrix(24, 100, rng);
  Int32Matrix got = xnor_popcount_matmul(pack<float>(a, 32, 100), pack<float>(b, 24, 100));
  auto want = sign_matmul_oracle(a, b, 32, 24, 100);
  REQUIRE(got.data.size() == want.size());
  for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.data[i] == want[i]);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  PackedBitMatrix a(2, 10), b(3, 11);
  CHECK_THROWS_AS(xnor_popcount_matmul(a, b), std::invalid_argument);
}

TEST_CASE("exactness across k including non-word-multiples") {
  std::mt19937_64 rng(23);
  for (std::size_t k : {std::size_t{1}, std::size_t{63}, std::size_t{64}, std::size_t{65},
                        std::size_t{512}, std::size_t{1000}}) {
    auto a = random_matrix(6, k, rng);
    auto b = random_matrix(5, k, rng);
    Int32Matrix got = xnor_popcount_matmul(pack<float>(a, 6, k), pack<float>(b, 5, k));
    auto want = sign_matmul_oracle(a, b, 6, 5, k);
    for (std::size_t i = 0; i < want.size(); ++i) {
      REQUIRE(got.data[i] == want[i]);
      REQUIRE(std::abs(got.data[i]) <= static_cast<std::int32_t>(k));
      REQUIRE((got.data[i] & 1) == (static_cast<std::int32_t>(k) & 1)); // parity of k
    }
  }
}

TEST_CASE("results are invariant to pad corruption after canonicalization") {
  std::mt19937_64 rng(24);
  auto a = random_matrix(4, 70, rng);
  auto b = random_matrix(3, 70, rng);
  PackedBitMatrix pa = pack<float>(a, 4, 70);
  PackedBitMatrix pb = pack<float>(b, 3, 70);
  Int32Matrix before = xnor_popcount_matmul(pa, pb);

  PackedBitMatrix pa2 = pack<float>(a, 4, 70);
  for (std::size_t r = 0; r < 4; ++r) // corrupt only pads, then canonicalize
    pa2.row(r)[1] |= ~((std::uint64_t{1} << 6) - 1);
  pa2.canonicalize();
  CHECK(pa2 == pa);
  Int32Matrix after = xnor_popcount_matmul(pa2, pb);
  CHECK(after.data == before.data);
}

TEST_CASE("popcount_words") {
  std::vector<std::uint64_t> zeros(4, 0);
  CHECK(popcount_words(zeros) == 0);
  std::vector<std::uint64_t> ones(3, ~std::uint64_t{0});
  CHECK(popcount_words(ones) == 3 * 64);

  std::mt19937_64 rng(31);
  std::vector<std::uint64_t> w(16);
  for (auto& x : w) x = rng();
  std::size_t expect = 0; // bit-loop oracle
  for (std::uint64_t x : w)
    for (int i = 0; i < 64; ++i) expect += (x >> i) & 1u;
  CHECK(popcount_words(w) == expect);
}

TEST_CASE("pbm serialization round trips with the documented header") {
  std::mt19937_64 rng(41);
  auto m = random_matrix(9, 77, rng);
  PackedBitMatrix p = pack<float>(m, 9, 77);
  std::stringstream ss;
  save_pbm(p, ss);
  std::string bytes = ss.str();
  REQUIRE(bytes.size() == 4 + 3 * 8 + 9 * 2 * 8);
  CHECK(bytes.substr(0, 4) == "PBM1");
  CHECK(static_cast<unsigned char>(bytes[4]) == 9);   // rows LE
  CHECK(static_cast<unsigned char>(bytes[12]) == 77); // cols LE
  CHECK(static_cast<unsigned char>(bytes[20]) == 64); // word size LE

  PackedBitMatrix q = load_pbm(ss);
  CHECK(q == p);

  std::stringstream bad("NOPE");
  CHECK_THROWS_AS(load_pbm(bad), std::runtime_error);
}
