#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <sstream>

#include "poem/em.hpp"

using namespace poem;

namespace {

std::vector<double> draws(std::size_t n, double mean, double std_dev, std::mt19937_64& rng) {
  std::normal_distribution<double> g(mean, std_dev);
  std::vector<double> v(n);
  for (auto& x : v) x = g(rng);
  return v;
}

GmmChannelState symmetric_state(double m, double var) {
  GmmChannelState s;
  s.mu = {-m, m};
  s.var = {var, var};
  s.beta = {0.5, 0.5};
  return s;
}

} // namespace

TEST_CASE("component density normalization and symmetry") {
  const double var = 1.0 / (2.0 * std::numbers::pi);
  CHECK(component_density(0.7, 0.7, var) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(component_density(1.5, 1.0, 0.3) ==
        doctest::Approx(component_density(0.5, 1.0, 0.3)).epsilon(1e-12));

  // extended-precision oracle at an arbitrary point
  const double w = 0.37, mu = -0.21, v = 0.013;
  long double expect = std::exp(-static_cast<long double>(w - mu) * (w - mu) / (2.0L * v)) /
                       std::sqrt(2.0L * std::numbers::pi_v<long double> * v);
  CHECK(std::abs(component_density(w, mu, v) - static_cast<double>(expect)) < 1e-12);
}

TEST_CASE("e_step splits evenly at the symmetric midpoint") {
  GmmChannelState s = symmetric_state(1.0, 0.2);
  std::vector<double> w{0.0};
  e_step<double>(w, s);
  CHECK(s.resp[0][0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(s.resp[0][1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("e_step saturates at a well-separated mode") {
  GmmChannelState s = symmetric_state(1.0, 0.001);
  std::vector<double> w{1.0};
  e_step<double>(w, s);
  CHECK(s.resp[0][1] > 1.0 - 1e-12);
}

TEST_CASE("e_step matches the direct Bayes-rule oracle") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    GmmChannelState s;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    s.mu = {-2.0 * u(rng) - 0.1, 2.0 * u(rng) + 0.1};
    s.var = {0.01 + u(rng), 0.01 + u(rng)};
    double b = 0.05 + 0.9 * u(rng);
    s.beta = {b, 1.0 - b};
    auto w = draws(32, 0.0, 1.5, rng);
    e_step<double>(w, s);
    for (std::size_t i = 0; i < w.size(); ++i) {
      double p0 = s.beta[0] * component_density(w[i], s.mu[0], s.var[0]);
      double p1 = s.beta[1] * component_density(w[i], s.mu[1], s.var[1]);
      CHECK(std::abs(s.resp[i][0] - p0 / (p0 + p1)) < 1e-10);
      CHECK(std::abs(s.resp[i][1] - p1 / (p0 + p1)) < 1e-10);
    }
  }
}

TEST_CASE("m_step with degenerate one-sided assignments") {
  std::mt19937_64 rng(6);
  auto w = draws(40, 0.3, 0.5, rng);
  GmmChannelState s = symmetric_state(1.0, 0.2);
  s.resp.assign(w.size(), {1.0, 0.0});
  m_step<double>(w, s);
  double mean = 0;
  for (double x : w) mean += x;
  mean /= static_cast<double>(w.size());
  double var = 0;
  for (double x : w) var += (x - mean) * (x - mean);
  var /= static_cast<double>(w.size());
  // component 1 starved and restarted; component 0 owns the full sample
  CHECK(s.reinit_count == 1);
  bool found = (std::abs(s.mu[0] - mean) < 1e-9 && std::abs(s.var[0] - var) < 1e-9) ||
               (std::abs(s.mu[1] - mean) < 1e-9 && std::abs(s.var[1] - var) < 1e-9);
  CHECK(found);
  CHECK(s.invariants_ok());
}

TEST_CASE("m_step on two half clusters with hard assignments") {
  std::vector<double> w;
  for (int i = 0; i < 16; ++i) w.push_back(i < 8 ? -0.4 : 0.4);
  GmmChannelState s = symmetric_state(0.5, 0.1);
  s.resp.clear();
  for (int i = 0; i < 16; ++i)
    s.resp.push_back(i < 8 ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0});
  m_step<double>(w, s);
  CHECK(s.mu[0] == doctest::Approx(-0.4).epsilon(1e-9));
  CHECK(s.mu[1] == doctest::Approx(0.4).epsilon(1e-9));
  CHECK(s.var[0] == doctest::Approx(kGmmVarFloor)); // zero spread floors
  CHECK(s.beta[0] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("EM recovers a known two-component mixture") {
  std::mt19937_64 rng(7);
  int good = 0;
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> w = draws(256, -0.5, 0.1, rng);
    auto hi = draws(256, 0.5, 0.1, rng);
    w.insert(w.end(), hi.begin(), hi.end());
    GmmChannelState s = init_channel<double>(w);
    for (int it = 0; it < 20; ++it) {
      e_step<double>(w, s);
      m_step<double>(w, s);
    }
    if (std::abs(s.mu[0] + 0.5) < 0.025 && std::abs(s.mu[1] - 0.5) < 0.025) ++good;
    CHECK(s.invariants_ok());
  }
  CHECK(good >= 19);
}

TEST_CASE("log-likelihood is non-decreasing across EM iterations") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    std::size_t n = 16 + static_cast<std::size_t>(rng() % 100);
    auto w = draws(n, 0.0, 0.5 + 0.001 * static_cast<double>(rng() % 1000), rng);
    GmmChannelState s = init_channel<double>(w);
    double prev = log_likelihood<double>(w, s);
    for (int it = 0; it < 15; ++it) {
      e_step<double>(w, s);
      m_step<double>(w, s);
      double ll = log_likelihood<double>(w, s);
      CHECK(ll >= prev - 1e-9);
      prev = ll;
    }
  }
}

TEST_CASE("em_force vanishes outside the open interval and at the midpoint") {
  GmmChannelState s = symmetric_state(1.0, 0.2);
  CHECK(em_force(-1.0, s, responsibilities(-1.0, s)) == 0.0);
  CHECK(em_force(1.0, s, responsibilities(1.0, s)) == 0.0);
  CHECK(em_force(-1.7, s, responsibilities(-1.7, s)) == 0.0);
  CHECK(em_force(2.3, s, responsibilities(2.3, s)) == 0.0);
  CHECK(em_force(0.0, s, responsibilities(0.0, s)) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("em_force at w=0.2 matches direct evaluation and points at the nearer mode") {
  GmmChannelState s = symmetric_state(1.0, 0.25);
  const double w = 0.2;
  auto xi = responsibilities(w, s);
  double expect = xi[0] * (s.mu[0] - w) + xi[1] * (s.mu[1] - w);
  double got = em_force(w, s, xi);
  CHECK(got == doctest::Approx(expect).epsilon(1e-12));
  CHECK(got > 0.0);
}

TEST_CASE("em_force is bounded by the mode gap inside the interval") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    GmmChannelState s;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    s.mu = {-u(rng) - 0.05, u(rng) + 0.05};
    s.var = {0.01 + u(rng), 0.01 + u(rng)};
    double b = 0.1 + 0.8 * u(rng);
    s.beta = {b, 1.0 - b};
    double w = s.mu[0] + (s.mu[1] - s.mu[0]) * u(rng);
    double f = em_force(w, s, responsibilities(w, s));
    CHECK(std::abs(f) <= s.mu[1] - s.mu[0] + 1e-12);
  }
}

TEST_CASE("init_channel splits signed clusters") {
  std::vector<double> w;
  for (int i = 0; i < 12; ++i) w.push_back(i % 2 ? 0.3 : -0.3);
  GmmChannelState s = init_channel<double>(w);
  CHECK(s.mu[0] == doctest::Approx(-0.3).epsilon(1e-12));
  CHECK(s.mu[1] == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(s.beta[0] == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("init_channel quantile fallback keeps mu1 < mu2 on all-positive weights") {
  std::vector<double> w{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  GmmChannelState s = init_channel<double>(w);
  CHECK(s.mu[0] < s.mu[1]);
  CHECK(s.invariants_ok());

  std::vector<double> same(8, 0.25); // fully degenerate
  GmmChannelState s2 = init_channel<double>(same);
  CHECK(s2.mu[0] < s2.mu[1]);
  CHECK(s2.invariants_ok());
}

TEST_CASE("init_channel on standard-normal weights lands in broad bounds") {
  std::mt19937_64 rng(10);
  for (int trial = 0; trial < 20; ++trial) {
    auto w = draws(128, 0.0, 1.0, rng);
    GmmChannelState s = init_channel<double>(w);
    CHECK(std::abs(s.mu[0]) <= 3.0);
    CHECK(std::abs(s.mu[1]) <= 3.0);
    CHECK(s.invariants_ok());
  }
}

TEST_CASE("state invariants hold after random e/m sequences") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    auto w = draws(48, 0.1, 0.8, rng);
    GmmChannelState s = init_channel<double>(w);
    for (int step = 0; step < 10; ++step) {
      if (rng() % 2) {
        e_step<double>(w, s);
      } else if (s.resp.size() == w.size()) {
        m_step<double>(w, s);
      }
      CHECK(s.invariants_ok());
    }
  }
}

TEST_CASE("gmm csv dump has one row per channel") {
  std::vector<GmmChannelState> states(3, symmetric_state(1.0, 0.2));
  std::ostringstream os;
  dump_channels_csv(states, os);
  std::string text = os.str();
  std::size_t lines = static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n'));
  CHECK(lines == 4); // header + 3 channels
  CHECK(text.rfind("channel,mu1,mu2,var1,var2,beta1,beta2", 0) == 0);
}
