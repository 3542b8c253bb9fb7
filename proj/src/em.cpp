#include "poem/em.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numbers>
#include <ostream>
#include <stdexcept>

namespace poem {

namespace {

double log_density(double w, double mu, double var) {
  double d = w - mu;
  return -0.5 * std::log(2.0 * std::numbers::pi * var) - d * d / (2.0 * var);
}

double quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  double pos = q * static_cast<double>(v.size() - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  double frac = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - frac) + v[hi] * frac;
}

// Restores mu ascending, carrying var/beta/resp columns along.
void sort_components(GmmChannelState& s) {
  if (s.mu[0] <= s.mu[1]) return;
  std::swap(s.mu[0], s.mu[1]);
  std::swap(s.var[0], s.var[1]);
  std::swap(s.beta[0], s.beta[1]);
  std::swap(s.eff_count[0], s.eff_count[1]);
  for (auto& r : s.resp) std::swap(r[0], r[1]);
}

void clamp_beta(GmmChannelState& s) {
  for (int k = 0; k < 2; ++k)
    s.beta[k] = std::clamp(s.beta[k], kGmmBetaFloor, 1.0 - kGmmBetaFloor);
  double sum = s.beta[0] + s.beta[1];
  s.beta[0] /= sum;
  s.beta[1] /= sum;
}

} // namespace

bool GmmChannelState::invariants_ok(double tol) const {
  if (!(mu[0] <= mu[1])) return false;
  if (!(var[0] >= kGmmVarFloor * (1.0 - tol)) || !(var[1] >= kGmmVarFloor * (1.0 - tol)))
    return false;
  if (std::abs(beta[0] + beta[1] - 1.0) > tol) return false;
  if (!(beta[0] > 0.0 && beta[0] < 1.0 && beta[1] > 0.0 && beta[1] < 1.0)) return false;
  double total = 0.0;
  for (const auto& r : resp) {
    if (std::abs(r[0] + r[1] - 1.0) > tol) return false;
    total += r[0] + r[1];
  }
  if (!resp.empty() && std::abs(total - static_cast<double>(resp.size())) > tol * resp.size())
    return false;
  return true;
}

double component_density(double w, double mu_k, double var_k) {
  double v = std::max(var_k, kGmmVarFloor);
  return std::exp(log_density(w, mu_k, v));
}

std::array<double, 2> responsibilities(double w, const GmmChannelState& state) {
  double lg[2];
  for (int k = 0; k < 2; ++k)
    lg[k] = std::log(state.beta[k]) + log_density(w, state.mu[k], state.var[k]);
  if (!std::isfinite(lg[0]) && !std::isfinite(lg[1])) {
    // both densities underflowed: hard-assign to the nearest mean
    std::clog << "poem::em: density underflow at w=" << w << ", hard assignment\n";
    bool lower = std::abs(w - state.mu[0]) <= std::abs(w - state.mu[1]);
    return lower ? std::array<double, 2>{1.0, 0.0} : std::array<double, 2>{0.0, 1.0};
  }
  double mx = std::max(lg[0], lg[1]);
  double e0 = std::exp(lg[0] - mx), e1 = std::exp(lg[1] - mx);
  double sum = e0 + e1;
  return {e0 / sum, e1 / sum};
}

double em_force(double w, const GmmChannelState& state, const std::array<double, 2>& resp_row) {
  if (!(w > state.mu[0] && w < state.mu[1])) return 0.0;
  return resp_row[0] * (state.mu[0] - w) + resp_row[1] * (state.mu[1] - w);
}

template <class T>
double log_likelihood(std::span<const T> weights, const GmmChannelState& state) {
  double ll = 0.0;
  for (T wv : weights) {
    double w = static_cast<double>(wv);
    double lg[2];
    for (int k = 0; k < 2; ++k)
      lg[k] = std::log(state.beta[k]) + log_density(w, state.mu[k], state.var[k]);
    double mx = std::max(lg[0], lg[1]);
    ll += mx + std::log(std::exp(lg[0] - mx) + std::exp(lg[1] - mx));
  }
  return ll;
}

template <class T>
void e_step(std::span<const T> weights, GmmChannelState& state) {
  state.resp.resize(weights.size());
  state.eff_count = {0.0, 0.0};
  for (std::size_t n = 0; n < weights.size(); ++n) {
    state.resp[n] = responsibilities(static_cast<double>(weights[n]), state);
    state.eff_count[0] += state.resp[n][0];
    state.eff_count[1] += state.resp[n][1];
  }
}

template <class T>
void m_step(std::span<const T> weights, GmmChannelState& state) {
  if (state.resp.size() != weights.size())
    throw std::invalid_argument("m_step: responsibilities not refreshed for these weights");
  const double n = static_cast<double>(weights.size());
  for (int k = 0; k < 2; ++k) {
    double cnt = 0.0, sum = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      cnt += state.resp[i][k];
      sum += state.resp[i][k] * static_cast<double>(weights[i]);
    }
    state.eff_count[k] = cnt;
    if (cnt < kGmmStarvation) {
      // dead component: restart at the opposite-sign quantile of the weights
      std::vector<double> w(weights.begin(), weights.end());
      int other = 1 - k;
      double q = state.mu[other] > 0.0 ? 0.1 : 0.9;
      state.mu[k] = quantile(std::move(w), q);
      state.var[k] = std::max(state.var[other], kGmmVarFloor);
      state.beta[k] = kGmmBetaFloor;
      state.reinit_count++;
      std::clog << "poem::em: component " << k << " starved, reinitialized at q=" << q << "\n";
      continue;
    }
    double mean = sum / cnt;
    double sq = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      double d = static_cast<double>(weights[i]) - mean;
      sq += state.resp[i][k] * d * d;
    }
    state.mu[k] = mean;
    state.var[k] = std::max(sq / cnt, kGmmVarFloor);
    state.beta[k] = cnt / n;
  }
  clamp_beta(state);
  sort_components(state);
}

template <class T>
GmmChannelState init_channel(std::span<const T> weights) {
  if (weights.empty()) throw std::invalid_argument("init_channel: empty weight vector");
  GmmChannelState s;
  std::vector<double> neg, pos;
  double abs_mean = 0.0;
  for (T wv : weights) {
    double w = static_cast<double>(wv);
    abs_mean += std::abs(w);
    (w > 0.0 ? pos : neg).push_back(w);
  }
  abs_mean /= static_cast<double>(weights.size());

  auto var_of = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return s / static_cast<double>(v.size());
  };

  if (!neg.empty() && !pos.empty() && abs_mean > 0.0) {
    s.mu = {-abs_mean, abs_mean};
    s.var = {std::max(var_of(neg), kGmmVarFloor), std::max(var_of(pos), kGmmVarFloor)};
    s.beta = {static_cast<double>(neg.size()) / static_cast<double>(weights.size()),
              static_cast<double>(pos.size()) / static_cast<double>(weights.size())};
  } else {
    // degenerate sign split: quantile-based fallback keeps mu1 < mu2
    std::vector<double> all(weights.begin(), weights.end());
    double q1 = quantile(all, 0.25), q3 = quantile(all, 0.75);
    if (!(q1 < q3)) {
      double spread = std::max(std::abs(q1), 1e-3);
      q1 -= 0.5 * spread;
      q3 += 0.5 * spread;
    }
    s.mu = {q1, q3};
    double v = std::max(var_of(all), kGmmVarFloor);
    s.var = {v, v};
    s.beta = {0.5, 0.5};
  }
  clamp_beta(s);
  sort_components(s);
  e_step(weights, s);
  s.refresh_epoch = -1;
  return s;
}

void dump_channels_csv(std::span<const GmmChannelState> states, std::ostream& os) {
  os << "channel,mu1,mu2,var1,var2,beta1,beta2\n";
  os.precision(17);
  for (std::size_t j = 0; j < states.size(); ++j) {
    const auto& s = states[j];
    os << j << ',' << s.mu[0] << ',' << s.mu[1] << ',' << s.var[0] << ',' << s.var[1] << ','
       << s.beta[0] << ',' << s.beta[1] << '\n';
  }
}

template double log_likelihood<float>(std::span<const float>, const GmmChannelState&);
template double log_likelihood<double>(std::span<const double>, const GmmChannelState&);
template void e_step<float>(std::span<const float>, GmmChannelState&);
template void e_step<double>(std::span<const double>, GmmChannelState&);
template void m_step<float>(std::span<const float>, GmmChannelState&);
template void m_step<double>(std::span<const double>, GmmChannelState&);
template GmmChannelState init_channel<float>(std::span<const float>);
template GmmChannelState init_channel<double>(std::span<const double>);

} // namespace poem
