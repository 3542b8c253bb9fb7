#pragma once

#include <array>
#include <cstddef>
#include <iosfwd>
#include <span>
#include <vector>

namespace poem {

inline constexpr double kGmmVarFloor = 1e-6;
inline constexpr double kGmmBetaFloor = 1e-6;
inline constexpr double kGmmStarvation = 1e-6;

// Two-component Gaussian mixture over one output channel's latent weights.
// mu is kept sorted ascending; var holds variances (the density's exponent
// uses 2*var); beta mixes in (0,1) and sums to 1; resp rows sum to 1 and
// eff_count are their column sums.
struct GmmChannelState {
  std::array<double, 2> mu{-1.0, 1.0};
  std::array<double, 2> var{1.0, 1.0};
  std::array<double, 2> beta{0.5, 0.5};
  std::vector<std::array<double, 2>> resp;
  std::array<double, 2> eff_count{0.0, 0.0};
  int refresh_epoch = -1; // last epoch an E+M refresh ran; -1 before any
  int reinit_count = 0;   // starvation restarts seen by this channel

  bool invariants_ok(double tol = 1e-9) const;
};

// Gaussian density (1/sqrt(2*pi*var)) * exp(-(w-mu)^2 / (2*var)).
double component_density(double w, double mu_k, double var_k);

// Posterior membership of a single weight under the current parameters,
// computed in log space.
std::array<double, 2> responsibilities(double w, const GmmChannelState& state);

// Displacement toward the responsibility-weighted component means; zero
// outside the open interval (mu1, mu2).
double em_force(double w, const GmmChannelState& state, const std::array<double, 2>& resp_row);

// Observed-data log-likelihood sum over the channel's weights.
template <class T>
double log_likelihood(std::span<const T> weights, const GmmChannelState& state);

template <class T>
void e_step(std::span<const T> weights, GmmChannelState& state);

template <class T>
void m_step(std::span<const T> weights, GmmChannelState& state);

template <class T>
GmmChannelState init_channel(std::span<const T> weights);

// Per-channel (mu, var, beta) rows as text CSV with a header.
void dump_channels_csv(std::span<const GmmChannelState> states, std::ostream& os);

extern template double log_likelihood<float>(std::span<const float>, const GmmChannelState&);
extern template double log_likelihood<double>(std::span<const double>, const GmmChannelState&);
extern template void e_step<float>(std::span<const float>, GmmChannelState&);
extern template void e_step<double>(std::span<const double>, GmmChannelState&);
extern template void m_step<float>(std::span<const float>, GmmChannelState&);
extern template void m_step<double>(std::span<const double>, GmmChannelState&);
extern template GmmChannelState init_channel<float>(std::span<const float>);
extern template GmmChannelState init_channel<double>(std::span<const double>);

} // namespace poem
