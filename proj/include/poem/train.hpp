#pragma once

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "poem/model.hpp"

namespace poem {

enum class EmSign { attract, literal };

struct TrainConfig {
  double lambda = 1e-4; // reconstruction weight
  double tau = 1e-3;    // EM weight
  double base_lr = 1e-3;
  double lr_floor = 0.0;
  std::size_t epochs = 200;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  GradVariant grad_variant = GradVariant::analytic;
  EmSign em_sign = EmSign::attract;
  bool deterministic = false;
  std::string checkpoint_path;         // empty: no checkpoint written
  std::size_t checkpoint_interval = 0; // 0: final only

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0, loss_s = 0, loss_r = 0, train_acc = 0, test_acc = 0, mean_bimodality = 0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
};

void write_report_csv(const TrainReport& report, std::ostream& os);

struct LossComponents {
  double total = 0, task = 0, recon_sum = 0; // total = task + lambda*recon_sum
};

// Eq. 11 objective on one batch; train-mode statistics, running stats untouched.
LossComponents total_loss(Model& m, const Tensor<float>& clouds, std::span<const int> labels,
                          const TrainConfig& cfg);

// Per-step weight delta: task grad + lambda * reconstruction grad + the EM
// term under the configured sign convention (attract subtracts the force so
// the descent update moves weights toward the mode means).
Tensor<float> assemble_weight_update(const BiFCLayer<float>& layer, const Tensor<float>& task_grad,
                                     const TrainConfig& cfg);

Tensor<float> assemble_alpha_update(const BiFCLayer<float>& layer,
                                    const Tensor<float>& task_grad_alpha, const TrainConfig& cfg);

struct NonFiniteLossError : std::runtime_error {
  std::string dump_path;
  NonFiniteLossError(const std::string& msg, std::string dump)
      : std::runtime_error(msg), dump_path(std::move(dump)) {}
};

TrainReport train(Model& m, const Dataset& data, const TrainConfig& cfg);

// Fraction of weights whose sign flips under additive N(0, std^2) noise.
double sign_flip_rate(std::span<const float> weights, double noise_std, std::size_t trials,
                      std::mt19937_64& rng);
double sign_flip_rate(const BiFCLayer<float>& layer, double noise_std, std::size_t trials,
                      std::mt19937_64& rng);

// One shared set of standard-normal draws scaled per std: rates are exactly
// monotone in the std along the sweep.
std::vector<double> sweep_sign_flip_rates(std::span<const float> weights,
                                          std::span<const double> stds, std::size_t trials,
                                          std::uint64_t seed);

// Central-band mass: fraction of weights within 0.25*(mu2-mu1) of the median.
double bimodality_metric(std::span<const float> channel_weights, double mu1, double mu2);
double layer_mean_bimodality(const BiFCLayer<float>& layer);
double model_mean_bimodality(const Model& m);

} // namespace poem
