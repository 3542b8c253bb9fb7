#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "poem/binlayer.hpp"
#include "poem/data.hpp"
#include "poem/nn.hpp"

namespace poem {

// Topology: per-point stack -> global max-pool -> classifier. First and last
// layers stay real-valued; interior layers binarize by default.
struct ModelSpec {
  std::vector<std::size_t> point_widths{64, 64, 128, 256};
  std::vector<std::size_t> classifier_widths{128, 5}; // last entry = num_classes
  std::size_t num_classes = 5;
  std::size_t points = 256;
  std::vector<bool> binarize; // one flag per layer, first/last must be false
  float ste_clip = 1.0f;

  static ModelSpec defaults(std::size_t num_classes, std::size_t points);
  std::size_t layer_count() const { return point_widths.size() + classifier_widths.size(); }
  void validate() const;
};

// Interior block. The BiFCLayer fields double as plain linear+BN+PReLU
// storage when the stage runs real-valued (alpha/gmm then unused).
struct Stage {
  bool binarized = false;
  BiFCLayer<float> layer;
};

struct Model {
  ModelSpec spec;
  std::vector<Stage> stages; // all interior layers; final real layer below
  Tensor<float> final_w;     // [num_classes, last_width]
  Tensor<float> final_b;     // [num_classes]
  std::uint64_t build_seed = 0;

  std::size_t pool_stage() const { return spec.point_widths.size() - 1; }
};

Model build(const ModelSpec& spec, std::uint64_t seed);

std::size_t count_parameters(const Model& m);

// Training-mode forward tape.
struct TrainForward {
  std::vector<LayerForwardCache<float>> caches;   // one per stage
  std::vector<Tensor<float>> input_presign;       // per stage; nonempty where a
                                                  // sign was applied at the input
  Tensor<float> pooled_presign;                   // pre-sign pooled vector, if signed
  std::vector<std::uint32_t> pool_argmax;
  Tensor<float> logits;
  Tensor<float> final_input;
  std::size_t batch = 0;
  std::size_t points = 0;
};

TrainForward run_train_forward(Model& m, const Tensor<float>& clouds, bool update_running = true);

struct StageGrads {
  Tensor<float> w, alpha, gamma, beta;
  float slope = 0.0f;
  bool has_alpha = false;
};

struct ModelGrads {
  std::vector<StageGrads> stages;
  Tensor<float> final_w, final_b;
};

ModelGrads run_backward(Model& m, const TrainForward& fwd, const Tensor<float>& dlogits);

// Eval-mode class scores, batch x num_classes. `predict` runs the simulated
// ±1 float path; `predict_packed` runs the XNOR/popcount kernels. The two are
// bit-identical by construction.
Tensor<float> predict(Model& m, const Tensor<float>& clouds);
Tensor<float> predict_packed(Model& m, const Tensor<float>& clouds);

// argmax scores vs labels, lowest index on ties.
double accuracy(Model& m, const std::vector<PointCloud>& clouds, bool packed = false);
std::vector<int> predict_labels(Model& m, const std::vector<PointCloud>& clouds,
                                bool packed = false);

Tensor<float> make_batch(const std::vector<PointCloud>& clouds,
                         std::span<const std::size_t> indices, std::vector<int>* labels);

void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace poem
