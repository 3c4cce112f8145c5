#pragma once

#include "bm2/rng.hpp"
#include "bm2/types.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace bm2 {

/// Number of sinusoidal time frequencies fed to the network next to raw t.
inline constexpr int kTimeFrequencies = 4;

struct NetShape {
  int dim = 1;
  int width = 768;
  int hidden_layers = 3;
  bool sigma_conditioned = false;

  /// x, t, (sin, cos) per frequency, optional log sigma.
  [[nodiscard]] int input_size() const { return dim + 1 + 2 * kTimeFrequencies + (sigma_conditioned ? 1 : 0); }
  /// Forward head rows [0, dim), backward head rows [dim, 2 dim).
  [[nodiscard]] int output_size() const { return 2 * dim; }
  [[nodiscard]] std::size_t parameter_count() const;
  void validate() const;
};

/// Both drift heads evaluated on one batch.
struct DriftHeads {
  Samples mu_f;
  Samples v_b;
};

/// Multilayer perceptron with ReLU hidden layers and a 2d-wide linear output
/// split into the forward drift mu_f and the backward drift v_b.
///
/// Parameters are one flat vector, layer by layer: W (out x in, row-major) then b.
/// Hidden layers use He-normal init; the output layer starts at zero so both
/// heads are identically zero before training.
///
/// Evaluation is a pure function of (parameters, inputs); row i of a batched
/// evaluation is bitwise identical to evaluating row i alone.
template <typename Scalar>
class DriftNet {
 public:
  DriftNet(NetShape shape, RngStream& init_rng);
  DriftNet(NetShape shape, std::vector<Scalar> params);

  [[nodiscard]] const NetShape& shape() const { return shape_; }
  [[nodiscard]] std::span<const Scalar> params() const { return params_; }
  [[nodiscard]] std::span<Scalar> params() { return params_; }

  /// sigma holds the raw per-row diffusion scale for sigma-conditioned nets and must be
  /// empty otherwise.
  [[nodiscard]] DriftHeads forward(const Samples& x, std::span<const double> t,
                                   std::span<const double> sigma = {}) const;

  /// Sets the output layer to zero.
  void zero_output_layer();

  /// Element offsets of each layer's blocks inside params().
  [[nodiscard]] std::size_t weight_offset(int layer) const;
  [[nodiscard]] std::size_t bias_offset(int layer) const;
  [[nodiscard]] int layer_count() const { return shape_.hidden_layers + 1; }
  [[nodiscard]] int layer_in(int layer) const;
  [[nodiscard]] int layer_out(int layer) const;

 private:
  NetShape shape_;
  std::vector<Scalar> params_;
};

/// Regression batch for the two heads. Either part may be empty.
/// The forward head is regressed at fwd_x onto fwd_target; the backward head at bwd_x onto bwd_target.
struct RegressionBatch {
  Samples fwd_x;
  std::vector<double> fwd_t;
  std::vector<double> fwd_sigma;
  Samples fwd_target;

  Samples bwd_x;
  std::vector<double> bwd_t;
  std::vector<double> bwd_sigma;
  Samples bwd_target;
};

template <typename Scalar>
struct LossGrad {
  double loss = 0.0;
  double loss_f = 0.0;
  double loss_b = 0.0;
  std::vector<Scalar> grad;
};

/// loss = mean_f 1/2 |target_f - mu_f|^2 + mean_b 1/2 |target_b - v_b|^2 and its exact
/// reverse-mode gradient. Throws NumericalError naming the first non-finite sample.
template <typename Scalar>
LossGrad<Scalar> loss_and_grad(const DriftNet<Scalar>& net, const RegressionBatch& batch);

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

/// AdamW with decoupled weight decay: theta *= (1 - lr wd), then the bias-corrected Adam step.
template <typename Scalar>
class AdamW {
 public:
  AdamW(AdamWConfig config, std::size_t size);

  void step(std::span<Scalar> theta, std::span<const Scalar> grad);

  [[nodiscard]] const AdamWConfig& config() const { return config_; }
  [[nodiscard]] std::int64_t steps() const { return step_; }

 private:
  AdamWConfig config_;
  std::vector<Scalar> m_;
  std::vector<Scalar> v_;
  std::int64_t step_ = 0;
};

template <typename Scalar>
class Ema {
 public:
  Ema(double decay, std::span<const Scalar> theta);

  /// shadow <- decay shadow + (1 - decay) theta.
  void update(std::span<const Scalar> theta);

  [[nodiscard]] std::span<const Scalar> shadow() const { return shadow_; }
  [[nodiscard]] double decay() const { return decay_; }

 private:
  double decay_;
  std::vector<Scalar> shadow_;
};

/// Copy of net carrying the EMA shadow parameters; the live net is untouched.
template <typename Scalar>
DriftNet<Scalar> with_ema(const DriftNet<Scalar>& net, const Ema<Scalar>& ema);

// Checkpoints: 32-byte little-endian header (magic "BM2N", version, dim, width,
// hidden layers, sigma flag, parameter count) followed by float32 parameters.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const DriftNet<Scalar>& net);

template <typename Scalar>
DriftNet<Scalar> load_checkpoint(const std::filesystem::path& path);

}  // namespace bm2
