#include "bm2/approximator.hpp"

#include "dense_kernels.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

namespace bm2 {

std::size_t NetShape::parameter_count() const {
  std::size_t count = 0;
  int in = input_size();
  for (int layer = 0; layer <= hidden_layers; ++layer) {
    const int out = layer == hidden_layers ? output_size() : width;
    count += static_cast<std::size_t>(out) * static_cast<std::size_t>(in) + static_cast<std::size_t>(out);
    in = out;
  }
  return count;
}

void NetShape::validate() const {
  if (dim < 1) throw InvalidArgument("NetShape: dim must be >= 1");
  if (width < 1) throw InvalidArgument("NetShape: width must be >= 1");
  if (hidden_layers < 1) throw InvalidArgument("NetShape: need at least one hidden layer");
}

namespace {

template <typename Scalar>
std::vector<Scalar> he_init(const NetShape& shape, RngStream& rng) {
  std::vector<Scalar> params(shape.parameter_count(), Scalar(0));
  std::size_t offset = 0;
  int in = shape.input_size();
  for (int layer = 0; layer <= shape.hidden_layers; ++layer) {
    const bool last = layer == shape.hidden_layers;
    const int out = last ? shape.output_size() : shape.width;
    const std::size_t block = static_cast<std::size_t>(out) * static_cast<std::size_t>(in);
    if (!last) {
      const double scale = std::sqrt(2.0 / in);
      for (std::size_t i = 0; i < block; ++i) params[offset + i] = static_cast<Scalar>(scale * rng.normal());
    }
    offset += block + static_cast<std::size_t>(out);
    in = out;
  }
  return params;
}

/// Input features, feature-major (input_size x n).
template <typename Scalar>
std::vector<Scalar> make_features(const NetShape& shape, const Samples& x, std::span<const double> t,
                                  std::span<const double> sigma, Eigen::Index row0, std::size_t n_total,
                                  std::vector<Scalar>& out) {
  const auto n = static_cast<std::size_t>(x.rows());
  const auto col = static_cast<std::size_t>(row0);
  const int d = shape.dim;
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      out[static_cast<std::size_t>(j) * n_total + col + i] = static_cast<Scalar>(x(static_cast<Eigen::Index>(i), j));
    }
    const double ti = t[i];
    out[static_cast<std::size_t>(d) * n_total + col + i] = static_cast<Scalar>(ti);
    double freq = std::numbers::pi;
    for (int m = 0; m < kTimeFrequencies; ++m) {
      const std::size_t row = static_cast<std::size_t>(d + 1 + 2 * m);
      out[row * n_total + col + i] = static_cast<Scalar>(std::sin(freq * ti));
      out[(row + 1) * n_total + col + i] = static_cast<Scalar>(std::cos(freq * ti));
      freq *= 2.0;
    }
    if (shape.sigma_conditioned) {
      const std::size_t row = static_cast<std::size_t>(shape.input_size() - 1);
      out[row * n_total + col + i] = static_cast<Scalar>(std::log(sigma[i]));
    }
  }
  return out;
}

void check_inputs(const NetShape& shape, const Samples& x, std::span<const double> t, std::span<const double> sigma,
                  const char* where) {
  if (x.rows() > 0 && x.cols() != shape.dim) {
    std::ostringstream msg;
    msg << where << ": input has " << x.cols() << " columns, network dim is " << shape.dim;
    throw InvalidArgument(msg.str());
  }
  if (static_cast<Eigen::Index>(t.size()) != x.rows()) throw InvalidArgument(std::string(where) + ": t size mismatch");
  for (double ti : t) {
    if (!std::isfinite(ti)) throw InvalidArgument(std::string(where) + ": non-finite time");
  }
  if (shape.sigma_conditioned) {
    if (static_cast<Eigen::Index>(sigma.size()) != x.rows()) {
      throw InvalidArgument(std::string(where) + ": sigma-conditioned net needs one sigma per row");
    }
    for (double s : sigma) {
      if (!(s > 0.0)) throw InvalidArgument(std::string(where) + ": sigma must be positive");
    }
  } else if (!sigma.empty()) {
    throw InvalidArgument(std::string(where) + ": net is not sigma-conditioned");
  }
}

/// Forward pass keeping every layer's post-activation. acts[0] holds the input features.
template <typename Scalar>
void run_layers(const DriftNet<Scalar>& net, std::vector<std::vector<Scalar>>& acts, std::size_t n) {
  const auto params = net.params();
  const int layers = net.layer_count();
  for (int layer = 0; layer < layers; ++layer) {
    const int in = net.layer_in(layer);
    const int out = net.layer_out(layer);
    auto& y = acts[static_cast<std::size_t>(layer) + 1];
    y.resize(static_cast<std::size_t>(out) * n);
    kernels::affine_forward(params.data() + net.weight_offset(layer), params.data() + net.bias_offset(layer),
                            acts[static_cast<std::size_t>(layer)].data(), y.data(), out, in, n);
    if (layer + 1 < layers) kernels::relu_inplace(y.data(), y.size());
  }
}

}  // namespace

template <typename Scalar>
DriftNet<Scalar>::DriftNet(NetShape shape, RngStream& init_rng) : shape_(shape) {
  shape_.validate();
  params_ = he_init<Scalar>(shape_, init_rng);
}

template <typename Scalar>
DriftNet<Scalar>::DriftNet(NetShape shape, std::vector<Scalar> params) : shape_(shape), params_(std::move(params)) {
  shape_.validate();
  if (params_.size() != shape_.parameter_count()) {
    std::ostringstream msg;
    msg << "DriftNet: got " << params_.size() << " parameters, shape needs " << shape_.parameter_count();
    throw InvalidArgument(msg.str());
  }
}

template <typename Scalar>
int DriftNet<Scalar>::layer_in(int layer) const {
  return layer == 0 ? shape_.input_size() : shape_.width;
}

template <typename Scalar>
int DriftNet<Scalar>::layer_out(int layer) const {
  return layer == shape_.hidden_layers ? shape_.output_size() : shape_.width;
}

template <typename Scalar>
std::size_t DriftNet<Scalar>::weight_offset(int layer) const {
  std::size_t offset = 0;
  for (int l = 0; l < layer; ++l) {
    offset += static_cast<std::size_t>(layer_out(l)) * static_cast<std::size_t>(layer_in(l) + 1);
  }
  return offset;
}

template <typename Scalar>
std::size_t DriftNet<Scalar>::bias_offset(int layer) const {
  return weight_offset(layer) + static_cast<std::size_t>(layer_out(layer)) * static_cast<std::size_t>(layer_in(layer));
}

template <typename Scalar>
void DriftNet<Scalar>::zero_output_layer() {
  const int last = shape_.hidden_layers;
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(weight_offset(last)), params_.end(), Scalar(0));
}

template <typename Scalar>
DriftHeads DriftNet<Scalar>::forward(const Samples& x, std::span<const double> t, std::span<const double> sigma) const {
  check_inputs(shape_, x, t, sigma, "DriftNet::forward");
  const auto n = static_cast<std::size_t>(x.rows());
  const int d = shape_.dim;
  DriftHeads heads{Samples(x.rows(), d), Samples(x.rows(), d)};
  if (n == 0) return heads;
  std::vector<std::vector<Scalar>> acts(static_cast<std::size_t>(layer_count()) + 1);
  acts[0].resize(static_cast<std::size_t>(shape_.input_size()) * n);
  make_features(shape_, x, t, sigma, 0, n, acts[0]);
  run_layers(*this, acts, n);
  const auto& y = acts.back();
  for (std::size_t i = 0; i < n; ++i) {
    for (int j = 0; j < d; ++j) {
      heads.mu_f(static_cast<Eigen::Index>(i), j) = static_cast<double>(y[static_cast<std::size_t>(j) * n + i]);
      heads.v_b(static_cast<Eigen::Index>(i), j) = static_cast<double>(y[static_cast<std::size_t>(d + j) * n + i]);
    }
  }
  return heads;
}

template <typename Scalar>
LossGrad<Scalar> loss_and_grad(const DriftNet<Scalar>& net, const RegressionBatch& batch) {
  const NetShape& shape = net.shape();
  check_inputs(shape, batch.fwd_x, batch.fwd_t, batch.fwd_sigma, "loss_and_grad (forward part)");
  check_inputs(shape, batch.bwd_x, batch.bwd_t, batch.bwd_sigma, "loss_and_grad (backward part)");
  if (batch.fwd_target.rows() != batch.fwd_x.rows() || batch.bwd_target.rows() != batch.bwd_x.rows()) {
    throw InvalidArgument("loss_and_grad: target row count mismatch");
  }
  const auto n_f = static_cast<std::size_t>(batch.fwd_x.rows());
  const auto n_b = static_cast<std::size_t>(batch.bwd_x.rows());
  const std::size_t n = n_f + n_b;
  const int d = shape.dim;

  LossGrad<Scalar> result;
  result.grad.assign(shape.parameter_count(), Scalar(0));
  if (n == 0) return result;

  std::vector<std::vector<Scalar>> acts(static_cast<std::size_t>(net.layer_count()) + 1);
  acts[0].resize(static_cast<std::size_t>(shape.input_size()) * n);
  if (n_f > 0) make_features(shape, batch.fwd_x, batch.fwd_t, batch.fwd_sigma, 0, n, acts[0]);
  if (n_b > 0) {
    make_features(shape, batch.bwd_x, batch.bwd_t, batch.bwd_sigma, static_cast<Eigen::Index>(n_f), n, acts[0]);
  }
  run_layers(net, acts, n);

  // Output residuals; only the head being regressed for a column gets a signal.
  const auto& y = acts.back();
  std::vector<Scalar> dy(static_cast<std::size_t>(shape.output_size()) * n, Scalar(0));
  const double inv_f = n_f > 0 ? 1.0 / static_cast<double>(n_f) : 0.0;
  const double inv_b = n_b > 0 ? 1.0 / static_cast<double>(n_b) : 0.0;
  double sum_f = 0.0;
  double sum_b = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const bool fwd = i < n_f;
    const Samples& target = fwd ? batch.fwd_target : batch.bwd_target;
    const auto row = static_cast<Eigen::Index>(fwd ? i : i - n_f);
    const int head = fwd ? 0 : d;
    const double scale = fwd ? inv_f : inv_b;
    double sq = 0.0;
    for (int j = 0; j < d; ++j) {
      const std::size_t idx = static_cast<std::size_t>(head + j) * n + i;
      const double r = static_cast<double>(y[idx]) - target(row, j);
      sq += r * r;
      dy[idx] = static_cast<Scalar>(r * scale);
    }
    if (!std::isfinite(sq)) {
      std::ostringstream msg;
      msg << "loss_and_grad: non-finite loss at " << (fwd ? "forward" : "backward") << " sample " << row;
      throw NumericalError(msg.str());
    }
    (fwd ? sum_f : sum_b) += 0.5 * sq;
  }
  result.loss_f = sum_f * inv_f;
  result.loss_b = sum_b * inv_b;
  result.loss = result.loss_f + result.loss_b;

  auto& grad = result.grad;
  const auto params = net.params();
  std::vector<Scalar> xt;
  std::vector<Scalar> dx;
  for (int layer = net.layer_count() - 1; layer >= 0; --layer) {
    const int in = net.layer_in(layer);
    const int out = net.layer_out(layer);
    const auto& x = acts[static_cast<std::size_t>(layer)];
    xt.resize(static_cast<std::size_t>(in) * n);
    kernels::transpose(x.data(), xt.data(), in, n);
    kernels::affine_weight_grad(dy.data(), xt.data(), grad.data() + net.weight_offset(layer),
                                grad.data() + net.bias_offset(layer), out, in, n);
    if (layer == 0) break;
    dx.resize(static_cast<std::size_t>(in) * n);
    kernels::affine_input_grad(params.data() + net.weight_offset(layer), dy.data(), dx.data(), out, in, n);
    for (std::size_t i = 0; i < dx.size(); ++i) {
      if (!(x[i] > Scalar(0))) dx[i] = Scalar(0);
    }
    dy.swap(dx);
  }
  return result;
}

template <typename Scalar>
AdamW<Scalar>::AdamW(AdamWConfig config, std::size_t size) : config_(config), m_(size, Scalar(0)), v_(size, Scalar(0)) {
  if (!(config_.lr > 0.0)) throw InvalidArgument("AdamW: learning rate must be positive");
  if (!(config_.beta1 >= 0.0 && config_.beta1 < 1.0 && config_.beta2 >= 0.0 && config_.beta2 < 1.0)) {
    throw InvalidArgument("AdamW: betas must lie in [0, 1)");
  }
  if (!(config_.eps > 0.0) || config_.weight_decay < 0.0) throw InvalidArgument("AdamW: bad eps or weight decay");
}

template <typename Scalar>
void AdamW<Scalar>::step(std::span<Scalar> theta, std::span<const Scalar> grad) {
  if (theta.size() != m_.size() || grad.size() != m_.size()) throw InvalidArgument("AdamW::step: size mismatch");
  ++step_;
  const auto decay = static_cast<Scalar>(1.0 - config_.lr * config_.weight_decay);
  const auto b1 = static_cast<Scalar>(config_.beta1);
  const auto b2 = static_cast<Scalar>(config_.beta2);
  const double bias1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bias2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  const auto step_size = static_cast<Scalar>(config_.lr / bias1);
  const auto inv_root_bias2 = static_cast<Scalar>(1.0 / std::sqrt(bias2));
  const auto eps = static_cast<Scalar>(config_.eps);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    theta[i] *= decay;
    const Scalar g = grad[i];
    m_[i] = b1 * m_[i] + (Scalar(1) - b1) * g;
    v_[i] = b2 * v_[i] + (Scalar(1) - b2) * g * g;
    const Scalar denom = std::sqrt(v_[i]) * inv_root_bias2 + eps;
    theta[i] -= step_size * m_[i] / denom;
  }
}

template <typename Scalar>
Ema<Scalar>::Ema(double decay, std::span<const Scalar> theta) : decay_(decay), shadow_(theta.begin(), theta.end()) {
  if (!(decay >= 0.0 && decay < 1.0)) throw InvalidArgument("Ema: decay must lie in [0, 1)");
}

template <typename Scalar>
void Ema<Scalar>::update(std::span<const Scalar> theta) {
  if (theta.size() != shadow_.size()) throw InvalidArgument("Ema::update: size mismatch");
  const auto keep = static_cast<Scalar>(decay_);
  const auto take = static_cast<Scalar>(1.0 - decay_);
  for (std::size_t i = 0; i < theta.size(); ++i) shadow_[i] = keep * shadow_[i] + take * theta[i];
}

template <typename Scalar>
DriftNet<Scalar> with_ema(const DriftNet<Scalar>& net, const Ema<Scalar>& ema) {
  const auto shadow = ema.shadow();
  return DriftNet<Scalar>(net.shape(), std::vector<Scalar>(shadow.begin(), shadow.end()));
}

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[4] = {'B', 'M', '2', 'N'};

template <typename T>
void write_le(std::ostream& os, T value) {
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  return value;
}

}  // namespace

template <typename Scalar>
void save_checkpoint(const std::filesystem::path& path, const DriftNet<Scalar>& net) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw InvalidArgument("save_checkpoint: cannot open " + path.string());
  const NetShape& s = net.shape();
  os.write(kMagic, 4);
  write_le<std::uint32_t>(os, kCheckpointVersion);
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.dim));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.width));
  write_le<std::uint32_t>(os, static_cast<std::uint32_t>(s.hidden_layers));
  write_le<std::uint32_t>(os, s.sigma_conditioned ? 1u : 0u);
  write_le<std::uint64_t>(os, static_cast<std::uint64_t>(net.params().size()));
  for (Scalar p : net.params()) write_le<float>(os, static_cast<float>(p));
  if (!os) throw NumericalError("save_checkpoint: write failed for " + path.string());
}

template <typename Scalar>
DriftNet<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InvalidArgument("load_checkpoint: cannot open " + path.string());
  char magic[4] = {};
  is.read(magic, 4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw InvalidArgument("load_checkpoint: bad magic in " + path.string());
  const auto version = read_le<std::uint32_t>(is);
  if (version != kCheckpointVersion) throw InvalidArgument("load_checkpoint: unsupported version");
  NetShape shape;
  shape.dim = static_cast<int>(read_le<std::uint32_t>(is));
  shape.width = static_cast<int>(read_le<std::uint32_t>(is));
  shape.hidden_layers = static_cast<int>(read_le<std::uint32_t>(is));
  shape.sigma_conditioned = read_le<std::uint32_t>(is) != 0;
  const auto count = read_le<std::uint64_t>(is);
  shape.validate();
  if (count != shape.parameter_count()) throw InvalidArgument("load_checkpoint: parameter count does not match shape");
  std::vector<Scalar> params(count);
  for (auto& p : params) p = static_cast<Scalar>(read_le<float>(is));
  if (!is) throw InvalidArgument("load_checkpoint: truncated file " + path.string());
  return DriftNet<Scalar>(shape, std::move(params));
}

template class DriftNet<float>;
template class DriftNet<double>;
template LossGrad<float> loss_and_grad(const DriftNet<float>&, const RegressionBatch&);
template LossGrad<double> loss_and_grad(const DriftNet<double>&, const RegressionBatch&);
template class AdamW<float>;
template class AdamW<double>;
template class Ema<float>;
template class Ema<double>;
template DriftNet<float> with_ema(const DriftNet<float>&, const Ema<float>&);
template DriftNet<double> with_ema(const DriftNet<double>&, const Ema<double>&);
template void save_checkpoint(const std::filesystem::path&, const DriftNet<float>&);
template void save_checkpoint(const std::filesystem::path&, const DriftNet<double>&);
template DriftNet<float> load_checkpoint(const std::filesystem::path&);
template DriftNet<double> load_checkpoint(const std::filesystem::path&);

}  // namespace bm2
