#include "bm2/rng.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

namespace bm2 {
namespace {

constexpr std::uint32_t kPhiloxM0 = 0xD2511F53u;
constexpr std::uint32_t kPhiloxM1 = 0xCD9E8D57u;
constexpr std::uint32_t kPhiloxW0 = 0x9E3779B9u;
constexpr std::uint32_t kPhiloxW1 = 0xBB67AE85u;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xCBF29CE484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ull;
  }
  return h;
}

std::uint64_t derive_key(std::uint64_t parent, std::string_view label, std::uint64_t index) {
  return splitmix64(splitmix64(parent ^ fnv1a(label)) + splitmix64(index ^ 0x5851F42D4C957F2Dull));
}

}  // namespace

std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> ctr,
                                           std::array<std::uint32_t, 2> key) {
  for (int round = 0; round < 10; ++round) {
    const std::uint64_t p0 = static_cast<std::uint64_t>(kPhiloxM0) * ctr[0];
    const std::uint64_t p1 = static_cast<std::uint64_t>(kPhiloxM1) * ctr[2];
    const auto hi0 = static_cast<std::uint32_t>(p0 >> 32);
    const auto lo0 = static_cast<std::uint32_t>(p0);
    const auto hi1 = static_cast<std::uint32_t>(p1 >> 32);
    const auto lo1 = static_cast<std::uint32_t>(p1);
    ctr = {hi1 ^ ctr[1] ^ key[0], lo1, hi0 ^ ctr[3] ^ key[1], lo0};
    key[0] += kPhiloxW0;
    key[1] += kPhiloxW1;
  }
  return ctr;
}

RngStream::RngStream(std::uint64_t seed, std::string_view label)
    : key_(derive_key(splitmix64(seed), label, 0)), label_(label) {}

RngStream::RngStream(std::uint64_t key, std::string label, int) : key_(key), label_(std::move(label)) {}

RngStream RngStream::split(std::string_view label, std::uint64_t index) const {
  std::string child = label_;
  child += '/';
  child += label;
  if (index != 0) {
    child += '#';
    child += std::to_string(index);
  }
  return RngStream(derive_key(key_, label, index), std::move(child), 0);
}

void RngStream::refill() {
  const std::array<std::uint32_t, 4> ctr = {static_cast<std::uint32_t>(counter_),
                                            static_cast<std::uint32_t>(counter_ >> 32), 0u, 0u};
  const std::array<std::uint32_t, 2> key = {static_cast<std::uint32_t>(key_),
                                            static_cast<std::uint32_t>(key_ >> 32)};
  const auto out = philox4x32_10(ctr, key);
  block_[0] = (static_cast<std::uint64_t>(out[1]) << 32) | out[0];
  block_[1] = (static_cast<std::uint64_t>(out[3]) << 32) | out[2];
  block_pos_ = 0;
  ++counter_;
}

std::uint64_t RngStream::next_u64() {
  if (block_pos_ >= 2) refill();
  return block_[block_pos_++];
}

double RngStream::uniform() {
  // 53 random bits centred in their bucket: never 0 or 1.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_normal_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double angle = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(angle);
  has_spare_ = true;
  return r * std::cos(angle);
}

void RngStream::fill_normal(std::span<double> out) {
  for (double& v : out) v = normal();
}

GaussianSpec GaussianSpec::isotropic(const Vector& mean, double variance) {
  return {mean, Matrix::Identity(mean.size(), mean.size()) * variance};
}

GaussianSpec GaussianSpec::diagonal(const Vector& mean, const Vector& variances) {
  if (variances.size() != mean.size()) throw InvalidArgument("GaussianSpec: variance/mean size mismatch");
  return {mean, variances.asDiagonal().toDenseMatrix()};
}

void GaussianSpec::validate() const {
  const Eigen::Index d = mean.size();
  if (d == 0) throw InvalidArgument("GaussianSpec: empty mean");
  if (cov.rows() != d || cov.cols() != d) {
    std::ostringstream msg;
    msg << "GaussianSpec: covariance is " << cov.rows() << "x" << cov.cols() << ", expected " << d << "x" << d;
    throw InvalidArgument(msg.str());
  }
  if (!mean.allFinite() || !cov.allFinite()) throw InvalidArgument("GaussianSpec: non-finite parameters");
  const double scale = std::max(1.0, cov.cwiseAbs().maxCoeff());
  if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw InvalidArgument("GaussianSpec: covariance is not symmetric");
  }
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov, Eigen::EigenvaluesOnly);
  const double min_eig = eig.eigenvalues().minCoeff();
  if (min_eig < -1e-12 * scale) {
    std::ostringstream msg;
    msg << "GaussianSpec: covariance not positive semidefinite (min eigenvalue " << min_eig << ")";
    throw InvalidArgument(msg.str());
  }
}

Eigen::Index MixtureSpec::dim() const { return components.empty() ? 0 : components.front().dim(); }

void MixtureSpec::validate() const {
  if (components.empty()) throw InvalidArgument("MixtureSpec: empty component list");
  if (weights.size() != components.size()) throw InvalidArgument("MixtureSpec: weights/components size mismatch");
  double total = 0.0;
  for (double w : weights) {
    if (!(w >= 0.0)) throw InvalidArgument("MixtureSpec: negative or NaN weight");
    total += w;
  }
  if (std::abs(total - 1.0) > 1e-12) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "MixtureSpec: weights sum to " << total << ", expected 1";
    throw InvalidArgument(msg.str());
  }
  for (const auto& c : components) {
    c.validate();
    if (c.dim() != dim()) throw InvalidArgument("MixtureSpec: components differ in dimension");
  }
}

Matrix psd_factor(const Matrix& cov) {
  Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
  const Vector root = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * root.asDiagonal();
}

namespace {

void draw_rows(const Vector& mean, const Matrix& factor, Eigen::Index row, Samples& out, RngStream& rng) {
  const Eigen::Index d = mean.size();
  Vector z(d);
  rng.fill_normal({z.data(), static_cast<std::size_t>(d)});
  out.row(row) = (mean + factor * z).transpose();
}

}  // namespace

Samples gaussian_sample(const GaussianSpec& spec, Eigen::Index n, RngStream& rng) {
  spec.validate();
  if (n < 0) throw InvalidArgument("gaussian_sample: negative count");
  const Matrix factor = psd_factor(spec.cov);
  Samples out(n, spec.dim());
  for (Eigen::Index i = 0; i < n; ++i) draw_rows(spec.mean, factor, i, out, rng);
  return out;
}

Samples mixture_sample(const MixtureSpec& spec, Eigen::Index n, RngStream& rng) {
  spec.validate();
  if (n < 0) throw InvalidArgument("mixture_sample: negative count");
  std::vector<Matrix> factors;
  factors.reserve(spec.components.size());
  for (const auto& c : spec.components) factors.push_back(psd_factor(c.cov));
  Samples out(n, spec.dim());
  const std::size_t k_last = spec.components.size() - 1;
  for (Eigen::Index i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t k = 0;
    double cumulative = spec.weights[0];
    while (k < k_last && u >= cumulative) cumulative += spec.weights[++k];
    draw_rows(spec.components[k].mean, factors[k], i, out, rng);
  }
  return out;
}

}  // namespace bm2
