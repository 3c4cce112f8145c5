#pragma once

#include "bm2/types.hpp"

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bm2 {

/// Counter-based random stream (Philox4x32-10).
///
/// A stream is identified by a 64-bit key derived from the root seed and the
/// chain of labels used to split it. Output number i depends only on
/// (key, i), so a stream reproduces exactly regardless of what other streams
/// did before. Splitting never advances the parent.
///
/// Draws mutate the counter: give each thread its own split stream.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed, std::string_view label = "root");

  /// Independent substream keyed by (this key, label, index).
  [[nodiscard]] RngStream split(std::string_view label, std::uint64_t index = 0) const;

  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  void fill_normal(std::span<double> out);

  [[nodiscard]] const std::string& label() const { return label_; }
  [[nodiscard]] std::uint64_t key() const { return key_; }

 private:
  RngStream(std::uint64_t key, std::string label, int);
  void refill();

  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  std::array<std::uint64_t, 2> block_{};
  int block_pos_ = 2;
  double spare_normal_ = 0.0;
  bool has_spare_ = false;
  std::string label_;
};

/// Raw Philox4x32-10 block function; exposed for known-answer tests.
std::array<std::uint32_t, 4> philox4x32_10(std::array<std::uint32_t, 4> counter,
                                           std::array<std::uint32_t, 2> key);

struct GaussianSpec {
  Vector mean;
  Matrix cov;

  static GaussianSpec isotropic(const Vector& mean, double variance);
  static GaussianSpec diagonal(const Vector& mean, const Vector& variances);

  [[nodiscard]] Eigen::Index dim() const { return mean.size(); }
  /// Throws InvalidArgument on shape mismatch, asymmetry or a negative eigenvalue.
  void validate() const;
};

struct MixtureSpec {
  std::vector<double> weights;
  std::vector<GaussianSpec> components;

  [[nodiscard]] Eigen::Index dim() const;
  void validate() const;
};

/// Square-root factor L with L L^T = cov, from a symmetric eigendecomposition
/// with eigenvalues clamped at zero. Accepts singular covariances.
Matrix psd_factor(const Matrix& cov);

Samples gaussian_sample(const GaussianSpec& spec, Eigen::Index n, RngStream& rng);
Samples mixture_sample(const MixtureSpec& spec, Eigen::Index n, RngStream& rng);

/// Convenience: split_stream as a free function.
inline RngStream split_stream(const RngStream& rng, std::string_view label) { return rng.split(label); }

}  // namespace bm2
