#pragma once

// Feature-major dense kernels for the drift MLP. Activations are stored as
// (features x n) with the batch index contiguous. Every output element is
// accumulated over the reduction index in a fixed ascending order that does not
// depend on n, so results are independent of batch size.

#include <algorithm>
#include <cstddef>

namespace bm2::kernels {

/// y(out x n) = W(out x in) x(in x n) + b.
template <typename T>
void affine_forward(const T* w, const T* b, const T* x, T* y, int out, int in, std::size_t n) {
  int j = 0;
  for (; j + 4 <= out; j += 4) {
    T* y0 = y + static_cast<std::size_t>(j) * n;
    T* y1 = y0 + n;
    T* y2 = y1 + n;
    T* y3 = y2 + n;
    std::fill(y0, y0 + n, b[j]);
    std::fill(y1, y1 + n, b[j + 1]);
    std::fill(y2, y2 + n, b[j + 2]);
    std::fill(y3, y3 + n, b[j + 3]);
    const T* w0 = w + static_cast<std::size_t>(j) * in;
    const T* w1 = w0 + in;
    const T* w2 = w1 + in;
    const T* w3 = w2 + in;
    for (int k = 0; k < in; ++k) {
      const T* xk = x + static_cast<std::size_t>(k) * n;
      const T a0 = w0[k], a1 = w1[k], a2 = w2[k], a3 = w3[k];
      for (std::size_t i = 0; i < n; ++i) {
        const T v = xk[i];
        y0[i] += a0 * v;
        y1[i] += a1 * v;
        y2[i] += a2 * v;
        y3[i] += a3 * v;
      }
    }
  }
  for (; j < out; ++j) {
    T* yj = y + static_cast<std::size_t>(j) * n;
    std::fill(yj, yj + n, b[j]);
    const T* wj = w + static_cast<std::size_t>(j) * in;
    for (int k = 0; k < in; ++k) {
      const T* xk = x + static_cast<std::size_t>(k) * n;
      const T a = wj[k];
      for (std::size_t i = 0; i < n; ++i) yj[i] += a * xk[i];
    }
  }
}

template <typename T>
void relu_inplace(T* y, std::size_t count) {
  for (std::size_t i = 0; i < count; ++i) y[i] = y[i] > T(0) ? y[i] : T(0);
}

/// (in x n) -> (n x in).
template <typename T>
void transpose(const T* x, T* xt, int rows, std::size_t n) {
  for (int k = 0; k < rows; ++k) {
    const T* xk = x + static_cast<std::size_t>(k) * n;
    for (std::size_t i = 0; i < n; ++i) xt[i * static_cast<std::size_t>(rows) + static_cast<std::size_t>(k)] = xk[i];
  }
}

/// gw(out x in) += dy(out x n) x^T, gb(out) += row sums of dy. xt is x transposed (n x in).
template <typename T>
void affine_weight_grad(const T* dy, const T* xt, T* gw, T* gb, int out, int in, std::size_t n) {
  for (int j = 0; j < out; ++j) {
    const T* dyj = dy + static_cast<std::size_t>(j) * n;
    T* gwj = gw + static_cast<std::size_t>(j) * in;
    T bias_acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
      const T g = dyj[i];
      bias_acc += g;
      if (g == T(0)) continue;
      const T* xi = xt + i * static_cast<std::size_t>(in);
      for (int k = 0; k < in; ++k) gwj[k] += g * xi[k];
    }
    gb[j] += bias_acc;
  }
}

/// dx(in x n) = W^T dy.
template <typename T>
void affine_input_grad(const T* w, const T* dy, T* dx, int out, int in, std::size_t n) {
  std::fill(dx, dx + static_cast<std::size_t>(in) * n, T(0));
  for (int j = 0; j < out; ++j) {
    const T* dyj = dy + static_cast<std::size_t>(j) * n;
    const T* wj = w + static_cast<std::size_t>(j) * in;
    int k = 0;
    for (; k + 4 <= in; k += 4) {
      T* d0 = dx + static_cast<std::size_t>(k) * n;
      T* d1 = d0 + n;
      T* d2 = d1 + n;
      T* d3 = d2 + n;
      const T a0 = wj[k], a1 = wj[k + 1], a2 = wj[k + 2], a3 = wj[k + 3];
      for (std::size_t i = 0; i < n; ++i) {
        const T g = dyj[i];
        d0[i] += a0 * g;
        d1[i] += a1 * g;
        d2[i] += a2 * g;
        d3[i] += a3 * g;
      }
    }
    for (; k < in; ++k) {
      T* dk = dx + static_cast<std::size_t>(k) * n;
      const T a = wj[k];
      for (std::size_t i = 0; i < n; ++i) dk[i] += a * dyj[i];
    }
  }
}

}  // namespace bm2::kernels
