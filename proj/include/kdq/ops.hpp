// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include "kdq/tensor.hpp"

namespace kdq {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

namespace detail {

inline void require_same_shape(const char* op, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape != b->shape)
    throw ShapeError(std::string(op) + ": mismatched shapes " + shape_str(a->shape) + " vs " +
                     shape_str(b->shape));
}

inline void require_4d(const char* op, const TensorPtr& x) {
  if (x->shape.size() != 4)
    throw ShapeError(std::string(op) + ": expected 4-d input, got " + shape_str(x->shape));
}

inline float sigmoid_f(float x) {
  if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
  float e = std::exp(x);
  return e / (1.0f + e);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise primitives
// ---------------------------------------------------------------------------

inline TensorPtr add(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("add", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] + b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += y->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b->grad[i] += y->grad[i];
      }
    });
  }
  return y;
}

inline TensorPtr sub(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("sub", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] - b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += y->grad[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b->grad[i] -= y->grad[i];
      }
    });
  }
  return y;
}

inline TensorPtr mul(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("mul", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] * b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += y->grad[i] * b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b->grad[i] += y->grad[i] * a->data[i];
      }
    });
  }
  return y;
}

inline TensorPtr div(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("div", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] / b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += y->grad[i] / b->data[i];
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          b->grad[i] -= y->grad[i] * a->data[i] / (b->data[i] * b->data[i]);
      }
    });
  }
  return y;
}

/// y = c * x for a compile-time-fixed scalar c.
inline TensorPtr scale(Graph* g, const TensorPtr& x, float c) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = c * x->data[i];
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, c, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) x->grad[i] += c * y->grad[i];
    });
  }
  return y;
}

inline TensorPtr add_const(Graph* g, const TensorPtr& x, float c) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = x->data[i] + c;
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) x->grad[i] += y->grad[i];
    });
  }
  return y;
}

inline TensorPtr relu(Graph* g, const TensorPtr& x) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = x->data[i] > 0.0f ? x->data[i] : 0.0f;
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (x->data[i] > 0.0f) x->grad[i] += y->grad[i];
    });
  }
  return y;
}

inline TensorPtr silu(Graph* g, const TensorPtr& x) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  auto sig = std::make_shared<std::vector<float>>(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    float s = detail::sigmoid_f(x->data[i]);
    (*sig)[i] = s;
    y->data[i] = x->data[i] * s;
  }
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, sig, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        float s = (*sig)[i];
        x->grad[i] += y->grad[i] * s * (1.0f + x->data[i] * (1.0f - s));
      }
    });
  }
  return y;
}

inline TensorPtr sigmoid(Graph* g, const TensorPtr& x) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = detail::sigmoid_f(x->data[i]);
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        float s = y->data[i];
        x->grad[i] += y->grad[i] * s * (1.0f - s);
      }
    });
  }
  return y;
}

/// Natural log, elementwise. Caller guarantees positive inputs.
inline TensorPtr log(Graph* g, const TensorPtr& x) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = std::log(x->data[i]);
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) x->grad[i] += y->grad[i] / x->data[i];
    });
  }
  return y;
}

inline TensorPtr exp(Graph* g, const TensorPtr& x) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = std::exp(x->data[i]);
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i) x->grad[i] += y->grad[i] * y->data[i];
    });
  }
  return y;
}

/// Elementwise min; on ties the gradient goes to the first argument.
inline TensorPtr emin(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("min", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] <= b->data[i] ? a->data[i] : b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        if (a->data[i] <= b->data[i]) {
          if (a->requires_grad) a->grad[i] += y->grad[i];
        } else if (b->requires_grad) {
          b->grad[i] += y->grad[i];
        }
      }
    });
  }
  return y;
}

inline TensorPtr emax(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  detail::require_same_shape("max", a, b);
  auto y = make_tensor(a->shape);
  const int64_t n = a->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = a->data[i] >= b->data[i] ? a->data[i] : b->data[i];
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      if (a->requires_grad) a->ensure_grad();
      if (b->requires_grad) b->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        if (a->data[i] >= b->data[i]) {
          if (a->requires_grad) a->grad[i] += y->grad[i];
        } else if (b->requires_grad) {
          b->grad[i] += y->grad[i];
        }
      }
    });
  }
  return y;
}

inline TensorPtr min_const(Graph* g, const TensorPtr& x, float c) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = x->data[i] <= c ? x->data[i] : c;
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, c, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (x->data[i] <= c) x->grad[i] += y->grad[i];
    });
  }
  return y;
}

inline TensorPtr max_const(Graph* g, const TensorPtr& x, float c) {
  auto y = make_tensor(x->shape);
  const int64_t n = x->numel();
  for (int64_t i = 0; i < n; ++i) y->data[i] = x->data[i] >= c ? x->data[i] : c;
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, c, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        if (x->data[i] >= c) x->grad[i] += y->grad[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Shape primitives
// ---------------------------------------------------------------------------

inline TensorPtr reshape(Graph* g, const TensorPtr& x, std::vector<int> new_shape) {
  if (numel_of(new_shape) != x->numel())
    throw ShapeError("reshape: " + shape_str(x->shape) + " -> " + shape_str(new_shape) +
                     " changes element count");
  auto y = make_tensor(std::move(new_shape), x->data);
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (size_t i = 0; i < x->grad.size(); ++i) x->grad[i] += y->grad[i];
    });
  }
  return y;
}

/// Channel slice of an NCHW tensor: x[:, c0:c1, :, :].
inline TensorPtr slice_channels(Graph* g, const TensorPtr& x, int c0, int c1) {
  detail::require_4d("slice_channels", x);
  const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (c0 < 0 || c1 > C || c0 >= c1)
    throw ShapeError("slice_channels: [" + std::to_string(c0) + "," + std::to_string(c1) +
                     ") out of " + std::to_string(C) + " channels");
  const int SC = c1 - c0;
  auto y = make_tensor({B, SC, H, W});
  const int64_t plane = int64_t(H) * W;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < SC; ++c)
      std::copy_n(x->data.data() + ((int64_t(b) * C + c0 + c) * plane), plane,
                  y->data.data() + ((int64_t(b) * SC + c) * plane));
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, B, C, SC, c0, plane] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < SC; ++c) {
          const float* src = y->grad.data() + ((int64_t(b) * SC + c) * plane);
          float* dst = x->grad.data() + ((int64_t(b) * C + c0 + c) * plane);
          for (int64_t i = 0; i < plane; ++i) dst[i] += src[i];
        }
    });
  }
  return y;
}

/// Column slice of a 2-d tensor: x[:, c0:c1].
inline TensorPtr slice_cols(Graph* g, const TensorPtr& x, int c0, int c1) {
  if (x->shape.size() != 2) throw ShapeError("slice_cols: expected 2-d, got " + shape_str(x->shape));
  const int N = x->shape[0], C = x->shape[1];
  if (c0 < 0 || c1 > C || c0 >= c1) throw ShapeError("slice_cols: bad column range");
  const int SC = c1 - c0;
  auto y = make_tensor({N, SC});
  for (int r = 0; r < N; ++r)
    std::copy_n(x->data.data() + int64_t(r) * C + c0, SC, y->data.data() + int64_t(r) * SC);
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, N, C, SC, c0] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int r = 0; r < N; ++r)
        for (int c = 0; c < SC; ++c) x->grad[int64_t(r) * C + c0 + c] += y->grad[int64_t(r) * SC + c];
    });
  }
  return y;
}

/// Gather per-cell feature vectors from an NCHW tensor: out[p, :] = x[b_p, :, y_p, x_p].
inline TensorPtr gather_cells(Graph* g, const TensorPtr& x,
                              const std::vector<std::array<int, 3>>& cells) {
  detail::require_4d("gather_cells", x);
  const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int P = static_cast<int>(cells.size());
  auto y = make_tensor({P, C});
  for (int p = 0; p < P; ++p) {
    const auto& [b, cy, cx] = cells[p];
    if (b < 0 || b >= B || cy < 0 || cy >= H || cx < 0 || cx >= W)
      throw ShapeError("gather_cells: index out of range");
    for (int c = 0; c < C; ++c)
      y->data[int64_t(p) * C + c] = x->data[((int64_t(b) * C + c) * H + cy) * W + cx];
  }
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    auto idx = std::make_shared<std::vector<std::array<int, 3>>>(cells);
    g->record(y, [x, y, idx, C, H, W] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (size_t p = 0; p < idx->size(); ++p) {
        const auto& [b, cy, cx] = (*idx)[p];
        for (int c = 0; c < C; ++c)
          x->grad[((int64_t(b) * C + c) * H + cy) * W + cx] += y->grad[p * C + c];
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline TensorPtr sum_all(Graph* g, const TensorPtr& x) {
  double acc = 0.0;
  for (float v : x->data) acc += v;
  auto y = make_scalar(static_cast<float>(acc));
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      const float go = y->grad[0];
      for (auto& v : x->grad) v += go;
    });
  }
  return y;
}

inline TensorPtr mean_all(Graph* g, const TensorPtr& x) {
  const int64_t n = x->numel();
  double acc = 0.0;
  for (float v : x->data) acc += v;
  auto y = make_scalar(static_cast<float>(acc / double(n)));
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, n] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      const float go = y->grad[0] / float(n);
      for (auto& v : x->grad) v += go;
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Matrix multiply and convolution
// ---------------------------------------------------------------------------

inline TensorPtr matmul(Graph* g, const TensorPtr& a, const TensorPtr& b) {
  if (a->shape.size() != 2 || b->shape.size() != 2 || a->shape[1] != b->shape[0])
    throw ShapeError("matmul: incompatible shapes " + shape_str(a->shape) + " x " +
                     shape_str(b->shape));
  const int M = a->shape[0], K = a->shape[1], N = b->shape[1];
  auto y = make_tensor({M, N});
  {
    CMapMat A(a->data.data(), M, K), B(b->data.data(), K, N);
    MapMat Y(y->data.data(), M, N);
    Y.noalias() = A * B;
  }
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, M, K, N] {
      if (y->grad.empty()) return;
      CMapMat G(y->grad.data(), M, N);
      if (a->requires_grad) {
        a->ensure_grad();
        MapMat dA(a->grad.data(), M, K);
        CMapMat B(b->data.data(), K, N);
        dA.noalias() += G * B.transpose();
      }
      if (b->requires_grad) {
        b->ensure_grad();
        MapMat dB(b->grad.data(), K, N);
        CMapMat A(a->data.data(), M, K);
        dB.noalias() += A.transpose() * G;
      }
    });
  }
  return y;
}

namespace detail {

// Patch matrix layout: row = (b, oy, ox), column = (c, ky, kx).
inline void im2col(const float* x, int B, int C, int H, int W, int kh, int kw, int stride, int pad,
                   int OH, int OW, float* col) {
  const int K = C * kh * kw;
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        float* dst = col + (int64_t((b * OH + oy)) * OW + ox) * K;
        for (int c = 0; c < C; ++c) {
          const float* plane = x + (int64_t(b) * C + c) * H * W;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) {
              for (int kx = 0; kx < kw; ++kx) *dst++ = 0.0f;
              continue;
            }
            const float* rowp = plane + int64_t(iy) * W;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              *dst++ = (ix >= 0 && ix < W) ? rowp[ix] : 0.0f;
            }
          }
        }
      }
}

inline void col2im_accum(const float* col, int B, int C, int H, int W, int kh, int kw, int stride,
                         int pad, int OH, int OW, float* dx) {
  const int K = C * kh * kw;
  for (int b = 0; b < B; ++b)
    for (int oy = 0; oy < OH; ++oy)
      for (int ox = 0; ox < OW; ++ox) {
        const float* src = col + (int64_t((b * OH + oy)) * OW + ox) * K;
        for (int c = 0; c < C; ++c) {
          float* plane = dx + (int64_t(b) * C + c) * H * W;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) {
              src += kw;
              continue;
            }
            float* rowp = plane + int64_t(iy) * W;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix >= 0 && ix < W) rowp[ix] += src[kx];
            }
            src += kw;
          }
        }
      }
}

}  // namespace detail

/**
 * 2-d convolution, NCHW x [OC,C,kh,kw] -> NCHW, zero padding. Bias may be
 * null. Implemented as im2col + GEMM; the patch matrix is kept for the
 * backward pass when recording.
 */
inline TensorPtr conv2d(Graph* g, const TensorPtr& x, const TensorPtr& w, const TensorPtr& bias,
                        int stride, int pad) {
  detail::require_4d("conv2d input", x);
  if (w->shape.size() != 4)
    throw ShapeError("conv2d: kernel must be 4-d, got " + shape_str(w->shape));
  const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  const int OC = w->shape[0], kh = w->shape[2], kw = w->shape[3];
  if (w->shape[1] != C)
    throw ShapeError("conv2d: kernel channels " + shape_str(w->shape) + " do not match input " +
                     shape_str(x->shape));
  if (stride < 1) throw ParamError("conv2d: stride must be >= 1");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (OH <= 0 || OW <= 0)
    throw ShapeError("conv2d: kernel " + shape_str(w->shape) + " too large for input " +
                     shape_str(x->shape));
  if (bias && (bias->shape.size() != 1 || bias->shape[0] != OC))
    throw ShapeError("conv2d: bias must be [" + std::to_string(OC) + "]");

  const int K = C * kh * kw;
  const int64_t M = int64_t(B) * OH * OW;
  auto col = std::make_shared<std::vector<float>>(size_t(M) * K);
  detail::im2col(x->data.data(), B, C, H, W, kh, kw, stride, pad, OH, OW, col->data());

  std::vector<float> out_mat(size_t(M) * OC);
  {
    CMapMat Col(col->data(), M, K), Wm(w->data.data(), OC, K);
    MapMat O(out_mat.data(), M, OC);
    O.noalias() = Col * Wm.transpose();
  }

  auto y = make_tensor({B, OC, OH, OW});
  const int64_t plane = int64_t(OH) * OW;
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < OC; ++oc) {
      const float bv = bias ? bias->data[oc] : 0.0f;
      float* dst = y->data.data() + (int64_t(b) * OC + oc) * plane;
      const float* src = out_mat.data() + int64_t(b) * plane * OC + oc;
      for (int64_t i = 0; i < plane; ++i) dst[i] = src[i * OC] + bv;
    }

  bool rec = bias ? wants_grad(g, {&x, &w, &bias}) : wants_grad(g, {&x, &w});
  if (rec) {
    y->requires_grad = true;
    g->record(y, [x, w, bias, y, col, B, C, H, W, OC, kh, kw, stride, pad, OH, OW, K, M, plane] {
      if (y->grad.empty()) return;
      // Regroup dY into the GEMM layout (row = spatial position, col = OC).
      std::vector<float> gmat(size_t(M) * OC);
      for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < OC; ++oc) {
          const float* src = y->grad.data() + (int64_t(b) * OC + oc) * plane;
          float* dst = gmat.data() + int64_t(b) * plane * OC + oc;
          for (int64_t i = 0; i < plane; ++i) dst[i * OC] = src[i];
        }
      CMapMat G(gmat.data(), M, OC);
      if (w->requires_grad) {
        w->ensure_grad();
        MapMat dW(w->grad.data(), OC, K);
        CMapMat Col(col->data(), M, K);
        dW.noalias() += G.transpose() * Col;
      }
      if (bias && bias->requires_grad) {
        bias->ensure_grad();
        for (int oc = 0; oc < OC; ++oc) {
          double s = 0.0;
          const float* src = gmat.data() + oc;
          for (int64_t i = 0; i < M; ++i) s += src[i * OC];
          bias->grad[oc] += static_cast<float>(s);
        }
      }
      if (x->requires_grad) {
        x->ensure_grad();
        std::vector<float> dcol(size_t(M) * K);
        {
          MapMat dCol(dcol.data(), M, K);
          CMapMat Wm(w->data.data(), OC, K);
          dCol.noalias() = G * Wm;
        }
        detail::col2im_accum(dcol.data(), B, C, H, W, kh, kw, stride, pad, OH, OW, x->grad.data());
      }
    });
  }
  return y;
}

/// 2x2 max pool, stride 2. Ties resolve to the first element in scan order.
inline TensorPtr maxpool2x2(Graph* g, const TensorPtr& x) {
  detail::require_4d("maxpool2x2", x);
  const int B = x->shape[0], C = x->shape[1], H = x->shape[2], W = x->shape[3];
  if (H % 2 || W % 2)
    throw ShapeError("maxpool2x2: spatial dims must be even, got " + shape_str(x->shape));
  const int OH = H / 2, OW = W / 2;
  auto y = make_tensor({B, C, OH, OW});
  auto argmax = std::make_shared<std::vector<int64_t>>(y->data.size());
  int64_t o = 0;
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const float* plane = x->data.data() + (int64_t(b) * C + c) * H * W;
      const int64_t base = (int64_t(b) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox, ++o) {
          const int iy = oy * 2, ix = ox * 2;
          int64_t best_idx = int64_t(iy) * W + ix;
          float best = plane[best_idx];
          const int64_t cand[3] = {int64_t(iy) * W + ix + 1, int64_t(iy + 1) * W + ix,
                                   int64_t(iy + 1) * W + ix + 1};
          for (int64_t ci : cand)
            if (plane[ci] > best) {
              best = plane[ci];
              best_idx = ci;
            }
          y->data[o] = best;
          (*argmax)[o] = base + best_idx;
        }
    }
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, argmax] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (size_t i = 0; i < y->grad.size(); ++i) x->grad[(*argmax)[i]] += y->grad[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Softmax family (rows over the trailing axis)
// ---------------------------------------------------------------------------

/**
 * Temperature-scaled softmax over the trailing axis. Stable via
 * max-subtraction; rows sum to 1 even for logits of magnitude ~1e4.
 */
inline TensorPtr softmax_t(Graph* g, const TensorPtr& x, double temperature) {
  if (temperature <= 0.0) throw ParamError("softmax temperature must be > 0");
  if (x->shape.empty()) throw ShapeError("softmax: scalar input has no class axis");
  const int C = x->shape.back();
  const int64_t N = x->numel() / C;
  auto y = make_tensor(x->shape);
  const float invT = static_cast<float>(1.0 / temperature);
  for (int64_t r = 0; r < N; ++r) {
    const float* in = x->data.data() + r * C;
    float* out = y->data.data() + r * C;
    float m = in[0];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      out[c] = std::exp((in[c] - m) * invT);
      sum += out[c];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int c = 0; c < C; ++c) out[c] *= inv;
  }
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, N, C, invT] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t r = 0; r < N; ++r) {
        const float* p = y->data.data() + r * C;
        const float* go = y->grad.data() + r * C;
        float* gx = x->grad.data() + r * C;
        double dot = 0.0;
        for (int c = 0; c < C; ++c) dot += double(p[c]) * go[c];
        for (int c = 0; c < C; ++c)
          gx[c] += invT * p[c] * (go[c] - static_cast<float>(dot));
      }
    });
  }
  return y;
}

inline TensorPtr log_softmax_t(Graph* g, const TensorPtr& x, double temperature) {
  if (temperature <= 0.0) throw ParamError("softmax temperature must be > 0");
  if (x->shape.empty()) throw ShapeError("log_softmax: scalar input has no class axis");
  const int C = x->shape.back();
  const int64_t N = x->numel() / C;
  auto y = make_tensor(x->shape);
  const float invT = static_cast<float>(1.0 / temperature);
  for (int64_t r = 0; r < N; ++r) {
    const float* in = x->data.data() + r * C;
    float* out = y->data.data() + r * C;
    float m = in[0];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) sum += std::exp(double((in[c] - m) * invT));
    const float lse = static_cast<float>(std::log(sum));
    for (int c = 0; c < C; ++c) out[c] = (in[c] - m) * invT - lse;
  }
  if (wants_grad(g, {&x})) {
    y->requires_grad = true;
    g->record(y, [x, y, N, C, invT] {
      if (y->grad.empty()) return;
      x->ensure_grad();
      for (int64_t r = 0; r < N; ++r) {
        const float* ls = y->data.data() + r * C;
        const float* go = y->grad.data() + r * C;
        float* gx = x->grad.data() + r * C;
        double gsum = 0.0;
        for (int c = 0; c < C; ++c) gsum += go[c];
        for (int c = 0; c < C; ++c)
          gx[c] += invT * (go[c] - std::exp(ls[c]) * static_cast<float>(gsum));
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// Fused loss primitives (double-precision forward accumulation)
// ---------------------------------------------------------------------------

/**
 * Mean binary cross-entropy from logits against constant 0/1 targets.
 * The scalar is accumulated in double; `value_out` receives it unrounded.
 */
inline TensorPtr bce_with_logits_mean(Graph* g, const TensorPtr& z, const TensorPtr& t,
                                      double* value_out = nullptr) {
  detail::require_same_shape("bce_with_logits", z, t);
  if (t->requires_grad) throw ContractError("bce targets must not require grad");
  const int64_t n = z->numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double zv = z->data[i], tv = t->data[i];
    acc += std::max(zv, 0.0) - zv * tv + std::log1p(std::exp(-std::abs(zv)));
  }
  const double val = acc / double(n);
  if (value_out) *value_out = val;
  auto y = make_scalar(static_cast<float>(val));
  if (wants_grad(g, {&z})) {
    y->requires_grad = true;
    g->record(y, [z, t, y, n] {
      if (y->grad.empty()) return;
      z->ensure_grad();
      const float go = y->grad[0] / float(n);
      for (int64_t i = 0; i < n; ++i)
        z->grad[i] += go * (detail::sigmoid_f(z->data[i]) - t->data[i]);
    });
  }
  return y;
}

/**
 * Mean cross-entropy over rows of [N,C] logits against integer labels.
 * Returns a zero scalar when N == 0 (no rows contribute, no node recorded).
 */
inline TensorPtr cross_entropy_rows_mean(Graph* g, const TensorPtr& z,
                                         const std::vector<int>& labels,
                                         double* value_out = nullptr) {
  if (z->shape.size() != 2)
    throw ShapeError("cross_entropy: expected [N,C] logits, got " + shape_str(z->shape));
  const int N = z->shape[0], C = z->shape[1];
  if (static_cast<int>(labels.size()) != N)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(N) + " rows");
  if (N == 0) {
    if (value_out) *value_out = 0.0;
    return make_scalar(0.0f);
  }
  auto probs = std::make_shared<std::vector<float>>(size_t(N) * C);
  double acc = 0.0;
  for (int r = 0; r < N; ++r) {
    const float* in = z->data.data() + int64_t(r) * C;
    float* p = probs->data() + int64_t(r) * C;
    float m = in[0];
    for (int c = 1; c < C; ++c) m = std::max(m, in[c]);
    double sum = 0.0;
    for (int c = 0; c < C; ++c) {
      p[c] = std::exp(in[c] - m);
      sum += p[c];
    }
    const float inv = static_cast<float>(1.0 / sum);
    for (int c = 0; c < C; ++c) p[c] *= inv;
    acc -= double(in[labels[r]] - m) - std::log(sum);
  }
  const double val = acc / double(N);
  if (value_out) *value_out = val;
  auto y = make_scalar(static_cast<float>(val));
  if (wants_grad(g, {&z})) {
    y->requires_grad = true;
    auto lab = std::make_shared<std::vector<int>>(labels);
    g->record(y, [z, y, probs, lab, N, C] {
      if (y->grad.empty()) return;
      z->ensure_grad();
      const float go = y->grad[0] / float(N);
      for (int r = 0; r < N; ++r) {
        const float* p = probs->data() + int64_t(r) * C;
        float* gz = z->grad.data() + int64_t(r) * C;
        for (int c = 0; c < C; ++c) gz[c] += go * (p[c] - (c == (*lab)[r] ? 1.0f : 0.0f));
      }
    });
  }
  return y;
}

/// Mean squared difference; double-accumulated forward.
inline TensorPtr mse_mean(Graph* g, const TensorPtr& a, const TensorPtr& b,
                          double* value_out = nullptr) {
  detail::require_same_shape("mse", a, b);
  const int64_t n = a->numel();
  double acc = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = double(a->data[i]) - double(b->data[i]);
    acc += d * d;
  }
  const double val = acc / double(n);
  if (value_out) *value_out = val;
  auto y = make_scalar(static_cast<float>(val));
  if (wants_grad(g, {&a, &b})) {
    y->requires_grad = true;
    g->record(y, [a, b, y, n] {
      if (y->grad.empty()) return;
      const float go = y->grad[0] * 2.0f / float(n);
      if (a->requires_grad) {
        a->ensure_grad();
        for (int64_t i = 0; i < n; ++i) a->grad[i] += go * (a->data[i] - b->data[i]);
      }
      if (b->requires_grad) {
        b->ensure_grad();
        for (int64_t i = 0; i < n; ++i) b->grad[i] -= go * (a->data[i] - b->data[i]);
      }
    });
  }
  return y;
}

}  // namespace kdq
