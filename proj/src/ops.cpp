// Copyright 2026 The KDFS Authors
// SPDX-License-Identifier: Apache-2.0

#include "kdfs/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace kdfs {
namespace {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixMap = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixMap = Eigen::Map<const RowMatrix<T>>;

enum class Broadcast { kSame, kLeftScalar, kRightScalar };

template <typename T>
Broadcast broadcast_mode(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() == b.shape()) return Broadcast::kSame;
  if (a.numel() == 1) return Broadcast::kLeftScalar;
  if (b.numel() == 1) return Broadcast::kRightScalar;
  throw DimensionError(std::string(op) + ": incompatible shapes " + to_string(a.shape()) + " and " +
                       to_string(b.shape()));
}

void require_rank(const Shape& shape, std::size_t rank, const char* op, const char* what) {
  if (shape.size() != rank) {
    throw DimensionError(std::string(op) + ": " + what + " must have rank " + std::to_string(rank) +
                         ", got shape " + to_string(shape));
  }
}

// Accumulates `g` into a gradient buffer, summing when the target was
// broadcast from a single element.
template <typename T>
void accumulate(std::vector<T>* dst, std::span<const T> g, bool reduce) {
  if (!dst) return;
  if (reduce) {
    T total{0};
    for (T v : g) total += v;
    (*dst)[0] += total;
  } else {
    for (std::size_t i = 0; i < g.size(); ++i) (*dst)[i] += g[i];
  }
}

template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t height, std::size_t width, int kernel,
            int stride, int padding, std::size_t out_h, std::size_t out_w, T* cols) {
  const std::size_t plane = out_h * out_w;
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        T* dst = cols + ((c * kernel + ky) * kernel + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - padding + ky;
          T* row = dst + oy * out_w;
          if (iy < 0 || iy >= h) {
            std::fill(row, row + out_w, T{0});
            continue;
          }
          const T* src = img + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - padding + kx;
            row[ox] = (ix < 0 || ix >= w) ? T{0} : src[ix];
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width, int kernel,
            int stride, int padding, std::size_t out_h, std::size_t out_w, T* img) {
  const std::size_t plane = out_h * out_w;
  const long h = static_cast<long>(height);
  const long w = static_cast<long>(width);
  for (std::size_t c = 0; c < channels; ++c) {
    for (int ky = 0; ky < kernel; ++ky) {
      for (int kx = 0; kx < kernel; ++kx) {
        const T* src = cols + ((c * kernel + ky) * kernel + kx) * plane;
        for (std::size_t oy = 0; oy < out_h; ++oy) {
          const long iy = static_cast<long>(oy) * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = img + (c * height + static_cast<std::size_t>(iy)) * width;
          const T* row = src + oy * out_w;
          for (std::size_t ox = 0; ox < out_w; ++ox) {
            const long ix = static_cast<long>(ox) * stride - padding + kx;
            if (ix >= 0 && ix < w) dst[ix] += row[ox];
          }
        }
      }
    }
  }
}

void check_kept(std::span<const int> kept, std::size_t channels, const char* op) {
  for (std::size_t i = 0; i < kept.size(); ++i) {
    if (kept[i] < 0 || static_cast<std::size_t>(kept[i]) >= channels ||
        (i > 0 && kept[i] <= kept[i - 1])) {
      throw DimensionError(std::string(op) +
                           ": kept indices must be strictly increasing and below " +
                           std::to_string(channels));
    }
  }
}

}  // namespace

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  const Broadcast mode = broadcast_mode(a, b, "add");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(mode == Broadcast::kLeftScalar ? bv.shape : av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = av[mode == Broadcast::kLeftScalar ? 0 : i] + bv[mode == Broadcast::kRightScalar ? 0 : i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, std::span<const T> g) {
    accumulate(tape.grad_buffer(ia), g, mode == Broadcast::kLeftScalar);
    accumulate(tape.grad_buffer(ib), g, mode == Broadcast::kRightScalar);
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  const Broadcast mode = broadcast_mode(a, b, "sub");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(mode == Broadcast::kLeftScalar ? bv.shape : av.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) {
    out[i] = av[mode == Broadcast::kLeftScalar ? 0 : i] - bv[mode == Broadcast::kRightScalar ? 0 : i];
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, std::span<const T> g) {
    accumulate(tape.grad_buffer(ia), g, mode == Broadcast::kLeftScalar);
    if (std::vector<T>* gb = tape.grad_buffer(ib)) {
      std::vector<T> neg(g.begin(), g.end());
      for (T& v : neg) v = -v;
      accumulate(gb, std::span<const T>(neg), mode == Broadcast::kRightScalar);
    }
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  const Broadcast mode = broadcast_mode(a, b, "mul");
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  Tensor<T> out(mode == Broadcast::kLeftScalar ? bv.shape : av.shape);
  const auto ai = [mode](std::size_t i) { return mode == Broadcast::kLeftScalar ? 0 : i; };
  const auto bi = [mode](std::size_t i) { return mode == Broadcast::kRightScalar ? 0 : i; };
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[ai(i)] * bv[bi(i)];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, std::span<const T> g) {
    const Tensor<T>& x = tape.value(ia);
    const Tensor<T>& y = tape.value(ib);
    if (std::vector<T>* ga = tape.grad_buffer(ia)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*ga)[ai(i)] += g[i] * y[bi(i)];
    }
    if (std::vector<T>* gb = tape.grad_buffer(ib)) {
      for (std::size_t i = 0; i < g.size(); ++i) (*gb)[bi(i)] += g[i] * x[ai(i)];
    }
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T factor) {
  Tensor<T> out = a.value();
  out.grad.clear();
  for (T& v : out.data) v *= factor;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& ga = *tape.grad_buffer(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
  });
}

template <typename T>
Var<T> add_scalar(const Var<T>& a, T offset) {
  Tensor<T> out = a.value();
  out.grad.clear();
  for (T& v : out.data) v += offset;
  const std::size_t ia = a.id();
  return a.tape().record(std::move(out), {a}, [=](Tape<T>& tape, std::span<const T> g) {
    accumulate(tape.grad_buffer(ia), g, false);
  });
}

template <typename T>
Var<T> relu(const Var<T>& x) {
  Tensor<T> out = x.value();
  out.grad.clear();
  for (T& v : out.data) v = v > T{0} ? v : T{0};
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    const Tensor<T>& in = tape.value(ix);
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > T{0}) gx[i] += g[i];
    }
  });
}

template <typename T>
Var<T> abs(const Var<T>& x) {
  Tensor<T> out = x.value();
  out.grad.clear();
  for (T& v : out.data) v = std::abs(v);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    const Tensor<T>& in = tape.value(ix);
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (in[i] > T{0}) {
        gx[i] += g[i];
      } else if (in[i] < T{0}) {
        gx[i] -= g[i];
      }
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& x) {
  T total{0};
  for (T v : x.value().data) total += v;
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(total), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (T& v : gx) v += g[0];
  });
}

template <typename T>
Var<T> mean(const Var<T>& x) {
  return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

template <typename T>
Var<T> frobenius_norm(const Var<T>& x) {
  T sq{0};
  for (T v : x.value().data) sq += v * v;
  const T norm = std::sqrt(sq);
  const std::size_t ix = x.id();
  return x.tape().record(Tensor<T>::scalar(norm), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    if (norm == T{0}) return;  // subgradient 0 at the origin
    const Tensor<T>& in = tape.value(ix);
    std::vector<T>& gx = *tape.grad_buffer(ix);
    const T k = g[0] / norm;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += k * in[i];
  });
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  Tensor<T> out(std::move(shape), x.value().data);
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    accumulate(tape.grad_buffer(ix), g, false);
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  require_rank(a.shape(), 2, "matmul", "left operand");
  require_rank(b.shape(), 2, "matmul", "right operand");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: left axis 1 (" + std::to_string(k) + ") != right axis 0 (" +
                         std::to_string(b.shape()[0]) + ")");
  }
  Tensor<T> out({m, n});
  MatrixMap<T>(out.data.data(), m, n).noalias() =
      ConstMatrixMap<T>(a.value().data.data(), m, k) * ConstMatrixMap<T>(b.value().data.data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record(std::move(out), {a, b}, [=](Tape<T>& tape, std::span<const T> g) {
    ConstMatrixMap<T> gm(g.data(), m, n);
    if (std::vector<T>* ga = tape.grad_buffer(ia)) {
      MatrixMap<T>(ga->data(), m, k).noalias() +=
          gm * ConstMatrixMap<T>(tape.value(ib).data.data(), k, n).transpose();
    }
    if (std::vector<T>* gb = tape.grad_buffer(ib)) {
      MatrixMap<T>(gb->data(), k, n).noalias() +=
          ConstMatrixMap<T>(tape.value(ia).data.data(), m, k).transpose() * gm;
    }
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias) {
  require_rank(x.shape(), 2, "linear", "input");
  require_rank(weight.shape(), 2, "linear", "weight");
  const std::size_t n = x.shape()[0], f = x.shape()[1], o = weight.shape()[0];
  if (weight.shape()[1] != f) {
    throw DimensionError("linear: input axis 1 (" + std::to_string(f) + ") != weight axis 1 (" +
                         std::to_string(weight.shape()[1]) + ")");
  }
  if (bias.shape() != Shape{o}) {
    throw DimensionError("linear: bias shape " + to_string(bias.shape()) + " != [" +
                         std::to_string(o) + "]");
  }
  Tensor<T> out({n, o});
  MatrixMap<T> om(out.data.data(), n, o);
  om.noalias() = ConstMatrixMap<T>(x.value().data.data(), n, f) *
                 ConstMatrixMap<T>(weight.value().data.data(), o, f).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < o; ++c) om(r, c) += bias.value()[c];
  }
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, weight, bias}, [=](Tape<T>& tape, std::span<const T> g) {
    ConstMatrixMap<T> gm(g.data(), n, o);
    if (std::vector<T>* gx = tape.grad_buffer(ix)) {
      MatrixMap<T>(gx->data(), n, f).noalias() +=
          gm * ConstMatrixMap<T>(tape.value(iw).data.data(), o, f);
    }
    if (std::vector<T>* gw = tape.grad_buffer(iw)) {
      MatrixMap<T>(gw->data(), o, f).noalias() +=
          gm.transpose() * ConstMatrixMap<T>(tape.value(ix).data.data(), n, f);
    }
    if (std::vector<T>* gb = tape.grad_buffer(ib)) {
      for (std::size_t r = 0; r < n; ++r) {
        for (std::size_t c = 0; c < o; ++c) (*gb)[c] += gm(r, c);
      }
    }
  });
}

template <typename T>
Var<T> softmax(const Var<T>& x) {
  require_rank(x.shape(), 2, "softmax", "input");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor<T> out(x.shape());
  const Tensor<T>& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = &in[r * cols];
    T* dst = &out[r * cols];
    const T peak = *std::max_element(src, src + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) total += (dst[c] = std::exp(src[c] - peak));
    for (std::size_t c = 0; c < cols; ++c) dst[c] /= total;
  }
  const std::size_t ix = x.id();
  Tensor<T> probs = out;
  return x.tape().record(std::move(out), {x}, [=, probs = std::move(probs)](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T dot{0};
      for (std::size_t c = 0; c < cols; ++c) dot += g[r * cols + c] * probs[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += probs[r * cols + c] * (g[r * cols + c] - dot);
      }
    }
  });
}

template <typename T>
Var<T> log_softmax(const Var<T>& x) {
  require_rank(x.shape(), 2, "log_softmax", "input");
  const std::size_t rows = x.shape()[0], cols = x.shape()[1];
  Tensor<T> out(x.shape());
  const Tensor<T>& in = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* src = &in[r * cols];
    const T peak = *std::max_element(src, src + cols);
    T total{0};
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(src[c] - peak);
    const T lse = peak + std::log(total);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = src[c] - lse;
  }
  const std::size_t ix = x.id();
  Tensor<T> logp = out;
  return x.tape().record(std::move(out), {x}, [=, logp = std::move(logp)](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t r = 0; r < rows; ++r) {
      T total{0};
      for (std::size_t c = 0; c < cols; ++c) total += g[r * cols + c];
      for (std::size_t c = 0; c < cols; ++c) {
        gx[r * cols + c] += g[r * cols + c] - std::exp(logp[r * cols + c]) * total;
      }
    }
  });
}

template <typename T>
Var<T> conv2d(const Var<T>& input, const Var<T>& weight, int stride, int padding) {
  require_rank(input.shape(), 4, "conv2d", "input");
  require_rank(weight.shape(), 4, "conv2d", "weight");
  if (stride < 1) throw ContractError("conv2d: stride must be >= 1");
  if (padding < 0) throw ContractError("conv2d: padding must be >= 0");
  const Shape& is = input.shape();
  const Shape& ws = weight.shape();
  if (is[1] != ws[1]) {
    throw DimensionError("conv2d: input axis 1 (channels=" + std::to_string(is[1]) +
                         ") != weight axis 1 (" + std::to_string(ws[1]) + ")");
  }
  if (ws[2] != ws[3]) {
    throw DimensionError("conv2d: weight axes 2 and 3 must be equal (square kernel), got " +
                         to_string(ws));
  }
  const int k = static_cast<int>(ws[2]);
  if (is[2] + 2 * static_cast<std::size_t>(padding) < ws[2] ||
      is[3] + 2 * static_cast<std::size_t>(padding) < ws[3]) {
    throw DimensionError("conv2d: kernel " + to_string(ws) + " larger than padded input " +
                         to_string(is));
  }
  const std::size_t n = is[0], c = is[1], h = is[2], w = is[3], o = ws[0];
  const std::size_t oh = conv_out_size(h, k, stride, padding);
  const std::size_t ow = conv_out_size(w, k, stride, padding);
  const std::size_t kk = c * static_cast<std::size_t>(k * k);
  const std::size_t plane = oh * ow;
  const bool direct = (k == 1 && stride == 1 && padding == 0);

  Tensor<T> out({n, o, oh, ow});
  {
    std::vector<T> cols(direct ? 0 : kk * plane);
    ConstMatrixMap<T> wm(weight.value().data.data(), o, kk);
    for (std::size_t b = 0; b < n; ++b) {
      const T* img = input.value().data.data() + b * c * h * w;
      const T* colp = img;
      if (!direct) {
        im2col(img, c, h, w, k, stride, padding, oh, ow, cols.data());
        colp = cols.data();
      }
      MatrixMap<T>(out.data.data() + b * o * plane, o, plane).noalias() =
          wm * ConstMatrixMap<T>(colp, kk, plane);
    }
  }

  const std::size_t ii = input.id(), iw = weight.id();
  return input.tape().record(
      std::move(out), {input, weight}, [=](Tape<T>& tape, std::span<const T> g) {
        const Tensor<T>& xv = tape.value(ii);
        const Tensor<T>& wv = tape.value(iw);
        std::vector<T>* gx = tape.grad_buffer(ii);
        std::vector<T>* gw = tape.grad_buffer(iw);
        std::vector<T> cols(direct ? 0 : kk * plane);
        ConstMatrixMap<T> wm(wv.data.data(), o, kk);
        for (std::size_t b = 0; b < n; ++b) {
          ConstMatrixMap<T> gm(g.data() + b * o * plane, o, plane);
          const T* img = xv.data.data() + b * c * h * w;
          if (gw) {
            const T* colp = img;
            if (!direct) {
              im2col(img, c, h, w, k, stride, padding, oh, ow, cols.data());
              colp = cols.data();
            }
            MatrixMap<T>(gw->data(), o, kk).noalias() +=
                gm * ConstMatrixMap<T>(colp, kk, plane).transpose();
          }
          if (gx) {
            T* dimg = gx->data() + b * c * h * w;
            if (direct) {
              MatrixMap<T>(dimg, kk, plane).noalias() += wm.transpose() * gm;
            } else {
              MatrixMap<T>(cols.data(), kk, plane).noalias() = wm.transpose() * gm;
              col2im(cols.data(), c, h, w, k, stride, padding, oh, ow, dimg);
            }
          }
        }
      });
}

template <typename T>
Var<T> bias_add(const Var<T>& x, const Var<T>& bias) {
  require_rank(x.shape(), 4, "bias_add", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  if (bias.shape() != Shape{c}) {
    throw DimensionError("bias_add: bias shape " + to_string(bias.shape()) +
                         " does not match input axis 1 (" + std::to_string(c) + ")");
  }
  Tensor<T> out = x.value();
  out.grad.clear();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = &out[(b * c + ch) * plane];
      const T v = bias.value()[ch];
      for (std::size_t i = 0; i < plane; ++i) p[i] += v;
    }
  }
  const std::size_t ix = x.id(), ib = bias.id();
  return x.tape().record(std::move(out), {x, bias}, [=](Tape<T>& tape, std::span<const T> g) {
    accumulate(tape.grad_buffer(ix), g, false);
    if (std::vector<T>* gb = tape.grad_buffer(ib)) {
      for (std::size_t b = 0; b < n; ++b) {
        for (std::size_t ch = 0; ch < c; ++ch) {
          const T* p = &g[(b * c + ch) * plane];
          T total{0};
          for (std::size_t i = 0; i < plane; ++i) total += p[i];
          (*gb)[ch] += total;
        }
      }
    }
  });
}

template <typename T>
Var<T> max_pool2d(const Var<T>& x, int kernel, int stride) {
  require_rank(x.shape(), 4, "max_pool2d", "input");
  if (kernel < 1 || stride < 1) throw ContractError("max_pool2d: kernel and stride must be >= 1");
  const Shape& s = x.shape();
  if (s[2] < static_cast<std::size_t>(kernel) || s[3] < static_cast<std::size_t>(kernel)) {
    throw DimensionError("max_pool2d: window larger than input " + to_string(s));
  }
  const std::size_t n = s[0], c = s[1], h = s[2], w = s[3];
  const std::size_t oh = conv_out_size(h, kernel, stride, 0);
  const std::size_t ow = conv_out_size(w, kernel, stride, 0);
  Tensor<T> out({n, c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  const Tensor<T>& in = x.value();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = p * h * w + oy * stride * w + ox * stride;
        for (int ky = 0; ky < kernel; ++ky) {
          for (int kx = 0; kx < kernel; ++kx) {
            const std::size_t idx = p * h * w + (oy * stride + ky) * w + ox * stride + kx;
            if (in[idx] > in[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x},
                         [ix, argmax = std::move(argmax)](Tape<T>& tape, std::span<const T> g) {
                           std::vector<T>& gx = *tape.grad_buffer(ix);
                           for (std::size_t i = 0; i < g.size(); ++i) gx[argmax[i]] += g[i];
                         });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
  require_rank(x.shape(), 4, "global_avg_pool", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  Tensor<T> out({n, c});
  const Tensor<T>& in = x.value();
  for (std::size_t p = 0; p < n * c; ++p) {
    T total{0};
    for (std::size_t i = 0; i < plane; ++i) total += in[p * plane + i];
    out[p] = total / static_cast<T>(plane);
  }
  const std::size_t ix = x.id();
  return x.tape().record(std::move(out), {x}, [=](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    const T inv = T{1} / static_cast<T>(plane);
    for (std::size_t p = 0; p < n * c; ++p) {
      for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += g[p] * inv;
    }
  });
}

template <typename T>
Var<T> batch_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta,
                  const RunningStats<T>& running, bool training, T eps) {
  require_rank(x.shape(), 4, "batch_norm", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw DimensionError("batch_norm: scale/shift must have shape [" + std::to_string(c) +
                         "] to match input axis 1");
  }
  if (running.mean && (running.mean->numel() != c || !running.var || running.var->numel() != c)) {
    throw DimensionError("batch_norm: running statistics must have " + std::to_string(c) + " entries");
  }
  if (!training && !running.mean) {
    throw ContractError("batch_norm: eval mode requires running statistics");
  }
  const std::size_t count = n * plane;
  const Tensor<T>& in = x.value();
  std::vector<T> inv_std(c);
  Tensor<T> xhat(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch) {
    T mu, var;
    if (training) {
      T total{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = &in[(b * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) total += p[i];
      }
      mu = total / static_cast<T>(count);
      T sq{0};
      for (std::size_t b = 0; b < n; ++b) {
        const T* p = &in[(b * c + ch) * plane];
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - mu) * (p[i] - mu);
      }
      var = sq / static_cast<T>(count);
      if (running.mean) {
        const T unbiased = count > 1 ? var * static_cast<T>(count) / static_cast<T>(count - 1) : var;
        T& rm = (*running.mean)[ch];
        T& rv = (*running.var)[ch];
        rm = (T{1} - running.momentum) * rm + running.momentum * mu;
        rv = (T{1} - running.momentum) * rv + running.momentum * unbiased;
      }
    } else {
      mu = (*running.mean)[ch];
      var = (*running.var)[ch];
    }
    inv_std[ch] = T{1} / std::sqrt(var + eps);
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) xhat[off + i] = (in[off + i] - mu) * inv_std[ch];
    }
  }
  Tensor<T> out(x.shape());
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t off = (b * c + ch) * plane;
      const T gm = gamma.value()[ch], bt = beta.value()[ch];
      for (std::size_t i = 0; i < plane; ++i) out[off + i] = gm * xhat[off + i] + bt;
    }
  }
  const std::size_t ix = x.id(), ig = gamma.id(), ib = beta.id();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& tape, std::span<const T> g) {
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              sum_g[ch] += g[off + i];
              sum_gx[ch] += g[off + i] * xhat[off + i];
            }
          }
        }
        if (std::vector<T>* gg = tape.grad_buffer(ig)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gg)[ch] += sum_gx[ch];
        }
        if (std::vector<T>* gb = tape.grad_buffer(ib)) {
          for (std::size_t ch = 0; ch < c; ++ch) (*gb)[ch] += sum_g[ch];
        }
        std::vector<T>* gx = tape.grad_buffer(ix);
        if (!gx) return;
        const Tensor<T>& gv = tape.value(ig);
        const T m = static_cast<T>(count);
        for (std::size_t b = 0; b < n; ++b) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t off = (b * c + ch) * plane;
            const T k = gv[ch] * inv_std[ch];
            for (std::size_t i = 0; i < plane; ++i) {
              if (training) {
                (*gx)[off + i] += k * (g[off + i] - sum_g[ch] / m - xhat[off + i] * sum_gx[ch] / m);
              } else {
                (*gx)[off + i] += k * g[off + i];
              }
            }
          }
        }
      });
}

template <typename T>
Var<T> channel_mask(const Var<T>& x, const Var<T>& mask) {
  require_rank(x.shape(), 4, "channel_mask", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  if (mask.shape() != Shape{c}) {
    throw DimensionError("channel_mask: mask shape " + to_string(mask.shape()) +
                         " does not match input axis 1 (" + std::to_string(c) + ")");
  }
  Tensor<T> out = x.value();
  out.grad.clear();
  const Tensor<T>& m = mask.value();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      T* p = &out[(b * c + ch) * plane];
      for (std::size_t i = 0; i < plane; ++i) p[i] *= m[ch];
    }
  }
  const std::size_t ix = x.id(), im = mask.id();
  return x.tape().record(std::move(out), {x, mask}, [=](Tape<T>& tape, std::span<const T> g) {
    const Tensor<T>& mv = tape.value(im);
    const Tensor<T>& xv = tape.value(ix);
    std::vector<T>* gx = tape.grad_buffer(ix);
    std::vector<T>* gm = tape.grad_buffer(im);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t off = (b * c + ch) * plane;
        if (gx) {
          for (std::size_t i = 0; i < plane; ++i) (*gx)[off + i] += g[off + i] * mv[ch];
        }
        if (gm) {
          T total{0};
          for (std::size_t i = 0; i < plane; ++i) total += g[off + i] * xv[off + i];
          (*gm)[ch] += total;
        }
      }
    }
  });
}

template <typename T>
Var<T> zero_pad_scatter(const Var<T>& x, std::span<const int> kept, std::size_t channels) {
  require_rank(x.shape(), 4, "zero_pad_scatter", "input");
  const std::size_t n = x.shape()[0], cp = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  if (kept.size() != cp) {
    throw DimensionError("zero_pad_scatter: " + std::to_string(kept.size()) +
                         " kept indices but input axis 1 has " + std::to_string(cp) + " channels");
  }
  check_kept(kept, channels, "zero_pad_scatter");
  Tensor<T> out({n, channels, x.shape()[2], x.shape()[3]});
  const Tensor<T>& in = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < cp; ++i) {
      std::copy_n(&in[(b * cp + i) * plane], plane,
                  &out[(b * channels + static_cast<std::size_t>(kept[i])) * plane]);
    }
  }
  const std::size_t ix = x.id();
  std::vector<int> idx(kept.begin(), kept.end());
  return x.tape().record(std::move(out), {x}, [=, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < cp; ++i) {
        const T* src = &g[(b * channels + static_cast<std::size_t>(idx[i])) * plane];
        T* dst = &gx[(b * cp + i) * plane];
        for (std::size_t j = 0; j < plane; ++j) dst[j] += src[j];
      }
    }
  });
}

template <typename T>
Var<T> channel_gather(const Var<T>& x, std::span<const int> kept) {
  require_rank(x.shape(), 4, "channel_gather", "input");
  const std::size_t n = x.shape()[0], c = x.shape()[1], plane = x.shape()[2] * x.shape()[3];
  check_kept(kept, c, "channel_gather");
  const std::size_t cp = kept.size();
  Tensor<T> out({n, cp, x.shape()[2], x.shape()[3]});
  const Tensor<T>& in = x.value();
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t i = 0; i < cp; ++i) {
      std::copy_n(&in[(b * c + static_cast<std::size_t>(kept[i])) * plane], plane,
                  &out[(b * cp + i) * plane]);
    }
  }
  const std::size_t ix = x.id();
  std::vector<int> idx(kept.begin(), kept.end());
  return x.tape().record(std::move(out), {x}, [=, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
    std::vector<T>& gx = *tape.grad_buffer(ix);
    for (std::size_t b = 0; b < n; ++b) {
      for (std::size_t i = 0; i < cp; ++i) {
        const T* src = &g[(b * cp + i) * plane];
        T* dst = &gx[(b * c + static_cast<std::size_t>(idx[i])) * plane];
        for (std::size_t j = 0; j < plane; ++j) dst[j] += src[j];
      }
    }
  });
}

#define KDFS_INSTANTIATE_OPS(T)                                                                  \
  template Var<T> add(const Var<T>&, const Var<T>&);                                             \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                             \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                             \
  template Var<T> scale(const Var<T>&, T);                                                       \
  template Var<T> add_scalar(const Var<T>&, T);                                                  \
  template Var<T> relu(const Var<T>&);                                                           \
  template Var<T> abs(const Var<T>&);                                                            \
  template Var<T> sum(const Var<T>&);                                                            \
  template Var<T> mean(const Var<T>&);                                                           \
  template Var<T> frobenius_norm(const Var<T>&);                                                 \
  template Var<T> reshape(const Var<T>&, Shape);                                                 \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                          \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                           \
  template Var<T> softmax(const Var<T>&);                                                        \
  template Var<T> log_softmax(const Var<T>&);                                                    \
  template Var<T> conv2d(const Var<T>&, const Var<T>&, int, int);                                \
  template Var<T> bias_add(const Var<T>&, const Var<T>&);                                        \
  template Var<T> max_pool2d(const Var<T>&, int, int);                                           \
  template Var<T> global_avg_pool(const Var<T>&);                                                \
  template Var<T> batch_norm(const Var<T>&, const Var<T>&, const Var<T>&, const RunningStats<T>&, \
                             bool, T);                                                           \
  template Var<T> channel_mask(const Var<T>&, const Var<T>&);                                    \
  template Var<T> zero_pad_scatter(const Var<T>&, std::span<const int>, std::size_t);            \
  template Var<T> channel_gather(const Var<T>&, std::span<const int>);

KDFS_INSTANTIATE_OPS(float)
KDFS_INSTANTIATE_OPS(double)

#undef KDFS_INSTANTIATE_OPS

}  // namespace kdfs
