#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "tbdetect/rng.hpp"
#include "tbdetect/tape.hpp"

namespace tb {

enum class Mode { Train, Infer };
enum class Padding { Same, Valid };

namespace detail {

// C[M,N] (+)= A[M,K] * B[K,N]; row-major. Four C rows advance together so
// each streamed B row is reused; j stays innermost for vectorization.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + M * N, T(0));
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    T* c0 = c + i * N;
    T* c1 = c0 + N;
    T* c2 = c1 + N;
    T* c3 = c2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const T a0 = a[i * K + k];
      const T a1 = a[(i + 1) * K + k];
      const T a2 = a[(i + 2) * K + k];
      const T a3 = a[(i + 3) * K + k];
      const T* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < M; ++i) {
    const T* arow = a + i * K;
    T* crow = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = arow[k];
      const T* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] (+)= A[M,K] * B^T, with B stored [N,K]; contiguous dot products,
// four rows of A share each streamed B row.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N,
             bool accumulate) {
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    const T* a0 = a + i * K;
    const T* a1 = a0 + K;
    const T* a2 = a1 + K;
    const T* a3 = a2 + K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* brow = b + j * K;
      T s0 = 0, s1 = 0, s2 = 0, s3 = 0;
      for (std::size_t k = 0; k < K; ++k) {
        const T bv = brow[k];
        s0 += a0[k] * bv;
        s1 += a1[k] * bv;
        s2 += a2[k] * bv;
        s3 += a3[k] * bv;
      }
      T* cc = c + i * N + j;
      if (accumulate) {
        cc[0] += s0;
        cc[N] += s1;
        cc[2 * N] += s2;
        cc[3 * N] += s3;
      } else {
        cc[0] = s0;
        cc[N] = s1;
        cc[2 * N] = s2;
        cc[3 * N] = s3;
      }
    }
  }
  for (; i < M; ++i) {
    const T* arow = a + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const T* brow = b + j * K;
      T acc = accumulate ? c[i * N + j] : T(0);
      for (std::size_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
      c[i * N + j] = acc;
    }
  }
}

// C[M,N] (+)= A^T * B, with A stored [K,M] and B stored [K,N]. The i-outer
// order keeps the active C row in L1 and lets B sit in cache across rows.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + M * N, T(0));
  std::size_t i = 0;
  for (; i + 4 <= M; i += 4) {
    T* c0 = c + i * N;
    T* c1 = c0 + N;
    T* c2 = c1 + N;
    T* c3 = c2 + N;
    for (std::size_t k = 0; k < K; ++k) {
      const T* acol = a + k * M + i;
      const T a0 = acol[0], a1 = acol[1], a2 = acol[2], a3 = acol[3];
      const T* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) {
        const T bv = brow[j];
        c0[j] += a0 * bv;
        c1[j] += a1 * bv;
        c2[j] += a2 * bv;
        c3[j] += a3 * bv;
      }
    }
  }
  for (; i < M; ++i) {
    T* crow = c + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k * M + i];
      const T* brow = b + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
void im2col(const T* x, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
            std::size_t stride, std::ptrdiff_t pad, std::size_t OH, std::size_t OW, T* col) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        T* dst = col + ((c * k + ki) * k + kj) * (OH * OW);
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride) - pad + static_cast<std::ptrdiff_t>(ki);
          T* drow = dst + oy * OW;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) {
            std::fill(drow, drow + OW, T(0));
            continue;
          }
          const T* srow = x + (c * H + static_cast<std::size_t>(iy)) * W;
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride) - pad + static_cast<std::ptrdiff_t>(kj);
            drow[ox] = (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W))
                           ? srow[static_cast<std::size_t>(ix)]
                           : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const T* col, std::size_t C, std::size_t H, std::size_t W, std::size_t k,
                std::size_t stride, std::ptrdiff_t pad, std::size_t OH, std::size_t OW, T* x) {
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t ki = 0; ki < k; ++ki) {
      for (std::size_t kj = 0; kj < k; ++kj) {
        const T* src = col + ((c * k + ki) * k + kj) * (OH * OW);
        for (std::size_t oy = 0; oy < OH; ++oy) {
          const std::ptrdiff_t iy =
              static_cast<std::ptrdiff_t>(oy * stride) - pad + static_cast<std::ptrdiff_t>(ki);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(H)) continue;
          T* xrow = x + (c * H + static_cast<std::size_t>(iy)) * W;
          const T* srow = src + oy * OW;
          for (std::size_t ox = 0; ox < OW; ++ox) {
            const std::ptrdiff_t ix =
                static_cast<std::ptrdiff_t>(ox * stride) - pad + static_cast<std::ptrdiff_t>(kj);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(W)) {
              xrow[static_cast<std::size_t>(ix)] += srow[ox];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void require_same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractViolation("operands recorded on different tapes");
}

inline std::size_t axis_outer(const Shape& s, std::size_t axis) {
  std::size_t o = 1;
  for (std::size_t i = 0; i < axis; ++i) o *= s[i];
  return o;
}

inline std::size_t axis_inner(const Shape& s, std::size_t axis) {
  std::size_t o = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) o *= s[i];
  return o;
}

}  // namespace detail

namespace ops {

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ContractViolation("add shape mismatch: " + shape_str(av.shape()) + " vs " +
                            shape_str(bv.shape()));
  }
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.record(std::move(y), ng, [a, b](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    tp.add_grad(a, dy);
    tp.add_grad(b, dy);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ContractViolation("sub shape mismatch: " + shape_str(av.shape()) + " vs " +
                            shape_str(bv.shape()));
  }
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] - bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.record(std::move(y), ng, [a, b](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    tp.add_grad(a, dy);
    Tensor<T> db(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) db[i] = -dy[i];
    tp.add_grad(b, db);
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (!av.same_shape(bv)) {
    throw ContractViolation("mul shape mismatch: " + shape_str(av.shape()) + " vs " +
                            shape_str(bv.shape()));
  }
  Tensor<T> y(av.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = av[i] * bv[i];
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.record(std::move(y), ng, [a, b](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    const Tensor<T>& av2 = tp.value(a);
    const Tensor<T>& bv2 = tp.value(b);
    Tensor<T> da(dy.shape()), db(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      da[i] = dy[i] * bv2[i];
      db[i] = dy[i] * av2[i];
    }
    tp.add_grad(a, da);
    tp.add_grad(b, db);
  });
}

template <typename T>
Var<T> scale(Var<T> x, T c) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = c * xv[i];
  return t.record(std::move(y), t.needs_grad(x), [x, c](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = c * dy[i];
    tp.add_grad(x, dx);
  });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <typename T>
Var<T> relu(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > T(0) ? xv[i] : T(0);
  return t.record(std::move(y), t.needs_grad(x), [x](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    const Tensor<T>& xv2 = tp.value(x);
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = xv2[i] > T(0) ? dy[i] : T(0);
    tp.add_grad(x, dx);
  });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = T(1) / (T(1) + std::exp(-xv[i]));
  return t.record(std::move(y), t.needs_grad(x), [x](Tape<T>& tp, std::uint32_t self) {
    const Var<T> out{&tp, self};
    const Tensor<T>& dy = tp.grad(out);
    const Tensor<T>& yv = tp.value(out);
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * yv[i] * (T(1) - yv[i]);
    tp.add_grad(x, dx);
  });
}

// Exact Gaussian form: 0.5 x (1 + erf(x / sqrt(2))).
template <typename T>
Var<T> gelu(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const T inv_sqrt2 = T(0.70710678118654752440);
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < y.size(); ++i) {
    y[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * inv_sqrt2));
  }
  return t.record(std::move(y), t.needs_grad(x), [x, inv_sqrt2](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    const Tensor<T>& xv2 = tp.value(x);
    const T inv_sqrt2pi = T(0.39894228040143267794);
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const T v = xv2[i];
      const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
      dx[i] = dy[i] * (cdf + v * pdf);
    }
    tp.add_grad(x, dx);
  });
}

template <typename T>
Var<T> softmax(Var<T> x, std::size_t axis) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (axis >= xv.rank()) {
    throw ContractViolation("softmax axis " + std::to_string(axis) +
                            " out of range for shape " + shape_str(xv.shape()));
  }
  const std::size_t outer = detail::axis_outer(xv.shape(), axis);
  const std::size_t n = xv.shape()[axis];
  const std::size_t inner = detail::axis_inner(xv.shape(), axis);
  Tensor<T> y(xv.shape());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t r = 0; r < inner; ++r) {
      const std::size_t base = o * n * inner + r;
      T mx = xv[base];
      for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
      T sum = 0;
      for (std::size_t i = 0; i < n; ++i) {
        const T e = std::exp(xv[base + i * inner] - mx);
        y[base + i * inner] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t i = 0; i < n; ++i) y[base + i * inner] *= inv;
    }
  }
  return t.record(std::move(y), t.needs_grad(x),
                  [x, outer, n, inner](Tape<T>& tp, std::uint32_t self) {
                    const Var<T> out{&tp, self};
                    const Tensor<T>& dy = tp.grad(out);
                    const Tensor<T>& yv = tp.value(out);
                    Tensor<T> dx(dy.shape());
                    for (std::size_t o = 0; o < outer; ++o) {
                      for (std::size_t r = 0; r < inner; ++r) {
                        const std::size_t base = o * n * inner + r;
                        T dot = 0;
                        for (std::size_t i = 0; i < n; ++i) {
                          dot += dy[base + i * inner] * yv[base + i * inner];
                        }
                        for (std::size_t i = 0; i < n; ++i) {
                          const std::size_t idx = base + i * inner;
                          dx[idx] = yv[idx] * (dy[idx] - dot);
                        }
                      }
                    }
                    tp.add_grad(x, dx);
                  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Var<T> sum_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  T acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  return t.record(Tensor<T>::scalar(acc), t.needs_grad(x),
                  [x](Tape<T>& tp, std::uint32_t self) {
                    const T g = tp.grad(Var<T>{&tp, self})[0];
                    tp.add_grad(x, Tensor<T>::full(tp.value(x).shape(), g));
                  });
}

template <typename T>
Var<T> mean_all(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  T acc = 0;
  for (std::size_t i = 0; i < xv.size(); ++i) acc += xv[i];
  const T inv = T(1) / static_cast<T>(xv.size());
  return t.record(Tensor<T>::scalar(acc * inv), t.needs_grad(x),
                  [x, inv](Tape<T>& tp, std::uint32_t self) {
                    const T g = tp.grad(Var<T>{&tp, self})[0] * inv;
                    tp.add_grad(x, Tensor<T>::full(tp.value(x).shape(), g));
                  });
}

// [N,T,D] -> [N,D], mean over the token axis.
template <typename T>
Var<T> mean_tokens(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (xv.rank() != 3) {
    throw ContractViolation("mean_tokens expects rank-3 input, got " + shape_str(xv.shape()));
  }
  const std::size_t N = xv.dim(0), Tk = xv.dim(1), D = xv.dim(2);
  Tensor<T> y({N, D});
  const T inv = T(1) / static_cast<T>(Tk);
  for (std::size_t nn = 0; nn < N; ++nn) {
    for (std::size_t k = 0; k < Tk; ++k) {
      const T* row = xv.raw() + (nn * Tk + k) * D;
      T* dst = y.raw() + nn * D;
      for (std::size_t d = 0; d < D; ++d) dst[d] += row[d];
    }
  }
  for (std::size_t i = 0; i < y.size(); ++i) y[i] *= inv;
  return t.record(std::move(y), t.needs_grad(x),
                  [x, N, Tk, D, inv](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    Tensor<T> dx({N, Tk, D});
                    for (std::size_t nn = 0; nn < N; ++nn) {
                      for (std::size_t k = 0; k < Tk; ++k) {
                        T* row = dx.raw() + (nn * Tk + k) * D;
                        const T* src = dy.raw() + nn * D;
                        for (std::size_t d = 0; d < D; ++d) row[d] = src[d] * inv;
                      }
                    }
                    tp.add_grad(x, dx);
                  });
}

// ---------------------------------------------------------------------------
// Shape movement
// ---------------------------------------------------------------------------

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (shape_numel(shape) != xv.size()) {
    throw ContractViolation("reshape to " + shape_str(shape) + " changes element count of " +
                            shape_str(xv.shape()));
  }
  Tensor<T> y(shape, std::vector<T>(xv.data().begin(), xv.data().end()));
  return t.record(std::move(y), t.needs_grad(x), [x](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    Tensor<T> dx(tp.value(x).shape(), std::vector<T>(dy.data().begin(), dy.data().end()));
    tp.add_grad(x, dx);
  });
}

template <typename T>
Var<T> permute(Var<T> x, std::vector<std::size_t> axes) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const std::size_t r = xv.rank();
  if (axes.size() != r) {
    throw ContractViolation("permute axes rank " + std::to_string(axes.size()) +
                            " does not match tensor rank " + std::to_string(r));
  }
  std::vector<bool> seen(r, false);
  for (std::size_t a : axes) {
    if (a >= r || seen[a]) throw ContractViolation("permute axes are not a permutation");
    seen[a] = true;
  }
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) out_shape[i] = xv.dim(axes[i]);

  auto strides_of = [](const Shape& s) {
    std::vector<std::size_t> st(s.size(), 1);
    for (std::size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
    return st;
  };
  const auto in_strides = strides_of(xv.shape());
  Tensor<T> y(out_shape);
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t flat = 0; flat < y.size(); ++flat) {
    std::size_t src = 0;
    for (std::size_t i = 0; i < r; ++i) src += idx[i] * in_strides[axes[i]];
    y[flat] = xv[src];
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < out_shape[i]) break;
      idx[i] = 0;
    }
  }
  std::vector<std::size_t> inverse(r);
  for (std::size_t i = 0; i < r; ++i) inverse[axes[i]] = i;
  return t.record(std::move(y), t.needs_grad(x),
                  [x, axes, inverse](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    const Tensor<T>& xv2 = tp.value(x);
                    const std::size_t r2 = xv2.rank();
                    auto strides_of2 = [](const Shape& s) {
                      std::vector<std::size_t> st(s.size(), 1);
                      for (std::size_t i = s.size() - 1; i-- > 0;) st[i] = st[i + 1] * s[i + 1];
                      return st;
                    };
                    const auto dy_strides = strides_of2(dy.shape());
                    Tensor<T> dx(xv2.shape());
                    std::vector<std::size_t> idx2(r2, 0);
                    for (std::size_t flat = 0; flat < dx.size(); ++flat) {
                      std::size_t src = 0;
                      for (std::size_t i = 0; i < r2; ++i) src += idx2[i] * dy_strides[inverse[i]];
                      dx[flat] = dy[src];
                      for (std::size_t i = r2; i-- > 0;) {
                        if (++idx2[i] < xv2.shape()[i]) break;
                        idx2[i] = 0;
                      }
                    }
                    tp.add_grad(x, dx);
                  });
}

// Concatenate two activation maps along the channel axis.
template <typename T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  detail::require_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (av.rank() != 4 || bv.rank() != 4) {
    throw ContractViolation("concat_channels expects rank-4 inputs");
  }
  for (std::size_t i : {std::size_t(0), std::size_t(2), std::size_t(3)}) {
    if (av.dim(i) != bv.dim(i)) {
      throw ContractViolation("concat_channels mismatch on axis " + std::to_string(i) + ": " +
                              shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    }
  }
  const std::size_t N = av.dim(0), Ca = av.dim(1), Cb = bv.dim(1), H = av.dim(2), W = av.dim(3);
  Tensor<T> y({N, Ca + Cb, H, W});
  const std::size_t plane = H * W;
  for (std::size_t n = 0; n < N; ++n) {
    std::copy_n(av.raw() + n * Ca * plane, Ca * plane, y.raw() + n * (Ca + Cb) * plane);
    std::copy_n(bv.raw() + n * Cb * plane, Cb * plane, y.raw() + (n * (Ca + Cb) + Ca) * plane);
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.record(std::move(y), ng, [a, b, N, Ca, Cb, plane](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    Tensor<T> da(tp.value(a).shape()), db(tp.value(b).shape());
    for (std::size_t n = 0; n < N; ++n) {
      std::copy_n(dy.raw() + n * (Ca + Cb) * plane, Ca * plane, da.raw() + n * Ca * plane);
      std::copy_n(dy.raw() + (n * (Ca + Cb) + Ca) * plane, Cb * plane, db.raw() + n * Cb * plane);
    }
    tp.add_grad(a, da);
    tp.add_grad(b, db);
  });
}

// tokens [N,T,D] + table [T,D], broadcast over the batch axis.
template <typename T>
Var<T> add_rows(Var<T> tokens, Var<T> table) {
  detail::require_same_tape(tokens, table);
  Tape<T>& t = *tokens.tape;
  const Tensor<T>& xv = t.value(tokens);
  const Tensor<T>& pv = t.value(table);
  if (xv.rank() != 3 || pv.rank() != 2 || xv.dim(1) != pv.dim(0) || xv.dim(2) != pv.dim(1)) {
    throw ContractViolation("add_rows shape mismatch: " + shape_str(xv.shape()) + " vs " +
                            shape_str(pv.shape()));
  }
  const std::size_t N = xv.dim(0), rows = pv.dim(0) * pv.dim(1);
  Tensor<T> y(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* src = xv.raw() + n * rows;
    T* dst = y.raw() + n * rows;
    for (std::size_t i = 0; i < rows; ++i) dst[i] = src[i] + pv[i];
  }
  const bool ng = t.needs_grad(tokens) || t.needs_grad(table);
  return t.record(std::move(y), ng, [tokens, table, N, rows](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    tp.add_grad(tokens, dy);
    Tensor<T> dp(tp.value(table).shape());
    for (std::size_t n = 0; n < N; ++n) {
      const T* src = dy.raw() + n * rows;
      for (std::size_t i = 0; i < rows; ++i) dp[i] += src[i];
    }
    tp.add_grad(table, dp);
  });
}

// x [N,C,H,W] * a [N,1,H,W], the attention-gate broadcast.
template <typename T>
Var<T> mul_channel_broadcast(Var<T> x, Var<T> a) {
  detail::require_same_tape(x, a);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& av = t.value(a);
  if (xv.rank() != 4 || av.rank() != 4 || av.dim(1) != 1 || xv.dim(0) != av.dim(0) ||
      xv.dim(2) != av.dim(2) || xv.dim(3) != av.dim(3)) {
    throw ContractViolation("mul_channel_broadcast shape mismatch: " + shape_str(xv.shape()) +
                            " vs " + shape_str(av.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  Tensor<T> y(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    const T* aplane = av.raw() + n * plane;
    for (std::size_t c = 0; c < C; ++c) {
      const T* src = xv.raw() + (n * C + c) * plane;
      T* dst = y.raw() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] = src[i] * aplane[i];
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(a);
  return t.record(std::move(y), ng, [x, a, N, C, plane](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    const Tensor<T>& xv2 = tp.value(x);
    const Tensor<T>& av2 = tp.value(a);
    Tensor<T> dx(xv2.shape()), da(av2.shape());
    for (std::size_t n = 0; n < N; ++n) {
      const T* aplane = av2.raw() + n * plane;
      T* daplane = da.raw() + n * plane;
      for (std::size_t c = 0; c < C; ++c) {
        const std::size_t off = (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          dx[off + i] = dy[off + i] * aplane[i];
          daplane[i] += dy[off + i] * xv2[off + i];
        }
      }
    }
    tp.add_grad(x, dx);
    tp.add_grad(a, da);
  });
}

// [N,C,S,S] -> [N,T,C*p*p]; tokens in row-major grid order, features laid out
// channel-major within each token.
template <typename T>
Var<T> extract_patches(Var<T> x, std::size_t p) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (xv.rank() != 4 || xv.dim(2) != xv.dim(3)) {
    throw ContractViolation("extract_patches expects square [N,C,S,S] input, got " +
                            shape_str(xv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), S = xv.dim(2);
  if (p == 0 || S % p != 0) {
    throw ContractViolation("patch side " + std::to_string(p) + " must divide image side " +
                            std::to_string(S));
  }
  const std::size_t g = S / p;
  const std::size_t tokens = g * g;
  const std::size_t feat = C * p * p;
  Tensor<T> y({N, tokens, feat});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t gy = 0; gy < g; ++gy) {
      for (std::size_t gx = 0; gx < g; ++gx) {
        T* dst = y.raw() + (n * tokens + gy * g + gx) * feat;
        for (std::size_t c = 0; c < C; ++c) {
          for (std::size_t py = 0; py < p; ++py) {
            const T* src = xv.raw() + ((n * C + c) * S + gy * p + py) * S + gx * p;
            std::copy_n(src, p, dst + (c * p + py) * p);
          }
        }
      }
    }
  }
  return t.record(std::move(y), t.needs_grad(x),
                  [x, N, C, S, p, g, tokens, feat](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    Tensor<T> dx({N, C, S, S});
                    for (std::size_t n = 0; n < N; ++n) {
                      for (std::size_t gy = 0; gy < g; ++gy) {
                        for (std::size_t gx = 0; gx < g; ++gx) {
                          const T* src = dy.raw() + (n * tokens + gy * g + gx) * feat;
                          for (std::size_t c = 0; c < C; ++c) {
                            for (std::size_t py = 0; py < p; ++py) {
                              T* dst = dx.raw() + ((n * C + c) * S + gy * p + py) * S + gx * p;
                              const T* s = src + (c * p + py) * p;
                              for (std::size_t px = 0; px < p; ++px) dst[px] += s[px];
                            }
                          }
                        }
                      }
                    }
                    tp.add_grad(x, dx);
                  });
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// y = x * w + b with x [N,D], w [D,E], b [E].
template <typename T>
Var<T> dense(Var<T> x, Var<T> w, Var<T> b) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  const Tensor<T>& bv = t.value(b);
  if (xv.rank() != 2 || wv.rank() != 2 || bv.rank() != 1) {
    throw ContractViolation("dense expects x[N,D], w[D,E], b[E]");
  }
  if (xv.dim(1) != wv.dim(0)) {
    throw ContractViolation("dense inner dimension mismatch: x has D=" +
                            std::to_string(xv.dim(1)) + ", w has D=" + std::to_string(wv.dim(0)));
  }
  if (bv.dim(0) != wv.dim(1)) {
    throw ContractViolation("dense bias length " + std::to_string(bv.dim(0)) +
                            " does not match E=" + std::to_string(wv.dim(1)));
  }
  const std::size_t N = xv.dim(0), D = xv.dim(1), E = wv.dim(1);
  Tensor<T> y({N, E});
  detail::gemm_nn(xv.raw(), wv.raw(), y.raw(), N, D, E, false);
  for (std::size_t n = 0; n < N; ++n) {
    T* row = y.raw() + n * E;
    for (std::size_t e = 0; e < E; ++e) row[e] += bv[e];
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
  return t.record(std::move(y), ng, [x, w, b, N, D, E](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    const Tensor<T>& xv2 = tp.value(x);
    const Tensor<T>& wv2 = tp.value(w);
    if (tp.needs_grad(x)) {
      Tensor<T> dx({N, D});
      detail::gemm_nt(dy.raw(), wv2.raw(), dx.raw(), N, E, D, false);
      tp.add_grad(x, dx);
    }
    if (tp.needs_grad(w)) {
      Tensor<T> dw({D, E});
      detail::gemm_tn(xv2.raw(), dy.raw(), dw.raw(), D, N, E, false);
      tp.add_grad(w, dw);
    }
    if (tp.needs_grad(b)) {
      Tensor<T> db({E});
      for (std::size_t n = 0; n < N; ++n) {
        const T* row = dy.raw() + n * E;
        for (std::size_t e = 0; e < E; ++e) db[e] += row[e];
      }
      tp.add_grad(b, db);
    }
  });
}

// Batched matmul over [B,M,K] x [B,K,N] (or [B,N,K] when transpose_b).
template <typename T>
Var<T> bmm(Var<T> a, Var<T> b, bool transpose_b = false) {
  detail::require_same_tape(a, b);
  Tape<T>& t = *a.tape;
  const Tensor<T>& av = t.value(a);
  const Tensor<T>& bv = t.value(b);
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ContractViolation("bmm expects rank-3 operands with equal batch: " +
                            shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
  }
  const std::size_t B = av.dim(0), M = av.dim(1), K = av.dim(2);
  const std::size_t N = transpose_b ? bv.dim(1) : bv.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  if (bk != K) {
    throw ContractViolation("bmm inner dimension mismatch: K=" + std::to_string(K) + " vs " +
                            std::to_string(bk));
  }
  Tensor<T> y({B, M, N});
  for (std::size_t i = 0; i < B; ++i) {
    const T* ap = av.raw() + i * M * K;
    const T* bp = bv.raw() + i * (transpose_b ? N * K : K * N);
    T* cp = y.raw() + i * M * N;
    if (transpose_b) {
      detail::gemm_nt(ap, bp, cp, M, K, N, false);
    } else {
      detail::gemm_nn(ap, bp, cp, M, K, N, false);
    }
  }
  const bool ng = t.needs_grad(a) || t.needs_grad(b);
  return t.record(std::move(y), ng,
                  [a, b, transpose_b, B, M, K, N](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    const Tensor<T>& av2 = tp.value(a);
                    const Tensor<T>& bv2 = tp.value(b);
                    if (tp.needs_grad(a)) {
                      Tensor<T> da(av2.shape());
                      for (std::size_t i = 0; i < B; ++i) {
                        const T* dyp = dy.raw() + i * M * N;
                        const T* bp = bv2.raw() + i * (transpose_b ? N * K : K * N);
                        T* dap = da.raw() + i * M * K;
                        if (transpose_b) {
                          // y = a b^T  =>  da = dy b
                          detail::gemm_nn(dyp, bp, dap, M, N, K, false);
                        } else {
                          // y = a b    =>  da = dy b^T
                          detail::gemm_nt(dyp, bp, dap, M, N, K, false);
                        }
                      }
                      tp.add_grad(a, da);
                    }
                    if (tp.needs_grad(b)) {
                      Tensor<T> db(bv2.shape());
                      for (std::size_t i = 0; i < B; ++i) {
                        const T* dyp = dy.raw() + i * M * N;
                        const T* ap = av2.raw() + i * M * K;
                        T* dbp = db.raw() + i * (transpose_b ? N * K : K * N);
                        if (transpose_b) {
                          // db = dy^T a
                          detail::gemm_tn(dyp, ap, dbp, N, M, K, false);
                        } else {
                          // db = a^T dy
                          detail::gemm_tn(ap, dyp, dbp, K, M, N, false);
                        }
                      }
                      tp.add_grad(b, db);
                    }
                  });
}

}  // namespace ops
}  // namespace tb

#include "tbdetect/ops_nn.hpp"
