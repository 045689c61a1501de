#pragma once

// Convolutional / normalization / regularization primitives and the two
// training losses. Included at the end of ops.hpp; do not include directly.

#include <memory>

namespace tb {
namespace ops {

// y [N,F,H',W'] = conv(x [N,C,H,W], w [F,C,k,k]) + b [F].
// Same padding requires odd k and preserves H,W at stride 1.
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, std::size_t stride, Padding padding) {
  detail::require_same_tape(x, w);
  detail::require_same_tape(x, b);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  const Tensor<T>& bv = t.value(b);
  if (xv.rank() != 4) {
    throw ContractViolation("conv2d input must be [N,C,H,W], got " + shape_str(xv.shape()));
  }
  if (wv.rank() != 4 || wv.dim(2) != wv.dim(3)) {
    throw ContractViolation("conv2d weight must be [F,C,k,k], got " + shape_str(wv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t F = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != C) {
    throw ContractViolation("conv2d channel mismatch: input C=" + std::to_string(C) +
                            ", weight C=" + std::to_string(wv.dim(1)));
  }
  if (bv.rank() != 1 || bv.dim(0) != F) {
    throw ContractViolation("conv2d bias must be [F=" + std::to_string(F) + "], got " +
                            shape_str(bv.shape()));
  }
  if (stride < 1) throw ContractViolation("conv2d stride must be >= 1");
  if (padding == Padding::Same && k % 2 == 0) {
    throw ContractViolation("conv2d same padding requires odd kernel, got k=" +
                            std::to_string(k));
  }
  const std::ptrdiff_t pad = padding == Padding::Same ? static_cast<std::ptrdiff_t>(k / 2) : 0;
  if (padding == Padding::Valid && (H < k || W < k)) {
    throw ContractViolation("conv2d valid padding needs H,W >= k; got H=" + std::to_string(H) +
                            " W=" + std::to_string(W) + " k=" + std::to_string(k));
  }
  const std::size_t OH = (H + 2 * pad - k) / stride + 1;
  const std::size_t OW = (W + 2 * pad - k) / stride + 1;
  const std::size_t K = C * k * k, P = OH * OW;

  Tensor<T> y({N, F, OH, OW});
  std::vector<T> col(K * P);
  for (std::size_t n = 0; n < N; ++n) {
    detail::im2col(xv.raw() + n * C * H * W, C, H, W, k, stride, pad, OH, OW, col.data());
    T* out = y.raw() + n * F * P;
    detail::gemm_nn(wv.raw(), col.data(), out, F, K, P, false);
    for (std::size_t f = 0; f < F; ++f) {
      T* row = out + f * P;
      const T bias = bv[f];
      for (std::size_t i = 0; i < P; ++i) row[i] += bias;
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(w) || t.needs_grad(b);
  return t.record(
      std::move(y), ng,
      [x, w, b, N, C, H, W, F, k, stride, pad, OH, OW, K, P](Tape<T>& tp, std::uint32_t self) {
        const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
        const Tensor<T>& xv2 = tp.value(x);
        const Tensor<T>& wv2 = tp.value(w);
        const bool need_x = tp.needs_grad(x);
        const bool need_w = tp.needs_grad(w);
        const bool need_b = tp.needs_grad(b);
        Tensor<T> dx(need_x ? xv2.shape() : Shape{1});
        Tensor<T> dw(need_w ? wv2.shape() : Shape{1});
        Tensor<T> db(need_b ? Shape{F} : Shape{1});
        if (need_x) std::fill(dx.raw(), dx.raw() + dx.size(), T(0));
        std::vector<T> col(K * P), dcol(K * P);
        for (std::size_t n = 0; n < N; ++n) {
          const T* dyp = dy.raw() + n * F * P;
          if (need_w) {
            // the forward column buffer is recomputed rather than saved
            detail::im2col(xv2.raw() + n * C * H * W, C, H, W, k, stride, pad, OH, OW,
                           col.data());
            detail::gemm_nt(dyp, col.data(), dw.raw(), F, P, K, true);
          }
          if (need_x) {
            detail::gemm_tn(wv2.raw(), dyp, dcol.data(), K, F, P, false);
            detail::col2im_add(dcol.data(), C, H, W, k, stride, pad, OH, OW,
                               dx.raw() + n * C * H * W);
          }
          if (need_b) {
            for (std::size_t f = 0; f < F; ++f) {
              const T* row = dyp + f * P;
              T acc = 0;
              for (std::size_t i = 0; i < P; ++i) acc += row[i];
              db[f] += acc;
            }
          }
        }
        if (need_x) tp.add_grad(x, dx);
        if (need_w) tp.add_grad(w, dw);
        if (need_b) tp.add_grad(b, db);
      });
}

// Stride-2 transposed convolution with a 2x2 kernel: exactly doubles H and W.
// Weight layout [C_in, F, 2, 2]; output cells receive one kernel tap each.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, std::size_t stride = 2) {
  detail::require_same_tape(x, w);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  const Tensor<T>& wv = t.value(w);
  if (xv.rank() != 4) {
    throw ContractViolation("conv_transpose2d input must be [N,C,H,W], got " +
                            shape_str(xv.shape()));
  }
  if (stride != 2 || wv.rank() != 4 || wv.dim(2) != 2 || wv.dim(3) != 2) {
    throw ContractViolation("conv_transpose2d supports stride 2 with a [C,F,2,2] weight, got " +
                            shape_str(wv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  const std::size_t F = wv.dim(1);
  if (wv.dim(0) != C) {
    throw ContractViolation("conv_transpose2d channel mismatch: input C=" + std::to_string(C) +
                            ", weight C=" + std::to_string(wv.dim(0)));
  }
  const std::size_t OH = 2 * H, OW = 2 * W;
  Tensor<T> y({N, F, OH, OW});
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t f = 0; f < F; ++f) {
      T* out = y.raw() + (n * F + f) * OH * OW;
      for (std::size_t c = 0; c < C; ++c) {
        const T* in = xv.raw() + (n * C + c) * H * W;
        const T* wp = wv.raw() + (c * F + f) * 4;
        for (std::size_t i = 0; i < H; ++i) {
          T* o0 = out + (2 * i) * OW;
          T* o1 = out + (2 * i + 1) * OW;
          const T* irow = in + i * W;
          for (std::size_t j = 0; j < W; ++j) {
            const T v = irow[j];
            o0[2 * j] += v * wp[0];
            o0[2 * j + 1] += v * wp[1];
            o1[2 * j] += v * wp[2];
            o1[2 * j + 1] += v * wp[3];
          }
        }
      }
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(w);
  return t.record(std::move(y), ng,
                  [x, w, N, C, H, W, F, OH, OW](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    const Tensor<T>& xv2 = tp.value(x);
                    const Tensor<T>& wv2 = tp.value(w);
                    const bool need_x = tp.needs_grad(x);
                    const bool need_w = tp.needs_grad(w);
                    Tensor<T> dx(need_x ? xv2.shape() : Shape{1});
                    Tensor<T> dw(need_w ? wv2.shape() : Shape{1});
                    if (need_w) std::fill(dw.raw(), dw.raw() + dw.size(), T(0));
                    for (std::size_t n = 0; n < N; ++n) {
                      for (std::size_t f = 0; f < F; ++f) {
                        const T* dout = dy.raw() + (n * F + f) * OH * OW;
                        for (std::size_t c = 0; c < C; ++c) {
                          const T* in = xv2.raw() + (n * C + c) * H * W;
                          const T* wp = wv2.raw() + (c * F + f) * 4;
                          T* dxp = need_x ? dx.raw() + (n * C + c) * H * W : nullptr;
                          T* dwp = need_w ? dw.raw() + (c * F + f) * 4 : nullptr;
                          for (std::size_t i = 0; i < H; ++i) {
                            const T* d0 = dout + (2 * i) * OW;
                            const T* d1 = dout + (2 * i + 1) * OW;
                            for (std::size_t j = 0; j < W; ++j) {
                              const T g0 = d0[2 * j], g1 = d0[2 * j + 1];
                              const T g2 = d1[2 * j], g3 = d1[2 * j + 1];
                              if (dxp) {
                                dxp[i * W + j] += g0 * wp[0] + g1 * wp[1] + g2 * wp[2] + g3 * wp[3];
                              }
                              if (dwp) {
                                const T v = in[i * W + j];
                                dwp[0] += v * g0;
                                dwp[1] += v * g1;
                                dwp[2] += v * g2;
                                dwp[3] += v * g3;
                              }
                            }
                          }
                        }
                      }
                    }
                    if (need_x) tp.add_grad(x, dx);
                    if (need_w) tp.add_grad(w, dw);
                  });
}

// 2x2 max pooling, stride 2. Gradient routes to the first (row-major) maximal
// element of each window.
template <typename T>
Var<T> maxpool2d(Var<T> x) {
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (xv.rank() != 4) {
    throw ContractViolation("maxpool2d input must be [N,C,H,W], got " + shape_str(xv.shape()));
  }
  const std::size_t N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ContractViolation("maxpool2d requires even H and W, got H=" + std::to_string(H) +
                            " W=" + std::to_string(W));
  }
  const std::size_t OH = H / 2, OW = W / 2;
  Tensor<T> y({N, C, OH, OW});
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(y.size());
  for (std::size_t nc = 0; nc < N * C; ++nc) {
    const T* in = xv.raw() + nc * H * W;
    T* out = y.raw() + nc * OH * OW;
    std::uint32_t* am = argmax->data() + nc * OH * OW;
    for (std::size_t i = 0; i < OH; ++i) {
      for (std::size_t j = 0; j < OW; ++j) {
        const std::size_t base = (2 * i) * W + 2 * j;
        // strict comparisons keep the first maximal element on ties
        std::size_t best = base;
        T bv = in[base];
        if (in[base + 1] > bv) { best = base + 1; bv = in[base + 1]; }
        if (in[base + W] > bv) { best = base + W; bv = in[base + W]; }
        if (in[base + W + 1] > bv) { best = base + W + 1; bv = in[base + W + 1]; }
        out[i * OW + j] = bv;
        am[i * OW + j] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return t.record(std::move(y), t.needs_grad(x),
                  [x, argmax, N, C, H, W, OH, OW](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    Tensor<T> dx({N, C, H, W});
                    for (std::size_t nc = 0; nc < N * C; ++nc) {
                      const T* dyp = dy.raw() + nc * OH * OW;
                      T* dxp = dx.raw() + nc * H * W;
                      const std::uint32_t* am = argmax->data() + nc * OH * OW;
                      for (std::size_t i = 0; i < OH * OW; ++i) dxp[am[i]] += dyp[i];
                    }
                    tp.add_grad(x, dx);
                  });
}

// Per-channel batch normalization over [N,C,H,W]. Train mode normalizes with
// batch statistics (biased variance) and, when running buffers are supplied,
// updates them as running = momentum * running + (1 - momentum) * batch.
// Infer mode normalizes with the running statistics.
template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, Tensor<T>* running_mean,
                   Tensor<T>* running_var, Mode mode, T momentum, T epsilon) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (xv.rank() != 4) {
    throw ContractViolation("batchnorm2d input must be [N,C,H,W], got " + shape_str(xv.shape()));
  }
  if (epsilon <= T(0)) throw ContractViolation("batchnorm2d epsilon must be positive");
  const std::size_t N = xv.dim(0), C = xv.dim(1), plane = xv.dim(2) * xv.dim(3);
  const Tensor<T>& gv = t.value(gamma);
  const Tensor<T>& bv = t.value(beta);
  if (gv.rank() != 1 || gv.dim(0) != C || bv.rank() != 1 || bv.dim(0) != C) {
    throw ContractViolation("batchnorm2d gamma/beta must be [C=" + std::to_string(C) + "]");
  }
  const std::size_t M = N * plane;

  auto mean = std::make_shared<std::vector<T>>(C, T(0));
  auto invstd = std::make_shared<std::vector<T>>(C, T(0));
  if (mode == Mode::Train) {
    for (std::size_t c = 0; c < C; ++c) {
      T acc = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.raw() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      const T mu = acc / static_cast<T>(M);
      T var = 0;
      for (std::size_t n = 0; n < N; ++n) {
        const T* p = xv.raw() + (n * C + c) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const T d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(M);
      (*mean)[c] = mu;
      (*invstd)[c] = T(1) / std::sqrt(var + epsilon);
      if (running_mean && running_var) {
        (*running_mean)[c] = momentum * (*running_mean)[c] + (T(1) - momentum) * mu;
        (*running_var)[c] = momentum * (*running_var)[c] + (T(1) - momentum) * var;
      }
    }
  } else {
    if (!running_mean || !running_var) {
      throw ContractViolation("batchnorm2d infer mode requires running statistics");
    }
    for (std::size_t c = 0; c < C; ++c) {
      (*mean)[c] = (*running_mean)[c];
      (*invstd)[c] = T(1) / std::sqrt((*running_var)[c] + epsilon);
    }
  }

  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  Tensor<T> y(xv.shape());
  for (std::size_t n = 0; n < N; ++n) {
    for (std::size_t c = 0; c < C; ++c) {
      const T mu = (*mean)[c], is = (*invstd)[c], g = gv[c], be = bv[c];
      const T* p = xv.raw() + (n * C + c) * plane;
      T* xh = xhat->raw() + (n * C + c) * plane;
      T* yp = y.raw() + (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        xh[i] = (p[i] - mu) * is;
        yp[i] = g * xh[i] + be;
      }
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  const bool train = mode == Mode::Train;
  return t.record(
      std::move(y), ng,
      [x, gamma, beta, xhat, invstd, N, C, plane, M, train](Tape<T>& tp, std::uint32_t self) {
        const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
        const Tensor<T>& gv2 = tp.value(gamma);
        Tensor<T> dg({C}), db({C});
        for (std::size_t n = 0; n < N; ++n) {
          for (std::size_t c = 0; c < C; ++c) {
            const T* dyp = dy.raw() + (n * C + c) * plane;
            const T* xh = xhat->raw() + (n * C + c) * plane;
            T accg = 0, accb = 0;
            for (std::size_t i = 0; i < plane; ++i) {
              accg += dyp[i] * xh[i];
              accb += dyp[i];
            }
            dg[c] += accg;
            db[c] += accb;
          }
        }
        if (tp.needs_grad(x)) {
          Tensor<T> dx(tp.value(x).shape());
          for (std::size_t c = 0; c < C; ++c) {
            const T g = gv2[c], is = (*invstd)[c];
            if (train) {
              const T sum_dxhat = db[c] * g;        // sum of dy*gamma
              const T sum_dxhat_xhat = dg[c] * g;   // sum of dy*gamma*xhat
              const T invM = T(1) / static_cast<T>(M);
              for (std::size_t n = 0; n < N; ++n) {
                const T* dyp = dy.raw() + (n * C + c) * plane;
                const T* xh = xhat->raw() + (n * C + c) * plane;
                T* dxp = dx.raw() + (n * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                  const T dxhat = dyp[i] * g;
                  dxp[i] = is * (dxhat - invM * (sum_dxhat + xh[i] * sum_dxhat_xhat));
                }
              }
            } else {
              for (std::size_t n = 0; n < N; ++n) {
                const T* dyp = dy.raw() + (n * C + c) * plane;
                T* dxp = dx.raw() + (n * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) dxp[i] = dyp[i] * g * is;
              }
            }
          }
          tp.add_grad(x, dx);
        }
        tp.add_grad(gamma, dg);
        tp.add_grad(beta, db);
      });
}

// Layer normalization over the last axis with [D] affine parameters.
template <typename T>
Var<T> layernorm(Var<T> x, Var<T> gamma, Var<T> beta, T epsilon = T(1e-5)) {
  detail::require_same_tape(x, gamma);
  detail::require_same_tape(x, beta);
  Tape<T>& t = *x.tape;
  const Tensor<T>& xv = t.value(x);
  if (xv.rank() < 1) throw ContractViolation("layernorm needs at least rank 1");
  const std::size_t D = xv.shape().back();
  const std::size_t rows = xv.size() / D;
  const Tensor<T>& gv = t.value(gamma);
  const Tensor<T>& bv = t.value(beta);
  if (gv.rank() != 1 || gv.dim(0) != D || bv.rank() != 1 || bv.dim(0) != D) {
    throw ContractViolation("layernorm gamma/beta must be [D=" + std::to_string(D) + "]");
  }
  auto xhat = std::make_shared<Tensor<T>>(xv.shape());
  auto invstd = std::make_shared<std::vector<T>>(rows);
  Tensor<T> y(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = xv.raw() + r * D;
    T mu = 0;
    for (std::size_t d = 0; d < D; ++d) mu += p[d];
    mu /= static_cast<T>(D);
    T var = 0;
    for (std::size_t d = 0; d < D; ++d) {
      const T dd = p[d] - mu;
      var += dd * dd;
    }
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + epsilon);
    (*invstd)[r] = is;
    T* xh = xhat->raw() + r * D;
    T* yp = y.raw() + r * D;
    for (std::size_t d = 0; d < D; ++d) {
      xh[d] = (p[d] - mu) * is;
      yp[d] = gv[d] * xh[d] + bv[d];
    }
  }
  const bool ng = t.needs_grad(x) || t.needs_grad(gamma) || t.needs_grad(beta);
  return t.record(std::move(y), ng,
                  [x, gamma, beta, xhat, invstd, rows, D](Tape<T>& tp, std::uint32_t self) {
                    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
                    const Tensor<T>& gv2 = tp.value(gamma);
                    Tensor<T> dg({D}), db({D});
                    for (std::size_t r = 0; r < rows; ++r) {
                      const T* dyp = dy.raw() + r * D;
                      const T* xh = xhat->raw() + r * D;
                      for (std::size_t d = 0; d < D; ++d) {
                        dg[d] += dyp[d] * xh[d];
                        db[d] += dyp[d];
                      }
                    }
                    if (tp.needs_grad(x)) {
                      Tensor<T> dx(tp.value(x).shape());
                      const T invD = T(1) / static_cast<T>(D);
                      for (std::size_t r = 0; r < rows; ++r) {
                        const T* dyp = dy.raw() + r * D;
                        const T* xh = xhat->raw() + r * D;
                        T* dxp = dx.raw() + r * D;
                        T s1 = 0, s2 = 0;
                        for (std::size_t d = 0; d < D; ++d) {
                          const T dxhat = dyp[d] * gv2[d];
                          s1 += dxhat;
                          s2 += dxhat * xh[d];
                        }
                        const T is = (*invstd)[r];
                        for (std::size_t d = 0; d < D; ++d) {
                          const T dxhat = dyp[d] * gv2[d];
                          dxp[d] = is * (dxhat - invD * (s1 + xh[d] * s2));
                        }
                      }
                      tp.add_grad(x, dx);
                    }
                    tp.add_grad(gamma, dg);
                    tp.add_grad(beta, db);
                  });
}

// Inverted dropout. Train mode zeroes each element with probability `rate`
// and scales survivors by 1/(1-rate); infer mode is the identity.
template <typename T>
Var<T> dropout(Var<T> x, double rate, Mode mode, SplitMix64* rng) {
  Tape<T>& t = *x.tape;
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractViolation("dropout rate must lie in [0,1), got " + std::to_string(rate));
  }
  const Tensor<T>& xv = t.value(x);
  if (mode == Mode::Infer || rate == 0.0) {
    Tensor<T> y(xv.shape(), std::vector<T>(xv.data().begin(), xv.data().end()));
    return t.record(std::move(y), t.needs_grad(x), [x](Tape<T>& tp, std::uint32_t self) {
      tp.add_grad(x, tp.grad(Var<T>{&tp, self}));
    });
  }
  if (!rng) throw ContractViolation("dropout train mode requires a generator");
  auto mask = std::make_shared<std::vector<T>>(xv.size());
  const T keep_scale = T(1.0 / (1.0 - rate));
  Tensor<T> y(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const bool keep = rng->next_double() >= rate;
    (*mask)[i] = keep ? keep_scale : T(0);
    y[i] = xv[i] * (*mask)[i];
  }
  return t.record(std::move(y), t.needs_grad(x), [x, mask](Tape<T>& tp, std::uint32_t self) {
    const Tensor<T>& dy = tp.grad(Var<T>{&tp, self});
    Tensor<T> dx(dy.shape());
    for (std::size_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] * (*mask)[i];
    tp.add_grad(x, dx);
  });
}

// Mean binary cross-entropy between probabilities and 0/1 targets. The
// probability is clamped to [1e-7, 1-1e-7] before the log; the clamp is also
// where the gradient is cut off.
template <typename T>
Var<T> bce_mean(Var<T> probs, const Tensor<T>& targets) {
  Tape<T>& t = *probs.tape;
  const Tensor<T>& pv = t.value(probs);
  if (!pv.same_shape(targets)) {
    throw ContractViolation("bce_mean shape mismatch: " + shape_str(pv.shape()) + " vs " +
                            shape_str(targets.shape()));
  }
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  T acc = 0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    const T p = std::clamp(pv[i], lo, hi);
    acc -= targets[i] * std::log(p) + (T(1) - targets[i]) * std::log(T(1) - p);
  }
  const T inv = T(1) / static_cast<T>(pv.size());
  auto tgt = std::make_shared<Tensor<T>>(targets);
  return t.record(Tensor<T>::scalar(acc * inv), t.needs_grad(probs),
                  [probs, tgt, lo, hi, inv](Tape<T>& tp, std::uint32_t self) {
                    const T g = tp.grad(Var<T>{&tp, self})[0] * inv;
                    const Tensor<T>& pv2 = tp.value(probs);
                    Tensor<T> dp(pv2.shape());
                    for (std::size_t i = 0; i < pv2.size(); ++i) {
                      const T p = pv2[i];
                      if (p <= lo || p >= hi) {
                        dp[i] = 0;
                        continue;
                      }
                      dp[i] = g * (p - (*tgt)[i]) / (p * (T(1) - p));
                    }
                    tp.add_grad(probs, dp);
                  });
}

// Mean focal loss over rows of class probabilities:
//   -w_y * (1 - p_y)^gamma * log(p_y)
// With gamma = 0 and unit weights this is exactly the mean cross-entropy.
// p_y is clamped to [1e-7, 1-1e-7] before the log.
template <typename T>
Var<T> focal_mean(Var<T> probs, const std::vector<int>& labels, T gamma,
                  const std::vector<T>& class_weights) {
  Tape<T>& t = *probs.tape;
  const Tensor<T>& pv = t.value(probs);
  if (pv.rank() != 2) {
    throw ContractViolation("focal_mean expects [N,K] probabilities, got " +
                            shape_str(pv.shape()));
  }
  const std::size_t N = pv.dim(0), K = pv.dim(1);
  if (labels.size() != N) {
    throw ContractViolation("focal_mean labels length " + std::to_string(labels.size()) +
                            " does not match batch " + std::to_string(N));
  }
  if (class_weights.size() != K) {
    throw ContractViolation("focal_mean needs one weight per class");
  }
  if (gamma < T(0)) throw ContractViolation("focal_mean gamma must be >= 0");
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw ContractViolation("focal_mean label out of range: " + std::to_string(l));
    }
  }
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  T acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T p = std::clamp(pv[n * K + static_cast<std::size_t>(labels[n])], lo, hi);
    const T w = class_weights[static_cast<std::size_t>(labels[n])];
    const T focus = gamma == T(0) ? T(1) : std::pow(T(1) - p, gamma);
    acc -= w * focus * std::log(p);
  }
  const T inv = T(1) / static_cast<T>(N);
  auto lab = std::make_shared<std::vector<int>>(labels);
  auto wts = std::make_shared<std::vector<T>>(class_weights);
  return t.record(
      Tensor<T>::scalar(acc * inv), t.needs_grad(probs),
      [probs, lab, wts, gamma, lo, hi, inv, N, K](Tape<T>& tp, std::uint32_t self) {
        const T g = tp.grad(Var<T>{&tp, self})[0] * inv;
        const Tensor<T>& pv2 = tp.value(probs);
        Tensor<T> dp(pv2.shape());
        for (std::size_t n = 0; n < N; ++n) {
          const std::size_t idx = n * K + static_cast<std::size_t>((*lab)[n]);
          const T p = pv2[idx];
          if (p <= lo || p >= hi) continue;
          const T w = (*wts)[static_cast<std::size_t>((*lab)[n])];
          T d;
          if (gamma == T(0)) {
            d = -w / p;
          } else {
            const T q = T(1) - p;
            d = w * gamma * std::pow(q, gamma - T(1)) * std::log(p) - w * std::pow(q, gamma) / p;
          }
          dp[idx] = g * d;
        }
        tp.add_grad(probs, dp);
      });
}

}  // namespace ops
}  // namespace tb
