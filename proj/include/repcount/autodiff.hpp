#pragma once

// Reverse-mode tape over dense double tensors. Desk-scale by design: naive
// loops, no vectorized kernels, exact gradients suitable for finite-difference
// verification at 64-bit precision.

#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace repcount::ad {

struct Tensor {
  std::vector<int> shape;
  Eigen::ArrayXd data;

  Tensor() = default;
  Tensor(std::vector<int> s, Eigen::ArrayXd d)
      : shape(std::move(s)), data(std::move(d)) {}

  static Tensor zeros(std::vector<int> s) {
    int n = 1;
    for (int d : s) n *= d;
    return Tensor(std::move(s), Eigen::ArrayXd::Zero(n));
  }
  int size() const { return static_cast<int>(data.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
};

using MatMap = Eigen::Map<
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

inline ConstMatMap as_matrix(const Tensor& t) {
  if (t.shape.size() != 2) throw std::invalid_argument("as_matrix: not 2-d");
  return ConstMatMap(t.data.data(), t.dim(0), t.dim(1));
}

class Tape {
 public:
  int constant(Tensor t) { return push(std::move(t), false, {}); }
  int param(Tensor t) { return push(std::move(t), true, {}); }

  const Tensor& value(int id) const { return nodes_[id].value; }
  const Eigen::ArrayXd& grad(int id) const { return nodes_[id].grad; }

  // ---- elementwise / linear algebra ----

  int add(int a, int b) {
    check_same_shape(a, b, "add");
    Tensor out(nodes_[a].value.shape, nodes_[a].value.data + nodes_[b].value.data);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int self) {
      accum(a, nodes_[self].grad);
      accum(b, nodes_[self].grad);
    });
  }

  int sub(int a, int b) {
    check_same_shape(a, b, "sub");
    Tensor out(nodes_[a].value.shape, nodes_[a].value.data - nodes_[b].value.data);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int self) {
      accum(a, nodes_[self].grad);
      accum(b, -nodes_[self].grad);
    });
  }

  int mul(int a, int b) {
    check_same_shape(a, b, "mul");
    Tensor out(nodes_[a].value.shape, nodes_[a].value.data * nodes_[b].value.data);
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int self) {
      accum(a, nodes_[self].grad * nodes_[b].value.data);
      accum(b, nodes_[self].grad * nodes_[a].value.data);
    });
  }

  int scale(int a, double s) {
    Tensor out(nodes_[a].value.shape, nodes_[a].value.data * s);
    return push(std::move(out), needs(a), [this, a, s](int self) {
      accum(a, nodes_[self].grad * s);
    });
  }

  // (n,m) x (m,p) -> (n,p)
  int matmul(int a, int b) {
    auto A = as_matrix(nodes_[a].value);
    auto B = as_matrix(nodes_[b].value);
    if (A.cols() != B.rows()) throw std::invalid_argument("matmul: shape mismatch");
    Tensor out = Tensor::zeros({static_cast<int>(A.rows()), static_cast<int>(B.cols())});
    MatMap(out.data.data(), A.rows(), B.cols()) = A * B;
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int self) {
      auto A2 = as_matrix(nodes_[a].value);
      auto B2 = as_matrix(nodes_[b].value);
      ConstMatMap G(nodes_[self].grad.data(), A2.rows(), B2.cols());
      if (needs(a)) {
        Eigen::ArrayXd ga(nodes_[a].value.size());
        MatMap(ga.data(), A2.rows(), A2.cols()) = G * B2.transpose();
        accum(a, ga);
      }
      if (needs(b)) {
        Eigen::ArrayXd gb(nodes_[b].value.size());
        MatMap(gb.data(), B2.rows(), B2.cols()) = A2.transpose() * G;
        accum(b, gb);
      }
    });
  }

  // (n,m) x (p,m) -> A * B^T, (n,p)
  int matmul_nt(int a, int b) {
    auto A = as_matrix(nodes_[a].value);
    auto B = as_matrix(nodes_[b].value);
    if (A.cols() != B.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
    Tensor out = Tensor::zeros({static_cast<int>(A.rows()), static_cast<int>(B.rows())});
    MatMap(out.data.data(), A.rows(), B.rows()) = A * B.transpose();
    return push(std::move(out), needs(a) || needs(b), [this, a, b](int self) {
      auto A2 = as_matrix(nodes_[a].value);
      auto B2 = as_matrix(nodes_[b].value);
      ConstMatMap G(nodes_[self].grad.data(), A2.rows(), B2.rows());
      if (needs(a)) {
        Eigen::ArrayXd ga(nodes_[a].value.size());
        MatMap(ga.data(), A2.rows(), A2.cols()) = G * B2;
        accum(a, ga);
      }
      if (needs(b)) {
        Eigen::ArrayXd gb(nodes_[b].value.size());
        MatMap(gb.data(), B2.rows(), B2.cols()) = G.transpose() * A2;
        accum(b, gb);
      }
    });
  }

  // bias (m) broadcast over the rows of a (n,m)
  int add_bias_rows(int a, int bias) {
    const Tensor& A = nodes_[a].value;
    const Tensor& B = nodes_[bias].value;
    if (A.shape.size() != 2 || B.size() != A.dim(1))
      throw std::invalid_argument("add_bias_rows: shape mismatch");
    Tensor out = A;
    for (int r = 0; r < A.dim(0); ++r)
      out.data.segment(static_cast<Eigen::Index>(r) * A.dim(1), A.dim(1)) += B.data;
    return push(std::move(out), needs(a) || needs(bias),
                [this, a, bias](int self) {
                  const Tensor& A2 = nodes_[a].value;
                  accum(a, nodes_[self].grad);
                  if (needs(bias)) {
                    Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(A2.dim(1));
                    for (int r = 0; r < A2.dim(0); ++r)
                      gb += nodes_[self].grad.segment(
                          static_cast<Eigen::Index>(r) * A2.dim(1), A2.dim(1));
                    accum(bias, gb);
                  }
                });
  }

  int slice_cols(int a, int c0, int c1) {
    const Tensor& A = nodes_[a].value;
    const int n = A.dim(0), m = A.dim(1), w = c1 - c0;
    Tensor out = Tensor::zeros({n, w});
    for (int r = 0; r < n; ++r)
      out.data.segment(static_cast<Eigen::Index>(r) * w, w) =
          A.data.segment(static_cast<Eigen::Index>(r) * m + c0, w);
    return push(std::move(out), needs(a), [this, a, c0, w](int self) {
      const Tensor& A2 = nodes_[a].value;
      const int n2 = A2.dim(0), m2 = A2.dim(1);
      Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(A2.size());
      for (int r = 0; r < n2; ++r)
        ga.segment(static_cast<Eigen::Index>(r) * m2 + c0, w) =
            nodes_[self].grad.segment(static_cast<Eigen::Index>(r) * w, w);
      accum(a, ga);
    });
  }

  int concat_cols(const std::vector<int>& parts) {
    const int n = nodes_[parts[0]].value.dim(0);
    int m = 0;
    for (int p : parts) m += nodes_[p].value.dim(1);
    Tensor out = Tensor::zeros({n, m});
    int off = 0;
    bool rg = false;
    for (int p : parts) {
      const Tensor& P = nodes_[p].value;
      for (int r = 0; r < n; ++r)
        out.data.segment(static_cast<Eigen::Index>(r) * m + off, P.dim(1)) =
            P.data.segment(static_cast<Eigen::Index>(r) * P.dim(1), P.dim(1));
      off += P.dim(1);
      rg = rg || needs(p);
    }
    return push(std::move(out), rg, [this, parts, n, m](int self) {
      int off2 = 0;
      for (int p : parts) {
        const int w = nodes_[p].value.dim(1);
        if (needs(p)) {
          Eigen::ArrayXd gp(static_cast<Eigen::Index>(n) * w);
          for (int r = 0; r < n; ++r)
            gp.segment(static_cast<Eigen::Index>(r) * w, w) =
                nodes_[self].grad.segment(static_cast<Eigen::Index>(r) * m + off2, w);
          accum(p, gp);
        }
        off2 += w;
      }
    });
  }

  // ---- nonlinearities ----

  int sigmoid(int a) {
    Tensor out(nodes_[a].value.shape,
               1.0 / (1.0 + (-nodes_[a].value.data).exp()));
    return push(std::move(out), needs(a), [this, a](int self) {
      const auto& y = nodes_[self].value.data;
      accum(a, nodes_[self].grad * y * (1.0 - y));
    });
  }

  int relu(int a) {
    Tensor out(nodes_[a].value.shape, nodes_[a].value.data.max(0.0));
    return push(std::move(out), needs(a), [this, a](int self) {
      accum(a, nodes_[self].grad *
                   (nodes_[a].value.data > 0.0).cast<double>());
    });
  }

  // softmax over the last dimension of a 2-d tensor
  int row_softmax(int a) {
    const Tensor& A = nodes_[a].value;
    if (A.shape.size() != 2) throw std::invalid_argument("row_softmax: not 2-d");
    const int n = A.dim(0), m = A.dim(1);
    Tensor out = Tensor::zeros({n, m});
    for (int r = 0; r < n; ++r) {
      auto row = A.data.segment(static_cast<Eigen::Index>(r) * m, m);
      Eigen::ArrayXd e = (row - row.maxCoeff()).exp();
      out.data.segment(static_cast<Eigen::Index>(r) * m, m) = e / e.sum();
    }
    return push(std::move(out), needs(a), [this, a, n, m](int self) {
      Eigen::ArrayXd ga(static_cast<Eigen::Index>(n) * m);
      for (int r = 0; r < n; ++r) {
        auto y = nodes_[self].value.data.segment(static_cast<Eigen::Index>(r) * m, m);
        auto g = nodes_[self].grad.segment(static_cast<Eigen::Index>(r) * m, m);
        const double dot = (g * y).sum();
        ga.segment(static_cast<Eigen::Index>(r) * m, m) = (g - dot) * y;
      }
      accum(a, ga);
    });
  }

  // per-row layer norm without affine parameters
  int row_layernorm(int a, double eps = 1e-8) {
    const Tensor& A = nodes_[a].value;
    if (A.shape.size() != 2) throw std::invalid_argument("row_layernorm: not 2-d");
    const int n = A.dim(0), m = A.dim(1);
    Tensor out = Tensor::zeros({n, m});
    std::vector<double> inv_std(static_cast<size_t>(n));
    for (int r = 0; r < n; ++r) {
      auto row = A.data.segment(static_cast<Eigen::Index>(r) * m, m);
      const double mu = row.mean();
      const double var = (row - mu).square().mean();
      inv_std[static_cast<size_t>(r)] = 1.0 / std::sqrt(var + eps);
      out.data.segment(static_cast<Eigen::Index>(r) * m, m) =
          (row - mu) * inv_std[static_cast<size_t>(r)];
    }
    return push(std::move(out), needs(a),
                [this, a, n, m, inv_std](int self) {
                  Eigen::ArrayXd ga(static_cast<Eigen::Index>(n) * m);
                  for (int r = 0; r < n; ++r) {
                    auto y = nodes_[self].value.data.segment(
                        static_cast<Eigen::Index>(r) * m, m);
                    auto g = nodes_[self].grad.segment(
                        static_cast<Eigen::Index>(r) * m, m);
                    const double gm = g.mean();
                    const double gy = (g * y).mean();
                    ga.segment(static_cast<Eigen::Index>(r) * m, m) =
                        inv_std[static_cast<size_t>(r)] * (g - gm - y * gy);
                  }
                  accum(a, ga);
                });
  }

  // ---- spatial ops on (C,H,W) tensors ----

  // stride-1 zero-padded convolution, output (O,H,W); weight (O,C,kh,kw)
  int conv2d(int input, int weight, int bias) {
    const Tensor& X = nodes_[input].value;
    const Tensor& W = nodes_[weight].value;
    const Tensor& B = nodes_[bias].value;
    if (X.shape.size() != 3 || W.shape.size() != 4)
      throw std::invalid_argument("conv2d: bad ranks");
    const int C = X.dim(0), H = X.dim(1), Wd = X.dim(2);
    const int O = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    if (W.dim(1) != C || B.size() != O)
      throw std::invalid_argument("conv2d: channel mismatch");
    const int ph = kh / 2, pw = kw / 2;
    Tensor out = Tensor::zeros({O, H, Wd});
    for (int o = 0; o < O; ++o)
      for (int r = 0; r < H; ++r)
        for (int c = 0; c < Wd; ++c) {
          double acc = B.data[o];
          for (int ci = 0; ci < C; ++ci)
            for (int u = 0; u < kh; ++u) {
              const int rr = r + u - ph;
              if (rr < 0 || rr >= H) continue;
              for (int v = 0; v < kw; ++v) {
                const int cc = c + v - pw;
                if (cc < 0 || cc >= Wd) continue;
                acc += X.data[(static_cast<Eigen::Index>(ci) * H + rr) * Wd + cc] *
                       W.data[((static_cast<Eigen::Index>(o) * C + ci) * kh + u) * kw + v];
              }
            }
          out.data[(static_cast<Eigen::Index>(o) * H + r) * Wd + c] = acc;
        }
    return push(std::move(out), needs(input) || needs(weight) || needs(bias),
                [this, input, weight, bias, C, H, Wd, O, kh, kw, ph, pw](int self) {
                  const Tensor& X2 = nodes_[input].value;
                  const Tensor& W2 = nodes_[weight].value;
                  const auto& G = nodes_[self].grad;
                  Eigen::ArrayXd gx = Eigen::ArrayXd::Zero(X2.size());
                  Eigen::ArrayXd gw = Eigen::ArrayXd::Zero(W2.size());
                  Eigen::ArrayXd gb = Eigen::ArrayXd::Zero(O);
                  for (int o = 0; o < O; ++o)
                    for (int r = 0; r < H; ++r)
                      for (int c = 0; c < Wd; ++c) {
                        const double g =
                            G[(static_cast<Eigen::Index>(o) * H + r) * Wd + c];
                        if (g == 0.0) continue;
                        gb[o] += g;
                        for (int ci = 0; ci < C; ++ci)
                          for (int u = 0; u < kh; ++u) {
                            const int rr = r + u - ph;
                            if (rr < 0 || rr >= H) continue;
                            for (int v = 0; v < kw; ++v) {
                              const int cc = c + v - pw;
                              if (cc < 0 || cc >= Wd) continue;
                              const Eigen::Index xi =
                                  (static_cast<Eigen::Index>(ci) * H + rr) * Wd + cc;
                              const Eigen::Index wi =
                                  ((static_cast<Eigen::Index>(o) * C + ci) * kh + u) * kw + v;
                              gx[xi] += g * W2.data[wi];
                              gw[wi] += g * X2.data[xi];
                            }
                          }
                      }
                  accum(input, gx);
                  accum(weight, gw);
                  accum(bias, gb);
                });
  }

  // nearest-neighbor x2 upsampling, (C,H,W) -> (C,2H,2W)
  int upsample2x(int a) {
    const Tensor& X = nodes_[a].value;
    const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
    Tensor out = Tensor::zeros({C, 2 * H, 2 * W});
    for (int c = 0; c < C; ++c)
      for (int r = 0; r < 2 * H; ++r)
        for (int q = 0; q < 2 * W; ++q)
          out.data[(static_cast<Eigen::Index>(c) * 2 * H + r) * 2 * W + q] =
              X.data[(static_cast<Eigen::Index>(c) * H + r / 2) * W + q / 2];
    return push(std::move(out), needs(a), [this, a, C, H, W](int self) {
      Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(nodes_[a].value.size());
      const auto& G = nodes_[self].grad;
      for (int c = 0; c < C; ++c)
        for (int r = 0; r < 2 * H; ++r)
          for (int q = 0; q < 2 * W; ++q)
            ga[(static_cast<Eigen::Index>(c) * H + r / 2) * W + q / 2] +=
                G[(static_cast<Eigen::Index>(c) * 2 * H + r) * 2 * W + q];
      accum(a, ga);
    });
  }

  // half-pixel-center bilinear resize, (C,H,W) -> (C,h2,w2)
  int bilinear_resize(int a, int h2, int w2) {
    const Tensor& X = nodes_[a].value;
    const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
    struct Tap {
      int r0, c0;
      double wr, wc;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(static_cast<size_t>(h2) * w2);
    for (int r = 0; r < h2; ++r)
      for (int c = 0; c < w2; ++c) {
        const double sy = std::clamp((r + 0.5) * H / h2 - 0.5, 0.0, H - 1.0);
        const double sx = std::clamp((c + 0.5) * W / w2 - 0.5, 0.0, W - 1.0);
        const int r0 = std::min(static_cast<int>(sy), H - 2 >= 0 ? H - 2 : 0);
        const int c0 = std::min(static_cast<int>(sx), W - 2 >= 0 ? W - 2 : 0);
        taps->push_back({r0, c0, sy - r0, sx - c0});
      }
    Tensor out = Tensor::zeros({C, h2, w2});
    for (int ch = 0; ch < C; ++ch) {
      const Eigen::Index base = static_cast<Eigen::Index>(ch) * H * W;
      size_t t = 0;
      for (int r = 0; r < h2; ++r)
        for (int c = 0; c < w2; ++c, ++t) {
          const Tap& tp = (*taps)[t];
          const int r1 = std::min(tp.r0 + 1, H - 1), c1 = std::min(tp.c0 + 1, W - 1);
          const double v00 = X.data[base + static_cast<Eigen::Index>(tp.r0) * W + tp.c0];
          const double v01 = X.data[base + static_cast<Eigen::Index>(tp.r0) * W + c1];
          const double v10 = X.data[base + static_cast<Eigen::Index>(r1) * W + tp.c0];
          const double v11 = X.data[base + static_cast<Eigen::Index>(r1) * W + c1];
          out.data[(static_cast<Eigen::Index>(ch) * h2 + r) * w2 + c] =
              (1 - tp.wr) * ((1 - tp.wc) * v00 + tp.wc * v01) +
              tp.wr * ((1 - tp.wc) * v10 + tp.wc * v11);
        }
    }
    return push(std::move(out), needs(a),
                [this, a, C, H, W, h2, w2, taps](int self) {
                  Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(nodes_[a].value.size());
                  const auto& G = nodes_[self].grad;
                  for (int ch = 0; ch < C; ++ch) {
                    const Eigen::Index base = static_cast<Eigen::Index>(ch) * H * W;
                    size_t t = 0;
                    for (int r = 0; r < h2; ++r)
                      for (int c = 0; c < w2; ++c, ++t) {
                        const Tap& tp = (*taps)[t];
                        const int r1 = std::min(tp.r0 + 1, H - 1);
                        const int c1 = std::min(tp.c0 + 1, W - 1);
                        const double g =
                            G[(static_cast<Eigen::Index>(ch) * h2 + r) * w2 + c];
                        ga[base + static_cast<Eigen::Index>(tp.r0) * W + tp.c0] +=
                            g * (1 - tp.wr) * (1 - tp.wc);
                        ga[base + static_cast<Eigen::Index>(tp.r0) * W + c1] +=
                            g * (1 - tp.wr) * tp.wc;
                        ga[base + static_cast<Eigen::Index>(r1) * W + tp.c0] +=
                            g * tp.wr * (1 - tp.wc);
                        ga[base + static_cast<Eigen::Index>(r1) * W + c1] +=
                            g * tp.wr * tp.wc;
                      }
                  }
                  accum(a, ga);
                });
  }

  // Bilinear ROI pooling; box given in feature-map coordinates. Bin centers
  // use the half-pixel convention, so a box covering the whole map with
  // p == H == W reproduces the map exactly.
  int roi_pool(int fm, double bx1, double by1, double bx2, double by2, int p) {
    const Tensor& X = nodes_[fm].value;
    const int C = X.dim(0), H = X.dim(1), W = X.dim(2);
    const double bw = bx2 - bx1, bh = by2 - by1;
    struct Tap {
      int r0, c0;
      double wr, wc;
    };
    auto taps = std::make_shared<std::vector<Tap>>();
    taps->reserve(static_cast<size_t>(p) * p);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < p; ++j) {
        const double sy = std::clamp(by1 + (i + 0.5) * bh / p - 0.5, 0.0,
                                     static_cast<double>(H - 1));
        const double sx = std::clamp(bx1 + (j + 0.5) * bw / p - 0.5, 0.0,
                                     static_cast<double>(W - 1));
        const int r0 = std::min(static_cast<int>(sy), std::max(H - 2, 0));
        const int c0 = std::min(static_cast<int>(sx), std::max(W - 2, 0));
        taps->push_back({r0, c0, sy - r0, sx - c0});
      }
    Tensor out = Tensor::zeros({C, p, p});
    for (int ch = 0; ch < C; ++ch) {
      const Eigen::Index base = static_cast<Eigen::Index>(ch) * H * W;
      size_t t = 0;
      for (int i = 0; i < p; ++i)
        for (int j = 0; j < p; ++j, ++t) {
          const Tap& tp = (*taps)[t];
          const int r1 = std::min(tp.r0 + 1, H - 1), c1 = std::min(tp.c0 + 1, W - 1);
          const double v00 = X.data[base + static_cast<Eigen::Index>(tp.r0) * W + tp.c0];
          const double v01 = X.data[base + static_cast<Eigen::Index>(tp.r0) * W + c1];
          const double v10 = X.data[base + static_cast<Eigen::Index>(r1) * W + tp.c0];
          const double v11 = X.data[base + static_cast<Eigen::Index>(r1) * W + c1];
          out.data[(static_cast<Eigen::Index>(ch) * p + i) * p + j] =
              (1 - tp.wr) * ((1 - tp.wc) * v00 + tp.wc * v01) +
              tp.wr * ((1 - tp.wc) * v10 + tp.wc * v11);
        }
    }
    return push(std::move(out), needs(fm), [this, fm, C, H, W, p, taps](int self) {
      Eigen::ArrayXd ga = Eigen::ArrayXd::Zero(nodes_[fm].value.size());
      const auto& G = nodes_[self].grad;
      for (int ch = 0; ch < C; ++ch) {
        const Eigen::Index base = static_cast<Eigen::Index>(ch) * H * W;
        size_t t = 0;
        for (int i = 0; i < p; ++i)
          for (int j = 0; j < p; ++j, ++t) {
            const auto& tp = (*taps)[t];
            const int r1 = std::min(tp.r0 + 1, H - 1), c1 = std::min(tp.c0 + 1, W - 1);
            const double g = G[(static_cast<Eigen::Index>(ch) * p + i) * p + j];
            ga[base + static_cast<Eigen::Index>(tp.r0) * W + tp.c0] +=
                g * (1 - tp.wr) * (1 - tp.wc);
            ga[base + static_cast<Eigen::Index>(tp.r0) * W + c1] +=
                g * (1 - tp.wr) * tp.wc;
            ga[base + static_cast<Eigen::Index>(r1) * W + tp.c0] +=
                g * tp.wr * (1 - tp.wc);
            ga[base + static_cast<Eigen::Index>(r1) * W + c1] += g * tp.wr * tp.wc;
          }
      }
      accum(fm, ga);
    });
  }

  // Slide a (C,p,p) kernel over a (C,H,W) map, zero padding, summing over
  // channels; output (1,H,W) normalized by C*p*p.
  int correlate(int fm, int kernel) {
    const Tensor& X = nodes_[fm].value;
    const Tensor& K = nodes_[kernel].value;
    const int C = X.dim(0), H = X.dim(1), W = X.dim(2), p = K.dim(1);
    if (K.dim(0) != C) throw std::invalid_argument("correlate: channel mismatch");
    const int ph = p / 2;
    const double norm = 1.0 / (static_cast<double>(C) * p * p);
    Tensor out = Tensor::zeros({1, H, W});
    for (int r = 0; r < H; ++r)
      for (int c = 0; c < W; ++c) {
        double acc = 0;
        for (int ch = 0; ch < C; ++ch)
          for (int u = 0; u < p; ++u) {
            const int rr = r + u - ph;
            if (rr < 0 || rr >= H) continue;
            for (int v = 0; v < p; ++v) {
              const int cc = c + v - ph;
              if (cc < 0 || cc >= W) continue;
              acc += X.data[(static_cast<Eigen::Index>(ch) * H + rr) * W + cc] *
                     K.data[(static_cast<Eigen::Index>(ch) * p + u) * p + v];
            }
          }
        out.data[static_cast<Eigen::Index>(r) * W + c] = acc * norm;
      }
    return push(std::move(out), needs(fm) || needs(kernel),
                [this, fm, kernel, C, H, W, p, ph, norm](int self) {
                  const Tensor& X2 = nodes_[fm].value;
                  const Tensor& K2 = nodes_[kernel].value;
                  const auto& G = nodes_[self].grad;
                  Eigen::ArrayXd gx = Eigen::ArrayXd::Zero(X2.size());
                  Eigen::ArrayXd gk = Eigen::ArrayXd::Zero(K2.size());
                  for (int r = 0; r < H; ++r)
                    for (int c = 0; c < W; ++c) {
                      const double g = G[static_cast<Eigen::Index>(r) * W + c] * norm;
                      if (g == 0.0) continue;
                      for (int ch = 0; ch < C; ++ch)
                        for (int u = 0; u < p; ++u) {
                          const int rr = r + u - ph;
                          if (rr < 0 || rr >= H) continue;
                          for (int v = 0; v < p; ++v) {
                            const int cc = c + v - ph;
                            if (cc < 0 || cc >= W) continue;
                            const Eigen::Index xi =
                                (static_cast<Eigen::Index>(ch) * H + rr) * W + cc;
                            const Eigen::Index ki =
                                (static_cast<Eigen::Index>(ch) * p + u) * p + v;
                            gx[xi] += g * K2.data[ki];
                            gk[ki] += g * X2.data[xi];
                          }
                        }
                    }
                  if (needs(fm)) accum(fm, gx);
                  if (needs(kernel)) accum(kernel, gk);
                });
  }

  // ---- reductions / losses ----

  int sum(int a) {
    Tensor out({1}, Eigen::ArrayXd::Constant(1, nodes_[a].value.data.sum()));
    return push(std::move(out), needs(a), [this, a](int self) {
      accum(a, Eigen::ArrayXd::Constant(nodes_[a].value.size(),
                                        nodes_[self].grad[0]));
    });
  }

  // mean squared error against a constant target of the same size
  int mse(int a, const Eigen::ArrayXd& target) {
    const Tensor& A = nodes_[a].value;
    if (A.size() != target.size()) throw std::invalid_argument("mse: shape mismatch");
    const double n = static_cast<double>(A.size());
    Tensor out({1}, Eigen::ArrayXd::Constant(1, (A.data - target).square().sum() / n));
    return push(std::move(out), needs(a), [this, a, target, n](int self) {
      accum(a, nodes_[self].grad[0] * 2.0 / n * (nodes_[a].value.data - target));
    });
  }

  void backward(int root) {
    for (auto& node : nodes_) node.grad.setZero(node.value.size());
    nodes_[root].grad.setConstant(1.0);
    for (int i = root; i >= 0; --i)
      if (nodes_[i].backward_fn && nodes_[i].requires_grad) nodes_[i].backward_fn(i);
  }

  size_t size() const { return nodes_.size(); }

  // generic hook for fused ops defined outside the class
  int push(Tensor value, bool requires_grad, std::function<void(int)> backward_fn) {
    nodes_.push_back({std::move(value), Eigen::ArrayXd(), requires_grad,
                      std::move(backward_fn)});
    return static_cast<int>(nodes_.size()) - 1;
  }
  bool needs(int id) const { return nodes_[id].requires_grad; }
  void accum(int id, const Eigen::ArrayXd& g) {
    if (nodes_[id].requires_grad) nodes_[id].grad += g;
  }

 private:
  struct Node {
    Tensor value;
    Eigen::ArrayXd grad;
    bool requires_grad = false;
    std::function<void(int)> backward_fn;
  };

  void check_same_shape(int a, int b, const char* op) const {
    if (nodes_[a].value.shape != nodes_[b].value.shape)
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
  }

  std::vector<Node> nodes_;
};

}  // namespace repcount::ad
