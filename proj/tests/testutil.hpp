#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <functional>

#include "repcount/autodiff.hpp"

namespace testutil {

// Central finite differences against an analytic gradient for one tensor.
// Accumulates squared error and squared norms so multiple tensors can share
// one combined relative-error figure.
template <typename Forward>
void fd_accumulate(Forward&& forward, repcount::ad::Tensor& param,
                   const Eigen::ArrayXd& analytic, double h, double& err_sq,
                   double& ga_sq, double& gn_sq) {
  for (Eigen::Index i = 0; i < param.data.size(); ++i) {
    const double saved = param.data[i];
    param.data[i] = saved + h;
    const double fp = forward();
    param.data[i] = saved - h;
    const double fm = forward();
    param.data[i] = saved;
    const double gn = (fp - fm) / (2.0 * h);
    const double ga = analytic[i];
    err_sq += (ga - gn) * (ga - gn);
    ga_sq += ga * ga;
    gn_sq += gn * gn;
  }
}

inline double fd_relative_error(double err_sq, double ga_sq, double gn_sq) {
  const double denom = std::max(std::sqrt(std::max(ga_sq, gn_sq)), 1e-12);
  return std::sqrt(err_sq) / denom;
}

// Independent straight-line multi-head attention oracle: plain loops, no
// shared code with the tape implementation.
inline Eigen::MatrixXd attention_oracle(const Eigen::MatrixXd& x,
                                        const Eigen::MatrixXd& wq,
                                        const Eigen::MatrixXd& wk,
                                        const Eigen::MatrixXd& wv,
                                        const Eigen::MatrixXd& wo, int heads,
                                        bool scale_logits) {
  const int n = static_cast<int>(x.rows());
  const int d = static_cast<int>(x.cols());
  const int dh = d / heads;
  Eigen::MatrixXd q(n, d), k(n, d), v(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double sq = 0, sk = 0, sv = 0;
      for (int m = 0; m < d; ++m) {
        sq += x(i, m) * wq(m, j);
        sk += x(i, m) * wk(m, j);
        sv += x(i, m) * wv(m, j);
      }
      q(i, j) = sq;
      k(i, j) = sk;
      v(i, j) = sv;
    }
  Eigen::MatrixXd merged(n, d);
  const double scale = scale_logits ? 1.0 / std::sqrt(static_cast<double>(dh)) : 1.0;
  for (int h = 0; h < heads; ++h) {
    for (int i = 0; i < n; ++i) {
      Eigen::VectorXd logits(n);
      for (int j = 0; j < n; ++j) {
        double dot = 0;
        for (int m = 0; m < dh; ++m)
          dot += q(i, h * dh + m) * k(j, h * dh + m);
        logits(j) = dot * scale;
      }
      const double mx = logits.maxCoeff();
      double z = 0;
      for (int j = 0; j < n; ++j) z += std::exp(logits(j) - mx);
      for (int m = 0; m < dh; ++m) {
        double acc = 0;
        for (int j = 0; j < n; ++j)
          acc += std::exp(logits(j) - mx) / z * v(j, h * dh + m);
        merged(i, h * dh + m) = acc;
      }
    }
  }
  Eigen::MatrixXd out(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) {
      double acc = 0;
      for (int m = 0; m < d; ++m) acc += merged(i, m) * wo(m, j);
      out(i, j) = acc;
    }
  return out;
}

}  // namespace testutil
