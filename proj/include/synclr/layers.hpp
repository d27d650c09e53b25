#pragma once

// Dense building blocks with explicit forward caches and backward passes.
// Row-major matrices; each row is one token or one sample.

#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace synclr {

template <typename S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename S>
using RowVector = Eigen::Matrix<S, 1, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// GELU (erf form)

template <typename S>
S gelu(S u) {
  return S(0.5) * u * (S(1) + std::erf(u * S(std::numbers::sqrt2 / 2)));
}

template <typename S>
S gelu_grad(S u) {
  const S cdf = S(0.5) * (S(1) + std::erf(u * S(std::numbers::sqrt2 / 2)));
  const S pdf = std::exp(S(-0.5) * u * u) * S(std::numbers::inv_sqrtpi / std::numbers::sqrt2);
  return cdf + u * pdf;
}

// ---------------------------------------------------------------------------
// Layer normalization over each row

template <typename S>
struct LayerNormCache {
  Matrix<S> xhat;
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd;
};

template <typename S>
Matrix<S> layer_norm(const Matrix<S>& x, const Matrix<S>& gain, const Matrix<S>& bias,
                     LayerNormCache<S>* cache, S eps = S(1e-6)) {
  const auto n = x.rows(), d = x.cols();
  Matrix<S> xhat(n, d);
  Eigen::Matrix<S, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const S mean = x.row(i).mean();
    const auto centred = (x.row(i).array() - mean).matrix();
    const S var = centred.squaredNorm() / S(d);
    rstd(i) = S(1) / std::sqrt(var + eps);
    xhat.row(i) = centred * rstd(i);
  }
  Matrix<S> y = (xhat.array().rowwise() * gain.row(0).array()).rowwise() + bias.row(0).array();
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->rstd = std::move(rstd);
  }
  return y;
}

/// Accumulates parameter gradients, returns dL/dx.
template <typename S>
Matrix<S> layer_norm_backward(const Matrix<S>& dy, const LayerNormCache<S>& c, const Matrix<S>& gain,
                              Matrix<S>& dgain, Matrix<S>& dbias) {
  dgain.row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
  dbias.row(0) += dy.colwise().sum();
  const Matrix<S> dxhat = dy.array().rowwise() * gain.row(0).array();
  const S d = S(dy.cols());
  Matrix<S> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const S mean_dxhat = dxhat.row(i).sum() / d;
    const S mean_dot = dxhat.row(i).dot(c.xhat.row(i)) / d;
    dx.row(i) = c.rstd(i) * (dxhat.row(i).array() - mean_dxhat - c.xhat.row(i).array() * mean_dot).matrix();
  }
  return dx;
}

// ---------------------------------------------------------------------------
// Affine map: y = x W + b

template <typename S>
Matrix<S> affine(const Matrix<S>& x, const Matrix<S>& w, const Matrix<S>& b) {
  Matrix<S> y = x * w;
  y.rowwise() += b.row(0);
  return y;
}

template <typename S>
Matrix<S> affine_backward(const Matrix<S>& dy, const Matrix<S>& x, const Matrix<S>& w, Matrix<S>& dw,
                          Matrix<S>& db) {
  dw.noalias() += x.transpose() * dy;
  db.row(0) += dy.colwise().sum();
  return dy * w.transpose();
}

// ---------------------------------------------------------------------------
// Two-layer perceptron with GELU between the layers

template <typename S>
struct MlpParamsView {
  const Matrix<S>& w1;
  const Matrix<S>& b1;
  const Matrix<S>& w2;
  const Matrix<S>& b2;
};

template <typename S>
struct MlpGradView {
  Matrix<S>& w1;
  Matrix<S>& b1;
  Matrix<S>& w2;
  Matrix<S>& b2;
};

template <typename S>
struct MlpCache {
  Matrix<S> x, u, g;
};

template <typename S>
Matrix<S> mlp_forward(const MlpParamsView<S>& p, const Matrix<S>& x, MlpCache<S>* cache) {
  Matrix<S> u = affine(x, p.w1, p.b1);
  Matrix<S> g = u.unaryExpr([](S v) { return gelu(v); });
  Matrix<S> y = affine(g, p.w2, p.b2);
  if (cache) {
    cache->x = x;
    cache->u = std::move(u);
    cache->g = std::move(g);
  }
  return y;
}

template <typename S>
Matrix<S> mlp_backward(const MlpParamsView<S>& p, const MlpCache<S>& c, const Matrix<S>& dy,
                       const MlpGradView<S>& grads) {
  const Matrix<S> dg = affine_backward(dy, c.g, p.w2, grads.w2, grads.b2);
  const Matrix<S> du = dg.array() * c.u.unaryExpr([](S v) { return gelu_grad(v); }).array();
  return affine_backward(du, c.x, p.w1, grads.w1, grads.b1);
}

// ---------------------------------------------------------------------------
// Per-row l2 normalization

template <typename S>
struct RowNormalizeCache {
  Matrix<S> unit;
  Eigen::Matrix<S, Eigen::Dynamic, 1> norm;
};

/// Returns false if any row has zero norm.
template <typename S>
bool normalize_rows(const Matrix<S>& y, Matrix<S>& unit, RowNormalizeCache<S>* cache) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> norm = y.rowwise().norm();
  for (Eigen::Index i = 0; i < norm.size(); ++i)
    if (!(norm(i) > S(0))) return false;
  unit = y.array().colwise() / norm.array();
  if (cache) {
    cache->unit = unit;
    cache->norm = std::move(norm);
  }
  return true;
}

template <typename S>
Matrix<S> normalize_rows_backward(const Matrix<S>& dunit, const RowNormalizeCache<S>& c) {
  const Eigen::Matrix<S, Eigen::Dynamic, 1> dots = (dunit.array() * c.unit.array()).rowwise().sum();
  Matrix<S> dy = dunit - (c.unit.array().colwise() * dots.array()).matrix();
  return dy.array().colwise() / c.norm.array();
}

// ---------------------------------------------------------------------------
// Row softmax

template <typename S>
Matrix<S> softmax_rows(const Matrix<S>& logits) {
  Matrix<S> out(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const S m = logits.row(i).maxCoeff();
    out.row(i) = (logits.row(i).array() - m).exp().matrix();
    out.row(i) /= out.row(i).sum();
  }
  return out;
}

}  // namespace synclr
