#pragma once

// Independent reference computations in plain loops, used to check the
// Eigen implementations.

#include <cmath>
#include <cstdint>
#include <vector>

namespace testing_util {

using Rows = std::vector<std::vector<double>>;

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// exp(s_k / tau) / sum_j exp(s_j / tau), no max subtraction.
inline std::vector<double> softmax_oracle(const std::vector<double>& sims, double tau) {
  std::vector<double> e(sims.size());
  double z = 0;
  for (std::size_t k = 0; k < sims.size(); ++k) z += e[k] = std::exp(sims[k] / tau);
  for (auto& v : e) v /= z;
  return e;
}

/// Mean over anchors of -sum_k p_ik log q_ik, p uniform over same-id candidates.
inline double multi_positive_oracle(const Rows& anchors, const Rows& candidates, const std::vector<std::uint64_t>& aid,
                                    const std::vector<std::uint64_t>& cid, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    std::vector<double> sims;
    for (const auto& c : candidates) sims.push_back(dot(anchors[i], c));
    const auto q = softmax_oracle(sims, tau);
    int positives = 0;
    for (auto id : cid) positives += id == aid[i];
    for (std::size_t k = 0; k < candidates.size(); ++k)
      if (cid[k] == aid[i]) total -= std::log(q[k]) / positives;
  }
  return total / static_cast<double>(anchors.size());
}

/// Single-positive cross-entropy contrastive loss: mean of
/// log sum_k exp(s_ik / tau) - s_i,pos / tau.
inline double infonce_oracle(const Rows& anchors, const Rows& candidates, const std::vector<std::size_t>& positive,
                             double tau) {
  double total = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    double z = 0;
    for (const auto& c : candidates) z += std::exp(dot(anchors[i], c) / tau);
    total += std::log(z) - dot(anchors[i], candidates[positive[i]]) / tau;
  }
  return total / static_cast<double>(anchors.size());
}

/// Unrolled Sinkhorn-Knopp: exp(logits / tau), then per iteration scale
/// columns to mass R/M and rows to mass 1.
inline Rows sinkhorn_oracle(const Rows& logits, double tau, int iterations) {
  const std::size_t R = logits.size(), M = logits[0].size();
  Rows q(R, std::vector<double>(M));
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j < M; ++j) q[i][j] = std::exp(logits[i][j] / tau);
  for (int it = 0; it < iterations; ++it) {
    for (std::size_t j = 0; j < M; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < R; ++i) s += q[i][j];
      for (std::size_t i = 0; i < R; ++i) q[i][j] *= (static_cast<double>(R) / static_cast<double>(M)) / s;
    }
    for (std::size_t i = 0; i < R; ++i) {
      double s = 0;
      for (std::size_t j = 0; j < M; ++j) s += q[i][j];
      for (std::size_t j = 0; j < M; ++j) q[i][j] /= s;
    }
  }
  return q;
}

}  // namespace testing_util
