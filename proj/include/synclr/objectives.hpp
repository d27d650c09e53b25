#pragma once

// Loss mathematics: multi-positive contrastive assignments and loss,
// Sinkhorn-Knopp patch targets with the masked-prediction loss, and the
// multi-crop total.

#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <vector>

#include "synclr/error.hpp"
#include "synclr/layers.hpp"

namespace synclr {

inline constexpr double kDefaultContrastiveTemperature = 0.08;
inline constexpr double kLogFloor = 1e-30;
inline constexpr int kDefaultSinkhornIterations = 3;

struct ContrastiveConfig {
  double temperature = kDefaultContrastiveTemperature;
};

struct SinkhornConfig {
  int iterations = kDefaultSinkhornIterations;
  double teacher_temperature = 0.04;
};

/// q_ik = softmax_k(a_i . b_k / tau), max-subtracted per anchor.
template <typename S>
Matrix<S> contrastive_assignments(const Matrix<S>& anchors, const Matrix<S>& candidates, S tau,
                                  S unit_tolerance = S(1e-4)) {
  require(tau > S(0), ErrorCode::invalid_argument, "temperature must be > 0");
  require(anchors.cols() == candidates.cols() && candidates.rows() >= 1, ErrorCode::invalid_argument,
          "anchor/candidate dimension mismatch");
  auto check_unit = [&](const Matrix<S>& m, const char* what) {
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      require(std::abs(m.row(i).norm() - S(1)) <= unit_tolerance, ErrorCode::invalid_argument,
              std::string(what) + " rows must be unit-norm");
  };
  check_unit(anchors, "anchor");
  check_unit(candidates, "candidate");
  const Matrix<S> logits = (anchors * candidates.transpose()) / tau;
  return softmax_rows(logits);
}

/// p_ik = match_ik / sum_j match_ij.
template <typename S>
Matrix<S> ground_truth_assignments(const Matrix<S>& match) {
  Matrix<S> p(match.rows(), match.cols());
  for (Eigen::Index i = 0; i < match.rows(); ++i) {
    S positives = 0;
    for (Eigen::Index k = 0; k < match.cols(); ++k) {
      const S m = match(i, k);
      require(m == S(0) || m == S(1), ErrorCode::invalid_argument, "match entries must be 0 or 1");
      positives += m;
    }
    require(positives > S(0), ErrorCode::invalid_argument,
            "anchor " + std::to_string(i) + " has no positive candidate");
    p.row(i) = match.row(i) / positives;
  }
  return p;
}

/// match(i, k) = 1 iff anchor i and candidate k share a group id.
template <typename S>
Matrix<S> match_matrix(std::span<const std::uint64_t> anchor_ids, std::span<const std::uint64_t> candidate_ids) {
  Matrix<S> m(static_cast<Eigen::Index>(anchor_ids.size()), static_cast<Eigen::Index>(candidate_ids.size()));
  for (std::size_t i = 0; i < anchor_ids.size(); ++i)
    for (std::size_t k = 0; k < candidate_ids.size(); ++k)
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = anchor_ids[i] == candidate_ids[k] ? S(1) : S(0);
  return m;
}

template <typename S>
struct MultiPositiveLoss {
  S loss = 0;
  Matrix<S> d_similarity;  // dL/d(a_i . b_k) = (q - p) / (tau N)
  std::size_t clamped = 0;  // entries where q fell under the log floor with p > 0
};

/// Mean over anchors of H(p_i, q_i).
template <typename S>
MultiPositiveLoss<S> multi_positive_loss(const Matrix<S>& p, const Matrix<S>& q, S tau) {
  require(p.rows() == q.rows() && p.cols() == q.cols() && p.rows() >= 1, ErrorCode::invalid_argument,
          "p and q must have the same non-empty shape");
  require(tau > S(0), ErrorCode::invalid_argument, "temperature must be > 0");
  MultiPositiveLoss<S> out;
  const S n = S(p.rows());
  S total = 0;
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    S row = 0;
    for (Eigen::Index k = 0; k < p.cols(); ++k) {
      if (p(i, k) <= S(0)) continue;
      S qk = q(i, k);
      if (qk < S(kLogFloor)) {
        qk = S(kLogFloor);
        ++out.clamped;
      }
      row -= p(i, k) * std::log(qk);
    }
    total += row;
  }
  out.loss = total / n;
  out.d_similarity = (q - p) / (tau * n);
  return out;
}

template <typename S>
struct ContrastiveResult {
  S loss = 0;
  Matrix<S> q, p;
  Matrix<S> d_anchors;  // dL/d(anchors); candidates receive no gradient
  std::size_t clamped = 0;
};

/// Assignments, ground truth and loss for one anchor set against one
/// candidate set.
template <typename S>
ContrastiveResult<S> contrastive_loss(const Matrix<S>& anchors, const Matrix<S>& candidates,
                                      std::span<const std::uint64_t> anchor_ids,
                                      std::span<const std::uint64_t> candidate_ids, S tau) {
  ContrastiveResult<S> r;
  r.q = contrastive_assignments(anchors, candidates, tau);
  r.p = ground_truth_assignments(match_matrix<S>(anchor_ids, candidate_ids));
  auto l = multi_positive_loss(r.p, r.q, tau);
  r.loss = l.loss;
  r.clamped = l.clamped;
  r.d_anchors = l.d_similarity * candidates;
  return r;
}

/// Balanced soft assignment of R rows to M prototypes: exp(logits / tau)
/// then alternate column (mass R/M) and row (mass 1) normalization, ending
/// on rows.
template <typename S>
Matrix<S> sinkhorn_targets(const Matrix<S>& logits, const SinkhornConfig& cfg = {}) {
  require(cfg.iterations >= 1, ErrorCode::invalid_argument, "Sinkhorn needs at least one iteration");
  require(cfg.teacher_temperature > 0, ErrorCode::invalid_argument, "teacher temperature must be > 0");
  require(logits.rows() >= 1 && logits.cols() >= 1, ErrorCode::invalid_argument, "Sinkhorn input is empty");
  require(logits.allFinite(), ErrorCode::numerical, "Sinkhorn input contains non-finite values");
  const S tau = S(cfg.teacher_temperature);
  const S max = logits.maxCoeff();
  Matrix<S> q = ((logits.array() - max) / tau).exp().matrix();
  const S column_mass = S(logits.rows()) / S(logits.cols());
  for (int it = 0; it < cfg.iterations; ++it) {
    for (Eigen::Index j = 0; j < q.cols(); ++j) {
      const S s = q.col(j).sum();
      if (s > S(0)) q.col(j) *= column_mass / s;
    }
    for (Eigen::Index i = 0; i < q.rows(); ++i) {
      const S s = q.row(i).sum();
      if (s > S(0)) q.row(i) /= s;
    }
  }
  return q;
}

template <typename S>
struct IbotLoss {
  S loss = 0;
  Matrix<S> d_logits;
};

/// Mean over masked rows of H(target, softmax(student_logits / tau_student)).
template <typename S>
IbotLoss<S> ibot_loss(const Matrix<S>& student_logits, const Matrix<S>& targets, S student_temperature) {
  require(student_logits.rows() == targets.rows() && student_logits.cols() == targets.cols(),
          ErrorCode::invalid_argument, "student logits and targets differ in shape");
  require(student_temperature > S(0), ErrorCode::invalid_argument, "student temperature must be > 0");
  IbotLoss<S> out;
  out.d_logits = Matrix<S>::Zero(student_logits.rows(), student_logits.cols());
  if (student_logits.rows() == 0) return out;
  const S rows = S(student_logits.rows());
  const Matrix<S> scaled = student_logits / student_temperature;
  const Matrix<S> prob = softmax_rows(scaled);
  S total = 0;
  for (Eigen::Index i = 0; i < scaled.rows(); ++i) {
    const S m = scaled.row(i).maxCoeff();
    const S lse = m + std::log((scaled.row(i).array() - m).exp().sum());
    total -= (targets.row(i).array() * (scaled.row(i).array() - lse)).sum();
  }
  out.loss = total / rows;
  out.d_logits = (prob - targets) / (student_temperature * rows);
  return out;
}

/// L(global) + mean of the n local losses + L_ibot(global); with no locals
/// that term is omitted.
template <typename S>
S total_loss(S global, std::span<const S> locals, S ibot) {
  S local_term = 0;
  if (!locals.empty()) {
    for (S l : locals) local_term += l;
    local_term /= S(locals.size());
  }
  return global + local_term + ibot;
}

}  // namespace synclr
