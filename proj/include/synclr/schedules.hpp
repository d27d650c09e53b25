#pragma once

// Step-indexed scalar schedules, the EMA teacher update and the
// decoupled-weight-decay Adam optimizer.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "synclr/encoder.hpp"
#include "synclr/error.hpp"

namespace synclr {

inline constexpr double kPaperTotalSteps = 500000.0;
inline constexpr double kPaperIbotRampSteps = 4000.0;

struct TrainSchedule {
  long total_steps = 1000;
  long warmup_steps = 160;
  double ema_start = 0.994, ema_end = 1.0;
  double ibot_tau_start = 0.04, ibot_tau_end = 0.07;
  double ibot_ramp_steps = 10;
  double wd_start = 0.04, wd_end = 0.2;
  double peak_lr = 1e-3;

  /// Ramp proportional to the full-length schedule, at least ten steps.
  static double scaled_ibot_ramp(long total) {
    return std::max(10.0, kPaperIbotRampSteps * static_cast<double>(total) / kPaperTotalSteps);
  }

  static TrainSchedule for_steps(long total, double peak_lr = 1e-3) {
    TrainSchedule s;
    s.total_steps = total;
    s.warmup_steps = static_cast<long>(std::lround(0.16 * static_cast<double>(total)));
    s.ibot_ramp_steps = scaled_ibot_ramp(total);
    s.peak_lr = peak_lr;
    return s;
  }

  void validate() const {
    require(total_steps > warmup_steps && warmup_steps >= 0, ErrorCode::invalid_argument,
            "schedule needs total_steps > warmup_steps >= 0");
    require(ema_start <= ema_end && ibot_tau_start <= ibot_tau_end && wd_start <= wd_end, ErrorCode::invalid_argument,
            "schedule ranges must be ordered");
    require(ibot_ramp_steps > 0 && peak_lr >= 0, ErrorCode::invalid_argument, "invalid ramp or learning rate");
  }
};

namespace detail {

inline void check_step(long step, long total) {
  require(step >= 0 && step <= total && total > 0, ErrorCode::invalid_argument,
          "step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
}

/// Half-cosine rise from `start` at step 0 to `end` at `total`; both
/// endpoints are exact.
inline double cosine_rise(double start, double end, long step, long total) {
  const double c = std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total));
  return start * (1.0 + c) / 2.0 + end * (1.0 - c) / 2.0;
}

}  // namespace detail

inline double ema_lambda(long step, long total, double start = 0.994, double end = 1.0) {
  detail::check_step(step, total);
  return detail::cosine_rise(start, end, step, total);
}

inline double weight_decay(long step, long total, double start = 0.04, double end = 0.2) {
  detail::check_step(step, total);
  return detail::cosine_rise(start, end, step, total);
}

inline double ibot_student_temperature(long step, const TrainSchedule& s) {
  require(step >= 0, ErrorCode::invalid_argument, "step must be >= 0");
  const double t = static_cast<double>(step);
  if (t >= s.ibot_ramp_steps) return s.ibot_tau_end;
  return s.ibot_tau_start + (s.ibot_tau_end - s.ibot_tau_start) * t / s.ibot_ramp_steps;
}

/// Linear warmup to the peak, then cosine decay to zero at total_steps.
inline double learning_rate(long step, const TrainSchedule& s) {
  require(step >= 0 && step <= s.total_steps, ErrorCode::invalid_argument, "step outside schedule");
  if (step < s.warmup_steps) return s.peak_lr * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  const double span = static_cast<double>(s.total_steps - s.warmup_steps);
  const double progress = static_cast<double>(step - s.warmup_steps) / span;
  return s.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

inline double ema_lambda(long step, const TrainSchedule& s) { return ema_lambda(step, s.total_steps, s.ema_start, s.ema_end); }
inline double weight_decay(long step, const TrainSchedule& s) { return weight_decay(step, s.total_steps, s.wd_start, s.wd_end); }

/// teacher <- lambda * teacher + (1 - lambda) * student, entrywise.
template <typename S>
void ema_update(EncoderParams<S>& teacher, const EncoderParams<S>& student, double lambda) {
  require(lambda >= 0.0 && lambda <= 1.0, ErrorCode::invalid_argument, "EMA lambda must lie in [0, 1]");
  check_same_layout(teacher, student);
  if (lambda == 1.0) return;
  const S l = static_cast<S>(lambda), r = static_cast<S>(1.0 - lambda);
  teacher.zip(student, [&](const std::string&, Matrix<S>& t, const Matrix<S>& s) { t = l * t + r * s; });
}

template <typename S>
S global_norm(const EncoderParams<S>& g) {
  double sq = 0;
  g.for_each([&](const std::string&, const Matrix<S>& m) { sq += static_cast<double>(m.squaredNorm()); });
  return static_cast<S>(std::sqrt(sq));
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
template <typename S>
S clip_global_norm(EncoderParams<S>& g, S max_norm) {
  const S norm = global_norm(g);
  if (norm > max_norm && norm > S(0)) {
    const S scale = max_norm / norm;
    g.for_each([&](const std::string&, Matrix<S>& m) { m *= scale; });
  }
  return norm;
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamWState {
  EncoderParams<S> m, v;
  long t = 0;
};

template <typename S>
AdamWState<S> make_adamw_state(const EncoderParams<S>& params) {
  return {params.zeros_like(), params.zeros_like(), 0};
}

/// One decoupled-weight-decay Adam step; decay skips exempt arrays.
template <typename S>
void adamw_step(EncoderParams<S>& params, const EncoderParams<S>& grads, AdamWState<S>& state, double lr, double wd,
                const AdamWConfig& cfg = {}) {
  ++state.t;
  const S b1 = S(cfg.beta1), b2 = S(cfg.beta2), eps = S(cfg.eps);
  const S bc1 = S(1.0 - std::pow(cfg.beta1, static_cast<double>(state.t)));
  const S bc2 = S(1.0 - std::pow(cfg.beta2, static_cast<double>(state.t)));
  const S step = S(lr);
  std::vector<const Matrix<S>*> g;
  std::vector<Matrix<S>*> m, v;
  grads.for_each([&](const std::string&, const Matrix<S>& a) { g.push_back(&a); });
  state.m.for_each([&](const std::string&, Matrix<S>& a) { m.push_back(&a); });
  state.v.for_each([&](const std::string&, Matrix<S>& a) { v.push_back(&a); });
  std::size_t i = 0;
  params.for_each([&](const std::string& name, Matrix<S>& p) {
    Matrix<S>& mi = *m[i];
    Matrix<S>& vi = *v[i];
    const Matrix<S>& gi = *g[i];
    ++i;
    mi = b1 * mi + (S(1) - b1) * gi;
    vi = b2 * vi + (S(1) - b2) * gi.cwiseProduct(gi);
    if (!is_decay_exempt(name) && wd > 0) p *= S(1) - step * S(wd);
    p.array() -= step * (mi.array() / bc1) / ((vi.array() / bc2).sqrt() + eps);
  });
}

}  // namespace synclr
