#pragma once

// Training orchestration: views and masks per batch, student/teacher
// forward passes, the multi-crop objective, gradients, optimizer and EMA.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <nlohmann/json.hpp>

#include "synclr/checkpoint.hpp"
#include "synclr/dataset_store.hpp"
#include "synclr/encoder.hpp"
#include "synclr/objectives.hpp"
#include "synclr/parallel.hpp"
#include "synclr/schedules.hpp"
#include "synclr/text.hpp"
#include "synclr/view_pipeline.hpp"

namespace synclr {

enum class PositiveGranularity { Caption, Image };

struct ObjectiveConfig {
  double temperature = kDefaultContrastiveTemperature;
  double ibot_weight = 1.0;
  SinkhornConfig sinkhorn;
  PositiveGranularity positives = PositiveGranularity::Caption;
  double mask_image_ratio = 0.5;
  double mask_token_ratio = 0.5;
};

struct TrainConfig {
  std::filesystem::path shards;
  std::filesystem::path out_dir = "run";
  std::size_t captions_per_batch = 8;
  EncoderConfig encoder;
  CropParams crops;
  int global_views = 1;
  ObjectiveConfig objective;
  TrainSchedule schedule = TrainSchedule::for_steps(1000);
  std::optional<double> ema_override;  // fixed lambda instead of the cosine schedule
  double clip_norm = 3.0;
  std::uint64_t seed = 0;
  long checkpoint_every = 0;  // 0: only the final checkpoint
  std::size_t workers = 1;

  void validate() const {
    require(captions_per_batch >= 1, ErrorCode::invalid_argument, "captions_per_batch must be >= 1");
    require(global_views >= 1, ErrorCode::invalid_argument, "global_views must be >= 1");
    require(objective.temperature > 0 && objective.ibot_weight >= 0, ErrorCode::invalid_argument,
            "invalid objective settings");
    require(!ema_override || (*ema_override >= 0 && *ema_override <= 1), ErrorCode::invalid_argument,
            "ema override must lie in [0, 1]");
    require(crops.global_size == encoder.image_size, ErrorCode::invalid_argument,
            "global crop size must equal the encoder input size");
    require(crops.global_size % encoder.patch == 0 && crops.local_size % encoder.patch == 0,
            ErrorCode::invalid_argument, "crop sizes must be divisible by the patch size");
    crops.validate();
    encoder.validate();
    if (schedule.total_steps > 0) schedule.validate();
  }
};

/// Crops and masks for one step; global views are image-major.
struct StepViews {
  std::vector<Image> globals;
  std::vector<std::uint64_t> global_ids;
  std::vector<Image> locals;  // image-major, local_count per image
  std::vector<std::uint64_t> local_ids;
  std::vector<int> local_slot;  // which of the n local crops
  int local_count = 0;
  MaskPlan masks;  // over global views
};

inline StepViews build_views(const std::vector<const Image*>& images, const std::vector<std::uint64_t>& caption_ids,
                             const TrainConfig& cfg, std::uint64_t step_seed) {
  StepViews v;
  v.local_count = cfg.crops.local_count;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const std::uint64_t id =
        cfg.objective.positives == PositiveGranularity::Caption ? caption_ids[i] : static_cast<std::uint64_t>(i);
    for (int g = 0; g < cfg.global_views; ++g) {
      Rng rng(derive_seed(step_seed, 0x56494557, i, g));
      CropParams p = cfg.crops;
      p.local_count = g == 0 ? cfg.crops.local_count : 0;
      CropSet set = make_crops(*images[i], p, rng, id);
      v.globals.push_back(std::move(set.global_crop));
      v.global_ids.push_back(id);
      for (int l = 0; l < static_cast<int>(set.local_crops.size()); ++l) {
        v.locals.push_back(std::move(set.local_crops[static_cast<std::size_t>(l)]));
        v.local_ids.push_back(id);
        v.local_slot.push_back(l);
      }
    }
  }
  Rng mask_rng(derive_seed(step_seed, 0x4D41534B));
  v.masks = plan_masks(v.globals.size(), static_cast<std::size_t>(cfg.encoder.patches_for(cfg.crops.global_size)),
                       mask_rng, cfg.objective.mask_image_ratio, cfg.objective.mask_token_ratio);
  return v;
}

struct LossBreakdown {
  double total = 0;
  double global = 0;
  std::vector<double> locals;
  double local_mean = 0;
  double ibot = 0;  // already multiplied by the iBOT weight
  std::size_t clamped = 0;
  std::size_t masked_rows = 0;
};

template <typename S>
struct LossEvaluation {
  LossBreakdown loss;
  EncoderParams<S> grads;
};

namespace detail {

template <typename S>
Matrix<S> stack_rows(const std::vector<RowVector<S>>& rows, Eigen::Index cols) {
  Matrix<S> m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i];
  return m;
}

}  // namespace detail

/// Evaluates the multi-crop objective for fixed views and returns the loss
/// breakdown plus gradients w.r.t. the student parameters. The teacher is
/// treated as a constant.
template <typename S>
LossEvaluation<S> evaluate_objective(const Encoder<S>& enc, const EncoderParams<S>& student,
                                     const EncoderParams<S>& teacher, const StepViews& views,
                                     const ObjectiveConfig& obj, double ibot_student_tau, bool want_grads = true,
                                     std::size_t workers = 1) {
  const auto& cfg = enc.config();
  const Eigen::Index d = cfg.width;
  const std::size_t G = views.globals.size(), L = views.locals.size();
  const S tau = S(obj.temperature);
  const bool use_ibot = obj.ibot_weight > 0 && views.masks.flagged_count() > 0;

  // Teacher: candidates from clean global views, patch logits at masked slots.
  std::vector<RowVector<S>> t_summary(G);
  std::vector<Matrix<S>> t_masked_patches(G);
  parallel_for(G, workers, [&](std::size_t, std::size_t i) {
    const TokenOutput<S> out = enc.encode(teacher, views.globals[i]);
    t_summary[i] = out.summary;
    if (use_ibot && views.masks.masked_image_flags[i]) {
      const auto& idx = views.masks.masked_tokens[i];
      Matrix<S> rows(static_cast<Eigen::Index>(idx.size()), d);
      for (std::size_t r = 0; r < idx.size(); ++r)
        rows.row(static_cast<Eigen::Index>(r)) = out.patch_tokens.row(static_cast<Eigen::Index>(idx[r]));
      t_masked_patches[i] = std::move(rows);
    }
  });
  const Matrix<S> candidates = project_contrastive(teacher, detail::stack_rows(t_summary, d));

  // Student: clean global views and local views.
  std::vector<EncodeCache<S>> g_cache(want_grads ? G : 0), l_cache(want_grads ? L : 0);
  std::vector<RowVector<S>> s_global(G), s_local(L);
  parallel_for(G + L, workers, [&](std::size_t, std::size_t i) {
    if (i < G) {
      s_global[i] = enc.encode(student, views.globals[i], nullptr, want_grads ? &g_cache[i] : nullptr).summary;
    } else {
      const std::size_t j = i - G;
      s_local[j] = enc.encode(student, views.locals[j], nullptr, want_grads ? &l_cache[j] : nullptr).summary;
    }
  });

  LossEvaluation<S> eval;
  if (want_grads) eval.grads = student.zeros_like();
  LossBreakdown& lb = eval.loss;

  ContrastiveCache<S> g_head;
  const Matrix<S> anchors_g = project_contrastive(student, detail::stack_rows(s_global, d), &g_head);
  const auto global_loss = contrastive_loss<S>(anchors_g, candidates, views.global_ids, views.global_ids, tau);
  lb.global = static_cast<double>(global_loss.loss);
  lb.clamped += global_loss.clamped;

  Matrix<S> d_local_anchors;
  ContrastiveCache<S> l_head;
  if (L > 0) {
    const Matrix<S> anchors_l = project_contrastive(student, detail::stack_rows(s_local, d), &l_head);
    d_local_anchors = Matrix<S>::Zero(anchors_l.rows(), anchors_l.cols());
    const S inv_n = S(1) / S(views.local_count);
    for (int slot = 0; slot < views.local_count; ++slot) {
      std::vector<Eigen::Index> rows;
      std::vector<std::uint64_t> ids;
      for (std::size_t j = 0; j < L; ++j)
        if (views.local_slot[j] == slot) {
          rows.push_back(static_cast<Eigen::Index>(j));
          ids.push_back(views.local_ids[j]);
        }
      Matrix<S> a(static_cast<Eigen::Index>(rows.size()), anchors_l.cols());
      for (std::size_t r = 0; r < rows.size(); ++r) a.row(static_cast<Eigen::Index>(r)) = anchors_l.row(rows[r]);
      const auto res = contrastive_loss<S>(a, candidates, ids, views.global_ids, tau);
      lb.locals.push_back(static_cast<double>(res.loss));
      lb.clamped += res.clamped;
      for (std::size_t r = 0; r < rows.size(); ++r)
        d_local_anchors.row(rows[r]) = res.d_anchors.row(static_cast<Eigen::Index>(r)) * inv_n;
    }
  }

  // Masked patch prediction on the flagged global views.
  std::vector<std::size_t> flagged;
  std::vector<EncodeCache<S>> m_cache;
  PrototypeCache<S> p_head;
  Matrix<S> d_student_logits;
  if (use_ibot) {
    for (std::size_t i = 0; i < G; ++i)
      if (views.masks.masked_image_flags[i]) flagged.push_back(i);
    m_cache.resize(flagged.size());
    std::vector<Matrix<S>> s_masked(flagged.size());
    parallel_for(flagged.size(), workers, [&](std::size_t, std::size_t f) {
      const std::size_t i = flagged[f];
      const auto& idx = views.masks.masked_tokens[i];
      const TokenOutput<S> out = enc.encode(student, views.globals[i], &idx, want_grads ? &m_cache[f] : nullptr);
      Matrix<S> rows(static_cast<Eigen::Index>(idx.size()), d);
      for (std::size_t r = 0; r < idx.size(); ++r)
        rows.row(static_cast<Eigen::Index>(r)) = out.patch_tokens.row(static_cast<Eigen::Index>(idx[r]));
      s_masked[f] = std::move(rows);
    });
    Eigen::Index R = 0;
    for (const auto& m : s_masked) R += m.rows();
    Matrix<S> s_rows(R, d), t_rows(R, d);
    Eigen::Index off = 0;
    for (std::size_t f = 0; f < flagged.size(); ++f) {
      const Eigen::Index n = s_masked[f].rows();
      s_rows.middleRows(off, n) = s_masked[f];
      t_rows.middleRows(off, n) = t_masked_patches[flagged[f]];
      off += n;
    }
    const Matrix<S> teacher_logits = project_prototypes(teacher, t_rows, cfg.normalize_prototype_input);
    const Matrix<S> targets = sinkhorn_targets(teacher_logits, obj.sinkhorn);
    const Matrix<S> student_logits = project_prototypes(student, s_rows, cfg.normalize_prototype_input, &p_head);
    const auto ib = ibot_loss<S>(student_logits, targets, S(ibot_student_tau));
    lb.ibot = obj.ibot_weight * static_cast<double>(ib.loss);
    lb.masked_rows = static_cast<std::size_t>(R);
    d_student_logits = ib.d_logits * S(obj.ibot_weight);
  }

  lb.local_mean = 0;
  for (double l : lb.locals) lb.local_mean += l;
  if (!lb.locals.empty()) lb.local_mean /= static_cast<double>(lb.locals.size());
  lb.total = lb.global + lb.local_mean + lb.ibot;
  if (!want_grads) return eval;

  // Backward. Per-image encoder gradients are accumulated per worker and
  // reduced in worker order.
  const Matrix<S> d_sum_g = project_contrastive_backward(student, g_head, global_loss.d_anchors, eval.grads);
  Matrix<S> d_sum_l;
  if (L > 0) d_sum_l = project_contrastive_backward(student, l_head, d_local_anchors, eval.grads);
  Matrix<S> d_masked_rows;
  if (use_ibot) d_masked_rows = project_prototypes_backward(student, p_head, d_student_logits, eval.grads);

  std::vector<Eigen::Index> masked_offset(flagged.size());
  {
    Eigen::Index off = 0;
    for (std::size_t f = 0; f < flagged.size(); ++f) {
      masked_offset[f] = off;
      off += static_cast<Eigen::Index>(views.masks.masked_tokens[flagged[f]].size());
    }
  }
  const std::size_t jobs = G + L + flagged.size();
  const std::size_t nworkers = std::max<std::size_t>(1, std::min(workers, jobs));
  std::vector<EncoderParams<S>> partial(nworkers > 1 ? nworkers : 0);
  for (auto& p : partial) p = student.zeros_like();
  parallel_for(jobs, nworkers, [&](std::size_t w, std::size_t job) {
    EncoderParams<S>& acc = nworkers > 1 ? partial[w] : eval.grads;
    if (job < G + L) {
      const bool global = job < G;
      const std::size_t i = global ? job : job - G;
      const EncodeCache<S>& c = global ? g_cache[i] : l_cache[i];
      Matrix<S> dt = Matrix<S>::Zero(c.patches.rows() + 1, d);
      const Matrix<S>& d_sum = global ? d_sum_g : d_sum_l;
      dt.row(0) = d_sum.row(static_cast<Eigen::Index>(i));
      enc.backward(student, c, dt, acc);
    } else {
      const std::size_t f = job - G - L;
      const auto& idx = views.masks.masked_tokens[flagged[f]];
      const EncodeCache<S>& c = m_cache[f];
      Matrix<S> dt = Matrix<S>::Zero(c.patches.rows() + 1, d);
      for (std::size_t r = 0; r < idx.size(); ++r)
        dt.row(static_cast<Eigen::Index>(idx[r]) + 1) = d_masked_rows.row(masked_offset[f] + static_cast<Eigen::Index>(r));
      enc.backward(student, c, dt, acc);
    }
  });
  for (auto& p : partial)
    eval.grads.zip(p, [](const std::string&, Matrix<S>& a, const Matrix<S>& b) { a += b; });
  return eval;
}

struct StepMetrics {
  long step = 0;
  LossBreakdown loss;
  double lambda = 0, lr = 0, wd = 0, ibot_tau = 0, grad_norm = 0;

  nlohmann::json to_json() const {
    return {{"step", step},           {"loss", loss.total},       {"global", loss.global},
            {"local", loss.local_mean}, {"locals", loss.locals},  {"ibot", loss.ibot},
            {"lambda", lambda},       {"lr", lr},                 {"wd", wd},
            {"ibot_tau", ibot_tau},   {"grad_norm", grad_norm},   {"clamped", loss.clamped},
            {"masked_rows", loss.masked_rows}};
  }
};

struct TrainState {
  long step = 0;
  EncoderParams<float> student;
  EncoderParams<float> teacher;
  AdamWState<float> optimizer;
};

inline TrainState init_state(const TrainConfig& cfg) {
  TrainState s;
  s.student = init_params<float>(cfg.encoder, cfg.seed);
  s.teacher = s.student;
  s.optimizer = make_adamw_state(s.student);
  return s;
}

/// Raised when a step produces non-finite values; carries the pre-step state.
class NumericalAbort : public Error {
 public:
  NumericalAbort(const std::string& what, TrainState snapshot)
      : Error(ErrorCode::numerical, what), snapshot_(std::move(snapshot)) {}
  const TrainState& snapshot() const { return snapshot_; }

 private:
  TrainState snapshot_;
};

inline std::uint64_t step_seed(const TrainConfig& cfg, long step) {
  return derive_seed(cfg.seed, 0x53544550, static_cast<std::uint64_t>(step));
}

inline StepMetrics train_step(TrainState& state, const CaptionBatch& batch, const TrainConfig& cfg,
                              const Encoder<float>& enc) {
  const long t = state.step;
  const TrainSchedule& sched = cfg.schedule;
  require(t < sched.total_steps, ErrorCode::invalid_argument, "training already reached total_steps");
  StepMetrics m;
  m.step = t;
  m.lr = learning_rate(t, sched);
  m.wd = weight_decay(t, sched);
  m.lambda = cfg.ema_override ? *cfg.ema_override : ema_lambda(t, sched);
  m.ibot_tau = ibot_student_temperature(t, sched);

  const StepViews views = build_views(batch.images, batch.caption_ids, cfg, step_seed(cfg, t));
  LossEvaluation<float> eval;
  try {
    eval = evaluate_objective<float>(enc, state.student, state.teacher, views, cfg.objective, m.ibot_tau, true,
                                     cfg.workers);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::degenerate && e.code() != ErrorCode::numerical) throw;
    throw NumericalAbort(std::string(e.what()) + " at step " + std::to_string(t), state);
  }
  m.loss = eval.loss;
  if (!std::isfinite(m.loss.total)) throw NumericalAbort("non-finite loss at step " + std::to_string(t), state);
  try {
    check_finite(eval.grads, "gradient");
  } catch (const Error& e) {
    throw NumericalAbort(e.what(), state);
  }
  m.grad_norm = clip_global_norm(eval.grads, static_cast<float>(cfg.clip_norm));

  TrainState before = state;
  adamw_step(state.student, eval.grads, state.optimizer, m.lr, m.wd);
  renormalize_prototypes(state.student);
  ema_update(state.teacher, state.student, m.lambda);
  try {
    check_finite(state.student, "student");
    check_finite(state.teacher, "teacher");
  } catch (const Error& e) {
    throw NumericalAbort(e.what(), std::move(before));
  }
  ++state.step;
  return m;
}

inline CaptionBatch batch_for_step(const DatasetStore& store, const TrainConfig& cfg, long step) {
  Rng rng(derive_seed(cfg.seed, 0x42415443, static_cast<std::uint64_t>(step)));
  return sample_batch(store, cfg.captions_per_batch, rng);
}

inline Checkpoint to_checkpoint(const TrainState& s, const TrainConfig& cfg) {
  Checkpoint ck;
  ck.config = cfg.encoder;
  ck.step = s.step;
  ck.extra = {{"seed", cfg.seed}, {"total_steps", cfg.schedule.total_steps}};
  ck.student = s.student;
  ck.teacher = s.teacher;
  ck.optimizer = s.optimizer;
  return ck;
}

inline TrainState from_checkpoint(const Checkpoint& ck, const TrainConfig& cfg) {
  require(ck.config.width == cfg.encoder.width && ck.config.depth == cfg.encoder.depth &&
              ck.config.patch == cfg.encoder.patch && ck.config.prototypes == cfg.encoder.prototypes,
          ErrorCode::data, "checkpoint encoder does not match the training config");
  require(ck.teacher && ck.optimizer, ErrorCode::data, "checkpoint lacks teacher or optimizer state");
  TrainState s;
  s.step = ck.step;
  s.student = ck.student;
  s.teacher = *ck.teacher;
  s.optimizer = *ck.optimizer;
  return s;
}

using MetricsSink = std::function<void(const StepMetrics&)>;

struct RunOptions {
  std::optional<TrainState> resume;
  MetricsSink on_step;
  std::function<void(const TrainState&)> on_checkpoint;
};

/// Trains until total_steps; returns the final state.
inline TrainState run_training(const DatasetStore& store, const TrainConfig& cfg, RunOptions opts = {}) {
  cfg.validate();
  const Encoder<float> enc(cfg.encoder);
  TrainState state = opts.resume ? std::move(*opts.resume) : init_state(cfg);
  while (state.step < cfg.schedule.total_steps) {
    const CaptionBatch batch = batch_for_step(store, cfg, state.step);
    const StepMetrics m = train_step(state, batch, cfg, enc);
    if (opts.on_step) opts.on_step(m);
    if (opts.on_checkpoint && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 &&
        state.step < cfg.schedule.total_steps)
      opts.on_checkpoint(state);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Config file: INI sections [data] [model] [crops] [objective] [schedule] [train]

inline TrainConfig parse_train_config(const boost::property_tree::ptree& tree,
                                      const std::filesystem::path& base_dir = {}) {
  TrainConfig c;
  long total_steps = 1000;
  std::optional<long> warmup;
  std::optional<double> ramp;
  double peak_lr = 1e-3;
  TrainSchedule sched;

  using Setter = std::function<void(const std::string&)>;
  auto to_bool = [](const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    fail(ErrorCode::data, "expected a boolean, got '" + v + "'");
  };
  auto num = [](const std::string& v) {
    std::size_t used = 0;
    double x = 0;
    try {
      x = std::stod(v, &used);
    } catch (const std::logic_error&) {
      used = 0;
    }
    require(used == v.size() && !v.empty(), ErrorCode::data, "expected a number, got '" + v + "'");
    return x;
  };
  auto integer = [&](const std::string& v) {
    const double x = num(v);
    require(x == std::floor(x), ErrorCode::data, "expected an integer, got '" + v + "'");
    return static_cast<long>(x);
  };
  std::map<std::string, std::map<std::string, Setter>> keys = {
      {"data",
       {{"shards", [&](const std::string& v) { c.shards = base_dir / v; }},
        {"captions_per_batch", [&](const std::string& v) { c.captions_per_batch = static_cast<std::size_t>(integer(v)); }}}},
      {"model",
       {{"image_size", [&](const std::string& v) { c.encoder.image_size = static_cast<int>(integer(v)); }},
        {"patch", [&](const std::string& v) { c.encoder.patch = static_cast<int>(integer(v)); }},
        {"width", [&](const std::string& v) { c.encoder.width = static_cast<int>(integer(v)); }},
        {"depth", [&](const std::string& v) { c.encoder.depth = static_cast<int>(integer(v)); }},
        {"heads", [&](const std::string& v) { c.encoder.heads = static_cast<int>(integer(v)); }},
        {"mlp_hidden", [&](const std::string& v) { c.encoder.mlp_hidden = static_cast<int>(integer(v)); }},
        {"head_hidden", [&](const std::string& v) { c.encoder.head_hidden = static_cast<int>(integer(v)); }},
        {"projection_dim", [&](const std::string& v) { c.encoder.projection_dim = static_cast<int>(integer(v)); }},
        {"prototype_dim", [&](const std::string& v) { c.encoder.prototype_dim = static_cast<int>(integer(v)); }},
        {"prototypes", [&](const std::string& v) { c.encoder.prototypes = static_cast<int>(integer(v)); }},
        {"positional_embedding", [&](const std::string& v) { c.encoder.positional_embedding = to_bool(v); }},
        {"normalize_prototype_input", [&](const std::string& v) { c.encoder.normalize_prototype_input = to_bool(v); }}}},
      {"crops",
       {{"global_size", [&](const std::string& v) { c.crops.global_size = static_cast<int>(integer(v)); }},
        {"local_size", [&](const std::string& v) { c.crops.local_size = static_cast<int>(integer(v)); }},
        {"local_count", [&](const std::string& v) { c.crops.local_count = static_cast<int>(integer(v)); }},
        {"global_views", [&](const std::string& v) { c.global_views = static_cast<int>(integer(v)); }},
        {"global_area_min", [&](const std::string& v) { c.crops.global_area_min = num(v); }},
        {"global_area_max", [&](const std::string& v) { c.crops.global_area_max = num(v); }},
        {"local_area_min", [&](const std::string& v) { c.crops.local_area_min = num(v); }},
        {"local_area_max", [&](const std::string& v) { c.crops.local_area_max = num(v); }},
        {"aspect_min", [&](const std::string& v) { c.crops.aspect_min = num(v); }},
        {"aspect_max", [&](const std::string& v) { c.crops.aspect_max = num(v); }},
        {"flip_probability", [&](const std::string& v) { c.crops.flip_probability = num(v); }},
        {"brightness", [&](const std::string& v) { c.crops.brightness = num(v); }}}},
      {"objective",
       {{"temperature", [&](const std::string& v) { c.objective.temperature = num(v); }},
        {"ibot_weight", [&](const std::string& v) { c.objective.ibot_weight = num(v); }},
        {"sinkhorn_iterations", [&](const std::string& v) { c.objective.sinkhorn.iterations = static_cast<int>(integer(v)); }},
        {"teacher_temperature", [&](const std::string& v) { c.objective.sinkhorn.teacher_temperature = num(v); }},
        {"mask_image_ratio", [&](const std::string& v) { c.objective.mask_image_ratio = num(v); }},
        {"mask_token_ratio", [&](const std::string& v) { c.objective.mask_token_ratio = num(v); }},
        {"positives",
         [&](const std::string& v) {
           if (v == "caption") c.objective.positives = PositiveGranularity::Caption;
           else if (v == "image") c.objective.positives = PositiveGranularity::Image;
           else fail(ErrorCode::data, "positives must be 'caption' or 'image'");
         }}}},
      {"schedule",
       {{"total_steps", [&](const std::string& v) { total_steps = integer(v); }},
        {"warmup_steps", [&](const std::string& v) { warmup = integer(v); }},
        {"peak_lr", [&](const std::string& v) { peak_lr = num(v); }},
        {"ema_start", [&](const std::string& v) { sched.ema_start = num(v); }},
        {"ema_end", [&](const std::string& v) { sched.ema_end = num(v); }},
        {"ema_override", [&](const std::string& v) { c.ema_override = num(v); }},
        {"ibot_tau_start", [&](const std::string& v) { sched.ibot_tau_start = num(v); }},
        {"ibot_tau_end", [&](const std::string& v) { sched.ibot_tau_end = num(v); }},
        {"ibot_ramp_steps", [&](const std::string& v) { ramp = num(v); }},
        {"wd_start", [&](const std::string& v) { sched.wd_start = num(v); }},
        {"wd_end", [&](const std::string& v) { sched.wd_end = num(v); }}}},
      {"train",
       {{"seed", [&](const std::string& v) { c.seed = static_cast<std::uint64_t>(integer(v)); }},
        {"out_dir", [&](const std::string& v) { c.out_dir = base_dir / v; }},
        {"checkpoint_every", [&](const std::string& v) { c.checkpoint_every = integer(v); }},
        {"clip_norm", [&](const std::string& v) { c.clip_norm = num(v); }},
        {"workers", [&](const std::string& v) { c.workers = static_cast<std::size_t>(integer(v)); }}}},
  };

  for (const auto& [section, node] : tree) {
    auto sit = keys.find(section);
    require(sit != keys.end() && !node.empty(), ErrorCode::data, "unknown config section '" + section + "'");
    for (const auto& [key, value] : node) {
      auto kit = sit->second.find(key);
      require(kit != sit->second.end(), ErrorCode::data, "unknown config key '" + section + "." + key + "'");
      try {
        kit->second(text::trim(value.data()));
      } catch (const Error& e) {
        fail(ErrorCode::data, section + "." + key + ": " + e.what());
      }
    }
  }
  const TrainSchedule scaled = TrainSchedule::for_steps(std::max(total_steps, 1L), peak_lr);
  sched.total_steps = total_steps;
  sched.warmup_steps = warmup.value_or(total_steps > 0 ? scaled.warmup_steps : 0);
  sched.ibot_ramp_steps = ramp.value_or(scaled.ibot_ramp_steps);
  sched.peak_lr = peak_lr;
  c.schedule = sched;
  c.validate();
  return c;
}

inline TrainConfig load_train_config(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::io, "config not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorCode::data, std::string("malformed config: ") + e.what());
  }
  return parse_train_config(tree, path.parent_path());
}

}  // namespace synclr
