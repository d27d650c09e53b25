#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <sstream>

#include "grad_check.hpp"
#include "oracles.hpp"
#include "synclr/procedural_renderer.hpp"
#include "synclr/trainer.hpp"

using namespace synclr;
namespace fs = std::filesystem;

namespace {

const char* const kConcepts[] = {"red fox", "oak tree", "sailboat", "teapot", "kit fox", "lighthouse"};

DatasetStore small_store(std::size_t groups, std::size_t k, int size = 16) {
  DatasetStore store;
  for (std::size_t g = 0; g < groups; ++g) {
    CaptionGroup group;
    group.caption_id = 100 + g;
    group.caption = std::string("a photo of a ") + kConcepts[g % 6];
    for (std::size_t i = 0; i < k; ++i)
      group.images.push_back(procedural_render(concept_signature(kConcepts[g % 6]), g * 31 + i, size));
    store.add(std::move(group));
  }
  return store;
}

TrainConfig small_config(long steps = 4) {
  TrainConfig c;
  c.encoder.image_size = 16;
  c.encoder.patch = 8;
  c.encoder.width = 16;
  c.encoder.depth = 1;
  c.encoder.heads = 2;
  c.encoder.mlp_hidden = 24;
  c.encoder.head_hidden = 32;
  c.encoder.projection_dim = 8;
  c.encoder.prototype_dim = 8;
  c.encoder.prototypes = 6;
  c.crops.global_size = 16;
  c.crops.local_size = 8;
  c.crops.local_count = 2;
  c.captions_per_batch = 2;
  c.schedule = TrainSchedule::for_steps(steps, 1e-3);
  c.seed = 5;
  return c;
}

template <typename S>
bool bit_equal(const EncoderParams<S>& a, const EncoderParams<S>& b) {
  bool same = true;
  EncoderParams<S> copy = a;
  copy.zip(b, [&](const std::string&, Matrix<S>& x, const Matrix<S>& y) {
    same = same && x.rows() == y.rows() && x.cols() == y.cols() &&
           std::memcmp(x.data(), y.data(), sizeof(S) * static_cast<std::size_t>(x.size())) == 0;
  });
  return same;
}

double max_abs(const Matrix<double>& m) { return m.size() ? m.cwiseAbs().maxCoeff() : 0.0; }

StepViews views_for(const DatasetStore& store, const TrainConfig& cfg, long step = 0) {
  const CaptionBatch batch = batch_for_step(store, cfg, step);
  return build_views(batch.images, batch.caption_ids, cfg, step_seed(cfg, step));
}

TrainConfig parse_ini(const std::string& text) {
  std::istringstream in(text);
  boost::property_tree::ptree tree;
  boost::property_tree::ini_parser::read_ini(in, tree);
  return parse_train_config(tree, "/base");
}

const char* const kFullIni = R"([data]
shards = shards
captions_per_batch = 4
[model]
image_size = 16
patch = 8
width = 16
depth = 1
heads = 2
mlp_hidden = 24
head_hidden = 32
projection_dim = 8
prototype_dim = 8
prototypes = 6
[crops]
global_size = 16
local_size = 8
local_count = 3
global_views = 2
[objective]
temperature = 0.2
ibot_weight = 0.5
positives = image
[schedule]
total_steps = 2000
peak_lr = 0.002
ema_override = 0.5
[train]
seed = 11
out_dir = out
workers = 2
)";

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error raised";
  return ErrorCode::invalid_argument;
}

}  // namespace

TEST(TrainConfigFile, ParsesEverySection) {
  const TrainConfig c = parse_ini(kFullIni);
  EXPECT_EQ(c.shards, fs::path("/base/shards"));
  EXPECT_EQ(c.out_dir, fs::path("/base/out"));
  EXPECT_EQ(c.captions_per_batch, 4u);
  EXPECT_EQ(c.encoder.width, 16);
  EXPECT_EQ(c.encoder.prototypes, 6);
  EXPECT_EQ(c.crops.local_count, 3);
  EXPECT_EQ(c.global_views, 2);
  EXPECT_DOUBLE_EQ(c.objective.temperature, 0.2);
  EXPECT_DOUBLE_EQ(c.objective.ibot_weight, 0.5);
  EXPECT_EQ(c.objective.positives, PositiveGranularity::Image);
  EXPECT_EQ(c.schedule.total_steps, 2000);
  EXPECT_DOUBLE_EQ(c.schedule.peak_lr, 0.002);
  ASSERT_TRUE(c.ema_override.has_value());
  EXPECT_DOUBLE_EQ(*c.ema_override, 0.5);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.workers, 2u);
}

TEST(TrainConfigFile, WarmupAndRampScaleWithTotalSteps) {
  const TrainConfig c = parse_ini(kFullIni);
  const TrainSchedule ref = TrainSchedule::for_steps(2000, 0.002);
  EXPECT_EQ(c.schedule.warmup_steps, ref.warmup_steps);
  EXPECT_DOUBLE_EQ(c.schedule.ibot_ramp_steps, ref.ibot_ramp_steps);
  EXPECT_DOUBLE_EQ(c.schedule.ibot_ramp_steps, 16.0);
}

TEST(TrainConfigFile, ExplicitWarmupWins) {
  std::string text = kFullIni;
  text.replace(text.find("peak_lr"), 0, "warmup_steps = 7\n");
  EXPECT_EQ(parse_ini(text).schedule.warmup_steps, 7);
}

TEST(TrainConfigFile, UnknownSectionOrKeyIsDataError) {
  EXPECT_EQ(code_of([] { parse_ini("[bogus]\nx = 1\n"); }), ErrorCode::data);
  EXPECT_EQ(code_of([] { parse_ini("[model]\nwidht = 16\n"); }), ErrorCode::data);
}

TEST(TrainConfigFile, BadValuesAreDataErrors) {
  EXPECT_EQ(code_of([] { parse_ini("[model]\nwidth = wide\n"); }), ErrorCode::data);
  EXPECT_EQ(code_of([] { parse_ini("[model]\nwidth = 16.5\n"); }), ErrorCode::data);
  EXPECT_EQ(code_of([] { parse_ini("[model]\npositional_embedding = maybe\n"); }), ErrorCode::data);
  EXPECT_EQ(code_of([] { parse_ini("[objective]\npositives = group\n"); }), ErrorCode::data);
}

TEST(TrainConfigFile, InconsistentConfigIsRejected) {
  EXPECT_EQ(code_of([] { parse_ini("[crops]\nglobal_size = 24\n"); }), ErrorCode::invalid_argument);
  EXPECT_EQ(code_of([] { parse_ini("[schedule]\nema_override = 1.5\n"); }), ErrorCode::invalid_argument);
}

TEST(TrainConfigFile, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_train_config("/nonexistent/train.ini"); }), ErrorCode::io);
}

TEST(TrainConfigFile, ShippedSampleConfigLoads) {
  const TrainConfig c = load_train_config(fs::path(SYNCLR_DATA_DIR) / "configs" / "toy4.ini");
  EXPECT_EQ(c.schedule.total_steps, 2000);
  EXPECT_DOUBLE_EQ(c.schedule.peak_lr, 1e-3);
}

TEST(Views, CountsAndMasks) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.global_views = 2;
  const StepViews v = views_for(store, cfg);
  EXPECT_EQ(v.globals.size(), 8u);
  EXPECT_EQ(v.locals.size(), 4u * 2u);
  EXPECT_EQ(v.local_count, 2);
  EXPECT_EQ(v.masks.flagged_count(), 4u);
  for (std::size_t i = 0; i < v.globals.size(); i += 2) EXPECT_EQ(v.global_ids[i], v.global_ids[i + 1]);
}

TEST(Views, ImagePositivesUseImageIndex) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.objective.positives = PositiveGranularity::Image;
  const StepViews v = views_for(store, cfg);
  for (std::size_t i = 0; i < v.global_ids.size(); ++i) EXPECT_EQ(v.global_ids[i], i);
}

TEST(Views, MatchMatrixIsBlockStructured) {
  const DatasetStore store = small_store(4, 3);
  TrainConfig cfg = small_config();
  cfg.captions_per_batch = 3;
  const StepViews v = views_for(store, cfg);
  const Matrix<double> m = match_matrix<double>(v.global_ids, v.global_ids);
  ASSERT_EQ(m.rows(), 9);
  for (Eigen::Index i = 0; i < 9; ++i)
    for (Eigen::Index k = 0; k < 9; ++k) EXPECT_EQ(m(i, k), i / 3 == k / 3 ? 1.0 : 0.0) << i << "," << k;
}

TEST(Objective, SingleCaptionTwoImagesMatchesOracle) {
  const DatasetStore store = small_store(1, 2);
  TrainConfig cfg = small_config();
  cfg.captions_per_batch = 1;
  cfg.crops.local_count = 0;
  cfg.objective.ibot_weight = 0;
  const Encoder<double> enc(cfg.encoder);
  EncoderParams<double> student = init_params<double>(cfg.encoder, 3);
  testing_util::jitter_params(student, 0.05, 4);
  EncoderParams<double> teacher = init_params<double>(cfg.encoder, 8);
  const StepViews v = views_for(store, cfg);
  const auto eval = evaluate_objective<double>(enc, student, teacher, v, cfg.objective, 0.1, false);

  auto embed = [&](const EncoderParams<double>& p) {
    Matrix<double> s(2, cfg.encoder.width);
    for (int i = 0; i < 2; ++i) s.row(i) = enc.encode(p, v.globals[static_cast<std::size_t>(i)]).summary;
    const Matrix<double> z = project_contrastive(p, s);
    testing_util::Rows rows(2);
    for (int i = 0; i < 2; ++i) rows[static_cast<std::size_t>(i)].assign(z.row(i).data(), z.row(i).data() + z.cols());
    return rows;
  };
  const std::vector<std::uint64_t> ids = {100, 100};
  const double want = testing_util::multi_positive_oracle(embed(student), embed(teacher), ids, ids,
                                                         cfg.objective.temperature);
  EXPECT_NEAR(eval.loss.global, want, 1e-10);
  EXPECT_NEAR(eval.loss.total, want, 1e-10);
}

TEST(Objective, NoLocalsNoIbotGivesGlobalTermOnly) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.crops.local_count = 0;
  cfg.objective.ibot_weight = 0;
  const Encoder<double> enc(cfg.encoder);
  const auto p = init_params<double>(cfg.encoder, 1);
  const auto eval = evaluate_objective<double>(enc, p, p, views_for(store, cfg), cfg.objective, 0.1);
  EXPECT_TRUE(eval.loss.locals.empty());
  EXPECT_EQ(eval.loss.ibot, 0.0);
  EXPECT_EQ(eval.loss.total, eval.loss.global);
}

TEST(Objective, TotalIsGlobalPlusMeanLocalPlusIbot) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.crops.local_count = 3;
  cfg.objective.ibot_weight = 0.7;
  const Encoder<double> enc(cfg.encoder);
  auto s = init_params<double>(cfg.encoder, 1);
  testing_util::jitter_params(s, 0.05, 2);
  const auto t = init_params<double>(cfg.encoder, 9);
  const auto eval = evaluate_objective<double>(enc, s, t, views_for(store, cfg), cfg.objective, 0.1, false);
  ASSERT_EQ(eval.loss.locals.size(), 3u);
  EXPECT_GT(eval.loss.ibot, 0.0);
  double mean = 0;
  for (double l : eval.loss.locals) mean += l / 3.0;
  EXPECT_NEAR(eval.loss.total, eval.loss.global + mean + eval.loss.ibot, 1e-10);
}

TEST(Objective, IbotOffLeavesPrototypeHeadWithoutGradient) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.objective.ibot_weight = 0;
  const Encoder<double> enc(cfg.encoder);
  const auto p = init_params<double>(cfg.encoder, 1);
  const auto eval = evaluate_objective<double>(enc, p, p, views_for(store, cfg), cfg.objective, 0.1);
  EXPECT_EQ(max_abs(eval.grads.pro_w1), 0.0);
  EXPECT_EQ(max_abs(eval.grads.pro_w2), 0.0);
  EXPECT_EQ(max_abs(eval.grads.prototypes), 0.0);
  EXPECT_EQ(max_abs(eval.grads.mask_token), 0.0);
  EXPECT_GT(max_abs(eval.grads.con_w1), 0.0);
}

TEST(Objective, GradientMatchesFiniteDifferences) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config();
  cfg.objective.ibot_weight = 0.5;
  const Encoder<double> enc(cfg.encoder);
  auto s = init_params<double>(cfg.encoder, 1);
  testing_util::jitter_params(s, 0.05, 2);
  const auto t = init_params<double>(cfg.encoder, 9);
  const StepViews v = views_for(store, cfg);
  const auto eval = evaluate_objective<double>(enc, s, t, v, cfg.objective, 0.1);
  const auto report = testing_util::check_gradients(
      s, eval.grads, [&] { return evaluate_objective<double>(enc, s, t, v, cfg.objective, 0.1, false).loss.total; },
      80, 17);
  EXPECT_LT(report.max_rel_error, 1e-4) << report.worst;
}

TEST(Objective, WorkersMatchSerialEvaluation) {
  const DatasetStore store = small_store(4, 2);
  const TrainConfig cfg = small_config();
  const Encoder<double> enc(cfg.encoder);
  const auto p = init_params<double>(cfg.encoder, 1);
  const StepViews v = views_for(store, cfg);
  const auto a = evaluate_objective<double>(enc, p, p, v, cfg.objective, 0.1, true, 1);
  const auto b = evaluate_objective<double>(enc, p, p, v, cfg.objective, 0.1, true, 3);
  EXPECT_EQ(a.loss.total, b.loss.total);
  double worst = 0;
  EncoderParams<double> ga = a.grads;
  ga.zip(b.grads, [&](const std::string&, Matrix<double>& x, const Matrix<double>& y) {
    worst = std::max(worst, max_abs(x - y));
  });
  EXPECT_LT(worst, 1e-12);
}

TEST(Training, ZeroStepsReturnsInitialState) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config(0);
  cfg.schedule.total_steps = 0;
  const TrainState s = run_training(store, cfg);
  const TrainState init = init_state(cfg);
  EXPECT_EQ(s.step, 0);
  EXPECT_TRUE(bit_equal(s.student, init.student));
  EXPECT_TRUE(bit_equal(s.teacher, init.student));
}

TEST(Training, SameSeedIsBitIdentical) {
  const DatasetStore store = small_store(4, 2);
  const TrainConfig cfg = small_config(4);
  const TrainState a = run_training(store, cfg), b = run_training(store, cfg);
  EXPECT_TRUE(bit_equal(a.student, b.student));
  EXPECT_TRUE(bit_equal(a.teacher, b.teacher));
  TrainConfig other = cfg;
  other.seed = 6;
  EXPECT_FALSE(bit_equal(a.student, run_training(store, other).student));
}

TEST(Training, MultipleWorkersAreDeterministic) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config(3);
  cfg.workers = 3;
  EXPECT_TRUE(bit_equal(run_training(store, cfg).student, run_training(store, cfg).student));
}

TEST(Training, ResumeFromCheckpointMatchesUninterruptedRun) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config(6);
  cfg.checkpoint_every = 3;
  std::optional<TrainState> mid;
  RunOptions opts;
  opts.on_checkpoint = [&](const TrainState& s) { mid = s; };
  const TrainState full = run_training(store, cfg, opts);
  ASSERT_TRUE(mid.has_value());
  EXPECT_EQ(mid->step, 3);

  const fs::path path = fs::temp_directory_path() / "synclr_resume_test.ck";
  write_checkpoint(to_checkpoint(*mid, cfg), path);
  RunOptions resume;
  resume.resume = from_checkpoint(read_checkpoint(path), cfg);
  const TrainState resumed = run_training(store, cfg, resume);
  fs::remove(path);
  EXPECT_EQ(resumed.step, 6);
  EXPECT_TRUE(bit_equal(resumed.student, full.student));
  EXPECT_TRUE(bit_equal(resumed.teacher, full.teacher));
}

TEST(Training, LambdaOneFreezesTeacher) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config(3);
  cfg.ema_override = 1.0;
  const TrainState init = init_state(cfg);
  const TrainState s = run_training(store, cfg);
  EXPECT_TRUE(bit_equal(s.teacher, init.teacher));
  EXPECT_FALSE(bit_equal(s.student, init.student));
}

TEST(Training, LambdaZeroCopiesStudent) {
  const DatasetStore store = small_store(4, 2);
  TrainConfig cfg = small_config(2);
  cfg.ema_override = 0.0;
  const TrainState s = run_training(store, cfg);
  EXPECT_TRUE(bit_equal(s.teacher, s.student));
}

TEST(Training, MetricsFollowSchedules) {
  const DatasetStore store = small_store(4, 2);
  const TrainConfig cfg = small_config(4);
  std::vector<StepMetrics> seen;
  RunOptions opts;
  opts.on_step = [&](const StepMetrics& m) { seen.push_back(m); };
  run_training(store, cfg, opts);
  ASSERT_EQ(seen.size(), 4u);
  for (std::size_t t = 0; t < 4; ++t) {
    const auto& m = seen[t];
    EXPECT_EQ(m.step, static_cast<long>(t));
    EXPECT_DOUBLE_EQ(m.lr, learning_rate(m.step, cfg.schedule));
    EXPECT_DOUBLE_EQ(m.lambda, ema_lambda(m.step, cfg.schedule));
    EXPECT_DOUBLE_EQ(m.wd, weight_decay(m.step, cfg.schedule));
    EXPECT_NEAR(m.loss.total, m.loss.global + m.loss.local_mean + m.loss.ibot, 1e-10);
    const auto j = m.to_json();
    EXPECT_EQ(j.at("step").get<long>(), m.step);
    EXPECT_DOUBLE_EQ(j.at("loss").get<double>(), m.loss.total);
  }
}

TEST(Training, PrototypesStayUnitNorm) {
  const DatasetStore store = small_store(4, 2);
  const TrainState s = run_training(store, small_config(3));
  for (Eigen::Index r = 0; r < s.student.prototypes.rows(); ++r)
    EXPECT_NEAR(s.student.prototypes.row(r).norm(), 1.0f, 1e-5f);
}

TEST(Training, NonFiniteParametersAbortWithPreStepSnapshot) {
  const DatasetStore store = small_store(4, 2);
  const TrainConfig cfg = small_config(4);
  const Encoder<float> enc(cfg.encoder);
  TrainState s = init_state(cfg);
  s.student.con_w2(0, 0) = std::numeric_limits<float>::quiet_NaN();
  const TrainState before = s;
  try {
    train_step(s, batch_for_step(store, cfg, 0), cfg, enc);
    FAIL() << "expected NumericalAbort";
  } catch (const NumericalAbort& e) {
    EXPECT_EQ(e.code(), ErrorCode::numerical);
    EXPECT_EQ(e.snapshot().step, 0);
    EXPECT_TRUE(bit_equal(e.snapshot().teacher, before.teacher));
  }
}

TEST(Training, StepPastTotalIsRejected) {
  const DatasetStore store = small_store(4, 2);
  const TrainConfig cfg = small_config(1);
  const Encoder<float> enc(cfg.encoder);
  TrainState s = init_state(cfg);
  train_step(s, batch_for_step(store, cfg, 0), cfg, enc);
  EXPECT_THROW(train_step(s, batch_for_step(store, cfg, 1), cfg, enc), Error);
}

TEST(Training, BatchLargerThanStoreIsRejected) {
  const DatasetStore store = small_store(1, 2);
  EXPECT_THROW(run_training(store, small_config(1)), Error);
}

TEST(Checkpointing, MismatchedEncoderIsRejected) {
  const TrainConfig cfg = small_config(2);
  const Checkpoint ck = to_checkpoint(init_state(cfg), cfg);
  EXPECT_EQ(ck.extra.at("seed").get<std::uint64_t>(), 5u);
  TrainConfig wider = cfg;
  wider.encoder.width = 32;
  EXPECT_EQ(code_of([&] { from_checkpoint(ck, wider); }), ErrorCode::data);
  Checkpoint bare = ck;
  bare.teacher.reset();
  EXPECT_EQ(code_of([&] { from_checkpoint(bare, cfg); }), ErrorCode::data);
}
