// synclr: pipeline stages as subcommands.
//
// Exit codes: 0 success, 1 usage error, 2 data/config/IO error,
// 3 numerical abort.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "synclr/caption_engine.hpp"
#include "synclr/checkpoint.hpp"
#include "synclr/concept_catalog.hpp"
#include "synclr/dataset_store.hpp"
#include "synclr/generator_gateway.hpp"
#include "synclr/pipeline.hpp"
#include "synclr/png_io.hpp"
#include "synclr/probe.hpp"
#include "synclr/schedules.hpp"
#include "synclr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace synclr;

namespace {

constexpr int kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3;

const std::vector<std::string> kCommands = {"synth-captions", "synth-images",  "train",
                                            "probe",          "dump-schedules", "inspect-shard"};

struct Globals {
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool trace = false;
  bool log_json = false;
};

std::shared_ptr<spdlog::logger> g_log;
bool g_json = false;

void setup_logging(bool json_mode) {
  g_json = json_mode;
  g_log = std::make_shared<spdlog::logger>("synclr", std::make_shared<spdlog::sinks::stderr_sink_st>());
  if (json_mode)
    g_log->set_pattern(R"({"ts":"%Y-%m-%dT%H:%M:%S.%e","level":"%l","message":%v})");
  else
    g_log->set_pattern("[%l] %v");
}

std::string payload(const std::string& msg) { return g_json ? json(msg).dump() : msg; }
void log_info(const std::string& msg) { g_log->info(payload(msg)); }
void log_warn(const std::string& msg) { g_log->warn(payload(msg)); }
void log_error(const std::string& msg) { g_log->error(payload(msg)); }

Logger library_logger() {
  return [](const std::string& level, const std::string& msg) {
    if (level == "warn") log_warn(msg);
    else log_info(msg);
  };
}

TraceSink trace_sink(bool enabled) {
  if (!enabled) return {};
  return [](const json& event) { std::cerr << json{{"trace", event}}.dump() << "\n"; };
}

std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// First positional token, skipping global flags and their values.
std::optional<std::string> first_positional(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--seed" || a == "--workers") {
      ++i;
      continue;
    }
    if (a.starts_with("-")) continue;
    return a;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------

struct SynthCaptionsArgs {
  fs::path catalog, bank, out, policy, backgrounds, relations;
  std::string backend = "mock", endpoint;
  std::size_t count = 0;
  bool resume = false;
  double rate = 0;
};

int run_synth_captions(const SynthCaptionsArgs& a, const Globals& g) {
  std::optional<SamplingPolicy> policy;
  if (!a.policy.empty()) policy = load_policy(a.policy);
  ConceptCatalog catalog = load_catalog(a.catalog, policy);
  const ExampleBank bank = load_example_bank(a.bank);
  const BackgroundLibrary backgrounds = a.backgrounds.empty() ? BackgroundLibrary{} : load_backgrounds(a.backgrounds);
  const RelationLexicon relations = a.relations.empty() ? RelationLexicon{} : load_relations(a.relations);
  reconcile_backgrounds(catalog, backgrounds);

  std::unique_ptr<TextGenerator> backend;
  if (a.backend == "mock") {
    backend = std::make_unique<MockTextBackend>();
  } else {
    require(!a.endpoint.empty(), ErrorCode::invalid_argument, "--endpoint is required for --backend api");
    RemoteConfig rc;
    rc.endpoint = a.endpoint;
    auto limiter = a.rate > 0 ? std::make_shared<TokenBucket>(a.rate, std::max(1.0, a.rate)) : nullptr;
    backend = std::make_unique<RemoteTextBackend>(rc, limiter, trace_sink(g.trace));
  }

  SynthesisOptions opt;
  opt.count = a.count;
  opt.seed = g.seed;
  opt.workers = g.workers;
  std::unordered_set<std::string> seen;
  if (a.resume && fs::exists(a.out)) {
    for (const auto& r : read_caption_store(a.out)) {
      require(r.seed >= g.seed, ErrorCode::data, "existing caption store was produced with a different --seed");
      opt.start_attempt = std::max<std::size_t>(opt.start_attempt, static_cast<std::size_t>(r.seed - g.seed) + 1);
      seen.insert(r.dedup_key);
    }
    log_info("resuming at attempt " + std::to_string(opt.start_attempt) + " with " + std::to_string(seen.size()) +
             " stored captions");
  }
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  std::ofstream out(a.out, a.resume ? std::ios::app : std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot write " + a.out.string());

  const CaptionSources src{catalog, bank, backgrounds, relations};
  const SynthesisStats stats = synthesize_captions(
      src, *backend, opt, seen, [&](const CaptionRecord& r) { out << to_json(r).dump() << "\n"; },
      library_logger());
  out.flush();
  require(out.good(), ErrorCode::io, "write to " + a.out.string() + " failed");
  std::cout << json{{"attempts", stats.attempts},
                    {"emitted", stats.emitted},
                    {"duplicates", stats.duplicates},
                    {"backend_failures", stats.backend_failures},
                    {"parse_failures", stats.parse_failures},
                    {"templates",
                     {{"concept", stats.template_counts[0]},
                      {"concept_background", stats.template_counts[1]},
                      {"concept_relation", stats.template_counts[2]}}}}
                   .dump()
            << "\n";
  return kExitOk;
}

struct SynthImagesArgs {
  fs::path captions, out_shards;
  std::string backend = "mock", endpoint;
  std::size_t per_shard = 256;
  int images_per_caption = kDefaultImagesPerCaption;
  int size = 32;
  double cfg_scale = kDefaultCfgScale;
};

int run_synth_images(const SynthImagesArgs& a, const Globals& g) {
  const auto records = read_caption_store(a.captions);
  require(!records.empty(), ErrorCode::data, "caption store is empty: " + a.captions.string());
  ImageBackendOptions opt;
  opt.images_per_caption = a.images_per_caption;
  opt.size = a.size;
  opt.cfg_scale = a.cfg_scale;
  std::unique_ptr<ImageGenerator> backend;
  if (a.backend == "mock") {
    backend = std::make_unique<ProceduralImageBackend>(opt);
  } else {
    require(!a.endpoint.empty(), ErrorCode::invalid_argument, "--endpoint is required for --backend api");
    RemoteConfig rc;
    rc.endpoint = a.endpoint;
    backend = std::make_unique<RemoteImageBackend>(rc, opt, nullptr, trace_sink(g.trace));
  }
  const auto groups = render_groups(records, *backend, g.seed, g.workers);
  const auto paths = write_dataset(groups, group_index(records), a.out_shards, a.per_shard);
  log_info("wrote " + std::to_string(groups.size()) + " caption groups to " + std::to_string(paths.size()) +
           " shard(s) in " + a.out_shards.string());
  std::cout << json{{"groups", groups.size()}, {"shards", paths.size()}, {"images_per_caption", a.images_per_caption},
                    {"cfg_scale", a.cfg_scale}}
                   .dump()
            << "\n";
  return kExitOk;
}

struct TrainArgs {
  fs::path config, resume, out;
  bool deterministic = false;
};

int run_train(const TrainArgs& a, const Globals& g, bool seed_given, bool workers_given) {
  TrainConfig cfg = load_train_config(a.config);
  if (seed_given) cfg.seed = g.seed;
  if (workers_given) cfg.workers = g.workers;
  if (a.deterministic) cfg.workers = 1;
  if (!a.out.empty()) cfg.out_dir = a.out;
  require(!cfg.shards.empty(), ErrorCode::data, "config lacks data.shards");
  const DatasetStore store = load_store(cfg.shards);
  if (store.images_per_group() < 2)
    log_warn("one image per caption: each anchor has only its own teacher view as positive");
  fs::create_directories(cfg.out_dir);

  RunOptions opts;
  if (!a.resume.empty()) {
    opts.resume = from_checkpoint(read_checkpoint(a.resume), cfg);
    log_info("resuming from step " + std::to_string(opts.resume->step));
  }
  std::ofstream metrics(cfg.out_dir / "metrics.jsonl", opts.resume ? std::ios::app : std::ios::trunc);
  require(metrics.good(), ErrorCode::io, "cannot write metrics in " + cfg.out_dir.string());
  const long log_every = std::max(1L, cfg.schedule.total_steps / 20);
  opts.on_step = [&](const StepMetrics& m) {
    metrics << m.to_json().dump() << "\n";
    if (m.step % log_every == 0)
      log_info("step " + std::to_string(m.step) + " loss " + std::to_string(m.loss.total) + " (global " +
               std::to_string(m.loss.global) + ", ibot " + std::to_string(m.loss.ibot) + ")");
  };
  opts.on_checkpoint = [&](const TrainState& s) {
    char name[64];
    std::snprintf(name, sizeof(name), "checkpoint-%07ld.ck", s.step);
    write_checkpoint(to_checkpoint(s, cfg), cfg.out_dir / name);
  };
  try {
    const TrainState final_state = run_training(store, cfg, std::move(opts));
    write_checkpoint(to_checkpoint(final_state, cfg), cfg.out_dir / "final.ck");
  } catch (const NumericalAbort& e) {
    const fs::path snap = cfg.out_dir / ("abort-" + std::to_string(e.snapshot().step) + ".ck");
    write_checkpoint(to_checkpoint(e.snapshot(), cfg), snap);
    log_error(std::string(e.what()) + "; pre-step state saved to " + snap.string());
    return kExitNumerical;
  }
  log_info("wrote " + (cfg.out_dir / "final.ck").string());
  return kExitOk;
}

struct ProbeArgs {
  fs::path checkpoint, shards, out;
  std::size_t grid_size = 45;
  bool teacher = false;
};

int run_probe_cmd(const ProbeArgs& a, const Globals& g) {
  const Checkpoint ck = read_checkpoint(a.checkpoint);
  const DatasetStore store = load_store(a.shards);
  const auto index = read_index(a.shards / kIndexFileName);
  const LabeledImages data = label_store(store, index);
  require(!a.teacher || ck.teacher, ErrorCode::data, "checkpoint has no teacher weights");
  const Encoder<float> enc(ck.config);
  const EncoderParams<float>& params = a.teacher ? *ck.teacher : ck.student;
  const ProbeResult r = run_probe(enc, params, data, g.seed, log_grid(a.grid_size), g.workers);
  json report = r.to_json();
  report["checkpoint"] = a.checkpoint.string();
  report["step"] = ck.step;
  report["classes"] = data.class_names;
  report["weights"] = a.teacher ? "teacher" : "student";
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  std::ofstream out(a.out, std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot write " + a.out.string());
  out << report.dump(2) << "\n";
  if (r.unconverged() > 0)
    log_warn(std::to_string(r.unconverged()) + " grid point(s) hit the iteration cap before convergence");
  log_info("test accuracy " + std::to_string(r.test_accuracy) + " at l2 " + std::to_string(r.l2));
  return kExitOk;
}

struct DumpSchedulesArgs {
  long steps = 1000;
  std::optional<long> warmup;
  double peak_lr = 1e-3;
  std::string format = "csv";
};

int run_dump_schedules(const DumpSchedulesArgs& a) {
  TrainSchedule s = TrainSchedule::for_steps(a.steps, a.peak_lr);
  if (a.warmup) s.warmup_steps = *a.warmup;
  s.validate();
  if (a.format == "csv") std::cout << "step,ema_lambda,learning_rate,weight_decay,ibot_temperature\n";
  for (long t = 0; t <= s.total_steps; ++t) {
    const double lam = ema_lambda(t, s), lr = learning_rate(t, s), wd = weight_decay(t, s),
                 tau = ibot_student_temperature(t, s);
    if (a.format == "csv")
      std::cout << fmt::format("{},{:.17g},{:.17g},{:.17g},{:.17g}\n", t, lam, lr, wd, tau);
    else
      std::cout << json{{"step", t}, {"ema_lambda", lam}, {"learning_rate", lr}, {"weight_decay", wd},
                        {"ibot_temperature", tau}}
                       .dump()
                << "\n";
  }
  return kExitOk;
}

struct InspectArgs {
  fs::path shard, dump_png;
  std::size_t limit = 10;
};

int run_inspect(const InspectArgs& a) {
  ShardSummary s;
  const auto groups = read_shard(a.shard, &s);
  json out = {{"version", s.version}, {"images_per_group", s.images_per_group}, {"height", s.height},
              {"width", s.width},     {"groups", s.group_count},             {"crc64", fmt::format("{:016x}", s.checksum)},
              {"bytes", s.bytes}};
  json sample = json::array();
  for (std::size_t i = 0; i < std::min(a.limit, groups.size()); ++i)
    sample.push_back({{"caption_id", groups[i].caption_id}, {"caption", groups[i].caption}});
  out["sample"] = sample;
  if (!a.dump_png.empty()) {
    fs::create_directories(a.dump_png);
    std::size_t written = 0;
    for (std::size_t i = 0; i < std::min(a.limit, groups.size()); ++i)
      for (std::size_t k = 0; k < groups[i].images.size(); ++k) {
        write_png(groups[i].images[k], a.dump_png / fmt::format("{:06d}_{}.png", groups[i].caption_id, k));
        ++written;
      }
    out["png_written"] = written;
  }
  std::cout << out.dump(2) << "\n";
  return kExitOk;
}

int exit_code_for(const Error& e) { return e.code() == ErrorCode::numerical ? kExitNumerical : kExitData; }

}  // namespace

int main(int argc, char** argv) {
  if (auto pos = first_positional(argc, argv);
      pos && std::find(kCommands.begin(), kCommands.end(), *pos) == kCommands.end()) {
    const auto best = std::min_element(kCommands.begin(), kCommands.end(), [&](const auto& x, const auto& y) {
      return edit_distance(*pos, x) < edit_distance(*pos, y);
    });
    std::cerr << "error: unknown subcommand '" << *pos << "'; did you mean '" << *best << "'?\n"
              << "run 'synclr --help' for the list of subcommands\n";
    return kExitUsage;
  }

  CLI::App app{"synclr: synthetic caption/image generation, multi-positive training and linear probing.\n"
               "Exit codes: 0 success, 1 usage error, 2 data/config/IO error, 3 numerical abort."};
  app.require_subcommand(1);
  Globals g;
  auto* seed_opt = app.add_option("--seed", g.seed, "Base seed")->capture_default_str();
  auto* workers_opt =
      app.add_option("--workers", g.workers, "Stage-internal parallelism (1 is deterministic)")->check(CLI::PositiveNumber);
  app.add_flag("--trace", g.trace, "Log backend requests and responses as JSON lines on stderr");
  app.add_flag("--log-json", g.log_json, "Structured JSON logs on stderr");

  SynthCaptionsArgs sc;
  auto* c_sc = app.add_subcommand("synth-captions", "Synthesize captions from a concept catalog (exit 0/1/2)");
  c_sc->add_option("--catalog", sc.catalog, "Catalog file (source<TAB>concept)")->required()->check(CLI::ExistingFile);
  c_sc->add_option("--bank", sc.bank, "In-context example directory")->required()->check(CLI::ExistingDirectory);
  c_sc->add_option("--backend", sc.backend, "Text backend")->check(CLI::IsMember({"mock", "api"}))->capture_default_str();
  c_sc->add_option("--count", sc.count, "Number of synthesis attempts")->required()->check(CLI::PositiveNumber);
  c_sc->add_option("--out", sc.out, "Caption store (JSON lines)")->required();
  c_sc->add_option("--policy", sc.policy, "Source sampling weights (source = weight)")->check(CLI::ExistingFile);
  c_sc->add_option("--backgrounds", sc.backgrounds, "Background list directory")->check(CLI::ExistingDirectory);
  c_sc->add_option("--relations", sc.relations, "Relation lexicon file")->check(CLI::ExistingFile);
  c_sc->add_option("--endpoint", sc.endpoint, "Text API endpoint URL (api backend)");
  c_sc->add_option("--rate-limit", sc.rate, "Requests per second (api backend, 0 = unlimited)");
  c_sc->add_flag("--resume", sc.resume, "Append to an existing store, continuing after its last attempt");

  SynthImagesArgs si;
  auto* c_si = app.add_subcommand("synth-images", "Render caption groups into shards (exit 0/1/2)");
  c_si->add_option("--captions", si.captions, "Caption store")->required()->check(CLI::ExistingFile);
  c_si->add_option("--backend", si.backend, "Image backend")->check(CLI::IsMember({"mock", "api"}))->capture_default_str();
  c_si->add_option("--out-shards", si.out_shards, "Output directory")->required();
  c_si->add_option("--per-shard", si.per_shard, "Caption groups per shard")->check(CLI::PositiveNumber)->capture_default_str();
  c_si->add_option("--images-per-caption", si.images_per_caption, "Images per caption")->check(CLI::PositiveNumber)->capture_default_str();
  c_si->add_option("--size", si.size, "Image side in pixels")->check(CLI::Range(8, 4096))->capture_default_str();
  c_si->add_option("--cfg-scale", si.cfg_scale, "Guidance scale (metadata for mock)")->check(CLI::PositiveNumber)->capture_default_str();
  c_si->add_option("--endpoint", si.endpoint, "Image API endpoint URL (api backend)");

  TrainArgs tr;
  auto* c_tr = app.add_subcommand("train", "Train student/teacher encoders (exit 0/1/2/3)");
  c_tr->add_option("--config", tr.config, "Training config (INI)")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--resume", tr.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  c_tr->add_option("--out", tr.out, "Output directory (overrides train.out_dir)");
  c_tr->add_flag("--deterministic", tr.deterministic, "Force single-worker execution");

  ProbeArgs pr;
  auto* c_pr = app.add_subcommand("probe", "Linear probe on frozen features (exit 0/1/2)");
  c_pr->add_option("--checkpoint", pr.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_pr->add_option("--shards", pr.shards, "Shard directory with index.jsonl")->required()->check(CLI::ExistingDirectory);
  c_pr->add_option("--grid-size", pr.grid_size, "Number of l2 constants in [1e-6, 1e5]")->check(CLI::PositiveNumber)->capture_default_str();
  c_pr->add_option("--out", pr.out, "Report JSON")->required();
  c_pr->add_flag("--teacher", pr.teacher, "Probe the teacher instead of the student");

  DumpSchedulesArgs ds;
  long ds_warmup = -1;
  auto* c_ds = app.add_subcommand("dump-schedules", "Print per-step schedules (exit 0/1)");
  c_ds->add_option("--steps", ds.steps, "Total steps")->check(CLI::PositiveNumber)->capture_default_str();
  c_ds->add_option("--warmup", ds_warmup, "Warmup steps (default 16% of total)");
  c_ds->add_option("--peak-lr", ds.peak_lr, "Peak learning rate")->capture_default_str();
  c_ds->add_option("--format", ds.format, "Output format")->check(CLI::IsMember({"csv", "jsonl"}))->capture_default_str();

  InspectArgs in;
  auto* c_in = app.add_subcommand("inspect-shard", "Validate and summarize a shard (exit 0/1/2)");
  c_in->add_option("--shard", in.shard, "Shard file")->required()->check(CLI::ExistingFile);
  c_in->add_option("--dump-png", in.dump_png, "Write the listed groups' images as PNG into this directory");
  c_in->add_option("--limit", in.limit, "Groups to list")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }
  setup_logging(g.log_json);
  try {
    if (c_sc->parsed()) return run_synth_captions(sc, g);
    if (c_si->parsed()) return run_synth_images(si, g);
    if (c_tr->parsed()) return run_train(tr, g, seed_opt->count() > 0, workers_opt->count() > 0);
    if (c_pr->parsed()) return run_probe_cmd(pr, g);
    if (c_ds->parsed()) {
      if (ds_warmup >= 0) ds.warmup = ds_warmup;
      return run_dump_schedules(ds);
    }
    if (c_in->parsed()) return run_inspect(in);
  } catch (const Error& e) {
    log_error(std::string(to_string(e.code())) + ": " + e.what());
    return exit_code_for(e);
  } catch (const std::filesystem::filesystem_error& e) {
    log_error(std::string("io: ") + e.what());
    return kExitData;
  } catch (const std::exception& e) {
    log_error(e.what());
    return kExitData;
  }
  return kExitUsage;
}
