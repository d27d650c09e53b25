#pragma once

// Text and image generation backends: deterministic offline mocks plus HTTP
// clients for remote services, sharing one retry policy and rate limiter.

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
// resolv.h (via httplib) defines _res, which collides with Eigen internals.
#ifdef _res
#undef _res
#endif
#include <nlohmann/json.hpp>

#include "synclr/caption_engine.hpp"
#include "synclr/error.hpp"
#include "synclr/image.hpp"
#include "synclr/procedural_renderer.hpp"
#include "synclr/random.hpp"

namespace synclr {

inline constexpr double kDefaultCfgScale = 2.5;
inline constexpr int kDefaultImagesPerCaption = 4;

struct RetryPolicy {
  int attempts = 3;
  std::vector<double> backoff_seconds = {1.0, 4.0, 16.0};
  double jitter_fraction = 0.25;

  static RetryPolicy immediate(int attempts = 3) { return {attempts, {0.0}, 0.0}; }
};

using Sleeper = std::function<void(double seconds)>;

inline void real_sleep(double seconds) {
  if (seconds > 0) std::this_thread::sleep_for(std::chrono::duration<double>(seconds));
}

/// Calls `fn` until it succeeds, a non-retryable error occurs, or the
/// attempt budget is spent; the last error is rethrown.
template <typename Fn>
auto with_retries(const RetryPolicy& policy, std::uint64_t jitter_seed, Fn&& fn,
                  const Sleeper& sleep = real_sleep) -> decltype(fn()) {
  Rng rng(jitter_seed);
  for (int attempt = 0;; ++attempt) {
    try {
      return fn();
    } catch (const Error& e) {
      if (!e.retryable() || attempt + 1 >= policy.attempts) throw;
      const auto& b = policy.backoff_seconds;
      const double base =
          b.empty() ? 0.0 : b[std::min<std::size_t>(static_cast<std::size_t>(attempt), b.size() - 1)];
      sleep(base * (1.0 + policy.jitter_fraction * rng.uniform(-1.0, 1.0)));
    }
  }
}

/// Thread-safe token bucket; `acquire` blocks until a token is available.
class TokenBucket {
 public:
  TokenBucket(double rate_per_second, double capacity)
      : rate_(rate_per_second), capacity_(capacity), tokens_(capacity),
        last_(std::chrono::steady_clock::now()) {}

  void acquire() {
    for (;;) {
      double wait = 0.0;
      {
        std::lock_guard lock(mu_);
        refill();
        if (tokens_ >= 1.0) {
          tokens_ -= 1.0;
          return;
        }
        wait = (1.0 - tokens_) / rate_;
      }
      real_sleep(wait);
    }
  }

  bool try_acquire() {
    std::lock_guard lock(mu_);
    refill();
    if (tokens_ < 1.0) return false;
    tokens_ -= 1.0;
    return true;
  }

 private:
  void refill() {
    const auto now = std::chrono::steady_clock::now();
    const double dt = std::chrono::duration<double>(now - last_).count();
    tokens_ = std::min(capacity_, tokens_ + dt * rate_);
    last_ = now;
  }

  std::mutex mu_;
  double rate_, capacity_, tokens_;
  std::chrono::steady_clock::time_point last_;
};

using TraceSink = std::function<void(const nlohmann::json& event)>;

// ---------------------------------------------------------------------------
// Text

/// Deterministic caption grammar keyed on the query line and seed.
class MockTextBackend final : public TextGenerator {
 public:
  std::string generate(const PromptText& prompt, std::uint64_t seed) override {
    return compose(prompt.kind, prompt.concept_name, prompt.extra, seed);
  }

  static std::string compose(TemplateKind kind, const std::string& concept_name,
                             const std::string& extra, std::uint64_t seed) {
    static const char* kDet[] = {"The", "One", "A single", "This"};
    static const char* kAdj[] = {"weathered", "bright",  "small",    "gleaming", "quiet",
                                 "rustic",    "vivid",   "dusty",    "elegant",  "sturdy",
                                 "curious",   "tiny",    "majestic", "faded",    "polished",
                                 "colorful",  "lonely",  "ancient",  "playful",  "shadowy"};
    static const char* kVerb[] = {"rests",      "stands",   "waits",        "appears",
                                  "sits",       "glows",    "lingers",      "is displayed",
                                  "is framed",  "is shown", "is captured",  "is placed",
                                  "is visible", "leans",    "is highlighted"};
    static const char* kPlace[] = {"under soft morning light", "on a quiet street",
                                   "beside an open window",    "at the edge of a field",
                                   "in warm evening light",    "on a wooden table",
                                   "against a pale wall",      "in a crowded market",
                                   "near a calm river",        "beneath a cloudy sky",
                                   "in a sunlit garden",       "inside a small studio",
                                   "along a dusty road",       "on a stone ledge",
                                   "in dim lamplight"};
    static const char* kObject[] = {"an old wooden crate", "a stack of books",   "a red door",
                                    "a glass vase",        "a mossy rock",       "a metal bench",
                                    "a potted plant",      "a brick wall",       "a folded blanket",
                                    "a wicker basket",     "a tall lamp",        "a painted fence",
                                    "a narrow staircase",  "a silver kettle",    "a round mirror"};
    Rng rng(derive_seed(seed, stable_hash(concept_name), stable_hash(extra)));
    auto pick = [&](const auto& words) { return std::string(words[rng.uniform_index(std::size(words))]); };

    std::string out = pick(kDet) + " " + pick(kAdj);
    if (rng.bernoulli(0.5)) out += ", " + pick(kAdj);
    out += " " + concept_name + " " + pick(kVerb) + " ";
    switch (kind) {
      case TemplateKind::ConceptOnly: out += pick(kPlace); break;
      case TemplateKind::ConceptBackground: out += "in the " + extra + " " + pick(kPlace); break;
      case TemplateKind::ConceptRelation: out += extra + " " + pick(kObject); break;
    }
    return out + ".";
  }
};

struct HttpEndpoint {
  std::string base;  // scheme://host[:port]
  std::string path;
};

inline HttpEndpoint parse_endpoint(const std::string& url) {
  const auto scheme = url.find("://");
  require(scheme != std::string::npos, ErrorCode::invalid_argument, "endpoint must be a URL: " + url);
  const auto slash = url.find('/', scheme + 3);
  if (slash == std::string::npos) return {url, "/"};
  return {url.substr(0, slash), url.substr(slash)};
}

struct RemoteConfig {
  std::string endpoint;
  std::string api_key;
  nlohmann::json sampling = nlohmann::json::object();  // passed through verbatim
  double timeout_seconds = 30.0;
  RetryPolicy retry;
};

namespace detail {

inline std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v ? std::string(v) : fallback;
}

inline nlohmann::json post_json(const RemoteConfig& cfg, const nlohmann::json& body,
                                const TraceSink& trace) {
  const HttpEndpoint ep = parse_endpoint(cfg.endpoint);
  httplib::Client client(ep.base);
  const auto secs = static_cast<time_t>(cfg.timeout_seconds);
  const auto usecs = static_cast<time_t>((cfg.timeout_seconds - static_cast<double>(secs)) * 1e6);
  client.set_connection_timeout(secs, usecs);
  client.set_read_timeout(secs, usecs);
  httplib::Headers headers;
  if (!cfg.api_key.empty()) headers.emplace("Authorization", "Bearer " + cfg.api_key);
  const std::string payload = body.dump();
  if (trace) trace({{"event", "request"}, {"url", cfg.endpoint}, {"body", body}});
  auto res = client.Post(ep.path, headers, payload, "application/json");
  if (!res) {
    const auto err = res.error();
    if (err == httplib::Error::Read || err == httplib::Error::Write)
      fail(ErrorCode::timeout, "request to " + cfg.endpoint + " timed out");
    fail(ErrorCode::transport, "request to " + cfg.endpoint + " failed: " + httplib::to_string(err));
  }
  if (trace) trace({{"event", "response"}, {"url", cfg.endpoint}, {"status", res->status}});
  if (res->status == 429) fail(ErrorCode::quota, "quota exceeded at " + cfg.endpoint);
  if (res->status >= 500) fail(ErrorCode::transport, "server error " + std::to_string(res->status));
  if (res->status != 200)
    fail(ErrorCode::data, "unexpected status " + std::to_string(res->status) + " from " + cfg.endpoint);
  try {
    return nlohmann::json::parse(res->body);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, std::string("malformed response body: ") + e.what());
  }
}

}  // namespace detail

/// POSTs {prompt, seed, sampling} and expects {"text": ...}.
class RemoteTextBackend final : public TextGenerator {
 public:
  explicit RemoteTextBackend(RemoteConfig cfg, std::shared_ptr<TokenBucket> limiter = nullptr,
                             TraceSink trace = {}, Sleeper sleep = real_sleep)
      : cfg_(std::move(cfg)), limiter_(std::move(limiter)), trace_(std::move(trace)),
        sleep_(std::move(sleep)) {
    if (cfg_.api_key.empty()) cfg_.api_key = detail::env_or("SYNCLR_TEXT_API_KEY", "");
  }

  std::string generate(const PromptText& prompt, std::uint64_t seed) override {
    const nlohmann::json body = {{"prompt", prompt.text}, {"seed", seed}, {"sampling", cfg_.sampling}};
    return with_retries(cfg_.retry, seed, [&] {
      if (limiter_) limiter_->acquire();
      const auto reply = detail::post_json(cfg_, body, trace_);
      require(reply.contains("text") && reply["text"].is_string(), ErrorCode::data,
              "response lacks a 'text' field");
      return reply["text"].get<std::string>();
    }, sleep_);
  }

 private:
  RemoteConfig cfg_;
  std::shared_ptr<TokenBucket> limiter_;
  TraceSink trace_;
  Sleeper sleep_;
};

inline std::string generate_text(TextGenerator& backend, const PromptText& prompt, std::uint64_t seed) {
  require(prompt.example_count == kExamplesPerPrompt && prompt.query_line.ends_with(kCompletionCue),
          ErrorCode::invalid_argument, "invalid prompt");
  return backend.generate(prompt, seed);
}

// ---------------------------------------------------------------------------
// Images

struct ImageBackendOptions {
  double cfg_scale = kDefaultCfgScale;
  int images_per_caption = kDefaultImagesPerCaption;
  int size = 32;

  void validate() const {
    require(cfg_scale > 0.0, ErrorCode::invalid_argument, "cfg_scale must be > 0");
    require(images_per_caption >= 1, ErrorCode::invalid_argument, "images_per_caption must be >= 1");
    require(size >= kMinImageSide, ErrorCode::invalid_argument, "image size must be >= 8");
  }
};

class ImageGenerator {
 public:
  virtual ~ImageGenerator() = default;
  virtual std::vector<Image> generate(const CaptionRecord& caption, std::uint64_t seed) = 0;
  virtual const ImageBackendOptions& options() const = 0;
};

/// Renders each caption's concept family over a background fixed by the
/// caption text; image i uses noise seed `seed + i`. cfg_scale is carried as
/// metadata only.
class ProceduralImageBackend final : public ImageGenerator {
 public:
  explicit ProceduralImageBackend(ImageBackendOptions opt = {}, RenderParams render = {})
      : opt_(opt), render_(render) {
    opt_.validate();
  }

  std::vector<Image> generate(const CaptionRecord& caption, std::uint64_t seed) override {
    const std::uint64_t sig = concept_signature(caption.concept_name);
    const std::uint64_t scene = stable_hash(text::dedup_key(caption.caption));
    std::vector<Image> out;
    out.reserve(static_cast<std::size_t>(opt_.images_per_caption));
    for (int i = 0; i < opt_.images_per_caption; ++i)
      out.push_back(procedural_render(sig, seed + static_cast<std::uint64_t>(i), opt_.size, render_, scene));
    return out;
  }

  const ImageBackendOptions& options() const override { return opt_; }

 private:
  ImageBackendOptions opt_;
  RenderParams render_;
};

/// POSTs {caption, seed, cfg_scale, num_images, height, width} and expects
/// {"images": [{"height", "width", "pixels": [...]}]}.
class RemoteImageBackend final : public ImageGenerator {
 public:
  RemoteImageBackend(RemoteConfig cfg, ImageBackendOptions opt,
                     std::shared_ptr<TokenBucket> limiter = nullptr, TraceSink trace = {},
                     Sleeper sleep = real_sleep)
      : cfg_(std::move(cfg)), opt_(opt), limiter_(std::move(limiter)), trace_(std::move(trace)),
        sleep_(std::move(sleep)) {
    opt_.validate();
    if (cfg_.api_key.empty()) cfg_.api_key = detail::env_or("SYNCLR_IMAGE_API_KEY", "");
  }

  std::vector<Image> generate(const CaptionRecord& caption, std::uint64_t seed) override {
    const nlohmann::json body = {{"caption", caption.caption},      {"seed", seed},
                                 {"cfg_scale", opt_.cfg_scale},     {"num_images", opt_.images_per_caption},
                                 {"height", opt_.size},             {"width", opt_.size},
                                 {"sampling", cfg_.sampling}};
    return with_retries(cfg_.retry, seed, [&] {
      if (limiter_) limiter_->acquire();
      const auto reply = detail::post_json(cfg_, body, trace_);
      return decode(reply);
    }, sleep_);
  }

  const ImageBackendOptions& options() const override { return opt_; }

 private:
  std::vector<Image> decode(const nlohmann::json& reply) const {
    try {
      const auto& arr = reply.at("images");
      require(arr.is_array() && static_cast<int>(arr.size()) == opt_.images_per_caption,
              ErrorCode::data, "response image count mismatch");
      std::vector<Image> out;
      for (const auto& j : arr) {
        Image img(j.at("height").get<int>(), j.at("width").get<int>());
        require(img.height >= kMinImageSide && img.width >= kMinImageSide, ErrorCode::data,
                "response image too small");
        const auto& px = j.at("pixels");
        require(px.size() == img.pixels.size(), ErrorCode::data, "response pixel count mismatch");
        for (std::size_t i = 0; i < img.pixels.size(); ++i) img.pixels[i] = px[i].get<float>();
        validate_image(img);
        out.push_back(std::move(img));
      }
      return out;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, std::string("malformed image response: ") + e.what());
    }
  }

  RemoteConfig cfg_;
  ImageBackendOptions opt_;
  std::shared_ptr<TokenBucket> limiter_;
  TraceSink trace_;
  Sleeper sleep_;
};

inline std::vector<Image> generate_images(ImageGenerator& backend, const CaptionRecord& caption,
                                          std::uint64_t seed) {
  require(!caption.caption.empty(), ErrorCode::invalid_argument, "empty caption");
  auto images = backend.generate(caption, seed);
  require(static_cast<int>(images.size()) == backend.options().images_per_caption, ErrorCode::data,
          "backend returned the wrong number of images");
  return images;
}

}  // namespace synclr
