#include <gtest/gtest.h>

#include <atomic>
#include <map>
#include <thread>

#include "synclr/generator_gateway.hpp"
#include "test_util.hpp"

using namespace synclr;

namespace {

PromptText prompt_for(const std::string& concept_name, TemplateKind kind = TemplateKind::ConceptOnly,
                      const std::string& extra = {}) {
  PromptText p;
  p.kind = kind;
  p.concept_name = concept_name;
  p.extra = extra;
  p.example_count = kExamplesPerPrompt;
  p.query_line = (extra.empty() ? concept_name : concept_name + ", " + extra) + " -->";
  p.text = "a --> A a.\nb --> A b.\nc --> A c.\n" + p.query_line;
  return p;
}

CaptionRecord caption_for(const std::string& concept_name, const std::string& text) {
  return {text, concept_name, "IN-1k", TemplateKind::ConceptOnly, 0, synclr::text::dedup_key(text)};
}

double l2_distance(const Image& a, const Image& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += double(a.pixels[i] - b.pixels[i]) * (a.pixels[i] - b.pixels[i]);
  return s;
}

// Local HTTP server on an ephemeral port, stopped on destruction.
class LocalServer {
 public:
  LocalServer() {
    port_ = server.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server.listen_after_bind(); });
    server.wait_until_ready();
  }
  ~LocalServer() {
    server.stop();
    thread_.join();
  }
  std::string url(const std::string& path) const { return "http://127.0.0.1:" + std::to_string(port_) + path; }

  httplib::Server server;

 private:
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST(Retries, BackoffScheduleWithJitter) {
  std::vector<double> sleeps;
  int calls = 0;
  const int v = with_retries(RetryPolicy{}, 1, [&] {
    if (++calls < 3) throw Error(ErrorCode::transport, "down");
    return 7;
  }, [&](double s) { sleeps.push_back(s); });
  EXPECT_EQ(v, 7);
  EXPECT_EQ(calls, 3);
  ASSERT_EQ(sleeps.size(), 2u);
  EXPECT_GE(sleeps[0], 0.75);
  EXPECT_LE(sleeps[0], 1.25);
  EXPECT_GE(sleeps[1], 3.0);
  EXPECT_LE(sleeps[1], 5.0);
}

TEST(Retries, ExhaustedBudgetRethrows) {
  int calls = 0;
  std::vector<double> sleeps;
  try {
    with_retries(RetryPolicy{}, 2, [&]() -> int { ++calls; throw Error(ErrorCode::quota, "slow down"); },
                 [&](double s) { sleeps.push_back(s); });
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::quota);
  }
  EXPECT_EQ(calls, 3);
  EXPECT_EQ(sleeps.size(), 2u);
}

TEST(Retries, NonRetryableSurfacesImmediately) {
  int calls = 0;
  EXPECT_THROW(with_retries(RetryPolicy{}, 3, [&]() -> int { ++calls; throw Error(ErrorCode::data, "bad"); },
                            [](double) {}),
               Error);
  EXPECT_EQ(calls, 1);
}

TEST(TokenBucket, CapacityBoundsBurst) {
  TokenBucket bucket(1e-3, 2);
  EXPECT_TRUE(bucket.try_acquire());
  EXPECT_TRUE(bucket.try_acquire());
  EXPECT_FALSE(bucket.try_acquire());
}

TEST(TokenBucket, AcquireWaitsForRefill) {
  TokenBucket bucket(50, 1);
  const auto t0 = std::chrono::steady_clock::now();
  for (int i = 0; i < 6; ++i) bucket.acquire();
  const double dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  EXPECT_GE(dt, 0.09);
}

TEST(MockText, DeterministicAndMentionsConcept) {
  MockTextBackend mock;
  const auto p = prompt_for("zebra");
  const auto a = generate_text(mock, p, 7);
  EXPECT_EQ(a, generate_text(mock, p, 7));
  EXPECT_EQ(a, MockTextBackend::compose(TemplateKind::ConceptOnly, "zebra", "", 7));
  for (std::uint64_t s = 0; s < 200; ++s) {
    for (auto kind : kAllTemplates) {
      const std::string extra = kind == TemplateKind::ConceptOnly ? "" : "beach";
      const auto out = generate_text(mock, prompt_for("kit fox", kind, extra), s);
      EXPECT_NE(out.find("kit fox"), std::string::npos) << out;
      EXPECT_EQ(out.find('\n'), std::string::npos);
      if (!extra.empty()) EXPECT_NE(out.find(extra), std::string::npos) << out;
    }
  }
}

TEST(MockText, RejectsInvalidPrompt) {
  MockTextBackend mock;
  auto p = prompt_for("zebra");
  p.example_count = 2;
  EXPECT_THROW(generate_text(mock, p, 1), Error);
}

TEST(MockImages, KImagesSameFamilyPairwiseDistinct) {
  ProceduralImageBackend backend;
  const auto images = generate_images(backend, caption_for("red fox", "A red fox on a hill."), 99);
  ASSERT_EQ(images.size(), 4u);
  for (const auto& img : images) {
    EXPECT_EQ(img.height, 32);
    EXPECT_NO_THROW(validate_image(img));
  }
  for (std::size_t i = 0; i < images.size(); ++i)
    for (std::size_t j = i + 1; j < images.size(); ++j) EXPECT_NE(images[i], images[j]);
}

TEST(MockImages, SingletonAndDeterminism) {
  ProceduralImageBackend one({2.5, 1, 16});
  const auto c = caption_for("teapot", "A teapot on a shelf.");
  const auto a = generate_images(one, c, 5);
  ASSERT_EQ(a.size(), 1u);
  EXPECT_EQ(a, generate_images(one, c, 5));
  EXPECT_NE(a, generate_images(one, c, 6));
}

TEST(MockImages, CfgScaleDoesNotChangePixels) {
  ProceduralImageBackend lo({2.0, 4, 32}), hi({4.0, 4, 32});
  const auto c = caption_for("teapot", "A teapot on a shelf.");
  EXPECT_EQ(generate_images(lo, c, 11), generate_images(hi, c, 11));
}

TEST(MockImages, OptionValidation) {
  EXPECT_THROW(ProceduralImageBackend({0.0, 4, 32}), Error);
  EXPECT_THROW(ProceduralImageBackend({2.5, 0, 32}), Error);
  EXPECT_THROW(ProceduralImageBackend({2.5, 4, 7}), Error);
  EXPECT_THROW(procedural_render(1, 1, 4), Error);
}

TEST(Renderer, SameConceptSameFamily) {
  EXPECT_EQ(primitive_family(concept_signature("Red Fox")), primitive_family(concept_signature("red  fox")));
  int differing = 0;
  for (int i = 0; i < 50; ++i)
    differing += !(primitive_family(concept_signature("c" + std::to_string(i))) ==
                   primitive_family(concept_signature("d" + std::to_string(i))));
  EXPECT_GT(differing, 40);
}

TEST(Renderer, ZeroNoiseEqualSeedsIdentical) {
  RenderParams quiet;
  quiet.noise_amplitude = 0;
  const auto sig = concept_signature("sailboat");
  EXPECT_EQ(procedural_render(sig, 3, 32, quiet), procedural_render(sig, 3, 32, quiet));
  EXPECT_NE(procedural_render(sig, 3, 32, quiet), procedural_render(sig, 4, 32, quiet));
}

TEST(Renderer, PixelsQuantizedTo8Bit) {
  const Image img = procedural_render(concept_signature("oak tree"), 42, 8);
  const Image again = procedural_render(concept_signature("oak tree"), 42, 8);
  EXPECT_EQ(img, again);
  for (float v : img.pixels) {
    const float scaled = v * 255.0f;
    EXPECT_FLOAT_EQ(scaled, std::round(scaled));
  }
}

TEST(Renderer, SceneFixesBackground) {
  RenderParams quiet;
  quiet.noise_amplitude = 0;
  quiet.contrast = 0;  // primitives blend into the background
  const auto a = procedural_render(concept_signature("teapot"), 1, 16, quiet, 77);
  const auto b = procedural_render(concept_signature("sailboat"), 2, 16, quiet, 77);
  EXPECT_EQ(a, b);
}

TEST(Renderer, ToyCatalogNearestCentroid) {
  const auto catalog = load_catalog(testing_util::kDataDir / "catalogs" / "toy4.tsv");
  ProceduralImageBackend backend;
  std::vector<Image> images;
  std::vector<int> labels;
  const auto concepts = catalog.all();
  ASSERT_EQ(concepts.size(), 4u);
  for (int n = 0; n < 50; ++n)
    for (int k = 0; k < 4; ++k) {
      const auto& name = concepts[static_cast<std::size_t>(k)]->name;
      const auto text = MockTextBackend::compose(TemplateKind::ConceptOnly, name, "", std::uint64_t(n * 4 + k));
      for (auto& img : generate_images(backend, caption_for(name, text), std::uint64_t(1000 + n * 4 + k))) {
        images.push_back(std::move(img));
        labels.push_back(k);
      }
    }
  const std::size_t d = images[0].pixels.size();
  std::vector<std::vector<double>> centroid(4, std::vector<double>(d, 0.0));
  std::vector<int> count(4, 0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto& c = centroid[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < d; ++j) c[j] += images[i].pixels[j];
    ++count[static_cast<std::size_t>(labels[i])];
  }
  for (int k = 0; k < 4; ++k)
    for (auto& v : centroid[static_cast<std::size_t>(k)]) v /= count[static_cast<std::size_t>(k)];
  int correct = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    int best = 0;
    double best_d = 1e300;
    for (int k = 0; k < 4; ++k) {
      double s = 0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = images[i].pixels[j] - centroid[static_cast<std::size_t>(k)][j];
        s += diff * diff;
      }
      if (s < best_d) best_d = s, best = k;
    }
    correct += best == labels[i];
  }
  EXPECT_GT(correct / double(images.size()), 0.95);
}

TEST(MockImages, WithinCaptionCloserThanAcrossConcepts) {
  ProceduralImageBackend backend;
  const auto a = generate_images(backend, caption_for("red fox", "A red fox in snow."), 1);
  const auto b = generate_images(backend, caption_for("sailboat", "A sailboat in snow."), 2);
  EXPECT_LT(l2_distance(a[0], a[1]), l2_distance(a[0], b[0]));
}

TEST(RemoteText, UnreachableEndpointIsTransportAfterRetries) {
  int requests = 0;
  RemoteConfig cfg;
  cfg.endpoint = "http://127.0.0.1:1/complete";
  cfg.timeout_seconds = 2;
  cfg.retry = RetryPolicy::immediate(3);
  RemoteTextBackend backend(cfg, nullptr, [&](const nlohmann::json& e) { requests += e["event"] == "request"; });
  try {
    backend.generate(prompt_for("zebra"), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::transport);
  }
  EXPECT_EQ(requests, 3);
}

TEST(RemoteText, RetriesServerErrorsThenSucceeds) {
  LocalServer srv;
  std::atomic<int> hits = 0;
  std::string last_body;
  srv.server.Post("/complete", [&](const httplib::Request& req, httplib::Response& res) {
    last_body = req.body;
    if (++hits < 3) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"text": "A zebra grazes."})", "application/json");
  });
  RemoteConfig cfg;
  cfg.endpoint = srv.url("/complete");
  cfg.sampling = {{"temperature", 0.7}};
  cfg.retry = RetryPolicy::immediate(3);
  RemoteTextBackend backend(cfg);
  EXPECT_EQ(backend.generate(prompt_for("zebra"), 9), "A zebra grazes.");
  EXPECT_EQ(hits, 3);
  const auto body = nlohmann::json::parse(last_body);
  EXPECT_EQ(body["seed"], 9);
  EXPECT_EQ(body["sampling"]["temperature"], 0.7);
  EXPECT_TRUE(body["prompt"].get<std::string>().ends_with("zebra -->"));
}

TEST(RemoteText, QuotaSurfacesAsQuota) {
  LocalServer srv;
  srv.server.Post("/complete", [](const httplib::Request&, httplib::Response& res) { res.status = 429; });
  RemoteConfig cfg;
  cfg.endpoint = srv.url("/complete");
  cfg.retry = RetryPolicy::immediate(2);
  RemoteTextBackend backend(cfg);
  try {
    backend.generate(prompt_for("zebra"), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::quota);
  }
}

TEST(RemoteImages, CfgScaleRoundTripsBitExactly) {
  LocalServer srv;
  nlohmann::json seen;
  srv.server.Post("/images", [&](const httplib::Request& req, httplib::Response& res) {
    seen = nlohmann::json::parse(req.body);
    nlohmann::json images = nlohmann::json::array();
    for (int i = 0; i < seen["num_images"].get<int>(); ++i) {
      std::vector<float> px(static_cast<std::size_t>(8 * 8 * 3), 0.25f * static_cast<float>(i));
      images.push_back({{"height", 8}, {"width", 8}, {"pixels", px}});
    }
    res.set_content(nlohmann::json{{"images", images}}.dump(), "application/json");
  });
  const double cfg_scale = 2.3000000000000003;
  RemoteConfig cfg;
  cfg.endpoint = srv.url("/images");
  RemoteImageBackend backend(cfg, {cfg_scale, 3, 8});
  const auto images = generate_images(backend, caption_for("teapot", "A teapot."), 4);
  ASSERT_EQ(images.size(), 3u);
  EXPECT_FLOAT_EQ(images[2].pixels[0], 0.5f);
  EXPECT_EQ(seen["cfg_scale"].get<double>(), cfg_scale);
  EXPECT_EQ(seen["num_images"], 3);
  EXPECT_EQ(seen["caption"], "A teapot.");
}

TEST(RemoteImages, WrongImageCountIsDataError) {
  LocalServer srv;
  srv.server.Post("/images", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"images": []})", "application/json");
  });
  RemoteConfig cfg;
  cfg.endpoint = srv.url("/images");
  RemoteImageBackend backend(cfg, {2.5, 2, 8});
  try {
    backend.generate(caption_for("teapot", "A teapot."), 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::data);
  }
}

TEST(Endpoint, Parsing) {
  const auto ep = parse_endpoint("https://host:8080/v1/complete");
  EXPECT_EQ(ep.base, "https://host:8080");
  EXPECT_EQ(ep.path, "/v1/complete");
  EXPECT_EQ(parse_endpoint("http://host").path, "/");
  EXPECT_THROW(parse_endpoint("host/path"), Error);
}
