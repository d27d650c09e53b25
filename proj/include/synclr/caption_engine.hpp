#pragma once

// In-context caption synthesis: template choice, prompt assembly, completion
// parsing and the deduplicating synthesis loop.

#include <algorithm>
#include <array>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <optional>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "synclr/concept_catalog.hpp"
#include "synclr/error.hpp"
#include "synclr/random.hpp"
#include "synclr/text.hpp"

namespace synclr {

inline constexpr std::size_t kExamplesPerPrompt = 3;
inline constexpr std::size_t kMaxCaptionLength = 512;
inline constexpr const char* kCompletionCue = "-->";

inline TemplateKind choose_template(const Concept& c, Rng& rng) {
  require(!c.eligible_templates.empty(), ErrorCode::invalid_argument,
          "concept '" + c.name + "' has no eligible templates");
  return c.eligible_templates[rng.uniform_index(c.eligible_templates.size())];
}

struct InContextExample {
  std::string input;
  std::string caption;
};

/// The concept part of an example input (`concept[, bg-or-rel]`).
inline std::string example_concept(const InContextExample& ex, TemplateKind kind) {
  if (kind == TemplateKind::ConceptOnly) return text::trim(ex.input);
  const auto comma = ex.input.rfind(',');
  return text::trim(ex.input.substr(0, comma));
}

/// True when the caption mentions the concept, or one of its '/'-separated
/// alternatives, case-insensitively.
inline bool mentions_concept(const std::string& caption, const std::string& concept_name) {
  const std::string lower = text::to_lower(caption);
  for (const auto& alt : text::split(concept_name, '/')) {
    const std::string token = text::to_lower(text::trim(alt));
    if (!token.empty() && text::contains(lower, token)) return true;
  }
  return false;
}

class ExampleBank {
 public:
  static constexpr std::array<std::size_t, 3> kDefaultSizes = {106, 50, 20};

  void add(TemplateKind kind, InContextExample ex) {
    ex.input = text::normalize_whitespace(ex.input);
    ex.caption = text::normalize_whitespace(ex.caption);
    require(!ex.input.empty() && !ex.caption.empty(), ErrorCode::data,
            "in-context example has an empty field");
    if (kind != TemplateKind::ConceptOnly)
      require(text::contains(ex.input, ","), ErrorCode::data,
              "example input '" + ex.input + "' lacks the ', bg/rel' part");
    require(mentions_concept(ex.caption, example_concept(ex, kind)), ErrorCode::data,
            "example caption does not mention its concept: '" + ex.input + "'");
    examples_[index(kind)].push_back(std::move(ex));
  }

  const std::vector<InContextExample>& examples(TemplateKind kind) const {
    return examples_[index(kind)];
  }

  std::size_t size(TemplateKind kind) const { return examples(kind).size(); }

  static const char* file_name(TemplateKind kind) {
    switch (kind) {
      case TemplateKind::ConceptOnly: return "concept.tsv";
      case TemplateKind::ConceptBackground: return "concept_background.tsv";
      case TemplateKind::ConceptRelation: return "concept_relation.tsv";
    }
    return "";
  }

 private:
  static std::size_t index(TemplateKind kind) { return static_cast<std::size_t>(kind); }
  std::array<std::vector<InContextExample>, 3> examples_;
};

/// Loads `concept.tsv`, `concept_background.tsv` and `concept_relation.tsv`
/// (records `input-fragment<TAB>caption`) from a directory. Missing files
/// leave that kind empty.
inline ExampleBank load_example_bank(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::io,
          "example bank directory not found: " + dir.string());
  ExampleBank bank;
  for (TemplateKind kind : kAllTemplates) {
    const auto path = dir / ExampleBank::file_name(kind);
    std::ifstream in(path);
    if (!in) continue;
    std::size_t lineno = 0;
    for (std::string line; std::getline(in, line);) {
      ++lineno;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (text::trim(line).empty() || line.front() == '#') continue;
      const auto fields = text::split(line, '\t');
      const std::string where = path.string() + ":" + std::to_string(lineno);
      if (fields.size() != 2) fail(ErrorCode::data, where + ": expected 'input<TAB>caption'");
      try {
        bank.add(kind, {fields[0], fields[1]});
      } catch (const Error& e) {
        fail(e.code(), where + ": " + e.what());
      }
    }
  }
  return bank;
}

struct PromptText {
  std::string text;
  std::string query_line;
  std::size_t example_count = 0;
  TemplateKind kind = TemplateKind::ConceptOnly;
  std::string concept_name;
  std::string extra;  // background or relation, empty for ConceptOnly
};

inline std::string query_fragment(const std::string& concept_name,
                                  const std::optional<std::string>& extra) {
  return extra ? concept_name + ", " + *extra : concept_name;
}

inline PromptText assemble_prompt(TemplateKind kind, const ExampleBank& bank,
                                  const Concept& c, const std::optional<std::string>& bg_or_rel,
                                  Rng& rng) {
  const bool wants_extra = kind != TemplateKind::ConceptOnly;
  require(wants_extra == bg_or_rel.has_value(), ErrorCode::invalid_argument,
          std::string("template ") + to_string(kind) +
              (wants_extra ? " requires" : " does not take") + " a background/relation");
  const auto& pool = bank.examples(kind);
  require(pool.size() >= kExamplesPerPrompt, ErrorCode::invalid_argument,
          std::string("example bank holds fewer than 3 examples for ") + to_string(kind));

  PromptText prompt;
  prompt.kind = kind;
  prompt.concept_name = c.name;
  prompt.extra = bg_or_rel.value_or("");
  for (std::size_t i : rng.sample_without_replacement(pool.size(), kExamplesPerPrompt)) {
    prompt.text += pool[i].input + " " + kCompletionCue + " " + pool[i].caption + "\n";
    ++prompt.example_count;
  }
  prompt.query_line = query_fragment(c.name, bg_or_rel) + " " + kCompletionCue;
  prompt.text += prompt.query_line;
  return prompt;
}

struct CaptionPayload {
  std::string caption;
  std::string dedup_key;
};

enum class ParseFailure { Empty, Echo, OverLength };

inline const char* to_string(ParseFailure f) {
  switch (f) {
    case ParseFailure::Empty: return "empty";
    case ParseFailure::Echo: return "echo";
    case ParseFailure::OverLength: return "over_length";
  }
  return "unknown";
}

inline std::string strip_quotes(std::string s) {
  static const std::array<std::pair<std::string_view, std::string_view>, 3> pairs = {{
      {"\"", "\""}, {"'", "'"}, {"\xE2\x80\x9C", "\xE2\x80\x9D"}}};
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& [open, close] : pairs) {
      if (s.size() >= open.size() + close.size() && s.starts_with(open) && s.ends_with(close)) {
        s = text::trim(s.substr(open.size(), s.size() - open.size() - close.size()));
        changed = true;
      }
    }
  }
  return s;
}

/// Keeps the first line of a completion, trimmed and unquoted.
inline std::variant<CaptionPayload, ParseFailure> parse_completion(
    const std::string& raw, const std::string& query_line = {}) {
  const std::string first = raw.substr(0, raw.find('\n'));
  std::string caption = strip_quotes(text::trim(first));
  if (caption.empty()) return ParseFailure::Empty;
  if (caption.ends_with(kCompletionCue)) return ParseFailure::Echo;
  if (!query_line.empty()) {
    std::string q = query_line;
    if (q.ends_with(kCompletionCue)) q.resize(q.size() - 3);
    if (text::dedup_key(caption) == text::dedup_key(q)) return ParseFailure::Echo;
  }
  if (caption.size() > kMaxCaptionLength) return ParseFailure::OverLength;
  return CaptionPayload{caption, text::dedup_key(caption)};
}

struct CaptionRecord {
  std::string caption;
  std::string concept_name;
  std::string source;
  TemplateKind template_kind = TemplateKind::ConceptOnly;
  std::uint64_t seed = 0;
  std::string dedup_key;
};

inline nlohmann::json to_json(const CaptionRecord& r) {
  return {{"caption", r.caption},   {"concept", r.concept_name},
          {"source", r.source},     {"template", to_string(r.template_kind)},
          {"seed", r.seed},         {"dedup_key", r.dedup_key}};
}

inline CaptionRecord caption_from_json(const nlohmann::json& j) {
  try {
    CaptionRecord r;
    r.caption = j.at("caption").get<std::string>();
    r.concept_name = j.at("concept").get<std::string>();
    r.source = j.at("source").get<std::string>();
    r.template_kind = template_from_string(j.at("template").get<std::string>());
    r.seed = j.at("seed").get<std::uint64_t>();
    r.dedup_key = j.at("dedup_key").get<std::string>();
    require(!r.caption.empty() && r.caption.find('\n') == std::string::npos &&
                r.caption.size() <= kMaxCaptionLength,
            ErrorCode::data, "invalid caption text");
    return r;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, std::string("malformed caption record: ") + e.what());
  }
}

inline std::vector<CaptionRecord> read_caption_store(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "caption store not found: " + path.string());
  std::vector<CaptionRecord> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (text::trim(line).empty()) continue;
    try {
      out.push_back(caption_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    } catch (const Error& e) {
      fail(e.code(), path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

/// Text-completion backend seen by the synthesis loop.
class TextGenerator {
 public:
  virtual ~TextGenerator() = default;
  virtual std::string generate(const PromptText& prompt, std::uint64_t seed) = 0;
};

struct SynthesisOptions {
  std::size_t count = 1;
  std::uint64_t seed = 0;
  std::size_t start_attempt = 0;  // resume cursor
  std::size_t workers = 1;
};

struct SynthesisStats {
  std::size_t attempts = 0;
  std::size_t emitted = 0;
  std::size_t duplicates = 0;
  std::size_t backend_failures = 0;
  std::size_t parse_failures = 0;
  std::array<std::size_t, 3> template_counts{};
};

struct CaptionSources {
  const ConceptCatalog& catalog;
  const ExampleBank& bank;
  const BackgroundLibrary& backgrounds;
  const RelationLexicon& relations;
};

/// One synthesis attempt as a pure function of (sources, attempt seed).
inline PromptText plan_attempt(const CaptionSources& src, std::uint64_t attempt_seed,
                               const Concept** picked) {
  Rng rng(derive_seed(attempt_seed, 0x43415054));
  const Concept& c = sample_concept(src.catalog, src.catalog.policy(), rng);
  const TemplateKind kind = choose_template(c, rng);
  std::optional<std::string> extra;
  if (kind == TemplateKind::ConceptBackground) {
    const BackgroundList* list = src.backgrounds.lookup(c);
    require(list != nullptr, ErrorCode::data, "no background list for concept '" + c.name + "'");
    extra = list->backgrounds[rng.uniform_index(list->backgrounds.size())];
  } else if (kind == TemplateKind::ConceptRelation) {
    const auto& rels = src.relations.relations();
    extra = rels[rng.uniform_index(rels.size())];
  }
  *picked = &c;
  return assemble_prompt(kind, src.bank, c, extra, rng);
}

/// Removes the background template from concepts that have no background list.
inline void reconcile_backgrounds(ConceptCatalog& catalog, const BackgroundLibrary& backgrounds) {
  catalog.restrict_template(TemplateKind::ConceptBackground,
                            [&](const Concept& c) { return backgrounds.lookup(c) != nullptr; });
}

using Logger = std::function<void(const std::string& level, const std::string& message)>;

/// Runs attempts [start_attempt, count). Attempt `a` uses seed `seed + a`,
/// which is stored on the record, so the record stream can be replayed and
/// resumed. `seen_keys` carries dedup state across resumptions.
inline SynthesisStats synthesize_captions(const CaptionSources& src, TextGenerator& backend,
                                          const SynthesisOptions& opt,
                                          std::unordered_set<std::string>& seen_keys,
                                          const std::function<void(const CaptionRecord&)>& sink,
                                          const Logger& log = {}) {
  require(opt.count >= 1, ErrorCode::invalid_argument, "count must be >= 1");
  validate_policy(src.catalog, src.catalog.policy());
  SynthesisStats stats;

  struct Outcome {
    std::optional<CaptionRecord> record;
    bool backend_failed = false;
    bool parse_failed = false;
    TemplateKind kind{};
    std::string error;
  };

  auto run_attempt = [&](std::size_t attempt) {
    Outcome out;
    const std::uint64_t attempt_seed = opt.seed + attempt;
    const Concept* c = nullptr;
    PromptText prompt = plan_attempt(src, attempt_seed, &c);
    out.kind = prompt.kind;
    std::string raw;
    try {
      raw = backend.generate(prompt, derive_seed(attempt_seed, 0x47454E));
    } catch (const Error& e) {
      out.backend_failed = true;
      out.error = e.what();
      return out;
    }
    const auto parsed = parse_completion(raw, prompt.query_line);
    if (const auto* failure = std::get_if<ParseFailure>(&parsed)) {
      out.parse_failed = true;
      out.error = to_string(*failure);
      return out;
    }
    const auto& payload = std::get<CaptionPayload>(parsed);
    out.record = CaptionRecord{payload.caption, c->name,       c->source,
                               prompt.kind,     attempt_seed, payload.dedup_key};
    return out;
  };

  auto consume = [&](std::size_t attempt, Outcome out) {
    ++stats.attempts;
    ++stats.template_counts[static_cast<std::size_t>(out.kind)];
    if (out.backend_failed) {
      ++stats.backend_failures;
      if (log) log("warn", "attempt " + std::to_string(attempt) + " skipped: " + out.error);
      return;
    }
    if (out.parse_failed) {
      ++stats.parse_failures;
      if (log) log("warn", "attempt " + std::to_string(attempt) + " unparseable: " + out.error);
      return;
    }
    if (!seen_keys.insert(out.record->dedup_key).second) {
      ++stats.duplicates;
      return;
    }
    ++stats.emitted;
    sink(*out.record);
  };

  const std::size_t workers = std::max<std::size_t>(1, opt.workers);
  if (workers == 1) {
    for (std::size_t a = opt.start_attempt; a < opt.count; ++a) consume(a, run_attempt(a));
    return stats;
  }
  // Attempts are evaluated concurrently in windows and consumed in attempt
  // order, so the emitted stream does not depend on scheduling.
  const std::size_t window = workers * 8;
  for (std::size_t base = opt.start_attempt; base < opt.count; base += window) {
    const std::size_t end = std::min(opt.count, base + window);
    std::vector<std::future<std::vector<Outcome>>> jobs;
    for (std::size_t w = 0; w < workers; ++w) {
      jobs.push_back(std::async(std::launch::async, [&, w] {
        std::vector<Outcome> outs;
        for (std::size_t a = base + w; a < end; a += workers) outs.push_back(run_attempt(a));
        return outs;
      }));
    }
    std::vector<std::vector<Outcome>> results;
    for (auto& j : jobs) results.push_back(j.get());
    for (std::size_t a = base; a < end; ++a)
      consume(a, std::move(results[(a - base) % workers][(a - base) / workers]));
  }
  return stats;
}

}  // namespace synclr
