#pragma once

// Visual concept vocabulary: catalog loading, sampling policy, background
// lists and the relation lexicon used by the caption templates.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "synclr/error.hpp"
#include "synclr/random.hpp"
#include "synclr/text.hpp"

namespace synclr {

enum class TemplateKind { ConceptOnly, ConceptBackground, ConceptRelation };

inline constexpr TemplateKind kAllTemplates[] = {
    TemplateKind::ConceptOnly, TemplateKind::ConceptBackground,
    TemplateKind::ConceptRelation};

inline const char* to_string(TemplateKind kind) {
  switch (kind) {
    case TemplateKind::ConceptOnly: return "concept";
    case TemplateKind::ConceptBackground: return "concept_background";
    case TemplateKind::ConceptRelation: return "concept_relation";
  }
  return "unknown";
}

inline TemplateKind template_from_string(const std::string& s) {
  for (TemplateKind k : kAllTemplates)
    if (s == to_string(k)) return k;
  fail(ErrorCode::data, "unknown template kind '" + s + "'");
}

enum class SourceKind { GeneralObject, Place, Texture, FineGrained };

inline const char* to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::GeneralObject: return "general-object";
    case SourceKind::Place: return "place";
    case SourceKind::Texture: return "texture";
    case SourceKind::FineGrained: return "fine-grained";
  }
  return "unknown";
}

/// Source tags accepted in catalog and policy files. Anything else is rejected.
inline std::optional<SourceKind> source_kind(const std::string& tag) {
  static const std::map<std::string, SourceKind> registry = {
      {"IN-1k", SourceKind::GeneralObject},
      {"IN-21k", SourceKind::GeneralObject},
      {"IN-21k+others", SourceKind::GeneralObject},
      {"Caltech-101", SourceKind::GeneralObject},
      {"Aircraft", SourceKind::FineGrained},
      {"Cars", SourceKind::FineGrained},
      {"Food", SourceKind::FineGrained},
      {"Flowers", SourceKind::FineGrained},
      {"Pets", SourceKind::FineGrained},
      {"Places+SUN", SourceKind::Place},
      {"Places-365", SourceKind::Place},
      {"SUN397", SourceKind::Place},
      {"DTD", SourceKind::Texture},
      {"general-object", SourceKind::GeneralObject},
      {"place", SourceKind::Place},
      {"texture", SourceKind::Texture},
      {"fine-grained", SourceKind::FineGrained},
  };
  const auto it = registry.find(tag);
  if (it == registry.end()) return std::nullopt;
  return it->second;
}

struct Concept {
  std::string name;
  std::string source;
  SourceKind kind = SourceKind::GeneralObject;
  std::vector<TemplateKind> eligible_templates;

  bool eligible(TemplateKind t) const {
    return std::find(eligible_templates.begin(), eligible_templates.end(), t) !=
           eligible_templates.end();
  }
};

/// Places and textures only get the single-concept template.
inline std::vector<TemplateKind> default_eligibility(SourceKind kind) {
  if (kind == SourceKind::Place || kind == SourceKind::Texture)
    return {TemplateKind::ConceptOnly};
  return {std::begin(kAllTemplates), std::end(kAllTemplates)};
}

inline Concept make_concept(const std::string& source, const std::string& raw_name) {
  const auto kind = source_kind(source);
  require(kind.has_value(), ErrorCode::data, "unknown source tag '" + source + "'");
  Concept c;
  c.name = text::normalize_whitespace(raw_name);
  require(!c.name.empty(), ErrorCode::data, "concept name is empty");
  c.source = source;
  c.kind = *kind;
  c.eligible_templates = default_eligibility(*kind);
  return c;
}

class SamplingPolicy {
 public:
  SamplingPolicy() = default;

  /// Validates and, when the total is within 1% of one, renormalizes.
  explicit SamplingPolicy(std::vector<std::pair<std::string, double>> weights) {
    require(!weights.empty(), ErrorCode::data, "sampling policy is empty");
    double total = 0.0;
    std::set<std::string> seen;
    for (const auto& [source, w] : weights) {
      require(source_kind(source).has_value(), ErrorCode::data,
              "policy references unknown source tag '" + source + "'");
      require(seen.insert(source).second, ErrorCode::data,
              "policy lists source '" + source + "' twice");
      require(std::isfinite(w) && w >= 0.0, ErrorCode::data,
              "policy weight for '" + source + "' must be finite and >= 0");
      total += w;
    }
    require(std::abs(total - 1.0) <= 0.01, ErrorCode::data,
            "policy weights sum to " + std::to_string(total) + ", expected 1");
    for (auto& entry : weights) entry.second /= total;
    weights_ = std::move(weights);
  }

  /// Rough per-source ratios used for the full-scale concept list.
  static SamplingPolicy paper_default() {
    return SamplingPolicy({{"IN-1k", 0.47},
                           {"Aircraft", 0.05},
                           {"Cars", 0.05},
                           {"Food", 0.05},
                           {"Flowers", 0.03},
                           {"Places+SUN", 0.09},
                           {"IN-21k+others", 0.26}});
  }

  const std::vector<std::pair<std::string, double>>& weights() const { return weights_; }

  double weight(const std::string& source) const {
    for (const auto& [s, w] : weights_)
      if (s == source) return w;
    return 0.0;
  }

 private:
  std::vector<std::pair<std::string, double>> weights_;
};

/// Parses `source = weight` lines.
inline SamplingPolicy load_policy(const std::filesystem::path& path) {
  require(std::filesystem::exists(path), ErrorCode::io,
          "policy file not found: " + path.string());
  boost::property_tree::ptree tree;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    fail(ErrorCode::data, "malformed policy file " + path.string() + ": " + e.what());
  }
  std::vector<std::pair<std::string, double>> weights;
  for (const auto& [key, node] : tree) {
    require(node.empty(), ErrorCode::data, "policy file must not contain sections");
    try {
      std::size_t used = 0;
      const std::string value = text::trim(node.data());
      const double w = std::stod(value, &used);
      require(used == value.size(), ErrorCode::data, "trailing characters");
      weights.emplace_back(key, w);
    } catch (const std::logic_error&) {
      fail(ErrorCode::data, "policy weight for '" + key + "' is not a number");
    }
  }
  return SamplingPolicy(std::move(weights));
}

class ConceptCatalog {
 public:
  struct Bucket {
    std::string source;
    std::vector<Concept> concepts;
  };

  ConceptCatalog() = default;
  ConceptCatalog(std::vector<Bucket> buckets, SamplingPolicy policy)
      : buckets_(std::move(buckets)), policy_(std::move(policy)) {}

  const std::vector<Bucket>& buckets() const { return buckets_; }
  const SamplingPolicy& policy() const { return policy_; }
  void set_policy(SamplingPolicy policy) { policy_ = std::move(policy); }

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& b : buckets_) n += b.concepts.size();
    return n;
  }

  const Bucket* find_source(const std::string& source) const {
    for (const auto& b : buckets_)
      if (b.source == source) return &b;
    return nullptr;
  }

  std::vector<const Concept*> all() const {
    std::vector<const Concept*> out;
    for (const auto& b : buckets_)
      for (const auto& c : b.concepts) out.push_back(&c);
    return out;
  }

  /// Drops a template from every concept for which `keep` returns false,
  /// never leaving a concept without templates.
  template <typename Pred>
  void restrict_template(TemplateKind kind, Pred keep) {
    for (auto& b : buckets_)
      for (auto& c : b.concepts) {
        if (!c.eligible(kind) || keep(c) || c.eligible_templates.size() == 1) continue;
        std::erase(c.eligible_templates, kind);
      }
  }

 private:
  std::vector<Bucket> buckets_;
  SamplingPolicy policy_;
};

/// Builds a catalog from in-memory (source, name) rows. The policy defaults to
/// uniform over the sources present.
inline ConceptCatalog build_catalog(const std::vector<std::pair<std::string, std::string>>& rows,
                                    std::optional<SamplingPolicy> policy = std::nullopt) {
  std::vector<ConceptCatalog::Bucket> buckets;
  for (const auto& [source, name] : rows) {
    Concept c = make_concept(source, name);
    auto it = std::find_if(buckets.begin(), buckets.end(),
                           [&](const auto& b) { return b.source == source; });
    if (it == buckets.end()) {
      buckets.push_back({source, {}});
      it = std::prev(buckets.end());
    }
    for (const auto& existing : it->concepts)
      require(text::to_lower(existing.name) != text::to_lower(c.name), ErrorCode::data,
              "duplicate concept '" + c.name + "' in source '" + source + "'");
    it->concepts.push_back(std::move(c));
  }
  require(!buckets.empty(), ErrorCode::data, "catalog is empty");
  if (!policy) {
    std::vector<std::pair<std::string, double>> uniform;
    for (const auto& b : buckets)
      uniform.emplace_back(b.source, 1.0 / static_cast<double>(buckets.size()));
    policy = SamplingPolicy(std::move(uniform));
  }
  return ConceptCatalog(std::move(buckets), std::move(*policy));
}

/// Reads `source<TAB>name` records. Blank lines and lines starting with '#'
/// are skipped.
inline ConceptCatalog load_catalog(const std::filesystem::path& path,
                                   std::optional<SamplingPolicy> policy = std::nullopt) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "catalog file not found: " + path.string());
  std::vector<std::pair<std::string, std::string>> rows;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string trimmed = text::trim(line);
    if (trimmed.empty() || trimmed.front() == '#') continue;
    const auto fields = text::split(line, '\t');
    const std::string where = path.string() + ":" + std::to_string(lineno);
    if (fields.size() != 2)
      fail(ErrorCode::data, where + ": expected 'source<TAB>name'");
    const std::string source = text::trim(fields[0]);
    if (!source_kind(source)) fail(ErrorCode::data, where + ": unknown source tag '" + source + "'");
    if (text::normalize_whitespace(fields[1]).empty())
      fail(ErrorCode::data, where + ": empty concept name");
    rows.emplace_back(source, fields[1]);
  }
  try {
    return build_catalog(rows, std::move(policy));
  } catch (const Error& e) {
    fail(e.code(), path.string() + ": " + e.what());
  }
}

/// Two-stage draw: source by policy weight, then uniform within the source.
inline const Concept& sample_concept(const ConceptCatalog& catalog, const SamplingPolicy& policy,
                                     Rng& rng) {
  const auto& weights = policy.weights();
  require(!weights.empty(), ErrorCode::invalid_argument, "empty sampling policy");
  double buf[32];
  std::vector<double> heap;
  double* w = buf;
  if (weights.size() > std::size(buf)) {
    heap.resize(weights.size());
    w = heap.data();
  }
  for (std::size_t i = 0; i < weights.size(); ++i) w[i] = weights[i].second;
  const std::size_t pick = rng.weighted_index({w, weights.size()});
  const auto* bucket = catalog.find_source(weights[pick].first);
  require(bucket != nullptr && !bucket->concepts.empty(), ErrorCode::invalid_argument,
          "policy references source '" + weights[pick].first + "' absent from catalog");
  return bucket->concepts[rng.uniform_index(bucket->concepts.size())];
}

/// Checks that every policy source with positive weight exists in the catalog.
inline void validate_policy(const ConceptCatalog& catalog, const SamplingPolicy& policy) {
  for (const auto& [source, w] : policy.weights())
    require(w == 0.0 || catalog.find_source(source) != nullptr, ErrorCode::invalid_argument,
            "policy references source '" + source + "' absent from catalog");
}

struct BackgroundList {
  std::string concept_group;
  std::vector<std::string> backgrounds;
};

inline BackgroundList make_background_list(std::string group, const std::vector<std::string>& raw) {
  BackgroundList list{std::move(group), {}};
  std::set<std::string> seen;
  for (const auto& entry : raw) {
    std::string bg = text::normalize_whitespace(entry);
    if (bg.empty()) continue;
    if (seen.insert(text::to_lower(bg)).second) list.backgrounds.push_back(std::move(bg));
  }
  require(!list.backgrounds.empty(), ErrorCode::data,
          "background list '" + list.concept_group + "' is empty");
  return list;
}

/// Backgrounds keyed by group. A concept resolves to its own slug first, then
/// its source tag, then its source kind.
class BackgroundLibrary {
 public:
  void add(BackgroundList list) {
    const std::string key = text::slug(list.concept_group);
    lists_[key] = std::move(list);
  }

  const BackgroundList* lookup(const Concept& c) const {
    for (const std::string& key : {text::slug(c.name), text::slug(c.source),
                                   text::slug(to_string(c.kind))}) {
      if (auto it = lists_.find(key); it != lists_.end()) return &it->second;
    }
    return nullptr;
  }

  std::size_t size() const { return lists_.size(); }

 private:
  std::map<std::string, BackgroundList> lists_;
};

/// One file per group (`<group>.txt`), one background per line.
inline BackgroundLibrary load_backgrounds(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::io,
          "background directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir))
    if (entry.is_regular_file() && entry.path().extension() == ".txt") files.push_back(entry.path());
  std::sort(files.begin(), files.end());
  BackgroundLibrary lib;
  for (const auto& file : files) {
    std::ifstream in(file);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) lines.push_back(line);
    lib.add(make_background_list(file.stem().string(), lines));
  }
  return lib;
}

class RelationLexicon {
 public:
  RelationLexicon() : RelationLexicon(defaults()) {}

  explicit RelationLexicon(std::vector<std::string> relations) {
    std::set<std::string> seen;
    for (auto& r : relations) {
      r = text::normalize_whitespace(r);
      require(!r.empty(), ErrorCode::data, "empty relation word");
      require(seen.insert(text::to_lower(r)).second, ErrorCode::data,
              "duplicate relation '" + r + "'");
    }
    require(!relations.empty(), ErrorCode::data, "relation lexicon is empty");
    relations_ = std::move(relations);
  }

  // Positional words shipped as the default; the set is configurable.
  static std::vector<std::string> defaults() {
    return {"in front of", "behind", "next to", "above", "below",
            "besides",     "on",     "in",      "under", "near"};
  }

  const std::vector<std::string>& relations() const { return relations_; }

 private:
  std::vector<std::string> relations_;
};

inline RelationLexicon load_relations(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "relation file not found: " + path.string());
  std::vector<std::string> rels;
  for (std::string line; std::getline(in, line);) {
    const auto t = text::trim(line);
    if (!t.empty() && t.front() != '#') rels.push_back(t);
  }
  return RelationLexicon(std::move(rels));
}

}  // namespace synclr
