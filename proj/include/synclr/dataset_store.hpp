#pragma once

// Caption-grouped image shards and batch sampling over whole caption groups.
//
// Shard layout, little-endian:
//   "SYNC" u32 version u32 K u32 H u32 W u64 group_count
//   per group: u64 caption_id, u32 caption_len, caption bytes, K*H*W*3 f32
//   u64 CRC-64/XZ over the group records

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "synclr/binary_io.hpp"
#include "synclr/error.hpp"
#include "synclr/image.hpp"
#include "synclr/random.hpp"

namespace synclr {

inline constexpr char kShardMagic[4] = {'S', 'Y', 'N', 'C'};
inline constexpr std::uint32_t kShardVersion = 1;
inline constexpr std::uint64_t kShardHeaderBytes = 4 + 4 * 4 + 8;
inline constexpr const char* kShardExtension = ".shard";

struct CaptionGroup {
  std::uint64_t caption_id = 0;
  std::string caption;
  std::vector<Image> images;

  bool operator==(const CaptionGroup&) const = default;
};

struct ShardSummary {
  std::uint32_t version = kShardVersion;
  std::uint32_t images_per_group = 0;
  std::uint32_t height = 0;
  std::uint32_t width = 0;
  std::uint64_t group_count = 0;
  std::uint64_t checksum = 0;
  std::uint64_t bytes = 0;
};

inline ShardSummary write_shard(const std::vector<CaptionGroup>& groups, const std::filesystem::path& path) {
  require(!groups.empty(), ErrorCode::invalid_argument, "cannot write an empty shard");
  ShardSummary s;
  s.images_per_group = static_cast<std::uint32_t>(groups.front().images.size());
  require(s.images_per_group >= 1, ErrorCode::invalid_argument, "caption group has no images");
  s.height = static_cast<std::uint32_t>(groups.front().images.front().height);
  s.width = static_cast<std::uint32_t>(groups.front().images.front().width);
  std::set<std::uint64_t> ids;
  for (const auto& g : groups) {
    require(g.images.size() == s.images_per_group, ErrorCode::invalid_argument,
            "shard groups must share the same image count");
    require(ids.insert(g.caption_id).second, ErrorCode::invalid_argument,
            "duplicate caption_id " + std::to_string(g.caption_id));
    require(g.caption.size() <= 0xFFFFFFFFu, ErrorCode::invalid_argument, "caption too long");
    for (const auto& img : g.images) {
      require(static_cast<std::uint32_t>(img.height) == s.height &&
                  static_cast<std::uint32_t>(img.width) == s.width,
              ErrorCode::invalid_argument, "shard images must share the same size");
      validate_image(img);
    }
  }
  s.group_count = groups.size();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot open " + path.string() + " for writing");
  binary::Writer w(out);
  w.bytes(kShardMagic, 4);
  w.scalar(s.version);
  w.scalar(s.images_per_group);
  w.scalar(s.height);
  w.scalar(s.width);
  w.scalar(s.group_count);
  w.begin_hash();
  for (const auto& g : groups) {
    w.scalar(g.caption_id);
    w.scalar(static_cast<std::uint32_t>(g.caption.size()));
    w.bytes(g.caption.data(), g.caption.size());
    for (const auto& img : g.images) w.floats(img.pixels.data(), img.pixels.size());
  }
  s.checksum = w.end_hash();
  w.scalar(s.checksum);
  out.flush();
  require(out.good(), ErrorCode::io, "write to " + path.string() + " failed");
  s.bytes = static_cast<std::uint64_t>(out.tellp());
  return s;
}

namespace detail {

inline ShardSummary read_shard_header(binary::Reader& r, const std::filesystem::path& path) {
  char magic[4];
  r.bytes(magic, 4);
  require(std::equal(magic, magic + 4, kShardMagic), ErrorCode::data,
          path.string() + ": not a shard file");
  ShardSummary s;
  s.version = r.scalar<std::uint32_t>();
  require(s.version == kShardVersion, ErrorCode::version,
          path.string() + ": unsupported shard version " + std::to_string(s.version));
  s.images_per_group = r.scalar<std::uint32_t>();
  s.height = r.scalar<std::uint32_t>();
  s.width = r.scalar<std::uint32_t>();
  s.group_count = r.scalar<std::uint64_t>();
  require(s.images_per_group >= 1 && s.height >= 1 && s.width >= 1, ErrorCode::data,
          path.string() + ": degenerate shard header");
  return s;
}

}  // namespace detail

/// Reads a shard file. Sizes are checked against the file length before any
/// allocation, so a malformed header cannot trigger an oversized buffer.
inline std::vector<CaptionGroup> read_shard(const std::filesystem::path& path, ShardSummary* summary = nullptr) {
  std::error_code ec;
  const std::uint64_t file_size = std::filesystem::file_size(path, ec);
  require(!ec, ErrorCode::io, "cannot stat " + path.string());
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open " + path.string());
  binary::Reader r(in, file_size);
  ShardSummary s = detail::read_shard_header(r, path);

  const unsigned __int128 floats_per_group =
      static_cast<unsigned __int128>(s.images_per_group) * s.height * s.width * 3;
  const unsigned __int128 min_group_bytes = 12 + floats_per_group * 4;
  const unsigned __int128 min_payload = min_group_bytes * s.group_count + 8;
  require(min_payload <= r.remaining(), ErrorCode::checksum,
          path.string() + ": file shorter than its header declares (truncated)");

  std::vector<CaptionGroup> groups;
  groups.reserve(static_cast<std::size_t>(s.group_count));
  r.begin_hash();
  for (std::uint64_t gi = 0; gi < s.group_count; ++gi) {
    CaptionGroup g;
    g.caption_id = r.scalar<std::uint64_t>();
    const auto len = r.scalar<std::uint32_t>();
    const unsigned __int128 rest = static_cast<unsigned __int128>(s.group_count - gi - 1) * min_group_bytes +
                                   floats_per_group * 4 + 8;
    require(len + rest <= r.remaining(), ErrorCode::checksum,
            path.string() + ": caption length exceeds file (truncated or corrupt)");
    g.caption = r.string(len);
    g.images.reserve(s.images_per_group);
    for (std::uint32_t k = 0; k < s.images_per_group; ++k) {
      Image img(static_cast<int>(s.height), static_cast<int>(s.width));
      r.floats(img.pixels.data(), img.pixels.size());
      g.images.push_back(std::move(img));
    }
    groups.push_back(std::move(g));
  }
  const std::uint64_t computed = r.end_hash();
  const auto stored = r.scalar<std::uint64_t>();
  require(stored == computed, ErrorCode::checksum, path.string() + ": checksum mismatch");
  require(r.remaining() == 0, ErrorCode::checksum, path.string() + ": trailing bytes after checksum");
  for (const auto& g : groups)
    for (const auto& img : g.images)
      for (float v : img.pixels)
        require(v >= 0.0f && v <= 1.0f, ErrorCode::data, path.string() + ": pixel outside [0,1]");
  s.checksum = stored;
  s.bytes = file_size;
  if (summary) *summary = s;
  return groups;
}

inline std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::io, "shard directory not found: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == kShardExtension) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string shard_file_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "shard-%05zu%s", index, kShardExtension);
  return buf;
}

class DatasetStore {
 public:
  DatasetStore() = default;

  explicit DatasetStore(std::vector<CaptionGroup> groups) {
    for (auto& g : groups) add(std::move(g));
  }

  void add(CaptionGroup g) {
    require(!g.images.empty(), ErrorCode::data, "caption group has no images");
    if (!groups_.empty()) {
      const auto& ref = groups_.front();
      require(g.images.size() == ref.images.size() && g.images.front().height == ref.images.front().height &&
                  g.images.front().width == ref.images.front().width,
              ErrorCode::data, "store groups must share K, H and W");
    }
    require(ids_.insert(g.caption_id).second, ErrorCode::data,
            "duplicate caption_id " + std::to_string(g.caption_id) + " in store");
    groups_.push_back(std::move(g));
  }

  const std::vector<CaptionGroup>& groups() const { return groups_; }
  std::size_t size() const { return groups_.size(); }
  std::size_t images_per_group() const { return groups_.empty() ? 0 : groups_.front().images.size(); }

 private:
  std::vector<CaptionGroup> groups_;
  std::set<std::uint64_t> ids_;
};

inline DatasetStore load_store(const std::filesystem::path& dir) {
  DatasetStore store;
  for (const auto& p : list_shards(dir))
    for (auto& g : read_shard(p)) store.add(std::move(g));
  require(store.size() > 0, ErrorCode::data, "no caption groups found in " + dir.string());
  return store;
}

struct CaptionBatch {
  std::vector<const CaptionGroup*> groups;
  std::vector<std::uint64_t> caption_ids;   // one per flattened image
  std::vector<const Image*> images;         // group-major, K per group

  std::size_t image_count() const { return images.size(); }
};

/// B distinct groups, uniformly without replacement; all K images of each.
inline CaptionBatch sample_batch(const DatasetStore& store, std::size_t captions, Rng& rng) {
  require(captions >= 1, ErrorCode::invalid_argument, "batch needs at least one caption");
  require(store.size() >= captions, ErrorCode::invalid_argument,
          "store holds " + std::to_string(store.size()) + " groups, batch needs " + std::to_string(captions));
  CaptionBatch batch;
  for (std::size_t idx : rng.sample_without_replacement(store.size(), captions)) {
    const CaptionGroup& g = store.groups()[idx];
    batch.groups.push_back(&g);
    for (const auto& img : g.images) {
      batch.caption_ids.push_back(g.caption_id);
      batch.images.push_back(&img);
    }
  }
  return batch;
}

/// Sidecar metadata written next to the shards: caption_id -> concept.
struct GroupInfo {
  std::uint64_t caption_id = 0;
  std::string concept_name;
  std::string source;
};

inline constexpr const char* kIndexFileName = "index.jsonl";

inline void write_index(const std::vector<GroupInfo>& infos, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot write " + path.string());
  for (const auto& i : infos)
    out << nlohmann::json{{"caption_id", i.caption_id}, {"concept", i.concept_name}, {"source", i.source}}.dump()
        << "\n";
}

inline std::map<std::uint64_t, GroupInfo> read_index(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "index not found: " + path.string());
  std::map<std::uint64_t, GroupInfo> out;
  for (std::string line; std::getline(in, line);) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      GroupInfo g{j.at("caption_id").get<std::uint64_t>(), j.at("concept").get<std::string>(),
                  j.at("source").get<std::string>()};
      out[g.caption_id] = g;
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::data, path.string() + ": " + e.what());
    }
  }
  return out;
}

}  // namespace synclr
