#pragma once

// Stage glue shared by the CLI and the end-to-end tests: captions to
// rendered caption groups to shards plus the concept index.

#include <filesystem>
#include <vector>

#include "synclr/caption_engine.hpp"
#include "synclr/dataset_store.hpp"
#include "synclr/generator_gateway.hpp"
#include "synclr/parallel.hpp"

namespace synclr {

/// Base noise seed for a caption's images; image i uses base + i.
inline std::uint64_t image_seed(std::uint64_t seed, std::uint64_t caption_id) {
  return derive_seed(seed, 0x494D4147, caption_id);
}

/// caption_id is the record's position in the caption store.
inline std::vector<CaptionGroup> render_groups(const std::vector<CaptionRecord>& records, ImageGenerator& backend,
                                               std::uint64_t seed, std::size_t workers = 1) {
  std::vector<CaptionGroup> groups(records.size());
  parallel_for(records.size(), workers, [&](std::size_t, std::size_t i) {
    groups[i].caption_id = i;
    groups[i].caption = records[i].caption;
    groups[i].images = generate_images(backend, records[i], image_seed(seed, i));
  });
  return groups;
}

inline std::vector<GroupInfo> group_index(const std::vector<CaptionRecord>& records) {
  std::vector<GroupInfo> out;
  for (std::size_t i = 0; i < records.size(); ++i) out.push_back({i, records[i].concept_name, records[i].source});
  return out;
}

/// Writes `shard-NNNNN.shard` files of at most `per_shard` groups and
/// `index.jsonl` into `dir`. Returns the shard paths.
inline std::vector<std::filesystem::path> write_dataset(const std::vector<CaptionGroup>& groups,
                                                        const std::vector<GroupInfo>& index,
                                                        const std::filesystem::path& dir, std::size_t per_shard) {
  require(per_shard >= 1, ErrorCode::invalid_argument, "per-shard must be >= 1");
  require(!groups.empty(), ErrorCode::data, "no caption groups to write");
  std::filesystem::create_directories(dir);
  for (const auto& p : list_shards(dir)) std::filesystem::remove(p);
  std::vector<std::filesystem::path> paths;
  for (std::size_t begin = 0, s = 0; begin < groups.size(); begin += per_shard, ++s) {
    const std::size_t end = std::min(groups.size(), begin + per_shard);
    std::vector<CaptionGroup> chunk(groups.begin() + static_cast<std::ptrdiff_t>(begin),
                                    groups.begin() + static_cast<std::ptrdiff_t>(end));
    paths.push_back(dir / shard_file_name(s));
    write_shard(chunk, paths.back());
  }
  write_index(index, dir / kIndexFileName);
  return paths;
}

}  // namespace synclr
