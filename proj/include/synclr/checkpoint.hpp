#pragma once

// Checkpoint file, little-endian:
//   "SYCK" u32 version u64 step u64 optimizer_t u32 meta_len meta(JSON)
//   u32 array_count, per array: u32 name_len name u32 rows u32 cols f32 data
//   u64 CRC-64/XZ over every preceding byte

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "synclr/binary_io.hpp"
#include "synclr/encoder.hpp"
#include "synclr/schedules.hpp"

namespace synclr {

inline constexpr char kCheckpointMagic[4] = {'S', 'Y', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"image_size", c.image_size},
          {"patch", c.patch},
          {"width", c.width},
          {"depth", c.depth},
          {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden},
          {"head_hidden", c.head_hidden},
          {"projection_dim", c.projection_dim},
          {"prototype_dim", c.prototype_dim},
          {"prototypes", c.prototypes},
          {"positional_embedding", c.positional_embedding},
          {"normalize_prototype_input", c.normalize_prototype_input}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.image_size = j.at("image_size");
  c.patch = j.at("patch");
  c.width = j.at("width");
  c.depth = j.at("depth");
  c.heads = j.at("heads");
  c.mlp_hidden = j.at("mlp_hidden");
  c.head_hidden = j.at("head_hidden");
  c.projection_dim = j.at("projection_dim");
  c.prototype_dim = j.at("prototype_dim");
  c.prototypes = j.at("prototypes");
  c.positional_embedding = j.at("positional_embedding");
  c.normalize_prototype_input = j.at("normalize_prototype_input");
  c.validate();
  return c;
}

struct Checkpoint {
  EncoderConfig config;
  long step = 0;
  nlohmann::json extra = nlohmann::json::object();
  EncoderParams<float> student;
  std::optional<EncoderParams<float>> teacher;
  std::optional<AdamWState<float>> optimizer;
};

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io, "cannot open " + tmp + " for writing");
    binary::Writer w(out);
    w.begin_hash();
    w.bytes(kCheckpointMagic, 4);
    w.scalar(kCheckpointVersion);
    w.scalar(static_cast<std::uint64_t>(ck.step));
    w.scalar(static_cast<std::uint64_t>(ck.optimizer ? ck.optimizer->t : 0));
    const std::string meta = nlohmann::json{{"encoder", to_json(ck.config)}, {"extra", ck.extra}}.dump();
    w.scalar(static_cast<std::uint32_t>(meta.size()));
    w.bytes(meta.data(), meta.size());

    std::vector<std::pair<std::string, const Matrix<float>*>> arrays;
    auto collect = [&](const std::string& prefix, const EncoderParams<float>& p) {
      p.for_each([&](const std::string& name, const Matrix<float>& m) { arrays.emplace_back(prefix + name, &m); });
    };
    collect("student.", ck.student);
    if (ck.teacher) collect("teacher.", *ck.teacher);
    if (ck.optimizer) {
      collect("adam_m.", ck.optimizer->m);
      collect("adam_v.", ck.optimizer->v);
    }
    w.scalar(static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, m] : arrays) {
      w.scalar(static_cast<std::uint32_t>(name.size()));
      w.bytes(name.data(), name.size());
      w.scalar(static_cast<std::uint32_t>(m->rows()));
      w.scalar(static_cast<std::uint32_t>(m->cols()));
      w.floats(m->data(), static_cast<std::size_t>(m->size()));
    }
    const std::uint64_t crc = w.end_hash();
    w.scalar(crc);
    out.flush();
    require(out.good(), ErrorCode::io, "write to " + tmp + " failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::error_code ec;
  const std::uint64_t size = std::filesystem::file_size(path, ec);
  require(!ec, ErrorCode::io, "checkpoint not found: " + path.string());
  std::ifstream in(path, std::ios::binary);
  binary::Reader r(in, size);
  r.begin_hash();
  char magic[4];
  r.bytes(magic, 4);
  require(std::equal(magic, magic + 4, kCheckpointMagic), ErrorCode::data, path.string() + ": not a checkpoint");
  const auto version = r.scalar<std::uint32_t>();
  require(version == kCheckpointVersion, ErrorCode::version, path.string() + ": unsupported checkpoint version");
  Checkpoint ck;
  ck.step = static_cast<long>(r.scalar<std::uint64_t>());
  const auto opt_t = static_cast<long>(r.scalar<std::uint64_t>());
  const auto meta_len = r.scalar<std::uint32_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.string(meta_len));
    ck.config = encoder_config_from_json(meta.at("encoder"));
    ck.extra = meta.value("extra", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::data, path.string() + ": bad checkpoint metadata: " + e.what());
  }

  std::map<std::string, Matrix<float>> arrays;
  const auto count = r.scalar<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.scalar<std::uint32_t>();
    std::string name = r.string(name_len);
    const auto rows = r.scalar<std::uint32_t>();
    const auto cols = r.scalar<std::uint32_t>();
    require(static_cast<unsigned __int128>(rows) * cols * 4 <= r.remaining(), ErrorCode::checksum,
            path.string() + ": array '" + name + "' exceeds file (truncated)");
    Matrix<float> m(rows, cols);
    r.floats(m.data(), static_cast<std::size_t>(m.size()));
    arrays.emplace(std::move(name), std::move(m));
  }
  const std::uint64_t computed = r.end_hash();
  require(r.scalar<std::uint64_t>() == computed, ErrorCode::checksum, path.string() + ": checksum mismatch");

  const EncoderParams<float> layout = init_params<float>(ck.config, 0);
  auto restore = [&](const std::string& prefix) -> std::optional<EncoderParams<float>> {
    if (!arrays.contains(prefix + "patch_embed.weight")) return std::nullopt;
    EncoderParams<float> p = layout;
    p.for_each([&](const std::string& name, Matrix<float>& m) {
      auto it = arrays.find(prefix + name);
      require(it != arrays.end(), ErrorCode::data, path.string() + ": missing array " + prefix + name);
      require(it->second.rows() == m.rows() && it->second.cols() == m.cols(), ErrorCode::data,
              path.string() + ": shape mismatch for " + prefix + name);
      m = it->second;
    });
    return p;
  };
  auto student = restore("student.");
  require(student.has_value(), ErrorCode::data, path.string() + ": checkpoint has no student parameters");
  ck.student = std::move(*student);
  ck.teacher = restore("teacher.");
  auto m = restore("adam_m.");
  auto v = restore("adam_v.");
  if (m && v) ck.optimizer = AdamWState<float>{std::move(*m), std::move(*v), opt_t};
  return ck;
}

}  // namespace synclr
