#pragma once

// Versioned binary checkpoint: the full run configuration as JSON plus every
// named parameter block with its shape and raw values. Doubles are written
// through their bit pattern in little-endian order, so save followed by load
// reproduces weights bit for bit on any host.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "rdr/config.hpp"
#include "rdr/errors.hpp"
#include "rdr/heads.hpp"
#include "rdr/tensor.hpp"

namespace rdr::checkpoint {

inline constexpr char kMagic[8] = {'R', 'D', 'R', 'C', 'K', 'P', 'T', '\n'};
inline constexpr std::uint32_t kVersion = 1;

struct Block {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

struct Loaded {
  config::RunConfig config;
  std::vector<Block> blocks;
};

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 4);
}

inline void put_u64(std::ostream& out, std::uint64_t v) {
  char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, 8);
}

inline std::uint32_t take_u32(std::istream& in, const char* what) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) {
    throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
  }
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint64_t take_u64(std::istream& in, const char* what) {
  unsigned char b[8];
  if (!in.read(reinterpret_cast<char*>(b), 8)) {
    throw CheckpointError(std::string("checkpoint: truncated while reading ") + what);
  }
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline void save(const std::string& path, const config::RunConfig& cfg,
                 const heads::Head& head) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot open '" + path + "' for writing");

  out.write(kMagic, sizeof(kMagic));
  detail::put_u32(out, kVersion);

  const std::string cfg_json = config::to_json(cfg).dump();
  detail::put_u32(out, static_cast<std::uint32_t>(cfg_json.size()));
  out.write(cfg_json.data(), static_cast<std::streamsize>(cfg_json.size()));

  const auto& named = head.named_parameters();
  detail::put_u32(out, static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t i = 0; i < t.rank(); ++i) detail::put_u64(out, t.extent(i));
  }
  for (const auto& [name, t] : named) {
    for (double v : t.values()) {
      detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  out.flush();
  if (!out) throw CheckpointError("checkpoint: write to '" + path + "' failed");
}

inline Loaded load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open '" + path + "'");

  char magic[sizeof(kMagic)];
  if (!in.read(magic, sizeof(magic)) ||
      std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("checkpoint: '" + path + "' is not a checkpoint file");
  }
  const std::uint32_t version = detail::take_u32(in, "version");
  if (version != kVersion) {
    throw CheckpointError("checkpoint: unsupported version " +
                          std::to_string(version) + " (expected " +
                          std::to_string(kVersion) + ")");
  }

  const std::uint32_t cfg_len = detail::take_u32(in, "config length");
  std::string cfg_json(cfg_len, '\0');
  if (!in.read(cfg_json.data(), cfg_len)) {
    throw CheckpointError("checkpoint: truncated while reading config");
  }
  Loaded loaded;
  try {
    loaded.config = config::run_config_from_json(nlohmann::json::parse(cfg_json));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint: embedded config is not valid JSON: ") +
                          e.what());
  }

  const std::uint32_t n_blocks = detail::take_u32(in, "block count");
  loaded.blocks.resize(n_blocks);
  for (auto& b : loaded.blocks) {
    const std::uint32_t name_len = detail::take_u32(in, "block name length");
    b.name.resize(name_len);
    if (!in.read(b.name.data(), name_len)) {
      throw CheckpointError("checkpoint: truncated while reading block name");
    }
    const std::uint32_t rank = detail::take_u32(in, "block rank");
    b.shape.resize(rank);
    for (auto& e : b.shape) {
      e = static_cast<std::size_t>(detail::take_u64(in, "block extent"));
    }
  }
  for (auto& b : loaded.blocks) {
    b.values.resize(ad::shape_numel(b.shape));
    for (auto& v : b.values) {
      v = std::bit_cast<double>(detail::take_u64(in, "block values"));
    }
  }
  char extra;
  if (in.read(&extra, 1)) {
    throw CheckpointError("checkpoint: trailing bytes after parameter blocks");
  }
  return loaded;
}

// Copies block values into the head's parameters, matched by name. Every
// head parameter must be covered exactly once with matching shape.
inline void restore(heads::Head& head, const std::vector<Block>& blocks) {
  const auto& named = head.named_parameters();
  if (blocks.size() != named.size()) {
    throw CheckpointError("checkpoint: " + std::to_string(blocks.size()) +
                          " blocks for a head with " +
                          std::to_string(named.size()) + " parameters");
  }
  for (const auto& b : blocks) {
    ad::Tensor* target = nullptr;
    try {
      target = &head.param(b.name);
    } catch (const Error&) {
      throw CheckpointError("checkpoint: block '" + b.name +
                            "' has no matching head parameter");
    }
    if (target->shape() != b.shape) {
      throw CheckpointError("checkpoint: block '" + b.name + "' has shape " +
                            ad::shape_str(b.shape) + ", head expects " +
                            ad::shape_str(target->shape()));
    }
    target->mutable_values() = b.values;
  }
}

// Rebuilds the head a checkpoint was saved from: construct from the embedded
// config, then overwrite the fresh init with the stored blocks.
inline heads::Head restore_head(const Loaded& loaded) {
  heads::Head head(loaded.config.head, loaded.config.seed);
  restore(head, loaded.blocks);
  return head;
}

}  // namespace rdr::checkpoint
