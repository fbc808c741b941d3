// SPDX-License-Identifier: Apache-2.0
//
// Single-file checkpoint container:
//
//   "XDCK" | u32 version | u32 section count
//   per section: 4-byte tag | u64 payload bytes | payload
//
// Sections: CONF (JSON: schema, backbone, xd options, run config), one XDOP
// per searchable edge, DENS (fixed-edge weights), OPTS (optimizer state),
// HIST (history JSONL), META (JSON). Integers and floats are little-endian;
// complex values are stored as (re, im) float64 pairs.
#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "xdops/search.hpp"

namespace xd::ckpt {

inline constexpr std::uint32_t kVersion = 1;
inline constexpr int kSchema = 1;

struct Checkpoint {
  search::Supernet net;
  search::TrainerState state;
  search::TrainConfig train;
  search::History history;
  nlohmann::json run = nlohmann::json::object();   // full run config, if any
  nlohmann::json meta = nlohmann::json::object();  // epoch, tag, metrics
};

void save(const std::string& path, const search::Supernet& net, const search::TrainerState& state,
          const search::TrainConfig& train, const search::History& history,
          const nlohmann::json& run = nlohmann::json::object(), const nlohmann::json& meta = nlohmann::json::object());

/// Rebuilds the supernet from CONF and fills every tensor from the data
/// sections. Throws std::invalid_argument on a bad magic, version, schema
/// or structural mismatch.
Checkpoint load(const std::string& path);

/// Binary XDOP payload: filter shape, pad spec (n, m, view), depth triple,
/// frozen flags, then K, L, M per axis ({n, depth, stage diagonals}), b, C,
/// and the weight.
std::string serialize_xdop(const XDOp& op);
/// Copies a serialized payload into an op of identical structure.
void deserialize_xdop(const std::string& bytes, XDOp& op);

}  // namespace xd::ckpt
