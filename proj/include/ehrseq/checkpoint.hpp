#pragma once

#include <filesystem>
#include <vector>

#include "ehrseq/model.hpp"
#include "json.hpp"

namespace ehrseq {

/// Writes named fp64 arrays to `path` and `meta` to `path` + ".json".
/// Layout: "EHRSEQCK", u32 version, u64 count, then per array
/// u32 name length, name bytes, u32 rank, i64 dims, f64 data (little-endian).
void save_checkpoint(const std::filesystem::path& path, const ParameterList& params, const nlohmann::json& meta);

/// Loads arrays into `params` by name; every parameter must be present with
/// the same shape. Returns the sidecar.
nlohmann::json load_checkpoint(const std::filesystem::path& path, ParameterList& params);

nlohmann::json read_checkpoint_meta(const std::filesystem::path& path);

using Snapshot = std::vector<Eigen::VectorXd>;
Snapshot snapshot(const ParameterList& params);
void restore(ParameterList& params, const Snapshot& snap);

}  // namespace ehrseq
