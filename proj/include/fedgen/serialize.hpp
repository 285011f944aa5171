#pragma once

#include <cstdint>
#include <string>

#include <json.hpp>

#include "fedgen/params.hpp"

namespace fedgen::io {

enum class DType { F64, F32 };

std::string dtype_name(DType d);
DType dtype_from_name(const std::string& name);
int dtype_width(DType d);

/// Writes `<prefix>.manifest.json` (layer_id -> offset/shape/dtype) and
/// `<prefix>.bin` (little-endian values concatenated in key order).
void save_params(const ParamSet& params, const std::string& prefix, DType dtype = DType::F64);
ParamSet load_params(const std::string& prefix);

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

/// FNV-1a over the canonical (key-sorted) JSON dump; stable under key
/// reordering of the source document.
std::uint64_t stable_json_hash(const nlohmann::json& j);
std::string hash_hex(std::uint64_t h);

}  // namespace fedgen::io
