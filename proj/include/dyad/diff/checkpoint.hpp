#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "dyad/diff/layers.hpp"

namespace dyad::diff {

/// Binary parameter container:
///   "DYADCKPT" | u32 version | u32 meta_len | meta (JSON text)
///   | u32 tensor_count | { u32 name_len | name | u32 ndim | u64 dims[ndim]
///   | f32 payload[prod(dims)] }*
/// All integers and floats little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> shape;
  std::vector<float> data;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
  void put(TensorRecord record);
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

template <typename T>
void export_params(const ParamStore<T>& store, Checkpoint& ckpt, const std::string& prefix = "");
/// Every parameter of `store` must be present with a matching shape.
template <typename T>
void import_params(const Checkpoint& ckpt, ParamStore<T>& store, const std::string& prefix = "");

template <typename T>
TensorRecord to_record(const std::string& name, const NdArray<T>& a);
template <typename T>
NdArray<T> from_record(const TensorRecord& r);

}  // namespace dyad::diff
