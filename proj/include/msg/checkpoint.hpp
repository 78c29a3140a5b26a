#pragma once

// Binary checkpoint: "MSGC", u32 version, u32 header length, UTF-8 JSON
// header, then little-endian float32 payloads in header order.
//
// Every tensor is written as float32 (the primary block, tensors in header
// order). A float64 copy of the same values follows so that training state
// resumes exactly; readers that only want 32-bit weights can stop after the
// primary block.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"
#include "msg/diffarray.hpp"
#include "msg/model.hpp"

namespace msg::model {

inline constexpr char kCheckpointMagic[4] = {'M', 'S', 'G', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
  std::string name;
  ad::Shape shape;
  std::vector<double> values;
};

struct Checkpoint {
  nlohmann::json meta = nlohmann::json::object();  // config, step count, loss weights, ...
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// IoError on missing file, wrong magic, unsupported version or truncation.
Checkpoint load_checkpoint(const std::filesystem::path& path);

void append_parameters(Checkpoint& ckpt, const ParameterList& params);

// Copies values into params by name. ContractError on missing names or shape
// mismatch.
void restore_parameters(const Checkpoint& ckpt, const ParameterList& params);

}  // namespace msg::model
