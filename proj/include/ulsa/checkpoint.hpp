#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ulsa/tensor.hpp"

namespace ulsa {

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Checkpoint container:
///   8 bytes  magic "ULSACKPT"
///   8 bytes  little-endian u64 header length L
///   L bytes  UTF-8 JSON header
///            {"format":"ulsa-checkpoint","version":1,
///             "tensors":[{"name","shape","offset","nbytes"}...]}
///   payload  little-endian float64 data; offsets are relative to the payload start
void save_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path);

}  // namespace ulsa
