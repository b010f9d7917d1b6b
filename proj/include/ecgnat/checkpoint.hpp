#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ecgnat/model.hpp"
#include "ecgnat/tensor.hpp"

// Run persistence. File layout: 8-byte magic "ECGNAT1\0", a little-endian
// uint64 header length, a UTF-8 JSON header {config, state, tensor table:
// name -> (dtype, shape, offset)}, then tightly packed little-endian float32
// payloads in table order (offsets relative to the payload base).
// save -> load -> save is byte-identical.

namespace ecgnat {

struct Checkpoint {
  ModelConfig config;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;  // table order
  std::map<std::string, uint64_t> counters;                    // epoch, step, ...
  std::array<uint64_t, 4> rng_state{0, 0, 0, 0};
  std::string run_json;  // fully materialized run configuration; "" to omit

  // linear lookup; throws when the name is missing
  const Tensor<float>& tensor(const std::string& name) const;
  uint64_t counter(const std::string& name, uint64_t fallback = 0) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// fixed-field JSON round trip for the architecture block of the header
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& json_text);

}  // namespace ecgnat
