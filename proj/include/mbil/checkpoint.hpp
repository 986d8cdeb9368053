#pragma once

#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mbil/tensor.hpp"

namespace mbil {

// Named parameter arrays serialized as a versioned key -> {shape, values}
// map (see docs/file-formats.md).  Doubles round-trip exactly: nlohmann/json
// emits shortest-representation literals.
inline constexpr int kCheckpointVersion = 1;

using NamedParams = std::vector<std::pair<std::string, Tensor*>>;
using NamedParamsConst = std::vector<std::pair<std::string, const Tensor*>>;

nlohmann::json params_to_json(const NamedParamsConst& params);

// Loads into preallocated tensors; shapes must match the stored headers.
void params_from_json(const nlohmann::json& j, const NamedParams& params);

// Wraps params in a checkpoint envelope {format, version, kind, header, params}.
nlohmann::json checkpoint_envelope(const std::string& kind, nlohmann::json header,
                                   const NamedParamsConst& params);

// Validates the envelope (format string, version, kind) and returns it parsed.
nlohmann::json load_checkpoint(const std::string& path, const std::string& expected_kind);

void save_checkpoint(const std::string& path, const nlohmann::json& envelope);

}  // namespace mbil
