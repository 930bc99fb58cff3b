#pragma once

#include <string>

#include <json.hpp>

#include "ls4/ls4net.hpp"
#include "ls4/params.hpp"

namespace ls4 {

constexpr std::uint32_t kCheckpointVersion = 1;

/// Model configuration, free-form metadata and any number of named arrays.
struct Checkpoint {
    net::ModelConfig config;
    nlohmann::json meta = nlohmann::json::object();
    ParamStore tensors;
};

nlohmann::json config_to_json(const net::ModelConfig& cfg);
/// Missing keys keep their defaults; unknown keys raise std::invalid_argument.
net::ModelConfig config_from_json(const nlohmann::json& j);

std::string serialize_checkpoint(const Checkpoint& ck);
Checkpoint deserialize_checkpoint(const std::string& bytes);

/// Writes to a temporary file and renames it, so a failed write leaves no partial checkpoint.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ls4
