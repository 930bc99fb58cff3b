#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "ls4/ls4net.hpp"
#include "ls4/vae.hpp"

namespace ls4 {

constexpr int kRunConfigSchema = 1;

/// Everything a training run needs besides the data itself.
struct RunConfig {
    net::ModelConfig model;
    vae::TrainConfig train;
    std::uint64_t init_seed = 0;
    std::string data;                 // CSV path
    std::string normalize = "none";   // none | per_sequence | unit
    std::size_t length = 0;           // subsample to this many steps; 0 keeps all
    std::size_t checkpoint_every = 10;

    bool operator==(const RunConfig&) const = default;
};

/// Thrown for malformed or invalid configuration; carries a line number when it came from a file.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

using KeyValues = std::vector<std::pair<std::string, std::string>>;

/// Lines "key = value"; blank lines and '#' comments ignored; duplicate keys rejected.
KeyValues parse_key_values(const std::string& text);

/// Builds a config from file entries (which must include schema_version) followed by "key=value"
/// overrides. Keys are section.name with sections model, train and run.
RunConfig run_config_from_key_values(const KeyValues& file, const std::vector<std::string>& overrides = {});
RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides = {});

/// Full listing of every key, parseable by parse_key_values.
std::string format_run_config(const RunConfig& c);
nlohmann::json run_config_to_json(const RunConfig& c);

}  // namespace ls4
