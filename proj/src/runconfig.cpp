#include "ls4/runconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "ls4/checkpoint.hpp"

namespace ls4 {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

// Parses `text` with the JSON type of `like`.
nlohmann::json typed_value(const std::string& key, const std::string& text, const nlohmann::json& like) {
    auto fail = [&](const char* what) {
        return ConfigError("config key " + key + ": expected " + what + ", got '" + text + "'");
    };
    const char* b = text.data();
    const char* e = b + text.size();
    if (like.is_boolean()) {
        if (text == "true") return true;
        if (text == "false") return false;
        throw fail("true or false");
    }
    if (like.is_number_unsigned() || like.is_number_integer()) {
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(b, e, v);
        if (ec != std::errc() || p != e || text.empty()) throw fail("a non-negative integer");
        return v;
    }
    if (like.is_number_float()) {
        double v = 0;
        auto [p, ec] = std::from_chars(b, e, v);
        if (ec != std::errc() || p != e || text.empty()) throw fail("a number");
        return v;
    }
    return text;
}

}  // namespace

nlohmann::json run_config_to_json(const RunConfig& c) {
    return {{"model", config_to_json(c.model)},
            {"train", vae::train_config_to_json(c.train)},
            {"run",
             {{"init_seed", c.init_seed},
              {"data", c.data},
              {"normalize", c.normalize},
              {"length", c.length},
              {"checkpoint_every", c.checkpoint_every}}}};
}

KeyValues parse_key_values(const std::string& text) {
    KeyValues out;
    std::istringstream in(text);
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
        const std::string s = trim(line.substr(0, line.find('#')));
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config line " + std::to_string(n) + ": expected key = value");
        std::string key = trim(s.substr(0, eq)), value = trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError("config line " + std::to_string(n) + ": empty key");
        for (const auto& [k, v] : out)
            if (k == key) throw ConfigError("config line " + std::to_string(n) + ": duplicate key " + key);
        out.emplace_back(std::move(key), std::move(value));
    }
    return out;
}

RunConfig run_config_from_key_values(const KeyValues& file, const std::vector<std::string>& overrides) {
    bool has_schema = false;
    nlohmann::json j = run_config_to_json(RunConfig{});
    auto apply = [&](const std::string& key, const std::string& value) {
        if (key == "schema_version") {
            if (value != std::to_string(kRunConfigSchema))
                throw ConfigError("unsupported config schema_version " + value);
            has_schema = true;
            return;
        }
        const auto dot = key.find('.');
        if (dot == std::string::npos || !j.contains(key.substr(0, dot)) ||
            !j[key.substr(0, dot)].contains(key.substr(dot + 1)))
            throw ConfigError("unknown config key " + key);
        auto& slot = j[key.substr(0, dot)][key.substr(dot + 1)];
        slot = typed_value(key, value, slot);
    };
    for (const auto& [k, v] : file) apply(k, v);
    if (!has_schema) throw ConfigError("config is missing schema_version");
    for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
        apply(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
    }
    RunConfig c;
    try {
        c.model = config_from_json(j["model"]);
        c.train = vae::train_config_from_json(j["train"]);
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    const auto& r = j["run"];
    c.init_seed = r["init_seed"].get<std::uint64_t>();
    c.data = r["data"].get<std::string>();
    c.normalize = r["normalize"].get<std::string>();
    c.length = r["length"].get<std::size_t>();
    c.checkpoint_every = r["checkpoint_every"].get<std::size_t>();
    if (c.normalize != "none" && c.normalize != "per_sequence" && c.normalize != "unit")
        throw ConfigError("run.normalize must be none, per_sequence or unit");
    if (c.length == 1) throw ConfigError("run.length must be 0 or at least 2");
    return c;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return run_config_from_key_values(parse_key_values(ss.str()), overrides);
}

std::string format_run_config(const RunConfig& c) {
    std::ostringstream out;
    out << "schema_version = " << kRunConfigSchema << "\n";
    const nlohmann::json j = run_config_to_json(c);
    for (const auto& [section, body] : j.items()) {
        for (const auto& [key, v] : body.items()) {
            out << section << '.' << key << " = ";
            if (v.is_string()) out << v.get<std::string>();
            else if (v.is_number_float()) {
                char buf[32];
                auto r = std::to_chars(buf, buf + sizeof buf, v.get<double>());
                out << std::string(buf, r.ptr);
            } else out << v.dump();
            out << "\n";
        }
    }
    return out.str();
}

}  // namespace ls4
