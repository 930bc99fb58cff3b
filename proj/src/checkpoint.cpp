#include "ls4/checkpoint.hpp"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace ls4 {

namespace {

constexpr char kMagic[8] = {'L', 'S', '4', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

class Reader {
public:
    explicit Reader(const std::string& s) : s_(s) {}
    template <class T>
    T get() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, s_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string out = s_.substr(pos_, n);
        pos_ += n;
        return out;
    }
    bool done() const { return pos_ == s_.size(); }

private:
    void need(std::size_t n) const {
        if (s_.size() - pos_ < n) throw std::runtime_error("checkpoint: truncated data");
    }
    const std::string& s_;
    std::size_t pos_ = 0;
};

}  // namespace

nlohmann::json config_to_json(const net::ModelConfig& c) {
    return {{"H", c.H},
            {"N", c.N},
            {"latent_dim", c.latent_dim},
            {"num_layers1", c.num_layers1},
            {"num_layers2", c.num_layers2},
            {"x_dim", c.x_dim},
            {"sigma_x", c.sigma_x},
            {"decoder_uses_x", c.decoder_uses_x},
            {"delta", c.delta}};
}

net::ModelConfig config_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::invalid_argument("model config must be an object");
    net::ModelConfig c;
    for (const auto& [key, value] : j.items()) {
        if (key == "H") c.H = value.get<std::size_t>();
        else if (key == "N") c.N = value.get<std::size_t>();
        else if (key == "latent_dim") c.latent_dim = value.get<std::size_t>();
        else if (key == "num_layers1") c.num_layers1 = value.get<std::size_t>();
        else if (key == "num_layers2") c.num_layers2 = value.get<std::size_t>();
        else if (key == "x_dim") c.x_dim = value.get<std::size_t>();
        else if (key == "sigma_x") c.sigma_x = value.get<double>();
        else if (key == "decoder_uses_x") c.decoder_uses_x = value.get<bool>();
        else if (key == "delta") c.delta = value.get<double>();
        else throw std::invalid_argument("unknown model config key: " + key);
    }
    c.validate();
    return c;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
    std::string out(kMagic, sizeof(kMagic));
    put<std::uint32_t>(out, kCheckpointVersion);
    const std::string header = nlohmann::json{{"config", config_to_json(ck.config)}, {"meta", ck.meta}}.dump();
    put<std::uint64_t>(out, header.size());
    out += header;
    put<std::uint64_t>(out, ck.tensors.size());
    for (const auto& [name, t] : ck.tensors.entries()) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
        out.append(reinterpret_cast<const char*>(t.storage().data()), t.size() * sizeof(double));
    }
    return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
    Reader r(bytes);
    if (r.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic)))
        throw std::runtime_error("checkpoint: bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
    Checkpoint ck;
    const auto header = nlohmann::json::parse(r.bytes(r.get<std::uint64_t>()));
    ck.config = config_from_json(header.at("config"));
    ck.meta = header.at("meta");
    const auto count = r.get<std::uint64_t>();
    for (std::uint64_t i = 0; i < count; ++i) {
        std::string name = r.bytes(r.get<std::uint32_t>());
        Shape shape(r.get<std::uint32_t>());
        for (auto& d : shape) d = r.get<std::uint64_t>();
        Tensor t(shape);
        std::string raw = r.bytes(t.size() * sizeof(double));
        std::memcpy(t.storage().data(), raw.data(), raw.size());
        ck.tensors.add(name, std::move(t));
    }
    if (!r.done()) throw std::runtime_error("checkpoint: trailing bytes");
    return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string bytes = serialize_checkpoint(ck);
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        if (!f) throw std::runtime_error("cannot write " + tmp);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw std::runtime_error("write failed: " + tmp);
    }
    std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_checkpoint(ss.str());
}

}  // namespace ls4
