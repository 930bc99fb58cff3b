#include "ls4/params.hpp"

#include <stdexcept>

namespace ls4 {

void ParamStore::add(const std::string& name, Tensor value) {
    if (has(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return entries_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
    return entries_[it->second].second;
}

std::size_t ParamStore::total_values() const {
    std::size_t n = 0;
    for (const auto& e : entries_) n += e.second.size();
    return n;
}

std::vector<std::string> ParamStore::names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e.first);
    return out;
}

ParamStore ParamStore::zeros_like() const {
    ParamStore out;
    for (const auto& [name, t] : entries_) out.add(name, Tensor(t.shape(), 0.0));
    return out;
}

ParamStore ParamStore::with_prefix(const std::string& prefix) const {
    ParamStore out;
    for (const auto& [name, t] : entries_)
        if (name.rfind(prefix, 0) == 0) out.add(name, t);
    return out;
}

bool ParamStore::operator==(const ParamStore& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].first != other.entries_[i].first) return false;
        if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
        if (entries_[i].second.storage() != other.entries_[i].second.storage()) return false;
    }
    return true;
}

ad::Var BoundParams::operator()(const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    const Tensor& value = store_.get(name);
    ad::Var v = trainable_ ? tape_.leaf(value) : tape_.constant(value);
    vars_.emplace(name, v);
    return v;
}

ParamStore BoundParams::gradients() const {
    ParamStore out;
    for (const auto& [name, t] : store_.entries()) {
        auto it = vars_.find(name);
        out.add(name, it == vars_.end() ? Tensor(t.shape(), 0.0) : tape_.grad(it->second));
    }
    return out;
}

}  // namespace ls4
