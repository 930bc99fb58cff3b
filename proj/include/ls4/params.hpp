#pragma once

#include <cstddef>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "ls4/autodiff.hpp"
#include "ls4/tensor.hpp"

namespace ls4 {

/// Ordered collection of named parameter arrays.
class ParamStore {
public:
    void add(const std::string& name, Tensor value);
    bool has(const std::string& name) const { return index_.count(name) != 0; }
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;

    std::size_t size() const { return entries_.size(); }
    std::size_t total_values() const;
    const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
    std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }
    std::vector<std::string> names() const;

    /// Copy with every array zeroed (same names and shapes).
    ParamStore zeros_like() const;
    /// Subset whose names start with prefix.
    ParamStore with_prefix(const std::string& prefix) const;

    bool operator==(const ParamStore& other) const;

private:
    std::vector<std::pair<std::string, Tensor>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
};

/// Parameters placed on a tape. Leaves are created on first use.
class BoundParams {
public:
    BoundParams(ad::Tape& tape, const ParamStore& store, bool trainable)
        : tape_(tape), store_(store), trainable_(trainable) {}

    ad::Var operator()(const std::string& name);
    ad::Tape& tape() { return tape_; }

    /// Gradients of the last backward pass; parameters never used get zeros.
    ParamStore gradients() const;

private:
    ad::Tape& tape_;
    const ParamStore& store_;
    bool trainable_;
    std::unordered_map<std::string, ad::Var> vars_;
};

}  // namespace ls4
