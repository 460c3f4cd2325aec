#pragma once

#include "fairmeta/autodiff.hpp"

#include <string>
#include <utility>
#include <vector>

namespace fairmeta {

/// Named, ordered model parameters. Names are unique and the order is fixed
/// at construction; updates produce new sets and leave the source untouched.
class ParameterSet {
public:
    struct Entry {
        std::string name;
        Node node;
    };

    ParameterSet() = default;
    explicit ParameterSet(std::vector<Entry> entries);

    /// Fresh leaves requiring gradients, one per (name, tensor).
    static ParameterSet from_tensors(std::vector<std::pair<std::string, Tensor>> tensors);

    std::size_t size() const noexcept { return entries_.size(); }
    bool empty() const noexcept { return entries_.empty(); }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    auto begin() const noexcept { return entries_.begin(); }
    auto end() const noexcept { return entries_.end(); }

    const Node& at(const std::string& name) const;
    std::vector<Node> nodes() const;
    std::vector<Tensor> values() const;

    /// Total number of scalar parameters.
    std::size_t parameter_count() const;

    /// Same names and order, each tensor replaced by a fresh
    /// requires-grad leaf with the same value.
    ParameterSet detached() const;

    /// Same names and order with new values; shapes must match.
    ParameterSet with_values(const std::vector<Tensor>& values) const;

    /// True when names, shapes and values agree bitwise.
    bool same_values(const ParameterSet& other) const;

private:
    std::vector<Entry> entries_;
};

} // namespace fairmeta
