#include "fairmeta/parameter_set.hpp"

#include <stdexcept>
#include <unordered_set>

namespace fairmeta {

ParameterSet::ParameterSet(std::vector<Entry> entries) : entries_(std::move(entries)) {
    std::unordered_set<std::string> names;
    for (const Entry& e : entries_) {
        if (!e.node) throw std::invalid_argument("parameter set: null node for '" + e.name + "'");
        if (!names.insert(e.name).second) {
            throw std::invalid_argument("parameter set: duplicate name '" + e.name + "'");
        }
    }
}

ParameterSet ParameterSet::from_tensors(std::vector<std::pair<std::string, Tensor>> tensors) {
    std::vector<Entry> entries;
    entries.reserve(tensors.size());
    for (auto& [name, t] : tensors) entries.push_back({std::move(name), Node::parameter(std::move(t))});
    return ParameterSet(std::move(entries));
}

const Node& ParameterSet::at(const std::string& name) const {
    for (const Entry& e : entries_) {
        if (e.name == name) return e.node;
    }
    throw std::out_of_range("parameter set: no parameter named '" + name + "'");
}

std::vector<Node> ParameterSet::nodes() const {
    std::vector<Node> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(e.node);
    return out;
}

std::vector<Tensor> ParameterSet::values() const {
    std::vector<Tensor> out;
    out.reserve(entries_.size());
    for (const Entry& e : entries_) out.push_back(e.node.value());
    return out;
}

std::size_t ParameterSet::parameter_count() const {
    std::size_t n = 0;
    for (const Entry& e : entries_) n += e.node.value().size();
    return n;
}

ParameterSet ParameterSet::detached() const { return with_values(values()); }

ParameterSet ParameterSet::with_values(const std::vector<Tensor>& values) const {
    if (values.size() != entries_.size()) {
        throw std::invalid_argument("parameter set: expected " + std::to_string(entries_.size()) + " tensors, got " +
                                    std::to_string(values.size()));
    }
    std::vector<Entry> out;
    out.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (values[i].shape() != entries_[i].node.shape()) {
            throw std::invalid_argument("parameter set: shape mismatch for '" + entries_[i].name + "'");
        }
        out.push_back({entries_[i].name, Node::parameter(values[i])});
    }
    return ParameterSet(std::move(out));
}

bool ParameterSet::same_values(const ParameterSet& other) const {
    if (size() != other.size()) return false;
    for (std::size_t i = 0; i < size(); ++i) {
        if (entries_[i].name != other.entries_[i].name) return false;
        if (!bitwise_equal(entries_[i].node.value(), other.entries_[i].node.value())) return false;
    }
    return true;
}

} // namespace fairmeta
