#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "uman/tensor.hpp"

namespace uman {

// Named, ordered collection of learnable tensors plus non-learnable buffers
// (batch-norm running statistics). Entries share storage with the layer
// objects that registered them, so optimizer updates are visible everywhere.
class ParameterStore {
public:
    struct Entry {
        std::string name;
        std::string group;
        Tensor tensor;
    };

    Tensor& add_param(const std::string& name, const std::string& group, Tensor t) {
        if (index_.count(name)) throw UsageError("ParameterStore: duplicate name '" + name + "'");
        t.set_requires_grad(true);
        index_[name] = params_.size();
        params_.push_back(Entry{name, group, std::move(t)});
        return params_.back().tensor;
    }

    Tensor& add_buffer(const std::string& name, Tensor t) {
        if (buffer_index_.count(name))
            throw UsageError("ParameterStore: duplicate buffer '" + name + "'");
        buffer_index_[name] = buffers_.size();
        buffers_.push_back(Entry{name, "buffer", std::move(t)});
        return buffers_.back().tensor;
    }

    std::vector<Entry>& params() { return params_; }
    const std::vector<Entry>& params() const { return params_; }
    std::vector<Entry>& buffers() { return buffers_; }
    const std::vector<Entry>& buffers() const { return buffers_; }

    bool has(const std::string& name) const {
        return index_.count(name) || buffer_index_.count(name);
    }

    Tensor& find(const std::string& name) {
        auto it = index_.find(name);
        if (it != index_.end()) return params_[it->second].tensor;
        auto bt = buffer_index_.find(name);
        if (bt != buffer_index_.end()) return buffers_[bt->second].tensor;
        throw UsageError("ParameterStore: unknown tensor '" + name + "'");
    }

    void zero_grad() {
        for (auto& e : params_) e.tensor.zero_grad();
    }

    std::size_t size() const { return params_.size(); }

private:
    std::vector<Entry> params_;
    std::vector<Entry> buffers_;
    std::unordered_map<std::string, std::size_t> index_;
    std::unordered_map<std::string, std::size_t> buffer_index_;
};

// Total learnable parameter count.
inline std::size_t count_parameters(const ParameterStore& store) {
    std::size_t total = 0;
    for (const auto& e : store.params()) total += e.tensor.numel();
    return total;
}

// Per-group parameter counts; groups partition the total.
inline std::map<std::string, std::size_t> list_groups(const ParameterStore& store) {
    std::map<std::string, std::size_t> groups;
    for (const auto& e : store.params()) groups[e.group] += e.tensor.numel();
    return groups;
}

}  // namespace uman
