#pragma once

#include <string>
#include <utility>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco {

// Insertion-ordered name -> tensor registry. Modules register parameters and
// buffers under stable names; checkpoints, optimizers, and momentum updates
// all walk this order, which keeps every serialized artifact deterministic.
template <class S>
class ParamSet {
public:
    void add(const std::string& name, Tensor<S> t) {
        if (find(name)) throw ValidationError("ParamSet: duplicate name '" + name + "'");
        items_.emplace_back(name, std::move(t));
    }

    Tensor<S>* find(const std::string& name) {
        for (auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    const Tensor<S>* find(const std::string& name) const {
        for (const auto& [n, t] : items_)
            if (n == name) return &t;
        return nullptr;
    }

    Tensor<S>& at(const std::string& name) {
        Tensor<S>* t = find(name);
        if (!t) throw ValidationError("ParamSet: unknown name '" + name + "'");
        return *t;
    }

    const Tensor<S>& at(const std::string& name) const {
        const Tensor<S>* t = find(name);
        if (!t) throw ValidationError("ParamSet: unknown name '" + name + "'");
        return *t;
    }

    // Adopt every entry of `other` under `prefix + name`. Handles are shared,
    // not copied: updating through either set touches the same storage.
    void merge(const std::string& prefix, const ParamSet& other) {
        for (const auto& [n, t] : other.items_) add(prefix + n, t);
    }

    size_t size() const { return items_.size(); }
    auto begin() { return items_.begin(); }
    auto end() { return items_.end(); }
    auto begin() const { return items_.begin(); }
    auto end() const { return items_.end(); }

    std::vector<std::pair<std::string, Tensor<S>>>& items() { return items_; }
    const std::vector<std::pair<std::string, Tensor<S>>>& items() const { return items_; }

private:
    std::vector<std::pair<std::string, Tensor<S>>> items_;
};

} // namespace neuromoco
