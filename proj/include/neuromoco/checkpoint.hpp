#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/params.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco::checkpoint {

// One named parameter as stored on disk. Payload is always 32-bit floats
// regardless of the in-memory scalar type.
struct Entry {
    std::string name;
    Shape shape;
    std::vector<float> data;
};

// "NMCW" container: magic, version, entry count; per entry a length-prefixed
// UTF-8 name, rank, dims (unsigned 32-bit each), then the little-endian f32
// payload.
std::vector<Entry> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<Entry>& entries);

template <class S>
std::vector<Entry> from_params(const ParamSet<S>& params) {
    std::vector<Entry> out;
    out.reserve(params.size());
    for (const auto& [name, t] : params) {
        Entry e;
        e.name = name;
        e.shape = t.shape();
        e.data.reserve(t.values().size());
        for (S v : t.values()) e.data.push_back(static_cast<float>(v));
        out.push_back(std::move(e));
    }
    return out;
}

// Copy checkpoint entries into registered parameters. Every stored entry
// whose name starts with `file_prefix` maps onto the set entry named
// `set_prefix + <rest>`; unknown names or shape disagreements fail, and so
// does an entry of the set (under set_prefix) that the file never fills.
// Entries outside `file_prefix` are ignored, which lets a combined
// master/subordinate checkpoint feed a single backbone.
template <class S>
void load_into(const std::vector<Entry>& entries, ParamSet<S>& params,
               const std::string& file_prefix = "", const std::string& set_prefix = "") {
    std::vector<bool> filled(params.size(), false);
    for (const Entry& e : entries) {
        if (e.name.rfind(file_prefix, 0) != 0) continue;
        const std::string target = set_prefix + e.name.substr(file_prefix.size());
        Tensor<S>* t = nullptr;
        size_t idx = 0;
        for (; idx < params.size(); ++idx)
            if (params.items()[idx].first == target) {
                t = &params.items()[idx].second;
                break;
            }
        if (!t) throw ValidationError("checkpoint: unexpected entry '" + e.name + "'");
        if (t->shape() != e.shape)
            throw ValidationError("checkpoint: shape mismatch for '" + e.name + "': stored " +
                                  shape_str(e.shape) + ", expected " + shape_str(t->shape()));
        if (filled[idx]) throw ValidationError("checkpoint: duplicate entry '" + e.name + "'");
        auto& v = t->values();
        for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<S>(e.data[i]);
        filled[idx] = true;
    }
    for (size_t i = 0; i < params.size(); ++i) {
        const std::string& name = params.items()[i].first;
        if (name.rfind(set_prefix, 0) == 0 && !filled[i])
            throw ValidationError("checkpoint: missing entry for '" + name + "'");
    }
}

} // namespace neuromoco::checkpoint
