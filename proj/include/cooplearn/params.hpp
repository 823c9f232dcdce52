#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/numarray.hpp"

namespace coop {

// Ordered collection of named parameters. Order is the canonical flattening
// order used by gradients, optimizers, and checkpoints.
class ParamStore {
public:
    NumArray& add(const std::string& name, NumArray value) {
        if (find(name) != nullptr)
            throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
        names_.push_back(name);
        values_.push_back(std::move(value));
        return values_.back();
    }

    std::size_t count() const { return values_.size(); }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& v : values_) n += v.size();
        return n;
    }

    const std::vector<std::string>& names() const { return names_; }
    NumArray& value(std::size_t i) { return values_[i]; }
    const NumArray& value(std::size_t i) const { return values_[i]; }

    NumArray* find(const std::string& name) {
        for (std::size_t i = 0; i < names_.size(); ++i)
            if (names_[i] == name) return &values_[i];
        return nullptr;
    }
    const NumArray* find(const std::string& name) const {
        return const_cast<ParamStore*>(this)->find(name);
    }

    NumArray& at(const std::string& name) {
        NumArray* p = find(name);
        if (!p) throw std::invalid_argument("ParamStore: unknown parameter '" + name + "'");
        return *p;
    }
    const NumArray& at(const std::string& name) const {
        return const_cast<ParamStore*>(this)->at(name);
    }

    std::vector<double> flatten() const {
        std::vector<double> out;
        out.reserve(total_size());
        for (const auto& v : values_)
            out.insert(out.end(), v.values().begin(), v.values().end());
        return out;
    }

    void assign_flat(const std::vector<double>& flat) {
        if (flat.size() != total_size())
            throw std::invalid_argument("ParamStore: flat size " + std::to_string(flat.size()) +
                                        " != parameter count " + std::to_string(total_size()));
        std::size_t off = 0;
        for (auto& v : values_) {
            for (std::size_t k = 0; k < v.size(); ++k) v[k] = flat[off + k];
            off += v.size();
        }
    }

private:
    std::vector<std::string> names_;
    std::vector<NumArray> values_;
};

}  // namespace coop
