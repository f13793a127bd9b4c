#pragma once

#include <map>
#include <string>
#include <vector>

#include "errors.hpp"
#include "matrix.hpp"

namespace s2v {

// Named parameter tensors with matching gradient buffers. Iteration order is
// insertion order everywhere (serialization, optimizer steps, gradient
// checking) so runs are reproducible.
class ParamStore {
public:
    struct Entry {
        std::string name;
        Matrix value;
        Matrix grad;
        bool trainable = true;
    };

    int add(const std::string & name, Matrix value, bool trainable = true) {
        if (index_.count(name)) {
            throw ContractError("param '" + name + "' already exists");
        }
        Entry e;
        e.name = name;
        e.grad = Matrix(value.rows, value.cols);
        e.value = std::move(value);
        e.trainable = trainable;
        index_[name] = entries_.size();
        entries_.push_back(std::move(e));
        return (int) entries_.size() - 1;
    }

    bool has(const std::string & name) const { return index_.count(name) != 0; }

    Entry & entry(const std::string & name) {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw InputError("unknown param '" + name + "'");
        }
        return entries_[it->second];
    }
    const Entry & entry(const std::string & name) const {
        auto it = index_.find(name);
        if (it == index_.end()) {
            throw InputError("unknown param '" + name + "'");
        }
        return entries_[it->second];
    }

    Matrix & value(const std::string & name) { return entry(name).value; }
    const Matrix & value(const std::string & name) const { return entry(name).value; }
    Matrix & grad(const std::string & name) { return entry(name).grad; }

    size_t size() const { return entries_.size(); }
    Entry & at(size_t i) { return entries_[i]; }
    const Entry & at(size_t i) const { return entries_[i]; }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto & e : entries_) out.push_back(e.name);
        return out;
    }

    void zero_grads() {
        for (auto & e : entries_) {
            std::fill(e.grad.data.begin(), e.grad.data.end(), 0.0f);
        }
    }

private:
    std::vector<Entry> entries_;
    std::map<std::string, size_t> index_;
};

} // namespace s2v
