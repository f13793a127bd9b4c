#pragma once

#include <cmath>
#include <vector>

#include "errors.hpp"
#include "param_store.hpp"

namespace s2v {

// Adam with bias correction. Moments are stored in f32 alongside the
// parameters; the per-element update runs in f64. Only trainable entries are
// touched.
class AdamOptimizer {
public:
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    explicit AdamOptimizer(const ParamStore & store) {
        slots_.reserve(store.size());
        for (size_t i = 0; i < store.size(); ++i) {
            const auto & e = store.at(i);
            slots_.push_back({Matrix(e.value.rows, e.value.cols), Matrix(e.value.rows, e.value.cols)});
        }
    }

    long step_count() const { return t_; }

    void step(ParamStore & store, double lr) {
        if (store.size() != slots_.size()) {
            throw ContractError("optimizer bound to a different store layout");
        }
        ++t_;
        double bc1 = 1.0 - std::pow(beta1, (double) t_);
        double bc2 = 1.0 - std::pow(beta2, (double) t_);
        for (size_t i = 0; i < store.size(); ++i) {
            auto & e = store.at(i);
            if (!e.trainable) continue;
            auto & s = slots_[i];
            for (size_t k = 0; k < e.value.data.size(); ++k) {
                double g = e.grad.data[k];
                double m = beta1 * (double) s.m.data[k] + (1.0 - beta1) * g;
                double v = beta2 * (double) s.v.data[k] + (1.0 - beta2) * g * g;
                s.m.data[k] = (float) m;
                s.v.data[k] = (float) v;
                double mhat = m / bc1;
                double vhat = v / bc2;
                e.value.data[k] = (float) ((double) e.value.data[k] - lr * mhat / (std::sqrt(vhat) + eps));
            }
        }
    }

private:
    struct Slot {
        Matrix m;
        Matrix v;
    };
    std::vector<Slot> slots_;
    long t_ = 0;
};

} // namespace s2v
