#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "param_store.hpp"
#include "rng.hpp"

namespace s2v {

// Finite-difference gradient verification.
//
// The loss builder must evaluate the loss as a pure function of the store's
// current values; when with_grad is true it must also accumulate analytic
// gradients into the store. Each trainable tensor has up to max_coords
// coordinates sampled. The numeric side extrapolates two central quotients
// taken at the actually-representable f32 steps, cancelling the quadratic
// truncation term that a single quotient leaves at usable step sizes.
struct GradCheckCoord {
    std::string param;
    size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_err = 0.0;
};

struct GradCheckResult {
    double max_rel_err = 0.0;
    GradCheckCoord worst;
    int coords_checked = 0;

    bool pass(double tol = 1e-3) const { return max_rel_err < tol; }
};

inline GradCheckResult grad_check(const std::function<double(ParamStore &, bool)> & loss,
                                  ParamStore & store, double step = 1e-3, int max_coords = 64,
                                  uint64_t seed = 1234) {
    store.zero_grads();
    loss(store, true);

    GradCheckResult res;
    Rng rng(seed);
    for (size_t e = 0; e < store.size(); ++e) {
        auto & entry = store.at(e);
        if (!entry.trainable) continue;
        size_t n = entry.value.data.size();
        std::vector<size_t> coords;
        if ((int) n <= max_coords) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            Rng sub = rng.split(entry.name);
            for (int i = 0; i < max_coords; ++i) {
                coords.push_back((size_t) sub.uniform_int((int) n));
            }
        }
        for (size_t ci : coords) {
            float saved = entry.value.data[ci];
            auto eval_at = [&](float x) {
                entry.value.data[ci] = x;
                return loss(store, false);
            };
            float xp1 = (float) ((double) saved + step);
            float xm1 = (float) ((double) saved - step);
            float xp2 = (float) ((double) saved + 2.0 * step);
            float xm2 = (float) ((double) saved - 2.0 * step);
            double fp1 = eval_at(xp1);
            double fm1 = eval_at(xm1);
            double fp2 = eval_at(xp2);
            double fm2 = eval_at(xm2);
            entry.value.data[ci] = saved;
            double d1 = ((double) xp1 - (double) xm1) / 2.0;
            double d2 = ((double) xp2 - (double) xm2) / 2.0;
            double q1 = (fp1 - fm1) / (2.0 * d1);
            double q2 = (fp2 - fm2) / (2.0 * d2);
            double numeric = (d2 * d2 * q1 - d1 * d1 * q2) / (d2 * d2 - d1 * d1);
            double analytic = entry.grad.data[ci];
            double rel = std::fabs(analytic - numeric) /
                         (std::fabs(analytic) + std::fabs(numeric) + 1e-8);
            ++res.coords_checked;
            if (rel > res.max_rel_err) {
                res.max_rel_err = rel;
                res.worst = {entry.name, ci, analytic, numeric, rel};
            }
        }
    }
    return res;
}

} // namespace s2v
