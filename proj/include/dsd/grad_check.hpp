#pragma once

#include <functional>
#include <map>
#include <string>

#include "dsd/common.hpp"
#include "dsd/tensor.hpp"

namespace dsd {

using ParamsF64 = std::map<std::string, Tensor<double>>;

inline ParamsF64 to_f64(const std::map<std::string, Tensor<float>>& p) {
    ParamsF64 out;
    for (const auto& [name, t] : p) out[name] = t.cast<double>();
    return out;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_param;
    size_t worst_index = 0;
    double analytic = 0.0, numeric = 0.0;
    int checked = 0;
};

// Central-difference check of analytic parameter gradients. `loss_fn` must
// evaluate the scalar loss from a full f64 parameter set; `analytic` holds
// the gradients from one backward pass at `params`. A subset of coordinates
// per tensor is probed (all of them if per_tensor <= 0).
inline GradCheckResult grad_check(const std::function<double(const ParamsF64&)>& loss_fn,
                                  const ParamsF64& params, const ParamsF64& analytic,
                                  int per_tensor, Rng& rng, double eps = 1e-5) {
    GradCheckResult res;
    ParamsF64 probe = params;
    for (const auto& [name, t] : params) {
        auto ait = analytic.find(name);
        const size_t n = t.size();
        if (n == 0) continue;
        std::vector<size_t> coords;
        if (per_tensor <= 0 || static_cast<size_t>(per_tensor) >= n) {
            coords.resize(n);
            for (size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            for (int i = 0; i < per_tensor; ++i) coords.push_back(rng.uniform_u64(n));
        }
        auto& pt = probe[name];
        for (size_t c : coords) {
            const double orig = pt.data[c];
            pt.data[c] = orig + eps;
            const double lp = loss_fn(probe);
            pt.data[c] = orig - eps;
            const double lm = loss_fn(probe);
            pt.data[c] = orig;
            const double num = (lp - lm) / (2.0 * eps);
            const double ana = ait == analytic.end() ? 0.0 : ait->second.data[c];
            const double rel = std::abs(ana - num) / std::max({1.0, std::abs(ana), std::abs(num)});
            ++res.checked;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = name;
                res.worst_index = c;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }
    return res;
}

}  // namespace dsd
