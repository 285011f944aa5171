#include "fedgen/optimizer.hpp"

#include <cmath>
#include <stdexcept>

namespace fedgen {

void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state) {
    state.step_count += 1;
    const AdamConfig& cfg = state.config;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step_count));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step_count));

    for (const auto& [key, grad] : grads) {
        auto it = params.find(key);
        if (it == params.end()) {
            throw std::invalid_argument("adam_step: gradient for unknown parameter '" + key + "'");
        }
        Tensor& p = it->second;
        if (!p.same_shape(grad)) {
            throw std::invalid_argument("adam_step: shape mismatch at '" + key + "': param " +
                                        p.shape_str() + " vs grad " + grad.shape_str());
        }
        Tensor& m = state.first_moment.try_emplace(key, Tensor(grad.shape())).first->second;
        Tensor& v = state.second_moment.try_emplace(key, Tensor(grad.shape())).first->second;
        if (!m.same_shape(grad) || !v.same_shape(grad)) {
            throw std::invalid_argument("adam_step: stale moment shape at '" + key + "'");
        }

        double* pd = p.data();
        double* md = m.data();
        double* vd = v.data();
        const double* gd = grad.data();
        const std::int64_t n = p.size();
        for (std::int64_t i = 0; i < n; ++i) {
            md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gd[i];
            vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gd[i] * gd[i];
            const double mhat = md[i] / bc1;
            const double vhat = vd[i] / bc2;
            pd[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
        }
    }
}

}  // namespace fedgen
