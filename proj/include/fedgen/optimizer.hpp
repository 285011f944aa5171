#pragma once

#include <map>
#include <string>

#include "fedgen/params.hpp"
#include "fedgen/tensor.hpp"

namespace fedgen {

struct AdamConfig {
    double learning_rate = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// First/second moment estimates per parameter, bias-corrected on use.
/// Moments are created lazily with the shapes of the gradients they track.
struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::map<std::string, Tensor> first_moment;
    std::map<std::string, Tensor> second_moment;
};

/// One Adam update over the keys present in `grads`; keys absent from
/// `grads` (e.g. BatchNorm running statistics) are left untouched.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state);

}  // namespace fedgen
