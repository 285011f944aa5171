#pragma once

#include <string>
#include <variant>
#include <vector>

#include "fedgen/tensor.hpp"

namespace fedgen {

struct Conv2d {
    std::int64_t in_ch, out_ch, kernel;
    std::int64_t stride = 1, padding = 0;
};
struct Dense {
    std::int64_t in_dim, out_dim;
};
struct BatchNorm {
    std::int64_t num_features;
    double momentum = 0.1;
    double epsilon = 1e-5;
};
struct ReLU {};
struct MaxPool2d {
    std::int64_t kernel, stride;
};
struct GlobalAvgPool {};
struct Flatten {};

using LayerKind = std::variant<Conv2d, Dense, BatchNorm, ReLU, MaxPool2d, GlobalAvgPool, Flatten>;

std::string layer_name(const LayerKind& kind);

enum class ParamRole { ConvW, ConvB, BnScale, BnShift, BnMean, BnVar, FcW, FcB };

std::string role_name(ParamRole role);
ParamRole role_from_name(const std::string& name);

struct ParamSlot {
    ParamRole role;
    std::vector<std::int64_t> shape;
    bool learnable;  // running BN statistics are carried but not optimized
};

std::vector<ParamSlot> layer_param_slots(const LayerKind& kind);

/// Output shape for a given input shape; throws naming the layer and both
/// shapes when they are incompatible.
std::vector<std::int64_t> layer_output_shape(const LayerKind& kind,
                                             const std::vector<std::int64_t>& in_shape);

/// Non-owning parameter views for one layer. `w`/`b` refer to conv or dense
/// weights depending on the layer kind.
struct LayerTensors {
    Tensor* w = nullptr;
    Tensor* b = nullptr;
    Tensor* bn_scale = nullptr;
    Tensor* bn_shift = nullptr;
    Tensor* bn_mean = nullptr;
    Tensor* bn_var = nullptr;
};

struct LayerCache {
    bool valid = false;
    bool train = false;
    Tensor input;
    Tensor saved_mean, saved_invstd;    // BatchNorm, train mode
    std::vector<std::int64_t> argmax;   // MaxPool2d
};

/// Runs one layer. In train mode BatchNorm consumes batch statistics and
/// updates the running mean/var through `params`; in eval mode it reads the
/// running statistics and is a pure function.
Tensor layer_forward(const LayerKind& kind, LayerTensors& params, const Tensor& input,
                     bool train, LayerCache* cache);

/// Backpropagates one layer given the cache of the matching forward call.
/// Fills any non-null gradient tensors in `grads` (shapes must match the
/// parameters) and returns the gradient with respect to the layer input.
Tensor layer_backward(const LayerKind& kind, const LayerTensors& params,
                      const LayerCache& cache, const Tensor& grad_out, LayerTensors& grads);

}  // namespace fedgen
