#pragma once

#include <vector>

#include "fedgen/tensor.hpp"

namespace fedgen {

/// Row-wise softmax of [N, C] logits.
Tensor softmax(const Tensor& logits);

struct CrossEntropyResult {
    double loss;
    Tensor grad_logits;
};

/// Mean over the batch of -log softmax(logits)[label], with the gradient
/// d(loss)/d(logits). Labels must lie in [0, C).
CrossEntropyResult cross_entropy(const Tensor& logits, const std::vector<int>& labels);

}  // namespace fedgen
