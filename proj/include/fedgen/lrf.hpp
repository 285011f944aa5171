#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "fedgen/tensor.hpp"

namespace fedgen::lrf {

/// Conv kernel reshaped to (IC*KS) x (OC*KS); the reshape is a bijection.
struct WeightMatrix {
    Tensor matrix;
    std::array<std::int64_t, 4> source_shape;  // (OC, IC, KS, KS)
};

/// matrix(ic*KS + kh, oc*KS + kw) = conv_weight(oc, ic, kh, kw)
WeightMatrix to_matrix(const Tensor& conv_weight);
Tensor from_matrix(const WeightMatrix& wm);

struct SvdResult {
    Tensor u;               // r x r, orthogonal
    std::vector<double> s;  // min(r, c), descending, non-negative
    Tensor v;               // c x c, orthogonal
};

/// One-sided Jacobi SVD with a full orthonormal basis on both sides.
/// Throws after the sweep cap with a residual report if it fails to converge.
SvdResult svd(const Tensor& m);

/// Truncated scaled factors: P = U[:, :k] diag(sqrt(S)), Q = diag(sqrt(S)) V[:, :k]^T,
/// after sign canonicalization (largest-|entry| of each left singular vector
/// made non-negative, right vector flipped to compensate).
struct FactorPair {
    Tensor p;  // r x k
    Tensor q;  // k x c
    std::int64_t k = 0;
    std::vector<double> sigma;  // the k retained singular values, descending
};

/// k above min(r, c) is clamped with a warning on stderr.
FactorPair truncate(const SvdResult& decomposition, std::int64_t k);

/// P * Q.
Tensor reconstruct(const FactorPair& f);

/// svd + truncate of an arbitrary matrix.
FactorPair factorize(const Tensor& matrix, std::int64_t k);

/// Flattened P followed by flattened Q (row-major), the hypernetwork wire format.
std::vector<double> flatten_factors(const FactorPair& f);
FactorPair unflatten_factors(const std::vector<double>& x, std::int64_t r, std::int64_t c,
                             std::int64_t k);

}  // namespace fedgen::lrf
