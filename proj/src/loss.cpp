#include "fedgen/loss.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace fedgen {

Tensor softmax(const Tensor& logits) {
    if (logits.ndim() != 2) {
        throw std::invalid_argument("softmax: expected [N, C] logits, got " + logits.shape_str());
    }
    const std::int64_t N = logits.dim(0), C = logits.dim(1);
    Tensor out(logits.shape());
    for (std::int64_t n = 0; n < N; ++n) {
        const double* row = logits.data() + n * C;
        double* o = out.data() + n * C;
        double mx = row[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double denom = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            o[c] = std::exp(row[c] - mx);
            denom += o[c];
        }
        for (std::int64_t c = 0; c < C; ++c) o[c] /= denom;
    }
    return out;
}

CrossEntropyResult cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    if (logits.ndim() != 2) {
        throw std::invalid_argument("cross_entropy: expected [N, C] logits, got " + logits.shape_str());
    }
    const std::int64_t N = logits.dim(0), C = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != N) {
        throw std::invalid_argument("cross_entropy: batch " + std::to_string(N) + " vs " +
                                    std::to_string(labels.size()) + " labels");
    }
    for (int lbl : labels) {
        if (lbl < 0 || lbl >= C) {
            throw std::out_of_range("cross_entropy: label " + std::to_string(lbl) + " outside [0, " +
                                    std::to_string(C) + ")");
        }
    }

    Tensor probs = softmax(logits);
    double loss = 0.0;
    for (std::int64_t n = 0; n < N; ++n) {
        const double* row = logits.data() + n * C;
        double mx = row[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        double lse = 0.0;
        for (std::int64_t c = 0; c < C; ++c) lse += std::exp(row[c] - mx);
        // -log p = logsumexp - logit, numerically stable for saturated rows
        loss += (std::log(lse) + mx) - row[labels[static_cast<std::size_t>(n)]];
    }
    loss /= static_cast<double>(N);

    Tensor grad = std::move(probs);
    const double inv_n = 1.0 / static_cast<double>(N);
    for (std::int64_t n = 0; n < N; ++n) {
        double* row = grad.data() + n * C;
        row[labels[static_cast<std::size_t>(n)]] -= 1.0;
        for (std::int64_t c = 0; c < C; ++c) row[c] *= inv_n;
    }
    return {loss, std::move(grad)};
}

}  // namespace fedgen
