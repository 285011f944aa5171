#include "fedgen/metrics.hpp"

#include <cmath>
#include <stdexcept>

#include "fedgen/kernels.hpp"

namespace fedgen::metrics {

void FeatureMatrix::center() {
    if (centered) return;
    const std::int64_t n = m.dim(0), d = m.dim(1);
    for (std::int64_t j = 0; j < d; ++j) {
        double mean = 0.0;
        for (std::int64_t i = 0; i < n; ++i) mean += m(i, j);
        mean /= static_cast<double>(n);
        for (std::int64_t i = 0; i < n; ++i) m(i, j) -= mean;
    }
    centered = true;
}

double linear_cka(const FeatureMatrix& x, const FeatureMatrix& y) {
    if (x.m.dim(0) != y.m.dim(0)) {
        throw std::invalid_argument("linear_cka: row counts differ (" + std::to_string(x.m.dim(0)) +
                                    " vs " + std::to_string(y.m.dim(0)) + ")");
    }
    if (x.m.dim(0) < 2) throw std::invalid_argument("linear_cka: need at least 2 rows");
    FeatureMatrix xc = x, yc = y;
    xc.center();
    yc.center();

    const std::int64_t n = xc.m.dim(0);
    // ||Y^T X||_F^2 = <K_x, K_y> with K = F F^T for centered features.
    Tensor kx({n, n}), ky({n, n});
    kernels::matmul_nt(xc.m, xc.m, kx);
    kernels::matmul_nt(yc.m, yc.m, ky);

    double cross = 0.0, xx = 0.0, yy = 0.0;
    for (std::int64_t i = 0; i < n * n; ++i) {
        cross += kx[i] * ky[i];
        xx += kx[i] * kx[i];
        yy += ky[i] * ky[i];
    }
    const double denom = std::sqrt(xx) * std::sqrt(yy);
    if (denom <= 0.0) return 0.0;
    return cross / denom;
}

FeatureMatrix segment_features(const ModelSpec& spec, const ParamSet& params, int segment,
                               const Tensor& inputs) {
    if (segment < 1 || segment > spec.num_exits()) {
        throw std::out_of_range("segment_features: segment " + std::to_string(segment));
    }
    // Eval mode performs no writes through the bound tensors.
    ParamSet& mutable_params = const_cast<ParamSet&>(params);
    const int last_layer = spec.exit_after[static_cast<std::size_t>(segment - 1)];
    Tensor act = inputs;
    for (int i = 0; i <= last_layer; ++i) {
        LayerTensors t;
        const auto& layer = spec.backbone[static_cast<std::size_t>(i)];
        for (const auto& slot : layer_param_slots(layer)) {
            Tensor& tensor = mutable_params.at(seg_key(spec.segment_of(i), spec.layer_in_segment(i), slot.role));
            switch (slot.role) {
                case ParamRole::ConvW:
                case ParamRole::FcW: t.w = &tensor; break;
                case ParamRole::ConvB:
                case ParamRole::FcB: t.b = &tensor; break;
                case ParamRole::BnScale: t.bn_scale = &tensor; break;
                case ParamRole::BnShift: t.bn_shift = &tensor; break;
                case ParamRole::BnMean: t.bn_mean = &tensor; break;
                case ParamRole::BnVar: t.bn_var = &tensor; break;
            }
        }
        act = layer_forward(layer, t, act, false, nullptr);
    }

    FeatureMatrix fm;
    std::int64_t d = 1;
    for (std::size_t i = 1; i < act.shape().size(); ++i) d *= act.shape()[i];
    fm.m = act.reshaped({act.dim(0), d});
    return fm;
}

std::map<std::string, double> weight_mae(const ParamSet& ground_truth, const ParamSet& other,
                                         bool normalize) {
    std::string missing;
    for (const auto& [key, tensor] : ground_truth) {
        if (!other.count(key)) missing += (missing.empty() ? "" : ", ") + key;
    }
    if (!missing.empty()) {
        throw std::invalid_argument("weight_mae: keys missing from comparison set: " + missing);
    }

    std::map<std::string, double> out;
    for (const auto& [key, a] : ground_truth) {
        const Tensor& b = other.at(key);
        if (!a.same_shape(b)) {
            throw std::invalid_argument("weight_mae: shape mismatch at '" + key + "'");
        }
        double sum = 0.0, ref = 0.0;
        for (std::int64_t i = 0; i < a.size(); ++i) {
            sum += std::abs(a[i] - b[i]);
            ref += std::abs(a[i]);
        }
        double mae = sum / static_cast<double>(a.size());
        if (normalize) {
            const double denom = ref / static_cast<double>(a.size());
            mae = denom > 0.0 ? mae / denom : 0.0;
        }
        out.emplace(key, mae);
    }
    return out;
}

Footprint hypernet_footprint(const HyperNetBank& bank, int precision_width) {
    Footprint f;
    f.param_count = bank.param_count();
    f.bytes = f.param_count * precision_width;
    return f;
}

Footprint analytic_hypernet_footprint(const ModelSpec& spec, std::int64_t k, std::int64_t hidden,
                                      bool generate_bn_fc, int precision_width) {
    Footprint f;
    f.param_count = analytic_hypernet_param_count(spec, k, hidden, generate_bn_fc);
    f.bytes = f.param_count * precision_width;
    return f;
}

std::vector<double> accuracy_all_exits(const ModelSpec& spec, const ParamSet& params, int tier,
                                       const Dataset& data,
                                       const std::vector<std::int64_t>& indices) {
    std::vector<std::int64_t> idx = indices;
    if (idx.empty()) {
        idx.resize(static_cast<std::size_t>(data.size()));
        for (std::int64_t i = 0; i < data.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    }
    if (idx.empty()) throw std::invalid_argument("accuracy: empty evaluation set");

    std::vector<int> exits;
    for (int e = 1; e <= tier; ++e) exits.push_back(e);
    std::vector<std::int64_t> correct(static_cast<std::size_t>(tier), 0);

    ParamSet& mutable_params = const_cast<ParamSet&>(params);
    Model model(spec, mutable_params);
    const std::size_t batch = 256;
    for (std::size_t start = 0; start < idx.size(); start += batch) {
        const std::size_t end = std::min(idx.size(), start + batch);
        std::vector<std::int64_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                       idx.begin() + static_cast<std::ptrdiff_t>(end));
        auto [x, y] = data.batch(part);
        auto fwd = model.forward(x, false, exits);
        for (std::size_t e = 0; e < exits.size(); ++e) {
            const Tensor& logits = fwd.logits[e];
            for (std::int64_t n = 0; n < logits.dim(0); ++n) {
                std::int64_t arg = 0;
                double best = logits(n, 0);
                for (std::int64_t c = 1; c < logits.dim(1); ++c) {
                    if (logits(n, c) > best) {
                        best = logits(n, c);
                        arg = c;
                    }
                }
                if (arg == y[static_cast<std::size_t>(n)]) ++correct[e];
            }
        }
    }
    std::vector<double> acc;
    for (std::int64_t c : correct) acc.push_back(static_cast<double>(c) / static_cast<double>(idx.size()));
    return acc;
}

double accuracy(const ModelSpec& spec, const ParamSet& params, int tier, int exit_index,
                const Dataset& data, const std::vector<std::int64_t>& indices) {
    std::vector<std::int64_t> idx = indices;
    if (idx.empty()) {
        idx.resize(static_cast<std::size_t>(data.size()));
        for (std::int64_t i = 0; i < data.size(); ++i) idx[static_cast<std::size_t>(i)] = i;
    }
    if (idx.empty()) throw std::invalid_argument("accuracy: empty evaluation set");

    const std::size_t batch = 256;
    std::int64_t correct = 0;
    for (std::size_t start = 0; start < idx.size(); start += batch) {
        const std::size_t end = std::min(idx.size(), start + batch);
        std::vector<std::int64_t> part(idx.begin() + static_cast<std::ptrdiff_t>(start),
                                       idx.begin() + static_cast<std::ptrdiff_t>(end));
        auto [x, y] = data.batch(part);
        Tensor probs = predict(spec, params, tier, x, exit_index);
        for (std::int64_t n = 0; n < probs.dim(0); ++n) {
            std::int64_t arg = 0;
            double best = probs(n, 0);
            for (std::int64_t c = 1; c < probs.dim(1); ++c) {
                if (probs(n, c) > best) {
                    best = probs(n, c);
                    arg = c;
                }
            }
            if (arg == y[static_cast<std::size_t>(n)]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
}

}  // namespace fedgen::metrics
