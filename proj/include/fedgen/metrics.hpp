#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "fedgen/data.hpp"
#include "fedgen/hypernet.hpp"
#include "fedgen/multiexit.hpp"
#include "fedgen/params.hpp"
#include "fedgen/tensor.hpp"

namespace fedgen::metrics {

/// Rows are examples, columns flattened activations of one layer.
struct FeatureMatrix {
    Tensor m;  // [n, d]
    bool centered = false;

    void center();
};

/// Linear CKA in [0, 1]: ||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on
/// column-centered features (computed through n x n Gram matrices). Returns 0
/// when either denominator vanishes.
double linear_cka(const FeatureMatrix& x, const FeatureMatrix& y);

/// Activations at the end of backbone segment `segment`, flattened per
/// example (eval mode).
FeatureMatrix segment_features(const ModelSpec& spec, const ParamSet& params, int segment,
                               const Tensor& inputs);

/// Mean |a-b| per layer over the keys of `a` (which must all exist in `b`
/// with matching shapes). The normalized variant divides by mean |a| of the
/// ground-truth layer.
std::map<std::string, double> weight_mae(const ParamSet& ground_truth, const ParamSet& other,
                                         bool normalize);

struct Footprint {
    std::int64_t param_count = 0;
    std::int64_t bytes = 0;
};

Footprint hypernet_footprint(const HyperNetBank& bank, int precision_width = 8);
Footprint analytic_hypernet_footprint(const ModelSpec& spec, std::int64_t k, std::int64_t hidden,
                                      bool generate_bn_fc = false, int precision_width = 8);

/// Top-1 accuracy at the requested exit over `indices` (the whole set when
/// empty), evaluated in batches.
double accuracy(const ModelSpec& spec, const ParamSet& params, int tier, int exit_index,
                const Dataset& data, const std::vector<std::int64_t>& indices = {});

/// Accuracy at every exit of the tier in one pass (shared backbone forward).
std::vector<double> accuracy_all_exits(const ModelSpec& spec, const ParamSet& params, int tier,
                                       const Dataset& data,
                                       const std::vector<std::int64_t>& indices = {});

}  // namespace fedgen::metrics
