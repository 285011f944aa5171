#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fedgen/lrf.hpp"
#include "fedgen/multiexit.hpp"
#include "fedgen/optimizer.hpp"
#include "fedgen/params.hpp"

namespace fedgen {

struct HyperHp {
    int epochs = 25;
    double lr = 0.0005;  // single-batch Adam
};

/// One (x, y) pair harvested from a client update; consumed by exactly one
/// round of hypernetwork training.
struct TrainingSample {
    std::vector<double> x;
    std::vector<double> y;
    int round = 0;
    int client_id = 0;
};

struct FactorDims {
    std::int64_t r = 0, c = 0, k = 0;
    std::int64_t flat() const { return r * k + k * c; }
};

/// H_{t->t+1}: maps the truncated factors of segment t's last conv to the
/// factors of every conv in segment t+1 (plus BN/FC weights under the
/// ablation flag). Each predicted vector has its own Dense-ReLU-Dense MLP.
class HyperNetwork {
public:
    static HyperNetwork build(const ModelSpec& spec, int from_segment, std::int64_t k,
                              std::int64_t hidden, bool generate_bn_fc, std::uint64_t seed);

    int from_segment() const { return from_segment_; }
    const std::string& source_key() const { return source_key_; }
    const FactorDims& source_dims() const { return source_dims_; }
    std::int64_t input_dim() const { return source_dims_.flat(); }
    std::int64_t param_count() const;

    /// Builds the network input from real parameters (factorize the source conv).
    std::vector<double> source_vector(const ParamSet& params) const;
    /// Builds the regression target from real parameters.
    std::vector<double> target_vector(const ParamSet& params) const;

    struct Generated {
        ParamSet tensors;             // conv kernels (and BN/FC under the ablation flag)
        lrf::FactorPair next_source;  // predicted factors of the next segment's last conv
    };
    /// Pure function of (weights, x).
    Generated predict(const std::vector<double>& x) const;

    /// Minimizes the MSE over the concatenated target vector with Adam,
    /// one sample per step, warm-starting from the current weights.
    /// epochs == 0 evaluates without updating. Returns the mean MSE over the
    /// last pass.
    double train(const std::vector<TrainingSample>& samples, const HyperHp& hp);

    const ParamSet& weights() const { return params_; }
    void set_weights(ParamSet w);

private:
    struct Predictor {
        std::string prefix;     // key prefix inside params_
        std::int64_t in = 0, hidden = 0, out = 0;
        std::int64_t y_offset = 0;  // slice into the concatenated target vector
    };
    struct ConvTarget {
        std::string weight_key;
        std::array<std::int64_t, 4> conv_shape;
        FactorDims dims;
        std::size_t p_idx, q_idx;  // indices into predictors_
    };
    struct RawTarget {
        std::string key;
        std::vector<std::int64_t> shape;
        std::size_t net_idx;
    };

    std::vector<double> forward_one(const Predictor& net, const std::vector<double>& x) const;

    int from_segment_ = 0;
    std::string source_key_;
    std::array<std::int64_t, 4> source_conv_shape_{};
    FactorDims source_dims_;
    std::string next_source_key_;
    std::vector<Predictor> predictors_;
    std::vector<ConvTarget> conv_targets_;
    std::vector<RawTarget> raw_targets_;
    std::int64_t y_dim_ = 0;
    ParamSet params_;
    AdamState adam_;
};

/// The E-1 hypernetworks of an E-exit model plus their sample buffers.
class HyperNetBank {
public:
    HyperNetBank() = default;
    static HyperNetBank build(const ModelSpec& spec, std::int64_t k, std::int64_t hidden,
                              bool generate_bn_fc, std::uint64_t seed);

    int count() const { return static_cast<int>(nets_.size()); }
    const HyperNetwork& net(int transition) const;  // transition t: H_{t->t+1}, 1-based
    HyperNetwork& net(int transition);

    /// Appends samples from one post-training client update: a tier-T client
    /// feeds every transition t with t+1 <= T.
    void collect(const ParamSet& update, int tier, int round, int client_id);
    std::vector<std::size_t> buffer_sizes() const;

    /// Trains every hypernetwork on its buffered samples (skipping empty
    /// buffers) and discards the samples afterwards. Returns one mean-MSE
    /// entry per transition (absent when the buffer was empty).
    std::vector<std::optional<double>> train_round(const HyperHp& hp);

    /// Auto-regressive generation for a client whose deepest real segment is
    /// `source_tier`: real factors seed the chain, predicted factors feed
    /// every further transition up to `target_tier`.
    ParamSet generate(const ParamSet& source_params, int source_tier, int target_tier) const;

    std::int64_t param_count() const;
    ParamSet checkpoint() const;  // all predictor weights, keys prefixed per transition

private:
    std::vector<HyperNetwork> nets_;
    std::vector<std::vector<TrainingSample>> buffers_;
};

/// Predictor parameter count from shapes alone; never instantiates tensors,
/// so it stays usable for configurations far beyond trainable size.
std::int64_t analytic_hypernet_param_count(const ModelSpec& spec, std::int64_t k,
                                           std::int64_t hidden, bool generate_bn_fc = false);

/// VGG-style reference configuration used for compression accounting.
ModelSpec compression_reference_spec();

}  // namespace fedgen
