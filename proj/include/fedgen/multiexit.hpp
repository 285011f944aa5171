#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedgen/data.hpp"
#include "fedgen/layers.hpp"
#include "fedgen/params.hpp"
#include "fedgen/tensor.hpp"

namespace fedgen {

/// Backbone plus exit placement. Every exit head is GlobalAvgPool followed by
/// one Dense(channels-at-exit, num_classes) classifier; tier-t clients own
/// backbone segments 1..t and (with multi-exit enabled) heads 1..t.
struct ModelSpec {
    std::vector<LayerKind> backbone;
    std::vector<int> exit_after;  // 0-based backbone indices, strictly increasing, last == backbone.size()-1
    int num_classes = 10;
    std::int64_t input_channels = 1;
    std::int64_t input_side = 28;

    int num_exits() const { return static_cast<int>(exit_after.size()); }
    void validate() const;

    /// 1-based segment id of a backbone layer.
    int segment_of(int layer_idx) const;
    int layer_in_segment(int layer_idx) const;

    /// Activation shapes for a batch of `n`: entry i is the input shape of
    /// backbone layer i; the last entry is the final activation shape.
    std::vector<std::vector<std::int64_t>> activation_shapes(std::int64_t n) const;

    /// Channel count feeding exit head e (1-based).
    std::int64_t exit_channels(int exit_index) const;

    struct ConvRef {
        int backbone_idx;
        int segment;
        int layer_in_seg;
        Conv2d conv;
        std::string weight_key;
        std::string bias_key;
    };
    std::vector<ConvRef> convs() const;
    std::vector<ConvRef> convs_of_segment(int segment) const;
    ConvRef last_conv_of_segment(int segment) const;

    nlohmann::ordered_json to_json() const;
    static ModelSpec from_json(const nlohmann::json& j);

    /// Conv-BN-ReLU-MaxPool block per channel entry, exit after every block.
    static ModelSpec conv_blocks(const std::vector<std::int64_t>& channels, int num_classes,
                                 std::int64_t input_channels, std::int64_t input_side);

    /// One exit per conv block, pools spread so spatial size stays >= 2.
    /// Mirrors the deep stress configuration (e.g. 10 exits).
    static ModelSpec deep_stack(int n_exits, std::int64_t channels, int num_classes,
                                std::int64_t input_channels, std::int64_t input_side);

    /// VGG-style stack (convs_per_block convs per block, pool after each
    /// block), exits after blocks at one-third, two-thirds and the end.
    static ModelSpec vgg(const std::vector<std::int64_t>& block_channels, int convs_per_block,
                         int num_classes, std::int64_t input_channels, std::int64_t input_side);
};

/// Instantiates all parameters (full model, every exit) deterministically:
/// Kaiming-uniform conv/dense weights, zero biases, BN scale 1 / shift 0.
ParamSet build_model(const ModelSpec& spec, std::uint64_t seed);

/// Forward/backward executor bound to a spec and a parameter set. Confined
/// to one thread while training (mutable caches).
class Model {
public:
    Model(const ModelSpec& spec, ParamSet& params);

    struct ForwardResult {
        std::vector<int> exits;      // 1-based, ascending
        std::vector<Tensor> logits;  // one [N, num_classes] per exit
    };

    /// Runs backbone segments 1..max(active_exits) and the requested exit
    /// heads. Eval mode is a pure function of (params, input).
    ForwardResult forward(const Tensor& input, bool train, const std::vector<int>& active_exits);

    /// Joint backward from per-exit logit gradients (aligned with the last
    /// forward's active exits). Returns gradients for every learnable
    /// parameter the run touched, plus the gradient w.r.t. the input.
    std::pair<ParamSet, Tensor> backward(const std::vector<Tensor>& grad_logits);

private:
    LayerTensors bind_layer(int backbone_idx);
    LayerTensors bind_exit(int exit_index);
    Tensor& param(const std::string& key);

    const ModelSpec& spec_;
    ParamSet& params_;
    std::vector<Tensor> acts_;
    std::vector<LayerCache> caches_;
    std::vector<LayerCache> exit_gap_caches_;
    std::vector<LayerCache> exit_fc_caches_;
    std::vector<int> active_exits_;
    int layers_run_ = 0;
    bool has_cache_ = false;
};

struct LocalHp {
    int epochs = 5;
    double lr = 0.005;
    int batch_size = 32;
    std::uint64_t seed = 0;
};

struct LocalStats {
    std::vector<double> per_exit_loss;  // aligned with active exits
    std::vector<int> exits;
    std::int64_t n_samples = 0;
};

/// Local training with the joint all-exit loss (sum of cross-entropies over
/// owned exits; a single head at the tier's depth when multi_exit is off).
/// Returns the updated parameters and per-exit training losses (initial
/// losses when epochs == 0).
std::pair<ParamSet, LocalStats> local_train(const ModelSpec& spec, ParamSet params, int tier,
                                            const Dataset& data,
                                            const std::vector<std::int64_t>& shard,
                                            const LocalHp& hp, bool multi_exit = true);

/// Softmax probabilities of the requested exit in eval mode.
Tensor predict(const ModelSpec& spec, const ParamSet& params, int tier, const Tensor& inputs,
               int exit_index);

}  // namespace fedgen
