#include "fedgen/multiexit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "fedgen/loss.hpp"
#include "fedgen/optimizer.hpp"
#include "fedgen/rng.hpp"

namespace fedgen {

void ModelSpec::validate() const {
    if (backbone.empty()) throw std::invalid_argument("ModelSpec: empty backbone");
    if (exit_after.empty()) throw std::invalid_argument("ModelSpec: no exits");
    int prev = -1;
    for (int idx : exit_after) {
        if (idx <= prev) throw std::invalid_argument("ModelSpec: exit_after must be strictly increasing");
        if (idx < 0 || idx >= static_cast<int>(backbone.size())) {
            throw std::invalid_argument("ModelSpec: exit index " + std::to_string(idx) +
                                        " outside backbone of " + std::to_string(backbone.size()) +
                                        " layers");
        }
        prev = idx;
    }
    if (exit_after.back() != static_cast<int>(backbone.size()) - 1) {
        throw std::invalid_argument("ModelSpec: last exit must sit after the last backbone layer");
    }
    if (num_classes < 2) throw std::invalid_argument("ModelSpec: num_classes must be >= 2");
    activation_shapes(1);  // throws on incompatible layer chaining
    for (int e = 1; e <= num_exits(); ++e) exit_channels(e);
}

int ModelSpec::segment_of(int layer_idx) const {
    int seg = 1;
    for (int idx : exit_after) {
        if (layer_idx > idx) ++seg;
    }
    return seg;
}

int ModelSpec::layer_in_segment(int layer_idx) const {
    int start = 0;
    for (int idx : exit_after) {
        if (layer_idx > idx) start = idx + 1;
    }
    return layer_idx - start;
}

std::vector<std::vector<std::int64_t>> ModelSpec::activation_shapes(std::int64_t n) const {
    std::vector<std::vector<std::int64_t>> shapes;
    shapes.push_back({n, input_channels, input_side, input_side});
    for (const auto& layer : backbone) {
        shapes.push_back(layer_output_shape(layer, shapes.back()));
    }
    return shapes;
}

std::int64_t ModelSpec::exit_channels(int exit_index) const {
    if (exit_index < 1 || exit_index > num_exits()) {
        throw std::out_of_range("ModelSpec: exit index " + std::to_string(exit_index));
    }
    const auto shapes = activation_shapes(1);
    const auto& s = shapes[static_cast<std::size_t>(exit_after[static_cast<std::size_t>(exit_index - 1)]) + 1];
    if (s.size() != 4) {
        throw std::invalid_argument("ModelSpec: exit " + std::to_string(exit_index) +
                                    " is not placed at a 4-D activation");
    }
    return s[1];
}

std::vector<ModelSpec::ConvRef> ModelSpec::convs() const {
    std::vector<ConvRef> out;
    for (int i = 0; i < static_cast<int>(backbone.size()); ++i) {
        if (const auto* c = std::get_if<Conv2d>(&backbone[static_cast<std::size_t>(i)])) {
            ConvRef ref;
            ref.backbone_idx = i;
            ref.segment = segment_of(i);
            ref.layer_in_seg = layer_in_segment(i);
            ref.conv = *c;
            ref.weight_key = seg_key(ref.segment, ref.layer_in_seg, ParamRole::ConvW);
            ref.bias_key = seg_key(ref.segment, ref.layer_in_seg, ParamRole::ConvB);
            out.push_back(ref);
        }
    }
    return out;
}

std::vector<ModelSpec::ConvRef> ModelSpec::convs_of_segment(int segment) const {
    std::vector<ConvRef> out;
    for (const auto& ref : convs()) {
        if (ref.segment == segment) out.push_back(ref);
    }
    return out;
}

ModelSpec::ConvRef ModelSpec::last_conv_of_segment(int segment) const {
    const auto seg = convs_of_segment(segment);
    if (seg.empty()) {
        throw std::invalid_argument("ModelSpec: segment " + std::to_string(segment) + " has no conv layer");
    }
    return seg.back();
}

namespace {

nlohmann::ordered_json layer_to_json(const LayerKind& kind) {
    nlohmann::ordered_json j;
    if (const auto* c = std::get_if<Conv2d>(&kind)) {
        j["type"] = "conv2d";
        j["in"] = c->in_ch;
        j["out"] = c->out_ch;
        j["kernel"] = c->kernel;
        j["stride"] = c->stride;
        j["padding"] = c->padding;
    } else if (const auto* d = std::get_if<Dense>(&kind)) {
        j["type"] = "dense";
        j["in"] = d->in_dim;
        j["out"] = d->out_dim;
    } else if (const auto* b = std::get_if<BatchNorm>(&kind)) {
        j["type"] = "batch_norm";
        j["features"] = b->num_features;
        j["momentum"] = b->momentum;
        j["epsilon"] = b->epsilon;
    } else if (std::holds_alternative<ReLU>(kind)) {
        j["type"] = "relu";
    } else if (const auto* p = std::get_if<MaxPool2d>(&kind)) {
        j["type"] = "max_pool";
        j["kernel"] = p->kernel;
        j["stride"] = p->stride;
    } else if (std::holds_alternative<GlobalAvgPool>(kind)) {
        j["type"] = "global_avg_pool";
    } else {
        j["type"] = "flatten";
    }
    return j;
}

LayerKind layer_from_json(const nlohmann::json& j) {
    const std::string type = j.at("type").get<std::string>();
    if (type == "conv2d") {
        return Conv2d{j.at("in").get<std::int64_t>(), j.at("out").get<std::int64_t>(),
                      j.at("kernel").get<std::int64_t>(), j.value("stride", std::int64_t{1}),
                      j.value("padding", std::int64_t{0})};
    }
    if (type == "dense") return Dense{j.at("in").get<std::int64_t>(), j.at("out").get<std::int64_t>()};
    if (type == "batch_norm") {
        BatchNorm b{j.at("features").get<std::int64_t>()};
        b.momentum = j.value("momentum", 0.1);
        b.epsilon = j.value("epsilon", 1e-5);
        return b;
    }
    if (type == "relu") return ReLU{};
    if (type == "max_pool") return MaxPool2d{j.at("kernel").get<std::int64_t>(), j.at("stride").get<std::int64_t>()};
    if (type == "global_avg_pool") return GlobalAvgPool{};
    if (type == "flatten") return Flatten{};
    throw std::invalid_argument("ModelSpec: unknown layer type '" + type + "'");
}

}  // namespace

nlohmann::ordered_json ModelSpec::to_json() const {
    nlohmann::ordered_json j;
    j["backbone"] = nlohmann::ordered_json::array();
    for (const auto& layer : backbone) j["backbone"].push_back(layer_to_json(layer));
    j["exit_after"] = exit_after;
    j["num_classes"] = num_classes;
    j["input_channels"] = input_channels;
    j["input_side"] = input_side;
    return j;
}

ModelSpec ModelSpec::from_json(const nlohmann::json& j) {
    ModelSpec spec;
    for (const auto& layer : j.at("backbone")) spec.backbone.push_back(layer_from_json(layer));
    spec.exit_after = j.at("exit_after").get<std::vector<int>>();
    spec.num_classes = j.at("num_classes").get<int>();
    spec.input_channels = j.value("input_channels", std::int64_t{1});
    spec.input_side = j.value("input_side", std::int64_t{28});
    spec.validate();
    return spec;
}

ModelSpec ModelSpec::conv_blocks(const std::vector<std::int64_t>& channels, int num_classes,
                                 std::int64_t input_channels, std::int64_t input_side) {
    ModelSpec spec;
    spec.num_classes = num_classes;
    spec.input_channels = input_channels;
    spec.input_side = input_side;
    std::int64_t prev = input_channels;
    for (std::int64_t c : channels) {
        spec.backbone.push_back(Conv2d{prev, c, 3, 1, 1});
        spec.backbone.push_back(BatchNorm{c});
        spec.backbone.push_back(ReLU{});
        spec.backbone.push_back(MaxPool2d{2, 2});
        spec.exit_after.push_back(static_cast<int>(spec.backbone.size()) - 1);
        prev = c;
    }
    spec.validate();
    return spec;
}

ModelSpec ModelSpec::deep_stack(int n_exits, std::int64_t channels, int num_classes,
                                std::int64_t input_channels, std::int64_t input_side) {
    ModelSpec spec;
    spec.num_classes = num_classes;
    spec.input_channels = input_channels;
    spec.input_side = input_side;
    std::int64_t prev = input_channels;
    std::int64_t side = input_side;
    for (int b = 1; b <= n_exits; ++b) {
        spec.backbone.push_back(Conv2d{prev, channels, 3, 1, 1});
        spec.backbone.push_back(BatchNorm{channels});
        spec.backbone.push_back(ReLU{});
        if (b % 3 == 0 && b < n_exits && side / 2 >= 2) {
            spec.backbone.push_back(MaxPool2d{2, 2});
            side /= 2;
        }
        spec.exit_after.push_back(static_cast<int>(spec.backbone.size()) - 1);
        prev = channels;
    }
    spec.validate();
    return spec;
}

ModelSpec ModelSpec::vgg(const std::vector<std::int64_t>& block_channels, int convs_per_block,
                         int num_classes, std::int64_t input_channels, std::int64_t input_side) {
    ModelSpec spec;
    spec.num_classes = num_classes;
    spec.input_channels = input_channels;
    spec.input_side = input_side;
    const int n_blocks = static_cast<int>(block_channels.size());
    std::vector<int> exit_blocks;
    for (int e = 1; e <= 3; ++e) {
        exit_blocks.push_back(
            static_cast<int>(std::ceil(static_cast<double>(n_blocks * e) / 3.0)));
    }
    std::int64_t prev = input_channels;
    for (int b = 1; b <= n_blocks; ++b) {
        const std::int64_t c = block_channels[static_cast<std::size_t>(b - 1)];
        for (int i = 0; i < convs_per_block; ++i) {
            spec.backbone.push_back(Conv2d{prev, c, 3, 1, 1});
            spec.backbone.push_back(BatchNorm{c});
            spec.backbone.push_back(ReLU{});
            prev = c;
        }
        spec.backbone.push_back(MaxPool2d{2, 2});
        if (std::find(exit_blocks.begin(), exit_blocks.end(), b) != exit_blocks.end()) {
            spec.exit_after.push_back(static_cast<int>(spec.backbone.size()) - 1);
        }
    }
    spec.validate();
    return spec;
}

ParamSet build_model(const ModelSpec& spec, std::uint64_t seed) {
    spec.validate();
    SeedTree tree(seed);
    RngStream rs = tree.stream("model-init");
    ParamSet params;

    auto init_tensor = [&rs](const ParamSlot& slot, std::int64_t fan_in) {
        Tensor t(slot.shape);
        switch (slot.role) {
            case ParamRole::ConvW:
            case ParamRole::FcW: {
                const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
                for (auto& v : t.vec()) v = rs.uniform(-bound, bound);
                break;
            }
            case ParamRole::BnScale:
            case ParamRole::BnVar:
                t.fill(1.0);
                break;
            default:
                break;  // biases, shifts and running means start at zero
        }
        return t;
    };

    for (int i = 0; i < static_cast<int>(spec.backbone.size()); ++i) {
        const auto& layer = spec.backbone[static_cast<std::size_t>(i)];
        std::int64_t fan_in = 1;
        if (const auto* c = std::get_if<Conv2d>(&layer)) fan_in = c->in_ch * c->kernel * c->kernel;
        for (const auto& slot : layer_param_slots(layer)) {
            params.emplace(seg_key(spec.segment_of(i), spec.layer_in_segment(i), slot.role),
                           init_tensor(slot, fan_in));
        }
    }
    for (int e = 1; e <= spec.num_exits(); ++e) {
        const std::int64_t in_dim = spec.exit_channels(e);
        const Dense head{in_dim, spec.num_classes};
        for (const auto& slot : layer_param_slots(LayerKind{head})) {
            params.emplace(exit_key(e, slot.role), init_tensor(slot, in_dim));
        }
    }
    return params;
}

Model::Model(const ModelSpec& spec, ParamSet& params) : spec_(spec), params_(params) {}

Tensor& Model::param(const std::string& key) {
    auto it = params_.find(key);
    if (it == params_.end()) {
        throw std::invalid_argument("Model: missing parameter '" + key + "' in the bound ParamSet");
    }
    return it->second;
}

LayerTensors Model::bind_layer(int i) {
    LayerTensors t;
    const auto& layer = spec_.backbone[static_cast<std::size_t>(i)];
    const int seg = spec_.segment_of(i);
    const int lis = spec_.layer_in_segment(i);
    for (const auto& slot : layer_param_slots(layer)) {
        Tensor& tensor = param(seg_key(seg, lis, slot.role));
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
    return t;
}

LayerTensors Model::bind_exit(int e) {
    LayerTensors t;
    t.w = &param(exit_key(e, ParamRole::FcW));
    t.b = &param(exit_key(e, ParamRole::FcB));
    return t;
}

Model::ForwardResult Model::forward(const Tensor& input, bool train,
                                    const std::vector<int>& active_exits) {
    if (input.ndim() != 4 || input.dim(1) != spec_.input_channels) {
        throw std::invalid_argument("Model: input shape " + input.shape_str() + " incompatible with " +
                                    std::to_string(spec_.input_channels) + " input channels");
    }
    if (active_exits.empty()) throw std::invalid_argument("Model: no active exits");
    active_exits_ = active_exits;
    std::sort(active_exits_.begin(), active_exits_.end());
    for (int e : active_exits_) {
        if (e < 1 || e > spec_.num_exits()) {
            throw std::out_of_range("Model: exit " + std::to_string(e) + " outside [1, " +
                                    std::to_string(spec_.num_exits()) + "]");
        }
    }

    const int deepest = active_exits_.back();
    layers_run_ = spec_.exit_after[static_cast<std::size_t>(deepest - 1)] + 1;
    acts_.assign(static_cast<std::size_t>(layers_run_) + 1, Tensor{});
    caches_.assign(static_cast<std::size_t>(layers_run_), LayerCache{});
    exit_gap_caches_.assign(static_cast<std::size_t>(spec_.num_exits()), LayerCache{});
    exit_fc_caches_.assign(static_cast<std::size_t>(spec_.num_exits()), LayerCache{});

    acts_[0] = input;
    for (int i = 0; i < layers_run_; ++i) {
        LayerTensors t = bind_layer(i);
        acts_[static_cast<std::size_t>(i) + 1] =
            layer_forward(spec_.backbone[static_cast<std::size_t>(i)], t,
                          acts_[static_cast<std::size_t>(i)], train, &caches_[static_cast<std::size_t>(i)]);
    }

    ForwardResult result;
    result.exits = active_exits_;
    const LayerKind gap{GlobalAvgPool{}};
    for (int e : active_exits_) {
        const int pos = spec_.exit_after[static_cast<std::size_t>(e - 1)];
        LayerTensors none;
        Tensor pooled = layer_forward(gap, none, acts_[static_cast<std::size_t>(pos) + 1], train,
                                      &exit_gap_caches_[static_cast<std::size_t>(e - 1)]);
        LayerTensors head = bind_exit(e);
        const LayerKind dense{Dense{spec_.exit_channels(e), spec_.num_classes}};
        result.logits.push_back(layer_forward(dense, head, pooled, train,
                                              &exit_fc_caches_[static_cast<std::size_t>(e - 1)]));
    }
    has_cache_ = true;
    return result;
}

std::pair<ParamSet, Tensor> Model::backward(const std::vector<Tensor>& grad_logits) {
    if (!has_cache_) throw std::logic_error("Model: backward called without a matching forward");
    if (grad_logits.size() != active_exits_.size()) {
        throw std::invalid_argument("Model: expected " + std::to_string(active_exits_.size()) +
                                    " logit gradients, got " + std::to_string(grad_logits.size()));
    }

    ParamSet grads;
    auto grad_for = [&grads, this](const std::string& key) -> Tensor& {
        return grads.try_emplace(key, Tensor(param(key).shape())).first->second;
    };

    Tensor rolling(acts_[static_cast<std::size_t>(layers_run_)].shape());
    const LayerKind gap{GlobalAvgPool{}};
    for (int i = layers_run_ - 1; i >= 0; --i) {
        // exits branch off the activation this layer produced
        for (std::size_t ei = 0; ei < active_exits_.size(); ++ei) {
            const int e = active_exits_[ei];
            if (spec_.exit_after[static_cast<std::size_t>(e - 1)] != i) continue;
            LayerTensors head = bind_exit(e);
            LayerTensors head_grads;
            head_grads.w = &grad_for(exit_key(e, ParamRole::FcW));
            head_grads.b = &grad_for(exit_key(e, ParamRole::FcB));
            const LayerKind dense{Dense{spec_.exit_channels(e), spec_.num_classes}};
            Tensor g_pooled = layer_backward(dense, head, exit_fc_caches_[static_cast<std::size_t>(e - 1)],
                                             grad_logits[ei], head_grads);
            LayerTensors none;
            Tensor g_act = layer_backward(gap, none, exit_gap_caches_[static_cast<std::size_t>(e - 1)],
                                          g_pooled, none);
            for (std::int64_t k = 0; k < rolling.size(); ++k) rolling[k] += g_act[k];
        }

        LayerTensors t = bind_layer(i);
        LayerTensors layer_grads;
        const int seg = spec_.segment_of(i);
        const int lis = spec_.layer_in_segment(i);
        for (const auto& slot : layer_param_slots(spec_.backbone[static_cast<std::size_t>(i)])) {
            if (!slot.learnable) continue;
            Tensor& g = grad_for(seg_key(seg, lis, slot.role));
            switch (slot.role) {
                case ParamRole::ConvW:
                case ParamRole::FcW: layer_grads.w = &g; break;
                case ParamRole::ConvB:
                case ParamRole::FcB: layer_grads.b = &g; break;
                case ParamRole::BnScale: layer_grads.bn_scale = &g; break;
                case ParamRole::BnShift: layer_grads.bn_shift = &g; break;
                default: break;
            }
        }
        rolling = layer_backward(spec_.backbone[static_cast<std::size_t>(i)], t,
                                 caches_[static_cast<std::size_t>(i)], rolling, layer_grads);
    }
    has_cache_ = false;
    return {std::move(grads), std::move(rolling)};
}

std::pair<ParamSet, LocalStats> local_train(const ModelSpec& spec, ParamSet params, int tier,
                                            const Dataset& data,
                                            const std::vector<std::int64_t>& shard,
                                            const LocalHp& hp, bool multi_exit) {
    if (shard.empty()) throw std::invalid_argument("local_train: empty shard");
    if (tier < 1 || tier > spec.num_exits()) {
        throw std::out_of_range("local_train: tier " + std::to_string(tier));
    }

    std::vector<int> active;
    if (multi_exit) {
        for (int e = 1; e <= tier; ++e) active.push_back(e);
    } else {
        active.push_back(tier);
    }

    Model model(spec, params);
    AdamState adam;
    adam.config.learning_rate = hp.lr;
    RngStream rs(hp.seed);

    LocalStats stats;
    stats.exits = active;
    stats.n_samples = static_cast<std::int64_t>(shard.size());
    stats.per_exit_loss.assign(active.size(), 0.0);

    std::vector<std::int64_t> order = shard;
    const int batch = std::max(1, hp.batch_size);

    auto run_epoch = [&](bool update) {
        std::vector<double> loss_sum(active.size(), 0.0);
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
            std::vector<std::int64_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                          order.begin() + static_cast<std::ptrdiff_t>(end));
            auto [x, y] = data.batch(idx);
            auto fwd = model.forward(x, update, active);
            std::vector<Tensor> grad_logits;
            for (std::size_t ei = 0; ei < active.size(); ++ei) {
                auto ce = cross_entropy(fwd.logits[ei], y);
                loss_sum[ei] += ce.loss * static_cast<double>(idx.size());
                grad_logits.push_back(std::move(ce.grad_logits));
            }
            if (update) {
                auto [grads, gin] = model.backward(grad_logits);
                adam_step(params, grads, adam);
            }
        }
        for (auto& v : loss_sum) v /= static_cast<double>(order.size());
        return loss_sum;
    };

    if (hp.epochs <= 0) {
        stats.per_exit_loss = run_epoch(false);
        return {std::move(params), std::move(stats)};
    }

    for (int epoch = 0; epoch < hp.epochs; ++epoch) {
        rs.shuffle(order);
        stats.per_exit_loss = run_epoch(true);
    }
    return {std::move(params), std::move(stats)};
}

Tensor predict(const ModelSpec& spec, const ParamSet& params, int tier, const Tensor& inputs,
               int exit_index) {
    if (exit_index > tier) {
        throw std::out_of_range("predict: exit " + std::to_string(exit_index) + " beyond tier " +
                                std::to_string(tier));
    }
    // Eval mode performs no writes through the bound ParamSet.
    ParamSet& mutable_params = const_cast<ParamSet&>(params);
    Model model(spec, mutable_params);
    auto fwd = model.forward(inputs, false, {exit_index});
    return softmax(fwd.logits[0]);
}

}  // namespace fedgen
