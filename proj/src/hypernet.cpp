#include "fedgen/hypernet.hpp"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "fedgen/rng.hpp"

namespace fedgen {

namespace {

std::int64_t clamp_rank(std::int64_t k, std::int64_t r, std::int64_t c) {
    return std::min(k, std::min(r, c));
}

std::int64_t mlp_params(std::int64_t in, std::int64_t hidden, std::int64_t out) {
    return in * hidden + hidden + hidden * out + out;
}

struct PredictorDim {
    std::int64_t in, out;
};

// Shared between build() and the analytic counter so the two can never drift.
struct TransitionDims {
    FactorDims source;
    std::vector<std::pair<ModelSpec::ConvRef, FactorDims>> conv_targets;
    std::vector<std::pair<std::string, std::vector<std::int64_t>>> raw_targets;
    std::vector<PredictorDim> predictors;
};

TransitionDims transition_dims(const ModelSpec& spec, int from_segment, std::int64_t k,
                               bool generate_bn_fc) {
    TransitionDims td;
    const auto src = spec.last_conv_of_segment(from_segment);
    td.source.r = src.conv.in_ch * src.conv.kernel;
    td.source.c = src.conv.out_ch * src.conv.kernel;
    td.source.k = clamp_rank(k, td.source.r, td.source.c);

    const int to_segment = from_segment + 1;
    for (const auto& ref : spec.convs_of_segment(to_segment)) {
        FactorDims d;
        d.r = ref.conv.in_ch * ref.conv.kernel;
        d.c = ref.conv.out_ch * ref.conv.kernel;
        d.k = clamp_rank(k, d.r, d.c);
        td.conv_targets.push_back({ref, d});
        td.predictors.push_back({td.source.flat(), d.r * d.k});
        td.predictors.push_back({td.source.flat(), d.k * d.c});
    }

    if (generate_bn_fc) {
        for (int i = 0; i < static_cast<int>(spec.backbone.size()); ++i) {
            if (spec.segment_of(i) != to_segment) continue;
            for (const auto& slot : layer_param_slots(spec.backbone[static_cast<std::size_t>(i)])) {
                if (slot.role != ParamRole::BnScale && slot.role != ParamRole::BnShift) continue;
                td.raw_targets.push_back(
                    {seg_key(to_segment, spec.layer_in_segment(i), slot.role), slot.shape});
            }
        }
        const std::int64_t ch = spec.exit_channels(to_segment);
        td.raw_targets.push_back({exit_key(to_segment, ParamRole::FcW), {spec.num_classes, ch}});
        td.raw_targets.push_back({exit_key(to_segment, ParamRole::FcB), {spec.num_classes}});
        for (const auto& [key, shape] : td.raw_targets) {
            std::int64_t numel = 1;
            for (auto d : shape) numel *= d;
            td.predictors.push_back({td.source.flat(), numel});
        }
    }
    return td;
}

}  // namespace

HyperNetwork HyperNetwork::build(const ModelSpec& spec, int from_segment, std::int64_t k,
                                 std::int64_t hidden, bool generate_bn_fc, std::uint64_t seed) {
    if (from_segment < 1 || from_segment >= spec.num_exits()) {
        throw std::out_of_range("HyperNetwork: transition " + std::to_string(from_segment));
    }
    HyperNetwork h;
    h.from_segment_ = from_segment;

    const auto td = transition_dims(spec, from_segment, k, generate_bn_fc);
    const auto src = spec.last_conv_of_segment(from_segment);
    h.source_key_ = src.weight_key;
    h.source_conv_shape_ = {src.conv.out_ch, src.conv.in_ch, src.conv.kernel, src.conv.kernel};
    h.source_dims_ = td.source;
    if (td.source.k < k) {
        std::fprintf(stderr, "[hypernet] H_%d->%d: source k clamped to %lld (max rank of %s)\n",
                     from_segment, from_segment + 1, static_cast<long long>(td.source.k),
                     h.source_key_.c_str());
    }
    h.next_source_key_ = spec.last_conv_of_segment(from_segment + 1).weight_key;

    SeedTree tree(seed);
    RngStream rs = tree.stream("hypernet-init", static_cast<std::uint64_t>(from_segment));

    auto add_predictor = [&](const std::string& prefix, std::int64_t in, std::int64_t out) {
        Predictor p;
        p.prefix = prefix;
        p.in = in;
        p.hidden = hidden;
        p.out = out;
        p.y_offset = h.y_dim_;
        h.y_dim_ += out;

        Tensor w1({hidden, in}), b1({hidden}), w2({out, hidden}), b2({out});
        const double bound1 = std::sqrt(6.0 / static_cast<double>(in));
        const double bound2 = std::sqrt(6.0 / static_cast<double>(hidden));
        for (auto& v : w1.vec()) v = rs.uniform(-bound1, bound1);
        for (auto& v : w2.vec()) v = rs.uniform(-bound2, bound2);
        h.params_.emplace(prefix + ".w1", std::move(w1));
        h.params_.emplace(prefix + ".b1", std::move(b1));
        h.params_.emplace(prefix + ".w2", std::move(w2));
        h.params_.emplace(prefix + ".b2", std::move(b2));
        h.predictors_.push_back(p);
        return h.predictors_.size() - 1;
    };

    int t_idx = 0;
    for (const auto& [ref, dims] : td.conv_targets) {
        ConvTarget target;
        target.weight_key = ref.weight_key;
        target.conv_shape = {ref.conv.out_ch, ref.conv.in_ch, ref.conv.kernel, ref.conv.kernel};
        target.dims = dims;
        char prefix[32];
        std::snprintf(prefix, sizeof(prefix), "t%02d", t_idx);
        target.p_idx = add_predictor(std::string(prefix) + ".p", td.source.flat(), dims.r * dims.k);
        target.q_idx = add_predictor(std::string(prefix) + ".q", td.source.flat(), dims.k * dims.c);
        h.conv_targets_.push_back(std::move(target));
        ++t_idx;
    }
    int r_idx = 0;
    for (const auto& [key, shape] : td.raw_targets) {
        RawTarget target;
        target.key = key;
        target.shape = shape;
        std::int64_t numel = 1;
        for (auto d : shape) numel *= d;
        char prefix[32];
        std::snprintf(prefix, sizeof(prefix), "r%02d", r_idx);
        target.net_idx = add_predictor(prefix, td.source.flat(), numel);
        h.raw_targets_.push_back(std::move(target));
        ++r_idx;
    }

    h.adam_ = AdamState{};
    return h;
}

std::int64_t HyperNetwork::param_count() const { return total_size(params_); }

std::vector<double> HyperNetwork::source_vector(const ParamSet& params) const {
    auto it = params.find(source_key_);
    if (it == params.end()) {
        throw std::invalid_argument("HyperNetwork: source parameters lack '" + source_key_ + "'");
    }
    auto wm = lrf::to_matrix(it->second);
    return lrf::flatten_factors(lrf::factorize(wm.matrix, source_dims_.k));
}

std::vector<double> HyperNetwork::target_vector(const ParamSet& params) const {
    std::vector<double> y;
    y.reserve(static_cast<std::size_t>(y_dim_));
    for (const auto& target : conv_targets_) {
        auto it = params.find(target.weight_key);
        if (it == params.end()) {
            throw std::invalid_argument("HyperNetwork: target parameters lack '" + target.weight_key + "'");
        }
        auto wm = lrf::to_matrix(it->second);
        const auto flat = lrf::flatten_factors(lrf::factorize(wm.matrix, target.dims.k));
        y.insert(y.end(), flat.begin(), flat.end());
    }
    for (const auto& target : raw_targets_) {
        auto it = params.find(target.key);
        if (it == params.end()) {
            throw std::invalid_argument("HyperNetwork: target parameters lack '" + target.key + "'");
        }
        y.insert(y.end(), it->second.vec().begin(), it->second.vec().end());
    }
    if (static_cast<std::int64_t>(y.size()) != y_dim_) {
        throw std::logic_error("HyperNetwork: target vector size drifted");
    }
    return y;
}

std::vector<double> HyperNetwork::forward_one(const Predictor& net,
                                              const std::vector<double>& x) const {
    const Tensor& w1 = params_.at(net.prefix + ".w1");
    const Tensor& b1 = params_.at(net.prefix + ".b1");
    const Tensor& w2 = params_.at(net.prefix + ".w2");
    const Tensor& b2 = params_.at(net.prefix + ".b2");

    std::vector<double> hbuf(static_cast<std::size_t>(net.hidden));
    for (std::int64_t j = 0; j < net.hidden; ++j) {
        const double* row = w1.data() + j * net.in;
        double acc = b1[j];
        for (std::int64_t i = 0; i < net.in; ++i) acc += row[i] * x[static_cast<std::size_t>(i)];
        hbuf[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : 0.0;
    }
    std::vector<double> y(static_cast<std::size_t>(net.out));
    for (std::int64_t o = 0; o < net.out; ++o) {
        const double* row = w2.data() + o * net.hidden;
        double acc = b2[o];
        for (std::int64_t j = 0; j < net.hidden; ++j) acc += row[j] * hbuf[static_cast<std::size_t>(j)];
        y[static_cast<std::size_t>(o)] = acc;
    }
    return y;
}

HyperNetwork::Generated HyperNetwork::predict(const std::vector<double>& x) const {
    if (static_cast<std::int64_t>(x.size()) != input_dim()) {
        throw std::invalid_argument("HyperNetwork: input size " + std::to_string(x.size()) +
                                    " != expected " + std::to_string(input_dim()));
    }
    Generated gen;
    bool have_next = false;
    for (const auto& target : conv_targets_) {
        auto pflat = forward_one(predictors_[target.p_idx], x);
        auto qflat = forward_one(predictors_[target.q_idx], x);
        lrf::FactorPair f;
        f.k = target.dims.k;
        f.p = Tensor({target.dims.r, target.dims.k}, std::move(pflat));
        f.q = Tensor({target.dims.k, target.dims.c}, std::move(qflat));
        lrf::WeightMatrix wm;
        wm.matrix = lrf::reconstruct(f);
        wm.source_shape = target.conv_shape;
        gen.tensors.emplace(target.weight_key, lrf::from_matrix(wm));
        if (target.weight_key == next_source_key_) {
            gen.next_source = std::move(f);
            have_next = true;
        }
    }
    if (!have_next && !conv_targets_.empty()) {
        throw std::logic_error("HyperNetwork: next-source conv missing from targets");
    }
    for (const auto& target : raw_targets_) {
        auto flat = forward_one(predictors_[target.net_idx], x);
        gen.tensors.emplace(target.key, Tensor(target.shape, std::move(flat)));
    }
    return gen;
}

double HyperNetwork::train(const std::vector<TrainingSample>& samples, const HyperHp& hp) {
    if (samples.empty()) throw std::invalid_argument("HyperNetwork::train: no samples");
    adam_.config.learning_rate = hp.lr;

    const double inv_dim = 1.0 / static_cast<double>(y_dim_);
    double last_pass_loss = 0.0;

    const int passes = std::max(hp.epochs, 0);
    for (int epoch = 0; epoch <= passes; ++epoch) {
        const bool update = epoch < passes;  // final pass only measures
        if (!update && epoch > 0) break;     // loss of the last updating pass already recorded
        double pass_loss = 0.0;
        for (const auto& sample : samples) {
            if (static_cast<std::int64_t>(sample.x.size()) != input_dim() ||
                static_cast<std::int64_t>(sample.y.size()) != y_dim_) {
                throw std::invalid_argument("HyperNetwork::train: sample dimension mismatch");
            }
            ParamSet grads;
            double sq = 0.0;
            for (const auto& net : predictors_) {
                const Tensor& w1 = params_.at(net.prefix + ".w1");
                const Tensor& b1 = params_.at(net.prefix + ".b1");
                const Tensor& w2 = params_.at(net.prefix + ".w2");
                const Tensor& b2 = params_.at(net.prefix + ".b2");

                std::vector<double> hpre(static_cast<std::size_t>(net.hidden));
                std::vector<double> hact(static_cast<std::size_t>(net.hidden));
                for (std::int64_t j = 0; j < net.hidden; ++j) {
                    const double* row = w1.data() + j * net.in;
                    double acc = b1[j];
                    for (std::int64_t i = 0; i < net.in; ++i) {
                        acc += row[i] * sample.x[static_cast<std::size_t>(i)];
                    }
                    hpre[static_cast<std::size_t>(j)] = acc;
                    hact[static_cast<std::size_t>(j)] = acc > 0.0 ? acc : 0.0;
                }
                std::vector<double> dy(static_cast<std::size_t>(net.out));
                for (std::int64_t o = 0; o < net.out; ++o) {
                    const double* row = w2.data() + o * net.hidden;
                    double acc = b2[o];
                    for (std::int64_t j = 0; j < net.hidden; ++j) {
                        acc += row[j] * hact[static_cast<std::size_t>(j)];
                    }
                    const double err = acc - sample.y[static_cast<std::size_t>(net.y_offset + o)];
                    sq += err * err;
                    dy[static_cast<std::size_t>(o)] = 2.0 * inv_dim * err;
                }
                if (!update) continue;

                Tensor gw2({net.out, net.hidden}), gb2({net.out});
                Tensor gw1({net.hidden, net.in}), gb1({net.hidden});
                std::vector<double> dh(static_cast<std::size_t>(net.hidden), 0.0);
                for (std::int64_t o = 0; o < net.out; ++o) {
                    const double g = dy[static_cast<std::size_t>(o)];
                    gb2[o] = g;
                    double* grow = gw2.data() + o * net.hidden;
                    const double* row = w2.data() + o * net.hidden;
                    for (std::int64_t j = 0; j < net.hidden; ++j) {
                        grow[j] = g * hact[static_cast<std::size_t>(j)];
                        dh[static_cast<std::size_t>(j)] += g * row[j];
                    }
                }
                for (std::int64_t j = 0; j < net.hidden; ++j) {
                    const double g = hpre[static_cast<std::size_t>(j)] > 0.0
                                         ? dh[static_cast<std::size_t>(j)]
                                         : 0.0;
                    gb1[j] = g;
                    double* grow = gw1.data() + j * net.in;
                    for (std::int64_t i = 0; i < net.in; ++i) {
                        grow[i] = g * sample.x[static_cast<std::size_t>(i)];
                    }
                }
                grads.emplace(net.prefix + ".w1", std::move(gw1));
                grads.emplace(net.prefix + ".b1", std::move(gb1));
                grads.emplace(net.prefix + ".w2", std::move(gw2));
                grads.emplace(net.prefix + ".b2", std::move(gb2));
            }
            pass_loss += sq * inv_dim;
            if (update) adam_step(params_, grads, adam_);
        }
        last_pass_loss = pass_loss / static_cast<double>(samples.size());
    }
    return last_pass_loss;
}

void HyperNetwork::set_weights(ParamSet w) {
    if (w.size() != params_.size()) {
        throw std::invalid_argument("HyperNetwork::set_weights: key count mismatch");
    }
    for (const auto& [key, tensor] : w) {
        auto it = params_.find(key);
        if (it == params_.end() || !it->second.same_shape(tensor)) {
            throw std::invalid_argument("HyperNetwork::set_weights: mismatch at '" + key + "'");
        }
    }
    params_ = std::move(w);
}

HyperNetBank HyperNetBank::build(const ModelSpec& spec, std::int64_t k, std::int64_t hidden,
                                 bool generate_bn_fc, std::uint64_t seed) {
    if (spec.num_exits() < 2) {
        throw std::invalid_argument("HyperNetBank: the model needs at least 2 exits");
    }
    SeedTree tree(seed);
    HyperNetBank bank;
    for (int t = 1; t < spec.num_exits(); ++t) {
        bank.nets_.push_back(HyperNetwork::build(spec, t, k, hidden, generate_bn_fc,
                                                 tree.derive("hypernet-net", static_cast<std::uint64_t>(t))));
    }
    bank.buffers_.resize(bank.nets_.size());
    return bank;
}

const HyperNetwork& HyperNetBank::net(int transition) const {
    if (transition < 1 || transition > count()) {
        throw std::out_of_range("HyperNetBank: no hypernetwork for transition " +
                                std::to_string(transition));
    }
    return nets_[static_cast<std::size_t>(transition - 1)];
}

HyperNetwork& HyperNetBank::net(int transition) {
    return const_cast<HyperNetwork&>(static_cast<const HyperNetBank*>(this)->net(transition));
}

void HyperNetBank::collect(const ParamSet& update, int tier, int round, int client_id) {
    for (int t = 1; t < tier; ++t) {
        if (t > count()) break;
        TrainingSample sample;
        sample.x = nets_[static_cast<std::size_t>(t - 1)].source_vector(update);
        sample.y = nets_[static_cast<std::size_t>(t - 1)].target_vector(update);
        sample.round = round;
        sample.client_id = client_id;
        buffers_[static_cast<std::size_t>(t - 1)].push_back(std::move(sample));
    }
}

std::vector<std::size_t> HyperNetBank::buffer_sizes() const {
    std::vector<std::size_t> sizes;
    for (const auto& buffer : buffers_) sizes.push_back(buffer.size());
    return sizes;
}

std::vector<std::optional<double>> HyperNetBank::train_round(const HyperHp& hp) {
    std::vector<std::optional<double>> losses;
    for (std::size_t i = 0; i < nets_.size(); ++i) {
        if (buffers_[i].empty()) {
            losses.push_back(std::nullopt);  // no-op: weights untouched
            continue;
        }
        losses.push_back(nets_[i].train(buffers_[i], hp));
        buffers_[i].clear();  // samples are discarded once used
    }
    return losses;
}

ParamSet HyperNetBank::generate(const ParamSet& source_params, int source_tier,
                                int target_tier) const {
    if (source_tier < 1 || source_tier >= target_tier) {
        throw std::invalid_argument("HyperNetBank::generate: bad segment range");
    }
    if (target_tier - 1 > count()) {
        throw std::out_of_range("HyperNetBank::generate: missing hypernetwork for transition " +
                                std::to_string(target_tier - 1));
    }
    ParamSet out;
    std::vector<double> x = nets_[static_cast<std::size_t>(source_tier - 1)].source_vector(source_params);
    for (int t = source_tier; t < target_tier; ++t) {
        auto gen = nets_[static_cast<std::size_t>(t - 1)].predict(x);
        for (auto& [key, tensor] : gen.tensors) out.insert_or_assign(key, std::move(tensor));
        if (t + 1 < target_tier) {
            x = lrf::flatten_factors(gen.next_source);
        }
    }
    return out;
}

std::int64_t HyperNetBank::param_count() const {
    std::int64_t n = 0;
    for (const auto& net : nets_) n += net.param_count();
    return n;
}

ParamSet HyperNetBank::checkpoint() const {
    ParamSet all;
    for (std::size_t i = 0; i < nets_.size(); ++i) {
        char prefix[16];
        std::snprintf(prefix, sizeof(prefix), "h%02d.", static_cast<int>(i) + 1);
        for (const auto& [key, tensor] : nets_[i].weights()) {
            all.emplace(std::string(prefix) + key, tensor);
        }
    }
    return all;
}

std::int64_t analytic_hypernet_param_count(const ModelSpec& spec, std::int64_t k,
                                           std::int64_t hidden, bool generate_bn_fc) {
    std::int64_t total = 0;
    for (int t = 1; t < spec.num_exits(); ++t) {
        const auto td = transition_dims(spec, t, k, generate_bn_fc);
        for (const auto& p : td.predictors) total += mlp_params(p.in, hidden, p.out);
    }
    return total;
}

ModelSpec compression_reference_spec() {
    return ModelSpec::vgg({256, 512, 1024, 2048}, 2, 10, 3, 64);
}

}  // namespace fedgen
