#include "fedgen/layers.hpp"

#include <cmath>
#include <stdexcept>

#include "fedgen/kernels.hpp"

namespace fedgen {

namespace {

[[noreturn]] void shape_error(const LayerKind& kind, const std::vector<std::int64_t>& in_shape,
                              const std::string& expected) {
    throw std::invalid_argument(layer_name(kind) + ": input shape " + Tensor::shape_str(in_shape) +
                                " incompatible, expected " + expected);
}

void check_cache(const LayerCache* cache, const LayerKind& kind) {
    if (cache == nullptr || !cache->valid) {
        throw std::logic_error(layer_name(kind) + ": backward called without a matching forward cache");
    }
}

}  // namespace

std::string layer_name(const LayerKind& kind) {
    struct V {
        std::string operator()(const Conv2d& c) const {
            return "Conv2d(" + std::to_string(c.in_ch) + "->" + std::to_string(c.out_ch) + ",k" +
                   std::to_string(c.kernel) + ")";
        }
        std::string operator()(const Dense& d) const {
            return "Dense(" + std::to_string(d.in_dim) + "->" + std::to_string(d.out_dim) + ")";
        }
        std::string operator()(const BatchNorm& b) const {
            return "BatchNorm(" + std::to_string(b.num_features) + ")";
        }
        std::string operator()(const ReLU&) const { return "ReLU"; }
        std::string operator()(const MaxPool2d& p) const {
            return "MaxPool2d(k" + std::to_string(p.kernel) + ",s" + std::to_string(p.stride) + ")";
        }
        std::string operator()(const GlobalAvgPool&) const { return "GlobalAvgPool"; }
        std::string operator()(const Flatten&) const { return "Flatten"; }
    };
    return std::visit(V{}, kind);
}

std::string role_name(ParamRole role) {
    switch (role) {
        case ParamRole::ConvW: return "conv_w";
        case ParamRole::ConvB: return "conv_b";
        case ParamRole::BnScale: return "bn_scale";
        case ParamRole::BnShift: return "bn_shift";
        case ParamRole::BnMean: return "bn_mean";
        case ParamRole::BnVar: return "bn_var";
        case ParamRole::FcW: return "fc_w";
        case ParamRole::FcB: return "fc_b";
    }
    throw std::logic_error("role_name: bad role");
}

ParamRole role_from_name(const std::string& name) {
    if (name == "conv_w") return ParamRole::ConvW;
    if (name == "conv_b") return ParamRole::ConvB;
    if (name == "bn_scale") return ParamRole::BnScale;
    if (name == "bn_shift") return ParamRole::BnShift;
    if (name == "bn_mean") return ParamRole::BnMean;
    if (name == "bn_var") return ParamRole::BnVar;
    if (name == "fc_w") return ParamRole::FcW;
    if (name == "fc_b") return ParamRole::FcB;
    throw std::invalid_argument("unknown parameter role: " + name);
}

std::vector<ParamSlot> layer_param_slots(const LayerKind& kind) {
    struct V {
        std::vector<ParamSlot> operator()(const Conv2d& c) const {
            return {{ParamRole::ConvW, {c.out_ch, c.in_ch, c.kernel, c.kernel}, true},
                    {ParamRole::ConvB, {c.out_ch}, true}};
        }
        std::vector<ParamSlot> operator()(const Dense& d) const {
            return {{ParamRole::FcW, {d.out_dim, d.in_dim}, true},
                    {ParamRole::FcB, {d.out_dim}, true}};
        }
        std::vector<ParamSlot> operator()(const BatchNorm& b) const {
            return {{ParamRole::BnScale, {b.num_features}, true},
                    {ParamRole::BnShift, {b.num_features}, true},
                    {ParamRole::BnMean, {b.num_features}, false},
                    {ParamRole::BnVar, {b.num_features}, false}};
        }
        std::vector<ParamSlot> operator()(const ReLU&) const { return {}; }
        std::vector<ParamSlot> operator()(const MaxPool2d&) const { return {}; }
        std::vector<ParamSlot> operator()(const GlobalAvgPool&) const { return {}; }
        std::vector<ParamSlot> operator()(const Flatten&) const { return {}; }
    };
    return std::visit(V{}, kind);
}

std::vector<std::int64_t> layer_output_shape(const LayerKind& kind,
                                             const std::vector<std::int64_t>& in) {
    if (const auto* c = std::get_if<Conv2d>(&kind)) {
        if (in.size() != 4 || in[1] != c->in_ch) shape_error(kind, in, "[N, " + std::to_string(c->in_ch) + ", H, W]");
        const auto oh = kernels::conv_out_dim(in[2], c->kernel, c->stride, c->padding);
        const auto ow = kernels::conv_out_dim(in[3], c->kernel, c->stride, c->padding);
        if (oh <= 0 || ow <= 0) shape_error(kind, in, "spatial size >= kernel");
        return {in[0], c->out_ch, oh, ow};
    }
    if (const auto* d = std::get_if<Dense>(&kind)) {
        if (in.size() != 2 || in[1] != d->in_dim) shape_error(kind, in, "[N, " + std::to_string(d->in_dim) + "]");
        return {in[0], d->out_dim};
    }
    if (const auto* b = std::get_if<BatchNorm>(&kind)) {
        if (in.size() != 4 || in[1] != b->num_features) {
            shape_error(kind, in, "[N, " + std::to_string(b->num_features) + ", H, W]");
        }
        return in;
    }
    if (std::holds_alternative<ReLU>(kind)) return in;
    if (const auto* p = std::get_if<MaxPool2d>(&kind)) {
        if (in.size() != 4) shape_error(kind, in, "[N, C, H, W]");
        const auto oh = kernels::pool_out_dim(in[2], p->kernel, p->stride);
        const auto ow = kernels::pool_out_dim(in[3], p->kernel, p->stride);
        if (oh <= 0 || ow <= 0) shape_error(kind, in, "spatial size >= kernel");
        return {in[0], in[1], oh, ow};
    }
    if (std::holds_alternative<GlobalAvgPool>(kind)) {
        if (in.size() != 4) shape_error(kind, in, "[N, C, H, W]");
        return {in[0], in[1]};
    }
    if (std::holds_alternative<Flatten>(kind)) {
        if (in.size() < 2) shape_error(kind, in, "[N, ...]");
        std::int64_t d = 1;
        for (std::size_t i = 1; i < in.size(); ++i) d *= in[i];
        return {in[0], d};
    }
    throw std::logic_error("layer_output_shape: unhandled layer kind");
}

namespace {

Tensor bn_forward(const BatchNorm& bn, LayerTensors& p, const Tensor& x, bool train,
                  LayerCache* cache) {
    const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::int64_t plane = H * W;
    const std::int64_t m = N * plane;
    Tensor y(x.shape());

    Tensor mean({C}), invstd({C});
    if (train) {
#pragma omp parallel for schedule(static)
        for (std::int64_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* row = x.data() + ((n * C + c) * plane);
                for (std::int64_t i = 0; i < plane; ++i) s += row[i];
            }
            const double mu = s / static_cast<double>(m);
            double sq = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* row = x.data() + ((n * C + c) * plane);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double d = row[i] - mu;
                    sq += d * d;
                }
            }
            const double var = sq / static_cast<double>(m);
            mean[c] = mu;
            invstd[c] = 1.0 / std::sqrt(var + bn.epsilon);
            // running stats: unbiased variance, momentum update
            const double var_unbiased = m > 1 ? var * static_cast<double>(m) / static_cast<double>(m - 1) : var;
            (*p.bn_mean)[c] = (1.0 - bn.momentum) * (*p.bn_mean)[c] + bn.momentum * mu;
            (*p.bn_var)[c] = (1.0 - bn.momentum) * (*p.bn_var)[c] + bn.momentum * var_unbiased;
        }
    } else {
        for (std::int64_t c = 0; c < C; ++c) {
            mean[c] = (*p.bn_mean)[c];
            invstd[c] = 1.0 / std::sqrt((*p.bn_var)[c] + bn.epsilon);
        }
    }

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double g = (*p.bn_scale)[c], b = (*p.bn_shift)[c];
            const double mu = mean[c], is = invstd[c];
            const double* row = x.data() + ((n * C + c) * plane);
            double* out = y.data() + ((n * C + c) * plane);
            for (std::int64_t i = 0; i < plane; ++i) out[i] = g * (row[i] - mu) * is + b;
        }
    }

    if (cache) {
        cache->saved_mean = std::move(mean);
        cache->saved_invstd = std::move(invstd);
    }
    return y;
}

Tensor bn_backward(const BatchNorm&, const LayerTensors& p, const LayerCache& cache,
                   const Tensor& gy, LayerTensors& grads) {
    const Tensor& x = cache.input;
    const std::int64_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
    const std::int64_t m = N * plane;
    Tensor gx(x.shape());

#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) {
        const double mu = cache.saved_mean[c];
        const double is = cache.saved_invstd[c];
        const double gamma = (*p.bn_scale)[c];
        double sum_gy = 0.0, sum_gy_xhat = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
            const double* xr = x.data() + ((n * C + c) * plane);
            const double* gr = gy.data() + ((n * C + c) * plane);
            for (std::int64_t i = 0; i < plane; ++i) {
                const double xhat = (xr[i] - mu) * is;
                sum_gy += gr[i];
                sum_gy_xhat += gr[i] * xhat;
            }
        }
        if (grads.bn_shift) (*grads.bn_shift)[c] = sum_gy;
        if (grads.bn_scale) (*grads.bn_scale)[c] = sum_gy_xhat;

        if (cache.train) {
            const double inv_m = 1.0 / static_cast<double>(m);
            for (std::int64_t n = 0; n < N; ++n) {
                const double* xr = x.data() + ((n * C + c) * plane);
                const double* gr = gy.data() + ((n * C + c) * plane);
                double* go = gx.data() + ((n * C + c) * plane);
                for (std::int64_t i = 0; i < plane; ++i) {
                    const double xhat = (xr[i] - mu) * is;
                    go[i] = gamma * is * (gr[i] - inv_m * sum_gy - xhat * inv_m * sum_gy_xhat);
                }
            }
        } else {
            for (std::int64_t n = 0; n < N; ++n) {
                const double* gr = gy.data() + ((n * C + c) * plane);
                double* go = gx.data() + ((n * C + c) * plane);
                for (std::int64_t i = 0; i < plane; ++i) go[i] = gamma * is * gr[i];
            }
        }
    }
    return gx;
}

}  // namespace

Tensor layer_forward(const LayerKind& kind, LayerTensors& params, const Tensor& input,
                     bool train, LayerCache* cache) {
    const auto out_shape = layer_output_shape(kind, input.shape());
    if (cache) {
        cache->valid = true;
        cache->train = train;
        cache->input = input;
    }

    if (const auto* c = std::get_if<Conv2d>(&kind)) {
        Tensor out(out_shape);
        kernels::conv2d_forward(input, *params.w, *params.b, c->stride, c->padding, out);
        return out;
    }
    if (std::get_if<Dense>(&kind)) {
        Tensor out(out_shape);
        kernels::matmul_nt(input, *params.w, out);
        const std::int64_t N = out.dim(0), M = out.dim(1);
        for (std::int64_t n = 0; n < N; ++n) {
            double* row = out.data() + n * M;
            for (std::int64_t j = 0; j < M; ++j) row[j] += (*params.b)[j];
        }
        return out;
    }
    if (const auto* b = std::get_if<BatchNorm>(&kind)) {
        return bn_forward(*b, params, input, train, cache);
    }
    if (std::holds_alternative<ReLU>(kind)) {
        Tensor out = input;
        for (auto& v : out.vec()) v = v > 0.0 ? v : 0.0;
        return out;
    }
    if (const auto* p = std::get_if<MaxPool2d>(&kind)) {
        Tensor out(out_shape);
        std::vector<std::int64_t> argmax;
        kernels::maxpool_forward(input, p->kernel, p->stride, out, argmax);
        if (cache) cache->argmax = std::move(argmax);
        return out;
    }
    if (std::holds_alternative<GlobalAvgPool>(kind)) {
        const std::int64_t N = input.dim(0), C = input.dim(1), plane = input.dim(2) * input.dim(3);
        Tensor out(out_shape);
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t c = 0; c < C; ++c) {
                const double* row = input.data() + ((n * C + c) * plane);
                double s = 0.0;
                for (std::int64_t i = 0; i < plane; ++i) s += row[i];
                out(n, c) = s / static_cast<double>(plane);
            }
        }
        return out;
    }
    if (std::holds_alternative<Flatten>(kind)) {
        return input.reshaped(out_shape);
    }
    throw std::logic_error("layer_forward: unhandled layer kind");
}

Tensor layer_backward(const LayerKind& kind, const LayerTensors& params,
                      const LayerCache& cache, const Tensor& grad_out, LayerTensors& grads) {
    check_cache(&cache, kind);
    const auto expect_out = layer_output_shape(kind, cache.input.shape());
    if (grad_out.shape() != expect_out) {
        throw std::invalid_argument(layer_name(kind) + ": grad_out shape " + grad_out.shape_str() +
                                    " does not match forward output " + Tensor::shape_str(expect_out));
    }

    if (const auto* c = std::get_if<Conv2d>(&kind)) {
        Tensor gx(cache.input.shape());
        kernels::conv2d_grad_input(grad_out, *params.w, c->stride, c->padding, gx);
        if (grads.w && grads.b) {
            kernels::conv2d_grad_params(grad_out, cache.input, c->stride, c->padding, *grads.w, *grads.b);
        }
        return gx;
    }
    if (std::get_if<Dense>(&kind)) {
        Tensor gx(cache.input.shape());
        kernels::matmul_nn(grad_out, *params.w, gx);
        if (grads.w) kernels::matmul_tn(grad_out, cache.input, *grads.w);
        if (grads.b) {
            const std::int64_t N = grad_out.dim(0), M = grad_out.dim(1);
            grads.b->fill(0.0);
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t j = 0; j < M; ++j) (*grads.b)[j] += grad_out(n, j);
            }
        }
        return gx;
    }
    if (const auto* b = std::get_if<BatchNorm>(&kind)) {
        return bn_backward(*b, params, cache, grad_out, grads);
    }
    if (std::holds_alternative<ReLU>(kind)) {
        Tensor gx = grad_out;
        const auto& x = cache.input;
        for (std::int64_t i = 0; i < gx.size(); ++i) {
            if (x[i] <= 0.0) gx[i] = 0.0;
        }
        return gx;
    }
    if (std::holds_alternative<MaxPool2d>(kind)) {
        Tensor gx(cache.input.shape());
        kernels::maxpool_grad_input(grad_out, cache.argmax, gx);
        return gx;
    }
    if (std::holds_alternative<GlobalAvgPool>(kind)) {
        const auto& x = cache.input;
        const std::int64_t N = x.dim(0), C = x.dim(1), plane = x.dim(2) * x.dim(3);
        Tensor gx(x.shape());
        const double inv = 1.0 / static_cast<double>(plane);
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t c = 0; c < C; ++c) {
                double* row = gx.data() + ((n * C + c) * plane);
                const double g = grad_out(n, c) * inv;
                for (std::int64_t i = 0; i < plane; ++i) row[i] = g;
            }
        }
        return gx;
    }
    if (std::holds_alternative<Flatten>(kind)) {
        return grad_out.reshaped(cache.input.shape());
    }
    throw std::logic_error("layer_backward: unhandled layer kind");
}

}  // namespace fedgen
