#include "fedgen/kernels.hpp"

#include <stdexcept>

namespace fedgen::kernels::serial {

// Plain nested-loop references. Per-element accumulation order matches the
// parallel kernels, so outputs are expected to be bit-identical.

void conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                    std::int64_t stride, std::int64_t padding, Tensor& out) {
    const std::int64_t N = in.dim(0), IC = in.dim(1), IH = in.dim(2), IW = in.dim(3);
    const std::int64_t OC = weight.dim(0), KS = weight.dim(2);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);

    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double acc = bias.size() ? bias[oc] : 0.0;
                    for (std::int64_t ic = 0; ic < IC; ++ic) {
                        for (std::int64_t kh = 0; kh < KS; ++kh) {
                            for (std::int64_t kw = 0; kw < KS; ++kw) {
                                const std::int64_t ih = oh * stride - padding + kh;
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (ih < 0 || ih >= IH || iw < 0 || iw >= IW) continue;
                                acc += weight(oc, ic, kh, kw) * in(n, ic, ih, iw);
                            }
                        }
                    }
                    out(n, oc, oh, ow) = acc;
                }
            }
        }
    }
}

void conv2d_grad_input(const Tensor& grad_out, const Tensor& weight,
                       std::int64_t stride, std::int64_t padding, Tensor& grad_in) {
    const std::int64_t N = grad_in.dim(0), IC = grad_in.dim(1), IH = grad_in.dim(2), IW = grad_in.dim(3);
    const std::int64_t OC = weight.dim(0), KS = weight.dim(2);
    const std::int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);

    grad_in.fill(0.0);
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t ih = 0; ih < IH; ++ih) {
                for (std::int64_t iw = 0; iw < IW; ++iw) {
                    double acc = 0.0;
                    for (std::int64_t oc = 0; oc < OC; ++oc) {
                        for (std::int64_t kh = 0; kh < KS; ++kh) {
                            for (std::int64_t kw = 0; kw < KS; ++kw) {
                                const std::int64_t oh_num = ih + padding - kh;
                                const std::int64_t ow_num = iw + padding - kw;
                                if (oh_num < 0 || ow_num < 0) continue;
                                if (oh_num % stride || ow_num % stride) continue;
                                const std::int64_t oh = oh_num / stride;
                                const std::int64_t ow = ow_num / stride;
                                if (oh >= OH || ow >= OW) continue;
                                acc += weight(oc, ic, kh, kw) * grad_out(n, oc, oh, ow);
                            }
                        }
                    }
                    grad_in(n, ic, ih, iw) = acc;
                }
            }
        }
    }
}

void conv2d_grad_params(const Tensor& grad_out, const Tensor& in,
                        std::int64_t stride, std::int64_t padding,
                        Tensor& grad_weight, Tensor& grad_bias) {
    const std::int64_t N = in.dim(0), IC = in.dim(1), IH = in.dim(2), IW = in.dim(3);
    const std::int64_t OC = grad_weight.dim(0), KS = grad_weight.dim(2);
    const std::int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);

    grad_weight.fill(0.0);
    grad_bias.fill(0.0);
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t n = 0; n < N; ++n) {
                for (std::int64_t kh = 0; kh < KS; ++kh) {
                    for (std::int64_t kw = 0; kw < KS; ++kw) {
                        double acc = 0.0;
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t ih = oh * stride - padding + kh;
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (ih < 0 || ih >= IH || iw < 0 || iw >= IW) continue;
                                acc += grad_out(n, oc, oh, ow) * in(n, ic, ih, iw);
                            }
                        }
                        grad_weight(oc, ic, kh, kw) += acc;
                    }
                }
            }
        }
    }
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
            for (std::int64_t o = 0; o < OH * OW; ++o) {
                acc += grad_out.data()[((n * OC + oc) * OH) * OW + o];
            }
        }
        grad_bias[oc] = acc;
    }
}

void matmul_nn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t M = a.dim(0), K = a.dim(1), Nn = b.dim(1);
    if (b.dim(0) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_nn: shape mismatch");
    }
    c.fill(0.0);
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t k = 0; k < K; ++k) {
            for (std::int64_t j = 0; j < Nn; ++j) {
                c(i, j) += a(i, k) * b(k, j);
            }
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t M = a.dim(0), K = a.dim(1), Nn = b.dim(0);
    if (b.dim(1) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_nt: shape mismatch");
    }
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t j = 0; j < Nn; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < K; ++k) acc += a(i, k) * b(j, k);
            c(i, j) = acc;
        }
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t K = a.dim(0), M = a.dim(1), Nn = b.dim(1);
    if (b.dim(0) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_tn: shape mismatch");
    }
    c.fill(0.0);
    for (std::int64_t i = 0; i < M; ++i) {
        for (std::int64_t k = 0; k < K; ++k) {
            for (std::int64_t j = 0; j < Nn; ++j) {
                c(i, j) += a(k, i) * b(k, j);
            }
        }
    }
}

void maxpool_forward(const Tensor& in, std::int64_t kernel, std::int64_t stride,
                     Tensor& out, std::vector<std::int64_t>& argmax) {
    const std::int64_t N = in.dim(0), C = in.dim(1), IH = in.dim(2), IW = in.dim(3);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);
    argmax.assign(static_cast<std::size_t>(out.size()), 0);

    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double best = -1e308;
                    std::int64_t best_idx = 0;
                    for (std::int64_t kh = 0; kh < kernel; ++kh) {
                        for (std::int64_t kw = 0; kw < kernel; ++kw) {
                            const std::int64_t ih = oh * stride + kh;
                            const std::int64_t iw = ow * stride + kw;
                            const double v = in(n, c, ih, iw);
                            if (v > best) {
                                best = v;
                                best_idx = ((n * C + c) * IH + ih) * IW + iw;
                            }
                        }
                    }
                    const std::int64_t oidx = ((n * C + c) * OH + oh) * OW + ow;
                    out[oidx] = best;
                    argmax[static_cast<std::size_t>(oidx)] = best_idx;
                }
            }
        }
    }
}

void maxpool_grad_input(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                        Tensor& grad_in) {
    grad_in.fill(0.0);
    for (std::int64_t o = 0; o < grad_out.size(); ++o) {
        grad_in[argmax[static_cast<std::size_t>(o)]] += grad_out[o];
    }
}

}  // namespace fedgen::kernels::serial
