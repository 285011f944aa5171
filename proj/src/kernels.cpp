#include "fedgen/kernels.hpp"

#include <stdexcept>

namespace fedgen::kernels {

std::int64_t conv_out_dim(std::int64_t in_dim, std::int64_t kernel, std::int64_t stride,
                          std::int64_t padding) {
    return (in_dim + 2 * padding - kernel) / stride + 1;
}

std::int64_t pool_out_dim(std::int64_t in_dim, std::int64_t kernel, std::int64_t stride) {
    return (in_dim - kernel) / stride + 1;
}

// Accumulation order per output element is (ic, kh, kw), matching the serial
// reference exactly; each element is owned by one thread.
void conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                    std::int64_t stride, std::int64_t padding, Tensor& out) {
    const std::int64_t N = in.dim(0), IC = in.dim(1), IH = in.dim(2), IW = in.dim(3);
    const std::int64_t OC = weight.dim(0), KS = weight.dim(2);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t oc = 0; oc < OC; ++oc) {
            double* o = out.data() + ((n * OC + oc) * OH) * OW;
            const double b = bias.size() ? bias[oc] : 0.0;
            for (std::int64_t i = 0; i < OH * OW; ++i) o[i] = b;
            for (std::int64_t ic = 0; ic < IC; ++ic) {
                const double* x = in.data() + ((n * IC + ic) * IH) * IW;
                const double* w = weight.data() + ((oc * IC + ic) * KS) * KS;
                for (std::int64_t kh = 0; kh < KS; ++kh) {
                    for (std::int64_t kw = 0; kw < KS; ++kw) {
                        const double wv = w[kh * KS + kw];
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= IH) continue;
                            double* orow = o + oh * OW;
                            const double* xrow = x + ih * IW;
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= IW) continue;
                                orow[ow] += wv * xrow[iw];
                            }
                        }
                    }
                }
            }
        }
    }
}

// Gather form: each input element sums its contributions in (oc, kh, kw)
// order, so no atomics are needed and results are thread-count independent.
void conv2d_grad_input(const Tensor& grad_out, const Tensor& weight,
                       std::int64_t stride, std::int64_t padding, Tensor& grad_in) {
    const std::int64_t N = grad_in.dim(0), IC = grad_in.dim(1), IH = grad_in.dim(2), IW = grad_in.dim(3);
    const std::int64_t OC = weight.dim(0), KS = weight.dim(2);
    const std::int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            double* gx = grad_in.data() + ((n * IC + ic) * IH) * IW;
            for (std::int64_t i = 0; i < IH * IW; ++i) gx[i] = 0.0;
            for (std::int64_t oc = 0; oc < OC; ++oc) {
                const double* gy = grad_out.data() + ((n * OC + oc) * OH) * OW;
                const double* w = weight.data() + ((oc * IC + ic) * KS) * KS;
                for (std::int64_t kh = 0; kh < KS; ++kh) {
                    for (std::int64_t kw = 0; kw < KS; ++kw) {
                        const double wv = w[kh * KS + kw];
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= IH) continue;
                            double* gxrow = gx + ih * IW;
                            const double* gyrow = gy + oh * OW;
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= IW) continue;
                                gxrow[iw] += wv * gyrow[ow];
                            }
                        }
                    }
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

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            double* gw = grad_weight.data() + ((oc * IC + ic) * KS) * KS;
            for (std::int64_t i = 0; i < KS * KS; ++i) gw[i] = 0.0;
            for (std::int64_t n = 0; n < N; ++n) {
                const double* gy = grad_out.data() + ((n * OC + oc) * OH) * OW;
                const double* x = in.data() + ((n * IC + ic) * IH) * IW;
                for (std::int64_t kh = 0; kh < KS; ++kh) {
                    for (std::int64_t kw = 0; kw < KS; ++kw) {
                        double acc = 0.0;
                        for (std::int64_t oh = 0; oh < OH; ++oh) {
                            const std::int64_t ih = oh * stride - padding + kh;
                            if (ih < 0 || ih >= IH) continue;
                            const double* gyrow = gy + oh * OW;
                            const double* xrow = x + ih * IW;
                            for (std::int64_t ow = 0; ow < OW; ++ow) {
                                const std::int64_t iw = ow * stride - padding + kw;
                                if (iw < 0 || iw >= IW) continue;
                                acc += gyrow[ow] * xrow[iw];
                            }
                        }
                        gw[kh * KS + kw] += acc;
                    }
                }
            }
        }
    }

#pragma omp parallel for schedule(static)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        double acc = 0.0;
        for (std::int64_t n = 0; n < N; ++n) {
            const double* gy = grad_out.data() + ((n * OC + oc) * OH) * OW;
            for (std::int64_t i = 0; i < OH * OW; ++i) acc += gy[i];
        }
        grad_bias[oc] = acc;
    }
}

void matmul_nn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t M = a.dim(0), K = a.dim(1), Nn = b.dim(1);
    if (b.dim(0) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_nn: shape mismatch " + a.shape_str() + " x " + b.shape_str());
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < M; ++i) {
        double* crow = c.data() + i * Nn;
        for (std::int64_t j = 0; j < Nn; ++j) crow[j] = 0.0;
        const double* arow = a.data() + i * K;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = arow[k];
            const double* brow = b.data() + k * Nn;
            for (std::int64_t j = 0; j < Nn; ++j) crow[j] += av * brow[j];
        }
    }
}

void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t M = a.dim(0), K = a.dim(1), Nn = b.dim(0);
    if (b.dim(1) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_nt: shape mismatch " + a.shape_str() + " x " + b.shape_str());
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < M; ++i) {
        const double* arow = a.data() + i * K;
        double* crow = c.data() + i * Nn;
        for (std::int64_t j = 0; j < Nn; ++j) {
            const double* brow = b.data() + j * K;
            double acc = 0.0;
            for (std::int64_t k = 0; k < K; ++k) acc += arow[k] * brow[k];
            crow[j] = acc;
        }
    }
}

void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c) {
    const std::int64_t K = a.dim(0), M = a.dim(1), Nn = b.dim(1);
    if (b.dim(0) != K || c.dim(0) != M || c.dim(1) != Nn) {
        throw std::invalid_argument("matmul_tn: shape mismatch " + a.shape_str() + " x " + b.shape_str());
    }
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < M; ++i) {
        double* crow = c.data() + i * Nn;
        for (std::int64_t j = 0; j < Nn; ++j) crow[j] = 0.0;
        for (std::int64_t k = 0; k < K; ++k) {
            const double av = a.data()[k * M + i];
            const double* brow = b.data() + k * Nn;
            for (std::int64_t j = 0; j < Nn; ++j) crow[j] += av * brow[j];
        }
    }
}

void maxpool_forward(const Tensor& in, std::int64_t kernel, std::int64_t stride,
                     Tensor& out, std::vector<std::int64_t>& argmax) {
    const std::int64_t N = in.dim(0), C = in.dim(1), IH = in.dim(2), IW = in.dim(3);
    const std::int64_t OH = out.dim(2), OW = out.dim(3);
    argmax.assign(static_cast<std::size_t>(out.size()), 0);

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            const double* x = in.data() + ((n * C + c) * IH) * IW;
            const std::int64_t plane = (n * C + c) * IH * IW;
            for (std::int64_t oh = 0; oh < OH; ++oh) {
                for (std::int64_t ow = 0; ow < OW; ++ow) {
                    double best = -1e308;
                    std::int64_t best_idx = 0;
                    for (std::int64_t kh = 0; kh < kernel; ++kh) {
                        for (std::int64_t kw = 0; kw < kernel; ++kw) {
                            const std::int64_t ih = oh * stride + kh;
                            const std::int64_t iw = ow * stride + kw;
                            const double v = x[ih * IW + iw];
                            if (v > best) {
                                best = v;
                                best_idx = plane + ih * IW + iw;
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

// Scatter is confined to one (n, c) plane per thread, so overlapping windows
// cannot race across threads.
void maxpool_grad_input(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                        Tensor& grad_in) {
    const std::int64_t N = grad_in.dim(0), C = grad_in.dim(1), IH = grad_in.dim(2), IW = grad_in.dim(3);
    const std::int64_t OH = grad_out.dim(2), OW = grad_out.dim(3);

#pragma omp parallel for collapse(2) schedule(static)
    for (std::int64_t n = 0; n < N; ++n) {
        for (std::int64_t c = 0; c < C; ++c) {
            double* gx = grad_in.data() + ((n * C + c) * IH) * IW;
            for (std::int64_t i = 0; i < IH * IW; ++i) gx[i] = 0.0;
            for (std::int64_t o = 0; o < OH * OW; ++o) {
                const std::int64_t oidx = (n * C + c) * OH * OW + o;
                grad_in[argmax[static_cast<std::size_t>(oidx)]] += grad_out[oidx];
            }
        }
    }
}

}  // namespace fedgen::kernels
