#pragma once

#include "fedgen/tensor.hpp"

namespace fedgen::kernels {

// OpenMP-parallel kernels. Every output element is computed by exactly one
// thread with a fixed inner accumulation order, so results are bit-identical
// for any thread count (and to the serial reference below).

void conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                    std::int64_t stride, std::int64_t padding, Tensor& out);
void conv2d_grad_input(const Tensor& grad_out, const Tensor& weight,
                       std::int64_t stride, std::int64_t padding, Tensor& grad_in);
void conv2d_grad_params(const Tensor& grad_out, const Tensor& in,
                        std::int64_t stride, std::int64_t padding,
                        Tensor& grad_weight, Tensor& grad_bias);

/// C[m,n] = A[m,k] * B[k,n]
void matmul_nn(const Tensor& a, const Tensor& b, Tensor& c);
/// C[m,n] = A[m,k] * B[n,k]^T
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c);
/// C[m,n] = A[k,m]^T * B[k,n]
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c);

/// argmax holds the flat input index chosen per output element.
void maxpool_forward(const Tensor& in, std::int64_t kernel, std::int64_t stride,
                     Tensor& out, std::vector<std::int64_t>& argmax);
void maxpool_grad_input(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                        Tensor& grad_in);

namespace serial {

// Reference implementations, kept for tests and the kernel benchmark.
// Same accumulation order as the parallel versions.

void conv2d_forward(const Tensor& in, const Tensor& weight, const Tensor& bias,
                    std::int64_t stride, std::int64_t padding, Tensor& out);
void conv2d_grad_input(const Tensor& grad_out, const Tensor& weight,
                       std::int64_t stride, std::int64_t padding, Tensor& grad_in);
void conv2d_grad_params(const Tensor& grad_out, const Tensor& in,
                        std::int64_t stride, std::int64_t padding,
                        Tensor& grad_weight, Tensor& grad_bias);
void matmul_nn(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_nt(const Tensor& a, const Tensor& b, Tensor& c);
void matmul_tn(const Tensor& a, const Tensor& b, Tensor& c);
void maxpool_forward(const Tensor& in, std::int64_t kernel, std::int64_t stride,
                     Tensor& out, std::vector<std::int64_t>& argmax);
void maxpool_grad_input(const Tensor& grad_out, const std::vector<std::int64_t>& argmax,
                        Tensor& grad_in);

}  // namespace serial

std::int64_t conv_out_dim(std::int64_t in_dim, std::int64_t kernel, std::int64_t stride,
                          std::int64_t padding);
std::int64_t pool_out_dim(std::int64_t in_dim, std::int64_t kernel, std::int64_t stride);

}  // namespace fedgen::kernels
