// Benchmark comparing the OpenMP kernels against the serial references, and
// checking that both produce bit-identical results on the benchmark shapes.

#include <omp.h>

#include <chrono>
#include <cstdio>
#include <cstring>
#include <functional>

#include "fedgen/kernels.hpp"
#include "fedgen/rng.hpp"

using namespace fedgen;

namespace {

Tensor random_tensor(std::vector<std::int64_t> shape, RngStream& rs) {
    Tensor t(std::move(shape));
    for (auto& v : t.vec()) v = rs.uniform(-1.0, 1.0);
    return t;
}

double time_ms(const std::function<void()>& fn, int reps) {
    fn();  // warm up
    const auto t0 = std::chrono::steady_clock::now();
    for (int i = 0; i < reps; ++i) fn();
    const auto t1 = std::chrono::steady_clock::now();
    return std::chrono::duration<double, std::milli>(t1 - t0).count() / reps;
}

void report(const char* name, double serial_ms, double parallel_ms, bool identical) {
    std::printf("%-24s serial %8.3f ms | omp %8.3f ms | speedup %5.2fx | %s\n", name, serial_ms,
                parallel_ms, serial_ms / parallel_ms, identical ? "bit-identical" : "MISMATCH");
}

}  // namespace

int main(int argc, char** argv) {
    int reps = 5;
    if (argc > 1) reps = std::atoi(argv[1]);
    std::printf("threads: %d, reps per measurement: %d\n", omp_get_max_threads(), reps);

    RngStream rs(1234);

    {  // conv2d forward/backward at training shapes
        const std::int64_t N = 32, IC = 16, OC = 32, S = 14, KS = 3;
        Tensor in = random_tensor({N, IC, S, S}, rs);
        Tensor w = random_tensor({OC, IC, KS, KS}, rs);
        Tensor b = random_tensor({OC}, rs);
        Tensor out_p({N, OC, S, S}), out_s({N, OC, S, S});

        const double sp = time_ms([&] { kernels::serial::conv2d_forward(in, w, b, 1, 1, out_s); }, reps);
        const double pp = time_ms([&] { kernels::conv2d_forward(in, w, b, 1, 1, out_p); }, reps);
        report("conv2d_forward", sp, pp, out_p.vec() == out_s.vec());

        Tensor gout = random_tensor({N, OC, S, S}, rs);
        Tensor gin_p({N, IC, S, S}), gin_s({N, IC, S, S});
        const double sgi = time_ms([&] { kernels::serial::conv2d_grad_input(gout, w, 1, 1, gin_s); }, reps);
        const double pgi = time_ms([&] { kernels::conv2d_grad_input(gout, w, 1, 1, gin_p); }, reps);
        report("conv2d_grad_input", sgi, pgi, gin_p.vec() == gin_s.vec());

        Tensor gw_p({OC, IC, KS, KS}), gw_s({OC, IC, KS, KS}), gb_p({OC}), gb_s({OC});
        const double sgp =
            time_ms([&] { kernels::serial::conv2d_grad_params(gout, in, 1, 1, gw_s, gb_s); }, reps);
        const double pgp = time_ms([&] { kernels::conv2d_grad_params(gout, in, 1, 1, gw_p, gb_p); }, reps);
        report("conv2d_grad_params", sgp, pgp,
               gw_p.vec() == gw_s.vec() && gb_p.vec() == gb_s.vec());
    }

    {  // dense-layer matmuls at hypernetwork shapes
        const std::int64_t M = 256, K = 1728, N = 512;
        Tensor a = random_tensor({M, K}, rs);
        Tensor b = random_tensor({K, N}, rs);
        Tensor bt = random_tensor({N, K}, rs);
        Tensor c_p({M, N}), c_s({M, N});

        const double snn = time_ms([&] { kernels::serial::matmul_nn(a, b, c_s); }, reps);
        const double pnn = time_ms([&] { kernels::matmul_nn(a, b, c_p); }, reps);
        report("matmul_nn 256x1728x512", snn, pnn, c_p.vec() == c_s.vec());

        const double snt = time_ms([&] { kernels::serial::matmul_nt(a, bt, c_s); }, reps);
        const double pnt = time_ms([&] { kernels::matmul_nt(a, bt, c_p); }, reps);
        report("matmul_nt 256x1728x512", snt, pnt, c_p.vec() == c_s.vec());
    }

    {  // maxpool
        const std::int64_t N = 64, C = 32, S = 28;
        Tensor in = random_tensor({N, C, S, S}, rs);
        Tensor out_p({N, C, S / 2, S / 2}), out_s({N, C, S / 2, S / 2});
        std::vector<std::int64_t> am_p, am_s;
        const double sp = time_ms([&] { kernels::serial::maxpool_forward(in, 2, 2, out_s, am_s); }, reps);
        const double pp = time_ms([&] { kernels::maxpool_forward(in, 2, 2, out_p, am_p); }, reps);
        report("maxpool_forward", sp, pp, out_p.vec() == out_s.vec() && am_p == am_s);
    }

    return 0;
}
