#include "fedgen/lrf.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

namespace fedgen::lrf {

WeightMatrix to_matrix(const Tensor& conv_weight) {
    if (conv_weight.ndim() != 4) {
        throw std::invalid_argument("lrf::to_matrix: expected 4-D conv weight, got " +
                                    conv_weight.shape_str());
    }
    const std::int64_t OC = conv_weight.dim(0), IC = conv_weight.dim(1);
    const std::int64_t KH = conv_weight.dim(2), KW = conv_weight.dim(3);
    if (KH != KW) {
        throw std::invalid_argument("lrf::to_matrix: expected a square kernel, got " +
                                    conv_weight.shape_str());
    }
    const std::int64_t KS = KH;
    WeightMatrix wm;
    wm.source_shape = {OC, IC, KS, KS};
    wm.matrix = Tensor({IC * KS, OC * KS});
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t kh = 0; kh < KS; ++kh) {
                for (std::int64_t kw = 0; kw < KS; ++kw) {
                    wm.matrix(ic * KS + kh, oc * KS + kw) = conv_weight(oc, ic, kh, kw);
                }
            }
        }
    }
    return wm;
}

Tensor from_matrix(const WeightMatrix& wm) {
    const auto [OC, IC, KS, KS2] = wm.source_shape;
    if (wm.matrix.dim(0) != IC * KS || wm.matrix.dim(1) != OC * KS || KS != KS2) {
        throw std::invalid_argument("lrf::from_matrix: matrix " + wm.matrix.shape_str() +
                                    " inconsistent with source shape");
    }
    Tensor w({OC, IC, KS, KS});
    for (std::int64_t oc = 0; oc < OC; ++oc) {
        for (std::int64_t ic = 0; ic < IC; ++ic) {
            for (std::int64_t kh = 0; kh < KS; ++kh) {
                for (std::int64_t kw = 0; kw < KS; ++kw) {
                    w(oc, ic, kh, kw) = wm.matrix(ic * KS + kh, oc * KS + kw);
                }
            }
        }
    }
    return w;
}

namespace {

double frobenius(const Tensor& m) {
    double s = 0.0;
    for (double v : m.vec()) s += v * v;
    return std::sqrt(s);
}

// Completes `u` (m x m, `filled` valid orthonormal columns in cols[0..filled))
// with standard basis vectors, two Gram-Schmidt passes per candidate.
void complete_basis(Tensor& u, std::int64_t filled) {
    const std::int64_t m = u.dim(0);
    std::int64_t next = filled;
    for (std::int64_t cand = 0; cand < m && next < m; ++cand) {
        std::vector<double> v(static_cast<std::size_t>(m), 0.0);
        v[static_cast<std::size_t>(cand)] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::int64_t j = 0; j < next; ++j) {
                double dot = 0.0;
                for (std::int64_t i = 0; i < m; ++i) dot += v[static_cast<std::size_t>(i)] * u(i, j);
                for (std::int64_t i = 0; i < m; ++i) v[static_cast<std::size_t>(i)] -= dot * u(i, j);
            }
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (std::int64_t i = 0; i < m; ++i) u(i, next) = v[static_cast<std::size_t>(i)] / norm;
        ++next;
    }
    if (next < m) throw std::runtime_error("lrf::svd: failed to complete an orthonormal basis");
}

}  // namespace

SvdResult svd(const Tensor& m) {
    if (m.ndim() != 2) throw std::invalid_argument("lrf::svd: expected a matrix, got " + m.shape_str());
    for (double v : m.vec()) {
        if (!std::isfinite(v)) throw std::invalid_argument("lrf::svd: non-finite entry");
    }

    const std::int64_t r = m.dim(0), c = m.dim(1);
    const bool transposed = r < c;
    const std::int64_t rows = transposed ? c : r;
    const std::int64_t cols = transposed ? r : c;

    // Column-major work matrix for cache-friendly column rotations.
    std::vector<double> b(static_cast<std::size_t>(rows * cols));
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            const double v = m(i, j);
            if (transposed) {
                b[static_cast<std::size_t>(i * rows + j)] = v;  // column i of B = row i of m
            } else {
                b[static_cast<std::size_t>(j * rows + i)] = v;
            }
        }
    }

    std::vector<double> vmat(static_cast<std::size_t>(cols * cols), 0.0);
    for (std::int64_t j = 0; j < cols; ++j) vmat[static_cast<std::size_t>(j * cols + j)] = 1.0;

    const double eps = 1e-15;
    const int max_sweeps = 100;
    bool converged = false;
    for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
        converged = true;
        for (std::int64_t i = 0; i < cols - 1; ++i) {
            for (std::int64_t j = i + 1; j < cols; ++j) {
                double* bi = b.data() + i * rows;
                double* bj = b.data() + j * rows;
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::int64_t k = 0; k < rows; ++k) {
                    alpha += bi[k] * bi[k];
                    beta += bj[k] * bj[k];
                    gamma += bi[k] * bj[k];
                }
                if (std::abs(gamma) <= eps * std::sqrt(alpha * beta) || gamma == 0.0) continue;
                converged = false;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::int64_t k = 0; k < rows; ++k) {
                    const double x = bi[k], y = bj[k];
                    bi[k] = cs * x - sn * y;
                    bj[k] = sn * x + cs * y;
                }
                double* vi = vmat.data() + i * cols;
                double* vj = vmat.data() + j * cols;
                for (std::int64_t k = 0; k < cols; ++k) {
                    const double x = vi[k], y = vj[k];
                    vi[k] = cs * x - sn * y;
                    vj[k] = sn * x + cs * y;
                }
            }
        }
    }

    std::vector<double> sigma(static_cast<std::size_t>(cols));
    for (std::int64_t j = 0; j < cols; ++j) {
        double s = 0.0;
        const double* bj = b.data() + j * rows;
        for (std::int64_t k = 0; k < rows; ++k) s += bj[k] * bj[k];
        sigma[static_cast<std::size_t>(j)] = std::sqrt(s);
    }

    // Descending order, ties broken by original column index.
    std::vector<std::int64_t> order(static_cast<std::size_t>(cols));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::int64_t a, std::int64_t bb) {
        return sigma[static_cast<std::size_t>(a)] > sigma[static_cast<std::size_t>(bb)];
    });

    Tensor big_u({rows, rows});   // left factor of the worked matrix
    Tensor small_v({cols, cols});  // right factor of the worked matrix
    std::vector<double> s_sorted(static_cast<std::size_t>(cols));
    const double smax = sigma.empty() ? 0.0 : sigma[static_cast<std::size_t>(order[0])];
    std::int64_t filled = 0;
    for (std::int64_t j = 0; j < cols; ++j) {
        const std::int64_t src = order[static_cast<std::size_t>(j)];
        const double s = sigma[static_cast<std::size_t>(src)];
        s_sorted[static_cast<std::size_t>(j)] = s;
        for (std::int64_t k = 0; k < cols; ++k) {
            small_v(k, j) = vmat[static_cast<std::size_t>(src * cols + k)];
        }
        if (s > smax * 1e-13 && s > 0.0) {
            // tightly packed: zero columns are completed afterwards
            if (j != filled) {
                throw std::logic_error("lrf::svd: zero singular value ordered before a nonzero one");
            }
            const double* bj = b.data() + src * rows;
            for (std::int64_t k = 0; k < rows; ++k) big_u(k, j) = bj[k] / s;
            ++filled;
        }
    }
    complete_basis(big_u, filled);

    SvdResult out;
    if (transposed) {
        out.u = std::move(small_v);
        out.v = std::move(big_u);
    } else {
        out.u = std::move(big_u);
        out.v = std::move(small_v);
    }
    out.s = std::move(s_sorted);

    // Residual check doubles as the non-convergence report.
    double resid = 0.0;
    const std::int64_t kmin = static_cast<std::int64_t>(out.s.size());
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t j = 0; j < c; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < kmin; ++k) {
                acc += out.u(i, k) * out.s[static_cast<std::size_t>(k)] * out.v(j, k);
            }
            const double d = acc - m(i, j);
            resid += d * d;
        }
    }
    resid = std::sqrt(resid);
    const double bound = 1e-8 * std::max(1.0, frobenius(m));
    if (!converged || resid > bound) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "lrf::svd: no convergence (residual %.3e, bound %.3e)", resid,
                      bound);
        throw std::runtime_error(buf);
    }
    return out;
}

FactorPair truncate(const SvdResult& decomposition, std::int64_t k) {
    const std::int64_t r = decomposition.u.dim(0);
    const std::int64_t c = decomposition.v.dim(0);
    const std::int64_t kmax = static_cast<std::int64_t>(decomposition.s.size());
    if (k < 1) throw std::invalid_argument("lrf::truncate: k must be >= 1");
    if (k > kmax) {
        std::fprintf(stderr, "[lrf] warning: k=%lld clamped to max rank %lld\n",
                     static_cast<long long>(k), static_cast<long long>(kmax));
        k = kmax;
    }

    FactorPair f;
    f.k = k;
    f.sigma.assign(decomposition.s.begin(), decomposition.s.begin() + k);
    f.p = Tensor({r, k});
    f.q = Tensor({k, c});
    for (std::int64_t j = 0; j < k; ++j) {
        // Sign convention: the largest-|entry| of each left singular vector is
        // non-negative. Without this the factors flip sign between otherwise
        // identical decompositions and cannot serve as regression targets.
        std::int64_t arg = 0;
        double best = std::abs(decomposition.u(0, j));
        for (std::int64_t i = 1; i < r; ++i) {
            const double a = std::abs(decomposition.u(i, j));
            if (a > best) {
                best = a;
                arg = i;
            }
        }
        const double flip = decomposition.u(arg, j) < 0.0 ? -1.0 : 1.0;
        const double scale = std::sqrt(f.sigma[static_cast<std::size_t>(j)]);
        for (std::int64_t i = 0; i < r; ++i) f.p(i, j) = flip * decomposition.u(i, j) * scale;
        for (std::int64_t i = 0; i < c; ++i) f.q(j, i) = flip * decomposition.v(i, j) * scale;
    }
    return f;
}

Tensor reconstruct(const FactorPair& f) {
    const std::int64_t r = f.p.dim(0), k = f.p.dim(1), c = f.q.dim(1);
    if (f.q.dim(0) != k) {
        throw std::invalid_argument("lrf::reconstruct: inner dimensions " + f.p.shape_str() + " vs " +
                                    f.q.shape_str());
    }
    Tensor m({r, c});
    for (std::int64_t i = 0; i < r; ++i) {
        for (std::int64_t kk = 0; kk < k; ++kk) {
            const double pv = f.p(i, kk);
            for (std::int64_t j = 0; j < c; ++j) m(i, j) += pv * f.q(kk, j);
        }
    }
    return m;
}

FactorPair factorize(const Tensor& matrix, std::int64_t k) {
    return truncate(svd(matrix), k);
}

std::vector<double> flatten_factors(const FactorPair& f) {
    std::vector<double> x;
    x.reserve(static_cast<std::size_t>(f.p.size() + f.q.size()));
    x.insert(x.end(), f.p.vec().begin(), f.p.vec().end());
    x.insert(x.end(), f.q.vec().begin(), f.q.vec().end());
    return x;
}

FactorPair unflatten_factors(const std::vector<double>& x, std::int64_t r, std::int64_t c,
                             std::int64_t k) {
    if (static_cast<std::int64_t>(x.size()) != r * k + k * c) {
        throw std::invalid_argument("lrf::unflatten_factors: size mismatch");
    }
    FactorPair f;
    f.k = k;
    f.p = Tensor({r, k}, std::vector<double>(x.begin(), x.begin() + r * k));
    f.q = Tensor({k, c}, std::vector<double>(x.begin() + r * k, x.end()));
    return f;
}

}  // namespace fedgen::lrf
