#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "fedgen/lrf.hpp"
#include "fedgen/rng.hpp"

using namespace fedgen;

namespace {

Tensor random_matrix(std::int64_t r, std::int64_t c, RngStream& rs) {
    Tensor m({r, c});
    for (auto& v : m.vec()) v = rs.uniform(-1.0, 1.0);
    return m;
}

double fro(const Tensor& m) {
    double s = 0.0;
    for (double v : m.vec()) s += v * v;
    return std::sqrt(s);
}

double max_abs_offdiag_gram(const Tensor& a) {
    // max |(A^T A)_ij - I_ij| as an orthogonality measure
    const std::int64_t n = a.dim(1);
    double worst = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::int64_t k = 0; k < a.dim(0); ++k) dot += a(k, i) * a(k, j);
            worst = std::max(worst, std::abs(dot - (i == j ? 1.0 : 0.0)));
        }
    }
    return worst;
}

// Independent oracle: eigenvalues of m^T m via a classic cyclic Jacobi
// eigensolver for symmetric matrices (no shared code with lrf::svd).
std::vector<double> gram_eigenvalues(const Tensor& m) {
    const std::int64_t n = m.dim(1);
    std::vector<double> a(static_cast<std::size_t>(n * n), 0.0);
    for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t j = 0; j < n; ++j) {
            double dot = 0.0;
            for (std::int64_t k = 0; k < m.dim(0); ++k) dot += m(k, i) * m(k, j);
            a[static_cast<std::size_t>(i * n + j)] = dot;
        }
    }
    auto at = [&](std::int64_t i, std::int64_t j) -> double& {
        return a[static_cast<std::size_t>(i * n + j)];
    };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            for (std::int64_t j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        }
        if (off < 1e-24) break;
        for (std::int64_t p = 0; p < n - 1; ++p) {
            for (std::int64_t q = p + 1; q < n; ++q) {
                if (std::abs(at(p, q)) < 1e-300) continue;
                const double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
                const double t =
                    (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(1.0 + theta * theta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::int64_t k = 0; k < n; ++k) {
                    const double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - s * akq;
                    at(k, q) = s * akp + c * akq;
                }
                for (std::int64_t k = 0; k < n; ++k) {
                    const double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - s * aqk;
                    at(q, k) = s * apk + c * aqk;
                }
            }
        }
    }
    std::vector<double> eig(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) eig[static_cast<std::size_t>(i)] = std::max(0.0, at(i, i));
    std::sort(eig.begin(), eig.end(), std::greater<double>());
    return eig;
}

}  // namespace

TEST_SUITE_BEGIN("lrf");

TEST_CASE("to_matrix follows the explicit index formula") {
    // OC=IC=1, KS=2 with entries [[a,b],[c,d]]
    Tensor w({1, 1, 2, 2}, {1.5, -2.0, 3.0, 0.25});
    auto wm = lrf::to_matrix(w);
    CHECK(wm.matrix.shape() == std::vector<std::int64_t>{2, 2});
    CHECK(wm.matrix.vec() == w.vec());

    RngStream rs(3);
    Tensor big({5, 3, 3, 3});
    for (auto& v : big.vec()) v = rs.normal();
    auto wm2 = lrf::to_matrix(big);
    CHECK(wm2.matrix.shape() == std::vector<std::int64_t>{9, 15});
    for (std::int64_t oc = 0; oc < 5; ++oc) {
        for (std::int64_t ic = 0; ic < 3; ++ic) {
            for (std::int64_t kh = 0; kh < 3; ++kh) {
                for (std::int64_t kw = 0; kw < 3; ++kw) {
                    CHECK(wm2.matrix(ic * 3 + kh, oc * 3 + kw) == big(oc, ic, kh, kw));
                }
            }
        }
    }
}

TEST_CASE("to_matrix of zeros is the zero matrix and the roundtrip is bit-exact") {
    Tensor zero({4, 2, 3, 3});
    auto wm = lrf::to_matrix(zero);
    CHECK(wm.matrix.shape() == std::vector<std::int64_t>{6, 12});
    for (double v : wm.matrix.vec()) CHECK(v == 0.0);

    RngStream rs(7);
    Tensor w({6, 4, 3, 3});
    for (auto& v : w.vec()) v = rs.normal();
    Tensor back = lrf::from_matrix(lrf::to_matrix(w));
    CHECK(back.vec() == w.vec());
    CHECK(fro(lrf::to_matrix(w).matrix) == doctest::Approx(fro(w)).epsilon(1e-15));
}

TEST_CASE("to_matrix rejects non-4D input") {
    CHECK_THROWS_AS(lrf::to_matrix(Tensor({3, 3})), std::invalid_argument);
}

TEST_CASE("svd of identity and diagonal matrices") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    auto r = lrf::svd(eye);
    CHECK(r.s == std::vector<double>{1.0, 1.0});

    Tensor d({2, 2}, {3, 0, 0, 1});
    auto rd = lrf::svd(d);
    CHECK(rd.s[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(rd.s[1] == doctest::Approx(1.0).epsilon(1e-12));
    for (std::int64_t i = 0; i < 2; ++i) {
        for (std::int64_t j = 0; j < 2; ++j) {
            CHECK(std::abs(std::abs(rd.u(i, j)) - (i == j ? 1.0 : 0.0)) < 1e-12);
            CHECK(std::abs(std::abs(rd.v(i, j)) - (i == j ? 1.0 : 0.0)) < 1e-12);
        }
    }
}

TEST_CASE("svd singular values match the Gram eigenvalue oracle") {
    RngStream rs(11);
    Tensor m = random_matrix(12, 8, rs);
    auto r = lrf::svd(m);
    auto eig = gram_eigenvalues(m);
    REQUIRE(r.s.size() == eig.size());
    for (std::size_t i = 0; i < eig.size(); ++i) {
        CHECK(std::abs(r.s[i] - std::sqrt(eig[i])) < 1e-8);
    }
}

TEST_CASE("svd orthogonality and reconstruction on random rectangular matrices") {
    RngStream rs(13);
    for (int trial = 0; trial < 20; ++trial) {
        const std::int64_t r = rs.uniform_int(1, 40);
        const std::int64_t c = rs.uniform_int(1, 40);
        Tensor m = random_matrix(r, c, rs);
        auto d = lrf::svd(m);
        CHECK(max_abs_offdiag_gram(d.u) < 1e-8);
        CHECK(max_abs_offdiag_gram(d.v) < 1e-8);
        double resid = 0.0;
        for (std::int64_t i = 0; i < r; ++i) {
            for (std::int64_t j = 0; j < c; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < d.s.size(); ++k) {
                    acc += d.u(i, static_cast<std::int64_t>(k)) * d.s[k] *
                           d.v(j, static_cast<std::int64_t>(k));
                }
                const double diff = acc - m(i, j);
                resid += diff * diff;
            }
        }
        CHECK(std::sqrt(resid) <= 1e-8 * std::max(1.0, fro(m)));
        for (std::size_t k = 1; k < d.s.size(); ++k) CHECK(d.s[k - 1] >= d.s[k]);
    }
}

TEST_CASE("svd of the zero matrix") {
    Tensor z({5, 3});
    auto d = lrf::svd(z);
    for (double s : d.s) CHECK(s == 0.0);
    CHECK(max_abs_offdiag_gram(d.u) < 1e-12);
    CHECK(max_abs_offdiag_gram(d.v) < 1e-12);
}

TEST_CASE("truncate reconstructs a rank-1 matrix exactly with k=1") {
    RngStream rs(17);
    Tensor u({6, 1}), v({1, 4});
    for (auto& x : u.vec()) x = rs.normal();
    for (auto& x : v.vec()) x = rs.normal();
    Tensor m({6, 4});
    for (std::int64_t i = 0; i < 6; ++i) {
        for (std::int64_t j = 0; j < 4; ++j) m(i, j) = u(i, 0) * v(0, j);
    }
    auto f = lrf::factorize(m, 1);
    Tensor back = lrf::reconstruct(f);
    for (std::int64_t i = 0; i < m.size(); ++i) CHECK(std::abs(back[i] - m[i]) < 1e-10);
}

TEST_CASE("truncate at full rank reconstructs exactly") {
    RngStream rs(19);
    Tensor m = random_matrix(9, 7, rs);
    auto f = lrf::factorize(m, 7);
    Tensor back = lrf::reconstruct(f);
    for (std::int64_t i = 0; i < m.size(); ++i) CHECK(std::abs(back[i] - m[i]) < 1e-8);
}

TEST_CASE("Eckart-Young: truncation error equals the discarded singular mass") {
    RngStream rs(23);
    for (int trial = 0; trial < 5; ++trial) {
        Tensor m = random_matrix(14, 10, rs);
        auto d = lrf::svd(m);
        for (std::int64_t k = 1; k <= 10; ++k) {
            auto f = lrf::truncate(d, k);
            Tensor back = lrf::reconstruct(f);
            double err = 0.0;
            for (std::int64_t i = 0; i < m.size(); ++i) {
                const double diff = back[i] - m[i];
                err += diff * diff;
            }
            double tail = 0.0;
            for (std::size_t i = static_cast<std::size_t>(k); i < d.s.size(); ++i) tail += d.s[i] * d.s[i];
            CHECK(std::abs(std::sqrt(err) - std::sqrt(tail)) < 1e-8);
        }
    }
}

TEST_CASE("reconstruction error is monotonically non-increasing in k") {
    RngStream rs(29);
    Tensor m = random_matrix(20, 16, rs);
    auto d = lrf::svd(m);
    double prev = 1e300;
    for (std::int64_t k = 1; k <= 16; ++k) {
        Tensor back = lrf::reconstruct(lrf::truncate(d, k));
        double err = 0.0;
        for (std::int64_t i = 0; i < m.size(); ++i) {
            const double diff = back[i] - m[i];
            err += diff * diff;
        }
        CHECK(err <= prev + 1e-12);
        prev = err;
    }
}

TEST_CASE("factor pairs are a deterministic function of the matrix") {
    RngStream rs(31);
    Tensor m = random_matrix(12, 9, rs);
    auto f1 = lrf::factorize(m, 4);
    auto f2 = lrf::factorize(m, 4);
    CHECK(f1.p.vec() == f2.p.vec());
    CHECK(f1.q.vec() == f2.q.vec());

    // sign convention: largest-|entry| per P column is non-negative
    for (std::int64_t j = 0; j < f1.k; ++j) {
        double best = 0.0;
        std::int64_t arg = 0;
        for (std::int64_t i = 0; i < f1.p.dim(0); ++i) {
            if (std::abs(f1.p(i, j)) > best) {
                best = std::abs(f1.p(i, j));
                arg = i;
            }
        }
        CHECK(f1.p(arg, j) >= 0.0);
    }
}

TEST_CASE("k above max rank clamps; zero factors reconstruct zero") {
    RngStream rs(37);
    Tensor m = random_matrix(6, 5, rs);
    auto f = lrf::factorize(m, 99);
    CHECK(f.k == 5);

    lrf::FactorPair zf;
    zf.k = 2;
    zf.p = Tensor({4, 2});
    zf.q = Tensor({2, 3});
    Tensor z = lrf::reconstruct(zf);
    for (double v : z.vec()) CHECK(v == 0.0);

    lrf::FactorPair bad;
    bad.p = Tensor({4, 2});
    bad.q = Tensor({3, 3});
    CHECK_THROWS_AS(lrf::reconstruct(bad), std::invalid_argument);
}

TEST_CASE("flatten/unflatten factors roundtrip") {
    RngStream rs(41);
    Tensor m = random_matrix(8, 6, rs);
    auto f = lrf::factorize(m, 3);
    auto x = lrf::flatten_factors(f);
    auto g = lrf::unflatten_factors(x, 8, 6, 3);
    CHECK(g.p.vec() == f.p.vec());
    CHECK(g.q.vec() == f.q.vec());
}

TEST_SUITE_END();
