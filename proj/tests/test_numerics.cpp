#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>

#include "tokenflux/numerics.hpp"

using namespace tokenflux;

TEST_CASE("matmul basics") {
    const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});

    CHECK(matmul(Matrix::identity(2), m) == m);

    const Matrix v = Matrix::from_rows({{0}, {1}});
    const Matrix prod = matmul(m, v);
    CHECK(prod.rows == 2);
    CHECK(prod.cols == 1);
    CHECK(prod.at(0, 0) == 2.0);
    CHECK(prod.at(1, 0) == 4.0);

    const Matrix zero(2, 2);
    CHECK(matmul(zero, m) == Matrix(2, 2));

    CHECK_THROWS_AS(matmul(Matrix(2, 3), Matrix(2, 3)), std::invalid_argument);
}

TEST_CASE("matmul associativity on random triples") {
    SeededRng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
        Matrix a(4, 5), b(5, 3), c(3, 6);
        for (double& v : a.data) v = rng.next_normal();
        for (double& v : b.data) v = rng.next_normal();
        for (double& v : c.data) v = rng.next_normal();
        const Matrix left = matmul(matmul(a, b), c);
        const Matrix right = matmul(a, matmul(b, c));
        for (std::size_t i = 0; i < left.data.size(); ++i) {
            const double scale = std::max(1.0, std::abs(left.data[i]));
            CHECK(std::abs(left.data[i] - right.data[i]) / scale < 1e-9);
        }
    }
}

TEST_CASE("softmax_row examples") {
    const auto sym = softmax_row(std::vector<double>{0.0, 0.0});
    CHECK(sym[0] == doctest::Approx(0.5).epsilon(1e-14));
    CHECK(sym[1] == doctest::Approx(0.5).epsilon(1e-14));

    const auto two_one = softmax_row(std::vector<double>{std::log(2.0), 0.0});
    CHECK(two_one[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-14));
    CHECK(two_one[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));

    const auto single = softmax_row(std::vector<double>{5.0});
    CHECK(single.size() == 1);
    CHECK(single[0] == 1.0);

    CHECK_THROWS_AS(softmax_row(std::vector<double>{}), std::invalid_argument);
}

TEST_CASE("softmax_row normalizes under extreme magnitudes") {
    SeededRng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
        const std::size_t n = 1 + rng.next_below(16);
        std::vector<double> v(n);
        for (double& x : v) x = (rng.next_double() * 2.0 - 1.0) * 1e4;
        const auto p = softmax_row(v);
        double sum = 0.0;
        for (double x : p) {
            CHECK(x >= 0.0);
            sum += x;
        }
        CHECK(std::abs(sum - 1.0) < 1e-12);
    }
}

TEST_CASE("cosine_sim examples") {
    const std::vector<double> u{0.3, -1.2, 2.0};
    CHECK(cosine_sim(u, u) == doctest::Approx(1.0).epsilon(1e-14));
    CHECK(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 1}) == 0.0);
    CHECK(cosine_sim(std::vector<double>{1, 1}, std::vector<double>{1, 0}) ==
          doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-14));

    const auto degenerate = cosine_sim_checked(std::vector<double>{0, 0}, std::vector<double>{1, 2});
    CHECK(degenerate.value == 0.0);
    CHECK(degenerate.degenerate);
    CHECK_FALSE(cosine_sim_checked(u, u).degenerate);
}

TEST_CASE("cosine_sim symmetry and scale invariance") {
    SeededRng rng(23);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> u(8), v(8);
        for (double& x : u) x = rng.next_normal();
        for (double& x : v) x = rng.next_normal();
        const double alpha = rng.next_double() * 10.0 + 1e-3;
        std::vector<double> scaled = u;
        for (double& x : scaled) x *= alpha;
        CHECK(cosine_sim(u, v) == cosine_sim(v, u));
        CHECK(std::abs(cosine_sim(scaled, v) - cosine_sim(u, v)) < 1e-12);
    }
}

TEST_CASE("SplitMix64 reference stream") {
    SeededRng rng(0);
    CHECK(rng.next_u64() == 0xE220A8397B1DCDAFULL);
    CHECK(rng.next_u64() == 0x6E789E6AA1B965F4ULL);
    CHECK(rng.next_u64() == 0x06C45D188009454FULL);
    CHECK(rng.next_u64() == 0xF88BB8A8724C81ECULL);

    SeededRng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    SeededRng c(1);
    for (int i = 0; i < 1000; ++i) {
        const double x = c.next_double();
        CHECK(x >= 0.0);
        CHECK(x < 1.0);
    }
}
