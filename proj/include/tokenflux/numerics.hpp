#pragma once

#include <cstdint>
#include <span>
#include <vector>

namespace tokenflux {

// Dense row-major matrix of 64-bit floats. All exported operations leave
// every entry finite; violations surface as exceptions, not NaN propagation.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // rows * cols, row-major

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool operator==(const Matrix& other) const = default;

    static Matrix identity(std::size_t n);
    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
};

// Standard product a*b with a fixed accumulation order (row-major output,
// ascending inner index) so results are bit-reproducible across platforms.
Matrix matmul(const Matrix& a, const Matrix& b);

// Max-subtracted softmax; output is nonnegative and sums to 1 within 1e-12.
std::vector<double> softmax_row(std::span<const double> v);

struct CosineResult {
    double value = 0.0;
    bool degenerate = false;  // set when either input has zero norm
};

// Cosine similarity clamped to [-1, 1]. Zero-norm inputs yield 0 with the
// degenerate flag set instead of an error, so batch runs survive dead tokens.
CosineResult cosine_sim_checked(std::span<const double> u, std::span<const double> v);
double cosine_sim(std::span<const double> u, std::span<const double> v);

// SplitMix64. Single-owner; identical seeds give identical streams everywhere.
class SeededRng {
  public:
    explicit SeededRng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();

    // Uniform in [0, 1), 53-bit resolution.
    double next_double();

    // Standard normal via Box-Muller (two uniforms per draw, no caching).
    double next_normal();

    // Uniform integer in [0, bound) by rejection; bound > 0.
    std::uint64_t next_below(std::uint64_t bound);

  private:
    std::uint64_t state_;
};

void ensure_finite(std::span<const double> values, const char* what);

}  // namespace tokenflux
