#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace fqt {

// Dense row-major matrix of doubles. Doubles stand in for the high-precision
// compute type everywhere in the simulator; low-precision values only ever
// exist as quantized codes plus scales.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& at_flat(std::size_t i) { return data_[i]; }
    double at_flat(std::size_t i) const { return data_[i]; }

    std::span<const double> flat() const { return data_; }
    std::span<double> flat() { return data_; }

    Matrix transposed() const;

    bool operator==(const Matrix& other) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// Plain triple-loop product, inner accumulation over k in ascending order.
// Tests rely on this accumulation order being reproducible.
Matrix matmul(const Matrix& a, const Matrix& b);

double frobenius_norm(const Matrix& m);

}  // namespace fqt
