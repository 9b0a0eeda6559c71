#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "shmkit/error.hpp"

namespace shmkit {

// Dense column-major matrix of doubles, the only element type the kit shares.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t nrow, std::size_t ncol) : nrow_(nrow), ncol_(ncol), data_(nrow * ncol, 0.0) {}
    Matrix(std::size_t nrow, std::size_t ncol, std::vector<double> column_major)
        : nrow_(nrow), ncol_(ncol), data_(std::move(column_major))
    {
        if (data_.size() != nrow_ * ncol_)
            throw Error(ErrorCode::InvalidArgument, "matrix payload does not match nrow*ncol");
    }

    std::size_t nrow() const noexcept { return nrow_; }
    std::size_t ncol() const noexcept { return ncol_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t i, std::size_t j) noexcept { return data_[j * nrow_ + i]; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return data_[j * nrow_ + i]; }

    std::span<const double> column(std::size_t j) const noexcept { return {data_.data() + j * nrow_, nrow_}; }
    std::span<double> column(std::size_t j) noexcept { return {data_.data() + j * nrow_, nrow_}; }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }

    std::vector<double> release() && { nrow_ = ncol_ = 0; return std::move(data_); }

private:
    std::size_t nrow_ = 0;
    std::size_t ncol_ = 0;
    std::vector<double> data_;
};

enum class ValueKind : std::uint32_t { vector = 1, matrix = 2 };

// Non-owning description of a value to be placed in shared memory.
struct VariableRef {
    ValueKind kind = ValueKind::vector;
    std::uint64_t nrow = 0;
    std::uint64_t ncol = 1;
    std::span<const double> payload;

    static VariableRef of_vector(std::span<const double> v) { return {ValueKind::vector, v.size(), 1, v}; }
    static VariableRef of_matrix(const Matrix& m) { return {ValueKind::matrix, m.nrow(), m.ncol(), m.values()}; }
};

// Owning value (vector or matrix) with its payload.
struct VariableValue {
    ValueKind kind = ValueKind::vector;
    std::uint64_t nrow = 0;
    std::uint64_t ncol = 1;
    std::vector<double> payload;

    static VariableValue vector(std::vector<double> v)
    {
        const auto n = v.size();
        return {ValueKind::vector, n, 1, std::move(v)};
    }
    static VariableValue matrix(Matrix m)
    {
        const auto r = m.nrow(), c = m.ncol();
        return {ValueKind::matrix, r, c, std::move(m).release()};
    }

    VariableRef ref() const { return {kind, nrow, ncol, payload}; }
};

enum class Margin : std::uint8_t { rows = 1, cols = 2, list = 3 };

} // namespace shmkit
