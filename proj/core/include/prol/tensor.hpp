#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace prol {

// Dense row-major tensor of doubles. All model math runs at 64-bit precision
// so finite-difference gradient checks are meaningful.
struct Tensor {
    std::vector<std::size_t> shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(std::vector<std::size_t> s);
    Tensor(std::vector<std::size_t> s, std::vector<double> d);

    static Tensor zeros(std::vector<std::size_t> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<std::size_t> s, double v);
    static Tensor scalar(double v) { return Tensor({1}, {v}); }
    static Tensor vec(std::vector<double> d);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }

    // 2-D helpers; rank-1 tensors count as a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    double& operator()(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
    void fill(double v);

    std::string shape_str() const;
};

bool operator==(const Tensor& a, const Tensor& b);

// FNV-1a over the raw bytes; used by freeze/backbone invariance checks.
std::uint64_t tensor_hash(const Tensor& t);

std::size_t shape_numel(const std::vector<std::size_t>& s);

}  // namespace prol
