#include "prol/tensor.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>

#include "prol/errors.hpp"

namespace prol {

std::size_t shape_numel(const std::vector<std::size_t>& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(std::vector<std::size_t> s) : shape(std::move(s)), data(shape_numel(shape), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape))
        throw contract_error("tensor data size does not match shape " + shape_str());
}

Tensor Tensor::full(std::vector<std::size_t> s, double v) {
    Tensor t(std::move(s));
    t.fill(v);
    return t;
}

Tensor Tensor::vec(std::vector<double> d) {
    std::size_t n = d.size();
    return Tensor({n}, std::move(d));
}

std::size_t Tensor::rows() const {
    if (shape.empty()) return 0;
    return rank() == 1 ? 1 : shape[0];
}

std::size_t Tensor::cols() const {
    if (shape.empty()) return 0;
    return rank() == 1 ? shape[0] : shape[rank() - 1];
}

bool Tensor::all_finite() const {
    for (double v : data)
        if (!std::isfinite(v)) return false;
    return true;
}

void Tensor::fill(double v) {
    for (double& x : data) x = v;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ")";
    return os.str();
}

bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(double)) == 0;
}

std::uint64_t tensor_hash(const Tensor& t) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (std::size_t d : t.shape) mix(&d, sizeof(d));
    mix(t.data.data(), t.data.size() * sizeof(double));
    return h;
}

}  // namespace prol
