#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "prol/tensor.hpp"

namespace prol {

namespace detail {

struct Node {
    Tensor value;
    Tensor grad;  // allocated lazily during backward
    bool requires_grad = false;
    bool grad_alloc = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Accumulates this node's grad into its parents' grads.
    std::function<void(Node&)> backprop;

    Tensor& ensure_grad();
};

}  // namespace detail

// Handle to a node in the computation tape. Values are cheap to copy; the tape
// is a DAG owned via shared_ptr parents and freed when the last handle drops.
class Value {
public:
    Value() = default;

    static Value constant(Tensor v);
    static Value param(Tensor v);  // leaf that accumulates gradient

    bool defined() const { return node_ != nullptr; }
    const Tensor& val() const { return node_->value; }
    const Tensor& grad() const;
    bool requires_grad() const { return node_ && node_->requires_grad; }

    std::shared_ptr<detail::Node> node_;  // ops and the engine reach in directly
};

// Runs reverse-mode accumulation from a scalar root (numel == 1). Grads of all
// reachable nodes are zeroed first, so each backward() call stands alone.
void backward(const Value& root);

// ---- elementwise / scalar ----
Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);  // same shape, elementwise
Value scale(const Value& a, double c);
Value add_const(const Value& a, double c);
Value neg(const Value& a);
Value vdiv(const Value& a, const Value& b);      // elementwise, same shape
Value vsqrt(const Value& a);                     // d/dx at 0 treated as 0
Value vmax_const(const Value& a, double c);      // elementwise max(x, c)
Value square(const Value& a);
Value gelu(const Value& a);                      // exact erf form

// broadcast against a 1-element Value
Value scalar_mul(const Value& x, const Value& s);
Value scalar_add(const Value& x, const Value& s);

// ---- matrix ops (2-D; rank-1 treated as a single row) ----
Value matmul(const Value& a, const Value& b);
Value transpose(const Value& a);
Value add_rowvec(const Value& mat, const Value& vec);
Value add_block_rows(const Value& x, const Value& block, std::size_t times);
Value row_slice(const Value& a, std::size_t r0, std::size_t r1);
Value col_slice(const Value& a, std::size_t c0, std::size_t c1);
Value concat_rows(const std::vector<Value>& parts);
Value concat_cols(const std::vector<Value>& parts);
Value gather_rows(const Value& a, std::vector<std::size_t> rows);
Value gather_cols(const Value& a, std::vector<std::size_t> cols);
Value gather_entry_per_row(const Value& a, std::vector<std::size_t> col_of_row);  // -> (B)
Value reshape(const Value& a, std::vector<std::size_t> shape);

// ---- reductions / rowwise ----
Value sum_all(const Value& a);
Value mean_all(const Value& a);
Value softmax_rows(const Value& a);
Value logsumexp_rows(const Value& a);  // (B,K) -> (B)
Value layer_norm_rows(const Value& x, const Value& gain, const Value& bias, double eps);
Value dot(const Value& u, const Value& v);  // rank-1, same length -> (1)

// Per-column zero-mean / unit-std normalization: z = (x - mu) / (sigma + eps)
// with population sigma over rows.
Value standardize_cols(const Value& a, double eps);

// 1-D cross-correlation with a 3-tap kernel, zero padding 1, stride 1:
// out[i] = k0*v[i-1] + k1*v[i] + k2*v[i+1].
Value conv3_same(const Value& kernel, const Value& v);

Value detach(const Value& v);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }

}  // namespace prol
