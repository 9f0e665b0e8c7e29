#include "prol/autograd.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "prol/errors.hpp"

namespace prol {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<EMat>;
using MapC = Eigen::Map<const EMat>;

MapC cmap(const Tensor& t) { return MapC(t.data.data(), t.rows(), t.cols()); }
MapM mmap(Tensor& t) { return MapM(t.data.data(), t.rows(), t.cols()); }

using NodePtr = std::shared_ptr<detail::Node>;

Value make_node(Tensor value, std::vector<Value> parents, std::function<void(detail::Node&)> backprop) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(value);
    n->parents.reserve(parents.size());
    for (const auto& p : parents) {
        n->parents.push_back(p.node_);
        if (p.node_->requires_grad) n->requires_grad = true;
    }
    if (n->requires_grad) n->backprop = std::move(backprop);
    Value v;
    v.node_ = std::move(n);
    return v;
}

void check_same_shape(const Value& a, const Value& b, const char* op) {
    if (!a.val().same_shape(b.val()))
        throw contract_error(std::string(op) + ": shape mismatch " + a.val().shape_str() + " vs " +
                             b.val().shape_str());
}

bool wants(const NodePtr& n) { return n->requires_grad; }

}  // namespace

namespace detail {

Tensor& Node::ensure_grad() {
    if (!grad_alloc) {
        grad = Tensor::zeros(value.shape);
        grad_alloc = true;
    }
    return grad;
}

}  // namespace detail

Value Value::constant(Tensor v) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(v);
    Value out;
    out.node_ = std::move(n);
    return out;
}

Value Value::param(Tensor v) {
    auto n = std::make_shared<detail::Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    Value out;
    out.node_ = std::move(n);
    return out;
}

const Tensor& Value::grad() const {
    static const Tensor empty;
    return node_ && node_->grad_alloc ? node_->grad : empty;
}

void backward(const Value& root) {
    if (!root.defined()) throw contract_error("backward: undefined value");
    if (root.val().numel() != 1) throw contract_error("backward: root must be a scalar");

    // Iterative post-order DFS for a topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    struct Frame {
        detail::Node* n;
        std::size_t next_child;
    };
    std::vector<Frame> stack;
    stack.push_back({root.node_.get(), 0});
    seen.insert(root.node_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_child < f.n->parents.size()) {
            detail::Node* c = f.n->parents[f.next_child++].get();
            if (seen.insert(c).second) stack.push_back({c, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    for (detail::Node* n : order) {
        n->grad_alloc = false;  // reset so each backward() starts from zero
    }
    root.node_->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->requires_grad && n->grad_alloc && n->backprop) n->backprop(*n);
    }
}

Value detach(const Value& v) { return Value::constant(v.val()); }

// ---------------- elementwise ----------------

Value add(const Value& a, const Value& b) {
    check_same_shape(a, b, "add");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += b.val()[i];
    return make_node(std::move(out), {a, b}, [](detail::Node& n) {
        for (int k = 0; k < 2; ++k)
            if (wants(n.parents[k])) {
                Tensor& g = n.parents[k]->ensure_grad();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
            }
    });
}

Value sub(const Value& a, const Value& b) {
    check_same_shape(a, b, "sub");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= b.val()[i];
    return make_node(std::move(out), {a, b}, [](detail::Node& n) {
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (wants(n.parents[1])) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i];
        }
    });
}

Value mul(const Value& a, const Value& b) {
    check_same_shape(a, b, "mul");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.val()[i];
    return make_node(std::move(out), {a, b}, [](detail::Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * bv[i];
        }
        if (wants(n.parents[1])) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

Value scale(const Value& a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x *= c;
    return make_node(std::move(out), {a}, [c](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += c * n.grad[i];
    });
}

Value add_const(const Value& a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x += c;
    return make_node(std::move(out), {a}, [](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

Value neg(const Value& a) { return scale(a, -1.0); }

Value vdiv(const Value& a, const Value& b) {
    check_same_shape(a, b, "vdiv");
    Tensor out = a.val();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] /= b.val()[i];
    return make_node(std::move(out), {a, b}, [](detail::Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] / bv[i];
        }
        if (wants(n.parents[1])) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= n.grad[i] * av[i] / (bv[i] * bv[i]);
        }
    });
}

Value vsqrt(const Value& a) {
    Tensor out = a.val();
    for (double& x : out.data) x = std::sqrt(x);
    return make_node(std::move(out), {a}, [](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double y = n.value[i];
            if (y > 0.0) g[i] += n.grad[i] * 0.5 / y;
        }
    });
}

Value vmax_const(const Value& a, double c) {
    Tensor out = a.val();
    for (double& x : out.data) x = std::max(x, c);
    return make_node(std::move(out), {a}, [c](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        const Tensor& av = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (av[i] >= c) g[i] += n.grad[i];
    });
}

Value square(const Value& a) { return mul(a, a); }

Value gelu(const Value& a) {
    Tensor out = a.val();
    for (double& x : out.data) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    return make_node(std::move(out), {a}, [](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        const Tensor& av = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        constexpr double inv_sqrt_2pi = 0.3989422804014327;
        for (std::size_t i = 0; i < g.numel(); ++i) {
            double x = av[i];
            double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
            double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g[i] += n.grad[i] * (cdf + x * pdf);
        }
    });
}

Value scalar_mul(const Value& x, const Value& s) {
    if (s.val().numel() != 1) throw contract_error("scalar_mul: s must have a single element");
    double sv = s.val()[0];
    Tensor out = x.val();
    for (double& v : out.data) v *= sv;
    return make_node(std::move(out), {x, s}, [](detail::Node& n) {
        const Tensor& xv = n.parents[0]->value;
        double sv = n.parents[1]->value[0];
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i] * sv;
        }
        if (wants(n.parents[1])) {
            double acc = 0.0;
            for (std::size_t i = 0; i < xv.numel(); ++i) acc += n.grad[i] * xv[i];
            n.parents[1]->ensure_grad()[0] += acc;
        }
    });
}

Value scalar_add(const Value& x, const Value& s) {
    if (s.val().numel() != 1) throw contract_error("scalar_add: s must have a single element");
    double sv = s.val()[0];
    Tensor out = x.val();
    for (double& v : out.data) v += sv;
    return make_node(std::move(out), {x, s}, [](detail::Node& n) {
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (wants(n.parents[1])) {
            double acc = 0.0;
            for (std::size_t i = 0; i < n.grad.numel(); ++i) acc += n.grad[i];
            n.parents[1]->ensure_grad()[0] += acc;
        }
    });
}

// ---------------- matrix ----------------

Value matmul(const Value& a, const Value& b) {
    if (a.val().cols() != b.val().rows())
        throw contract_error("matmul: inner dimensions disagree " + a.val().shape_str() + " x " +
                             b.val().shape_str());
    Tensor out({a.val().rows(), b.val().cols()});
    mmap(out).noalias() = cmap(a.val()) * cmap(b.val());
    return make_node(std::move(out), {a, b}, [](detail::Node& n) {
        const Tensor& av = n.parents[0]->value;
        const Tensor& bv = n.parents[1]->value;
        if (wants(n.parents[0])) mmap(n.parents[0]->ensure_grad()) += cmap(n.grad) * cmap(bv).transpose();
        if (wants(n.parents[1])) mmap(n.parents[1]->ensure_grad()) += cmap(av).transpose() * cmap(n.grad);
    });
}

Value transpose(const Value& a) {
    Tensor out({a.val().cols(), a.val().rows()});
    mmap(out) = cmap(a.val()).transpose();
    return make_node(std::move(out), {a}, [](detail::Node& n) {
        if (wants(n.parents[0])) mmap(n.parents[0]->ensure_grad()) += cmap(n.grad).transpose();
    });
}

Value add_rowvec(const Value& mat, const Value& vec) {
    if (mat.val().cols() != vec.val().numel())
        throw contract_error("add_rowvec: width mismatch");
    Tensor out = mat.val();
    std::size_t R = out.rows(), C = out.cols();
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) out.data[r * C + c] += vec.val()[c];
    return make_node(std::move(out), {mat, vec}, [](detail::Node& n) {
        std::size_t R = n.value.rows(), C = n.value.cols();
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (wants(n.parents[1])) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t c = 0; c < C; ++c) g[c] += n.grad.data[r * C + c];
        }
    });
}

Value add_block_rows(const Value& x, const Value& block, std::size_t times) {
    std::size_t br = block.val().rows(), C = block.val().cols();
    if (x.val().rows() != br * times || x.val().cols() != C)
        throw contract_error("add_block_rows: shape mismatch");
    Tensor out = x.val();
    for (std::size_t t = 0; t < times; ++t)
        for (std::size_t i = 0; i < br * C; ++i) out.data[t * br * C + i] += block.val().data[i];
    return make_node(std::move(out), {x, block}, [times, br, C](detail::Node& n) {
        if (wants(n.parents[0])) {
            Tensor& g = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
        }
        if (wants(n.parents[1])) {
            Tensor& g = n.parents[1]->ensure_grad();
            for (std::size_t t = 0; t < times; ++t)
                for (std::size_t i = 0; i < br * C; ++i) g[i] += n.grad.data[t * br * C + i];
        }
    });
}

Value row_slice(const Value& a, std::size_t r0, std::size_t r1) {
    std::size_t C = a.val().cols();
    if (r1 > a.val().rows() || r0 > r1) throw contract_error("row_slice: range out of bounds");
    Tensor out({r1 - r0, C});
    std::copy(a.val().data.begin() + r0 * C, a.val().data.begin() + r1 * C, out.data.begin());
    return make_node(std::move(out), {a}, [r0, C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < n.grad.numel(); ++i) g.data[r0 * C + i] += n.grad[i];
    });
}

Value col_slice(const Value& a, std::size_t c0, std::size_t c1) {
    std::size_t R = a.val().rows(), C = a.val().cols();
    if (c1 > C || c0 > c1) throw contract_error("col_slice: range out of bounds");
    Tensor out({R, c1 - c0});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = c0; c < c1; ++c) out.data[r * (c1 - c0) + (c - c0)] = a.val().data[r * C + c];
    return make_node(std::move(out), {a}, [c0, c1, C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        std::size_t W = c1 - c0, R = n.value.rows();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < W; ++c) g.data[r * C + c0 + c] += n.grad.data[r * W + c];
    });
}

Value concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw contract_error("concat_rows: empty input");
    std::size_t C = parts[0].val().cols(), R = 0;
    for (const auto& p : parts) {
        if (p.val().cols() != C) throw contract_error("concat_rows: column mismatch");
        R += p.val().rows();
    }
    Tensor out({R, C});
    std::size_t r = 0;
    for (const auto& p : parts) {
        std::copy(p.val().data.begin(), p.val().data.end(), out.data.begin() + r * C);
        r += p.val().rows();
    }
    return make_node(std::move(out), parts, [C](detail::Node& n) {
        std::size_t r = 0;
        for (auto& p : n.parents) {
            std::size_t pr = p->value.rows();
            if (wants(p)) {
                Tensor& g = p->ensure_grad();
                for (std::size_t i = 0; i < pr * C; ++i) g[i] += n.grad.data[r * C + i];
            }
            r += pr;
        }
    });
}

Value concat_cols(const std::vector<Value>& parts) {
    if (parts.empty()) throw contract_error("concat_cols: empty input");
    std::size_t R = parts[0].val().rows(), C = 0;
    for (const auto& p : parts) {
        if (p.val().rows() != R) throw contract_error("concat_cols: row mismatch");
        C += p.val().cols();
    }
    Tensor out({R, C});
    std::size_t c = 0;
    for (const auto& p : parts) {
        std::size_t pc = p.val().cols();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t j = 0; j < pc; ++j) out.data[r * C + c + j] = p.val().data[r * pc + j];
        c += pc;
    }
    return make_node(std::move(out), parts, [R, C](detail::Node& n) {
        std::size_t c = 0;
        for (auto& p : n.parents) {
            std::size_t pc = p->value.cols();
            if (wants(p)) {
                Tensor& g = p->ensure_grad();
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t j = 0; j < pc; ++j) g.data[r * pc + j] += n.grad.data[r * C + c + j];
            }
            c += pc;
        }
    });
}

Value gather_rows(const Value& a, std::vector<std::size_t> rows) {
    std::size_t C = a.val().cols();
    Tensor out({rows.size(), C});
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= a.val().rows()) throw contract_error("gather_rows: index out of range");
        std::copy(a.val().data.begin() + rows[i] * C, a.val().data.begin() + (rows[i] + 1) * C,
                  out.data.begin() + i * C);
    }
    return make_node(std::move(out), {a}, [rows = std::move(rows), C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t c = 0; c < C; ++c) g.data[rows[i] * C + c] += n.grad.data[i * C + c];
    });
}

Value gather_cols(const Value& a, std::vector<std::size_t> cols) {
    std::size_t R = a.val().rows(), C = a.val().cols(), K = cols.size();
    for (std::size_t c : cols)
        if (c >= C) throw contract_error("gather_cols: index out of range");
    Tensor out({R, K});
    for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k) out.data[r * K + k] = a.val().data[r * C + cols[k]];
    return make_node(std::move(out), {a}, [cols = std::move(cols), R, C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        std::size_t K = cols.size();
        for (std::size_t r = 0; r < R; ++r)
            for (std::size_t k = 0; k < K; ++k) g.data[r * C + cols[k]] += n.grad.data[r * K + k];
    });
}

Value gather_entry_per_row(const Value& a, std::vector<std::size_t> col_of_row) {
    std::size_t R = a.val().rows(), C = a.val().cols();
    if (col_of_row.size() != R) throw contract_error("gather_entry_per_row: one column index per row required");
    Tensor out({R});
    for (std::size_t r = 0; r < R; ++r) {
        if (col_of_row[r] >= C) throw contract_error("gather_entry_per_row: index out of range");
        out[r] = a.val().data[r * C + col_of_row[r]];
    }
    return make_node(std::move(out), {a}, [cols = std::move(col_of_row), C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < cols.size(); ++r) g.data[r * C + cols[r]] += n.grad[r];
    });
}

Value reshape(const Value& a, std::vector<std::size_t> shape) {
    if (shape_numel(shape) != a.val().numel()) throw contract_error("reshape: element count mismatch");
    Tensor out(std::move(shape), a.val().data);
    return make_node(std::move(out), {a}, [](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    });
}

// ---------------- reductions / rowwise ----------------

Value sum_all(const Value& a) {
    double acc = 0.0;
    for (double v : a.val().data) acc += v;
    return make_node(Tensor::scalar(acc), {a}, [](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[0];
    });
}

Value mean_all(const Value& a) {
    std::size_t N = a.val().numel();
    if (N == 0) throw contract_error("mean_all: empty tensor");
    return scale(sum_all(a), 1.0 / static_cast<double>(N));
}

Value softmax_rows(const Value& a) {
    std::size_t R = a.val().rows(), C = a.val().cols();
    Tensor out = a.val();
    for (std::size_t r = 0; r < R; ++r) {
        double* row = out.data.data() + r * C;
        double m = *std::max_element(row, row + C);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) {
            row[c] = std::exp(row[c] - m);
            z += row[c];
        }
        for (std::size_t c = 0; c < C; ++c) row[c] /= z;
    }
    return make_node(std::move(out), {a}, [R, C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < R; ++r) {
            const double* y = n.value.data.data() + r * C;
            const double* gy = n.grad.data.data() + r * C;
            double dotv = 0.0;
            for (std::size_t c = 0; c < C; ++c) dotv += gy[c] * y[c];
            for (std::size_t c = 0; c < C; ++c) g.data[r * C + c] += y[c] * (gy[c] - dotv);
        }
    });
}

Value logsumexp_rows(const Value& a) {
    std::size_t R = a.val().rows(), C = a.val().cols();
    Tensor out({R});
    for (std::size_t r = 0; r < R; ++r) {
        const double* row = a.val().data.data() + r * C;
        double m = *std::max_element(row, row + C);
        double z = 0.0;
        for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
        out[r] = m + std::log(z);
    }
    return make_node(std::move(out), {a}, [R, C](detail::Node& n) {
        if (!wants(n.parents[0])) return;
        const Tensor& av = n.parents[0]->value;
        Tensor& g = n.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < R; ++r) {
            double lse = n.value[r];
            for (std::size_t c = 0; c < C; ++c)
                g.data[r * C + c] += n.grad[r] * std::exp(av.data[r * C + c] - lse);
        }
    });
}

Value layer_norm_rows(const Value& x, const Value& gain, const Value& bias, double eps) {
    std::size_t R = x.val().rows(), C = x.val().cols();
    if (gain.val().numel() != C || bias.val().numel() != C)
        throw contract_error("layer_norm_rows: gain/bias width mismatch");
    Tensor out({R, C});
    Tensor xhat({R, C});
    Tensor inv_std({R});
    for (std::size_t r = 0; r < R; ++r) {
        const double* row = x.val().data.data() + r * C;
        double mu = 0.0;
        for (std::size_t c = 0; c < C; ++c) mu += row[c];
        mu /= static_cast<double>(C);
        double var = 0.0;
        for (std::size_t c = 0; c < C; ++c) var += (row[c] - mu) * (row[c] - mu);
        var /= static_cast<double>(C);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t c = 0; c < C; ++c) {
            double xh = (row[c] - mu) * is;
            xhat.data[r * C + c] = xh;
            out.data[r * C + c] = gain.val()[c] * xh + bias.val()[c];
        }
    }
    return make_node(std::move(out), {x, gain, bias},
                     [R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& n) {
                         const Tensor& gv = n.parents[1]->value;
                         if (wants(n.parents[1])) {
                             Tensor& gg = n.parents[1]->ensure_grad();
                             for (std::size_t r = 0; r < R; ++r)
                                 for (std::size_t c = 0; c < C; ++c)
                                     gg[c] += n.grad.data[r * C + c] * xhat.data[r * C + c];
                         }
                         if (wants(n.parents[2])) {
                             Tensor& gb = n.parents[2]->ensure_grad();
                             for (std::size_t r = 0; r < R; ++r)
                                 for (std::size_t c = 0; c < C; ++c) gb[c] += n.grad.data[r * C + c];
                         }
                         if (wants(n.parents[0])) {
                             Tensor& gx = n.parents[0]->ensure_grad();
                             for (std::size_t r = 0; r < R; ++r) {
                                 double mean_gh = 0.0, mean_ghx = 0.0;
                                 for (std::size_t c = 0; c < C; ++c) {
                                     double gh = n.grad.data[r * C + c] * gv[c];
                                     mean_gh += gh;
                                     mean_ghx += gh * xhat.data[r * C + c];
                                 }
                                 mean_gh /= static_cast<double>(C);
                                 mean_ghx /= static_cast<double>(C);
                                 for (std::size_t c = 0; c < C; ++c) {
                                     double gh = n.grad.data[r * C + c] * gv[c];
                                     gx.data[r * C + c] +=
                                         inv_std[r] * (gh - mean_gh - xhat.data[r * C + c] * mean_ghx);
                                 }
                             }
                         }
                     });
}

Value dot(const Value& u, const Value& v) {
    if (u.val().numel() != v.val().numel()) throw contract_error("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < u.val().numel(); ++i) acc += u.val()[i] * v.val()[i];
    return make_node(Tensor::scalar(acc), {u, v}, [](detail::Node& n) {
        const Tensor& uv = n.parents[0]->value;
        const Tensor& vv = n.parents[1]->value;
        double g = n.grad[0];
        if (wants(n.parents[0])) {
            Tensor& gu = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < gu.numel(); ++i) gu[i] += g * vv[i];
        }
        if (wants(n.parents[1])) {
            Tensor& gv = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < gv.numel(); ++i) gv[i] += g * uv[i];
        }
    });
}

Value standardize_cols(const Value& a, double eps) {
    std::size_t B = a.val().rows(), D = a.val().cols();
    if (B < 2) throw contract_error("standardize_cols: at least two rows required");
    Tensor out({B, D});
    Tensor mu({D}), sigma({D});
    for (std::size_t c = 0; c < D; ++c) {
        double m = 0.0;
        for (std::size_t r = 0; r < B; ++r) m += a.val().data[r * D + c];
        m /= static_cast<double>(B);
        double v = 0.0;
        for (std::size_t r = 0; r < B; ++r) {
            double d = a.val().data[r * D + c] - m;
            v += d * d;
        }
        v /= static_cast<double>(B);
        mu[c] = m;
        sigma[c] = std::sqrt(v);
        double denom = sigma[c] + eps;
        for (std::size_t r = 0; r < B; ++r) out.data[r * D + c] = (a.val().data[r * D + c] - m) / denom;
    }
    return make_node(std::move(out), {a},
                     [B, D, mu = std::move(mu), sigma = std::move(sigma), eps](detail::Node& n) {
                         if (!wants(n.parents[0])) return;
                         Tensor& g = n.parents[0]->ensure_grad();
                         for (std::size_t c = 0; c < D; ++c) {
                             double denom = sigma[c] + eps;
                             double s1 = 0.0, s2 = 0.0;
                             for (std::size_t r = 0; r < B; ++r) {
                                 s1 += n.grad.data[r * D + c];
                                 s2 += n.grad.data[r * D + c] * n.value.data[r * D + c];
                             }
                             for (std::size_t r = 0; r < B; ++r) {
                                 double z = n.value.data[r * D + c];
                                 double t = (n.grad.data[r * D + c] - s1 / static_cast<double>(B)) / denom;
                                 if (sigma[c] > 0.0)
                                     t -= z * s2 / (static_cast<double>(B) * sigma[c]);
                                 g.data[r * D + c] += t;
                             }
                         }
                     });
}

Value conv3_same(const Value& kernel, const Value& v) {
    if (kernel.val().numel() != 3) throw contract_error("conv3_same: kernel must have 3 taps");
    if (v.val().rank() != 1 || v.val().numel() < 1) throw contract_error("conv3_same: signal must be a nonempty vector");
    std::size_t m = v.val().numel();
    const double* k = kernel.val().data.data();
    const double* s = v.val().data.data();
    Tensor out({m});
    for (std::size_t i = 0; i < m; ++i) {
        double acc = k[1] * s[i];
        if (i >= 1) acc += k[0] * s[i - 1];
        if (i + 1 < m) acc += k[2] * s[i + 1];
        out[i] = acc;
    }
    return make_node(std::move(out), {kernel, v}, [m](detail::Node& n) {
        const double* k = n.parents[0]->value.data.data();
        const double* s = n.parents[1]->value.data.data();
        if (wants(n.parents[0])) {
            Tensor& gk = n.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double g = n.grad[i];
                if (i >= 1) gk[0] += g * s[i - 1];
                gk[1] += g * s[i];
                if (i + 1 < m) gk[2] += g * s[i + 1];
            }
        }
        if (wants(n.parents[1])) {
            Tensor& gs = n.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < m; ++i) {
                double g = n.grad[i];
                if (i >= 1) gs[i - 1] += g * k[0];
                gs[i] += g * k[1];
                if (i + 1 < m) gs[i + 1] += g * k[2];
            }
        }
    });
}

}  // namespace prol
