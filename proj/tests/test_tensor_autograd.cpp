#include <doctest.h>

#include <prol/autograd.hpp>
#include <prol/errors.hpp>
#include <prol/rng.hpp>
#include <prol/tensor.hpp>

#include <cmath>

#include "grad_check.hpp"

using namespace prol;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("tensor basics") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.rows() == 2);
    CHECK(t.cols() == 3);
    t(1, 2) = 5.0;
    CHECK(t.data[5] == 5.0);

    Tensor v = Tensor::vec({1.0, 2.0});
    CHECK(v.rank() == 1);
    CHECK(v.rows() == 1);
    CHECK(v.cols() == 2);

    CHECK_THROWS_AS(Tensor({2, 2}, {1.0}), contract_error);

    Tensor a = Tensor::full({3}, 1.0);
    Tensor b = a;
    CHECK(a == b);
    CHECK(tensor_hash(a) == tensor_hash(b));
    b[1] = 2.0;
    CHECK_FALSE(a == b);
    CHECK(tensor_hash(a) != tensor_hash(b));
}

TEST_CASE("rng determinism and distribution sanity") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.uniform() == b.uniform());
    Rng c(42);
    double mean = 0.0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) mean += c.normal();
    mean /= n;
    CHECK(std::abs(mean) < 0.05);
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
    CHECK(derive_seed(1, {seed_tag("a")}) == derive_seed(1, {seed_tag("a")}));
}

TEST_CASE("matmul and transpose values") {
    Value a = Value::constant(Tensor({2, 3}, {1, 2, 3, 4, 5, 6}));
    Value b = Value::constant(Tensor({3, 2}, {7, 8, 9, 10, 11, 12}));
    Value c = matmul(a, b);
    CHECK(c.val()(0, 0) == 58);
    CHECK(c.val()(0, 1) == 64);
    CHECK(c.val()(1, 0) == 139);
    CHECK(c.val()(1, 1) == 154);
    Value t = transpose(a);
    CHECK(t.val().shape == std::vector<std::size_t>{3, 2});
    CHECK(t.val()(2, 1) == 6);
    CHECK_THROWS_AS(matmul(a, a), contract_error);
}

TEST_CASE("softmax rows normalize and logsumexp agrees with direct evaluation") {
    Rng rng(7);
    Tensor x = random_tensor({4, 6}, rng, 3.0);
    Value sm = softmax_rows(Value::constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < 6; ++c) s += sm.val()(r, c);
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    Value lse = logsumexp_rows(Value::constant(x));
    for (std::size_t r = 0; r < 4; ++r) {
        double direct = 0.0;
        for (std::size_t c = 0; c < 6; ++c) direct += std::exp(x(r, c));
        CHECK(lse.val()[r] == doctest::Approx(std::log(direct)).epsilon(1e-12));
    }
}

TEST_CASE("backward runs standalone each call") {
    Tensor xt = Tensor::vec({1.0, 2.0, 3.0});
    Value x = Value::param(xt);
    Value y = sum_all(mul(x, x));
    backward(y);
    Tensor g1 = x.grad();
    backward(y);
    CHECK(x.grad() == g1);  // grads reset, not accumulated across calls
    CHECK(g1[0] == doctest::Approx(2.0));
    CHECK(g1[2] == doctest::Approx(6.0));
}

TEST_CASE("detach blocks gradients") {
    Value x = Value::param(Tensor::vec({2.0}));
    Value y = mean_all(mul(detach(x), x));
    backward(y);
    CHECK(x.grad()[0] == doctest::Approx(2.0));  // only the live branch contributes
}

TEST_CASE("gradient checks: elementwise and reductions") {
    Rng rng(11);
    CHECK(grad_check([](const std::vector<Value>& p) { return mean_all(gelu(p[0])); },
                     {random_tensor({3, 4}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return sum_all(mul(p[0], p[1])); },
                     {random_tensor({2, 5}, rng), random_tensor({2, 5}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return mean_all(vdiv(p[0], add_const(square(p[1]), 1.0))); },
                     {random_tensor({6}, rng), random_tensor({6}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return mean_all(vsqrt(add_const(square(p[0]), 0.5))); },
                     {random_tensor({7}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return mean_all(vmax_const(p[0], 0.25)); },
                     {random_tensor({9}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return mean_all(scalar_add(scalar_mul(p[0], p[1]), p[2])); },
                     {random_tensor({3, 3}, rng), random_tensor({1}, rng), random_tensor({1}, rng)}) < 1e-6);
}

TEST_CASE("gradient checks: matrix ops") {
    Rng rng(13);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(matmul(p[0], p[1])); },
              {random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(add_rowvec(p[0], p[1])); },
              {random_tensor({3, 4}, rng), random_tensor({4}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(add_block_rows(p[0], p[1], 2)); },
              {random_tensor({4, 3}, rng), random_tensor({2, 3}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(mul(row_slice(p[0], 1, 3), col_slice(p[1], 0, 2)));
              },
              {random_tensor({4, 2}, rng), random_tensor({2, 5}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(concat_rows({p[0], p[1]}) * concat_rows({p[1], p[0]}));
              },
              {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(concat_cols({p[0], transpose(p[1])}));
              },
              {random_tensor({3, 2}, rng), random_tensor({4, 3}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(square(gather_rows(p[0], {0, 2, 2})));
              },
              {random_tensor({3, 4}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(square(gather_cols(p[0], {3, 0})));
              },
              {random_tensor({2, 4}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(square(gather_entry_per_row(p[0], {1, 0, 2})));
              },
              {random_tensor({3, 3}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(square(reshape(p[0], {6}))); },
              {random_tensor({2, 3}, rng)}) < 1e-6);
    CHECK(grad_check([](const std::vector<Value>& p) { return dot(p[0], p[1]); },
                     {random_tensor({5}, rng), random_tensor({5}, rng)}) < 1e-6);
}

TEST_CASE("gradient checks: softmax, logsumexp, layer norm, standardize") {
    Rng rng(17);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(square(softmax_rows(p[0]))); },
              {random_tensor({3, 5}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(logsumexp_rows(p[0])); },
              {random_tensor({4, 3}, rng)}) < 1e-6);
    CHECK(grad_check(
              [](const std::vector<Value>& p) {
                  return mean_all(square(layer_norm_rows(p[0], p[1], p[2], 1e-5)));
              },
              {random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)}) < 1e-5);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(square(standardize_cols(p[0], 1e-8))); },
              {random_tensor({5, 4}, rng)}) < 1e-5);
}

TEST_CASE("conv3_same values and gradients") {
    Value identity = conv3_same(Value::constant(Tensor::vec({0, 1, 0})),
                                Value::constant(Tensor::vec({4, 5, 6, 7})));
    CHECK(identity.val().data == std::vector<double>{4, 5, 6, 7});

    Rng rng(19);
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(square(conv3_same(p[0], p[1]))); },
              {random_tensor({3}, rng), random_tensor({8}, rng)}) < 1e-6);
    // signal shorter than the kernel still works (pure zero padding)
    CHECK(grad_check(
              [](const std::vector<Value>& p) { return mean_all(square(conv3_same(p[0], p[1]))); },
              {random_tensor({3}, rng), random_tensor({1}, rng)}) < 1e-6);
}

TEST_CASE("backward contract") {
    Value x = Value::param(Tensor::vec({1.0, 2.0}));
    CHECK_THROWS_AS(backward(x), contract_error);  // non-scalar root
}
