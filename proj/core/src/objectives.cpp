#include "prol/objectives.hpp"

#include <algorithm>
#include <cmath>

#include "prol/errors.hpp"

namespace prol {

void LossWeights::validate() const {
    for (double l : {l1, l2, l3, l4, l5})
        if (!(l >= 0.0) || !std::isfinite(l))
            throw contract_error("loss weights must be finite and non-negative");
}

Value masked_cross_entropy(const Value& logits, const std::vector<std::size_t>& label_cols,
                           const std::vector<std::size_t>& mask_cols) {
    if (mask_cols.empty()) throw contract_error("masked_cross_entropy: empty class mask");
    if (label_cols.size() != logits.val().rows())
        throw contract_error("masked_cross_entropy: one label per logits row required");

    std::vector<std::size_t> pos_in_mask(label_cols.size());
    for (std::size_t i = 0; i < label_cols.size(); ++i) {
        auto it = std::find(mask_cols.begin(), mask_cols.end(), label_cols[i]);
        if (it == mask_cols.end())
            throw contract_error("masked_cross_entropy: label column " + std::to_string(label_cols[i]) +
                                 " outside the class mask");
        pos_in_mask[i] = static_cast<std::size_t>(it - mask_cols.begin());
    }

    Value sub = gather_cols(logits, mask_cols);
    Value lse = logsumexp_rows(sub);
    Value picked = gather_entry_per_row(sub, pos_in_mask);
    return mean_all(lse - picked);
}

Value loss_intra(const Value& logits, const std::vector<std::size_t>& label_cols,
                 const std::vector<std::size_t>& current_class_cols) {
    return masked_cross_entropy(logits, label_cols, current_class_cols);
}

Value loss_inter(const Value& logits, const std::vector<std::size_t>& label_cols,
                 const std::vector<std::size_t>& seen_class_cols) {
    return masked_cross_entropy(logits, label_cols, seen_class_cols);
}

Value loss_sim(const Value& q, const Value& key, double eps) {
    Value nq = vsqrt(dot(q, q));
    Value nk = vsqrt(dot(key, key));
    Value denom = vmax_const(mul(nq, nk), eps);
    return neg(vdiv(dot(q, key), denom));
}

Value loss_ort(const std::vector<Value>& new_keys, const std::vector<Value>& old_keys) {
    if (new_keys.size() != old_keys.size())
        throw contract_error("loss_ort: new/old key lists must have equal length");
    if (new_keys.empty()) return Value::constant(Tensor::scalar(0.0));
    Value acc = dot(new_keys[0], old_keys[0]);
    for (std::size_t i = 1; i < new_keys.size(); ++i) acc = add(acc, dot(new_keys[i], old_keys[i]));
    return scale(acc, 1.0 / static_cast<double>(new_keys.size()));
}

Value gen_matrix(const Value& f_plain, const Value& f_prompted, bool standardize) {
    if (!f_plain.val().same_shape(f_prompted.val()))
        throw contract_error("gen_matrix: feature shapes disagree");
    std::size_t batch = f_plain.val().rows();
    if (batch < 1) throw contract_error("gen_matrix: empty batch");
    Value a = f_plain, b = f_prompted;
    if (standardize) {
        if (batch < 2) throw contract_error("gen_matrix: standardization requires batch size >= 2");
        a = standardize_cols(a, 1e-8);
        b = standardize_cols(b, 1e-8);
    }
    return scale(matmul(transpose(a), b), 1.0 / static_cast<double>(batch));
}

GenMatrix gen_matrix(const Tensor& f_plain, const Tensor& f_prompted, bool standardize) {
    Value m = gen_matrix(Value::constant(f_plain), Value::constant(f_prompted), standardize);
    return {m.val(), f_plain.rows()};
}

Value loss_gen(const Value& m) {
    std::size_t d = m.val().rows();
    if (d != m.val().cols()) throw contract_error("loss_gen: matrix must be square");
    if (d < 2) throw contract_error("loss_gen: embedding size must be >= 2 (off-diagonal term undefined)");
    std::vector<std::size_t> diag_idx(d);
    for (std::size_t i = 0; i < d; ++i) diag_idx[i] = i;
    Value diag = gather_entry_per_row(m, diag_idx);
    Value diag_term = mean_all(square(add_const(neg(diag), 1.0)));
    Value off_sum = sub(sum_all(square(m)), sum_all(square(diag)));
    Value off_term = scale(off_sum, 1.0 / (static_cast<double>(d) * static_cast<double>(d - 1)));
    return add(diag_term, off_term);
}

std::pair<Value, LossReport> loss_total(const LossTerms& terms, const LossWeights& weights) {
    weights.validate();
    LossReport report;
    auto value_of = [](const Value& v) { return v.defined() ? v.val()[0] : 0.0; };
    report.intra = value_of(terms.intra);
    report.inter = value_of(terms.inter);
    report.sim = value_of(terms.sim);
    report.ort = value_of(terms.ort);
    report.gen = value_of(terms.gen);
    report.ce = weights.l1 * report.intra + weights.l2 * report.inter;
    report.total = weights.l1 * report.intra + weights.l2 * report.inter + weights.l3 * report.sim +
                   weights.l4 * report.ort + weights.l5 * report.gen;

    Value zero = Value::constant(Tensor::scalar(0.0));
    auto term = [&zero](const Value& v, double w) { return v.defined() ? scale(v, w) : Value(zero); };
    Value total = term(terms.intra, weights.l1);
    total = add(total, term(terms.inter, weights.l2));
    total = add(total, term(terms.sim, weights.l3));
    total = add(total, term(terms.ort, weights.l4));
    total = add(total, term(terms.gen, weights.l5));
    return {total, report};
}

}  // namespace prol
