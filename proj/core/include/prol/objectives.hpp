#pragma once

#include <vector>

#include "prol/autograd.hpp"
#include "prol/tensor.hpp"

namespace prol {

struct LossWeights {
    double l1 = 1.0;   // intra-task cross-entropy
    double l2 = 0.03;  // inter-task cross-entropy
    double l3 = 1.0;   // input-to-key similarity
    double l4 = 1.0;   // key orthogonality
    double l5 = 1.0;   // generalization alignment
    void validate() const;
};

// Class sets are given as column indices of the logits matrix; callers that
// index classes differently translate before calling.

// Mean cross-entropy with the softmax restricted to mask_cols. Columns outside
// the mask have exactly zero influence. Every label must lie in the mask.
Value masked_cross_entropy(const Value& logits, const std::vector<std::size_t>& label_cols,
                           const std::vector<std::size_t>& mask_cols);

// Softmax over the current task's classes only.
Value loss_intra(const Value& logits, const std::vector<std::size_t>& label_cols,
                 const std::vector<std::size_t>& current_class_cols);

// Softmax over everything learned so far.
Value loss_inter(const Value& logits, const std::vector<std::size_t>& label_cols,
                 const std::vector<std::size_t>& seen_class_cols);

// -cosine(q, key) with an epsilon guard for zero vectors; range [-1, 1].
Value loss_sim(const Value& q, const Value& key, double eps = 1e-8);

// Mean dot product of paired keys; exactly zero (and gradient-free) when there
// are no previously-learned classes yet.
Value loss_ort(const std::vector<Value>& new_keys, const std::vector<Value>& old_keys);

// Batch cross-correlation between plain and prompted features. When
// standardize is set (the default convention) each feature column is shifted
// to zero mean and unit population std first, which requires B >= 2.
Value gen_matrix(const Value& f_plain, const Value& f_prompted, bool standardize);

struct GenMatrix {
    Tensor m;
    std::size_t batch_used = 0;
};
GenMatrix gen_matrix(const Tensor& f_plain, const Tensor& f_prompted, bool standardize);

// (1/D) sum_i (1 - M_ii)^2 + (1/(D(D-1))) sum_{i != j} M_ij^2; zero iff M = I.
Value loss_gen(const Value& m);

struct LossTerms {
    Value intra, inter, sim, ort, gen;  // undefined members contribute zero
};

struct LossReport {
    double intra = 0.0, inter = 0.0, sim = 0.0, ort = 0.0, gen = 0.0;
    double ce = 0.0;     // l1*intra + l2*inter, drives the hard/soft switch
    double total = 0.0;  // exact weighted sum of the five terms
};

// Weighted sum per the joint objective; also returns the report numbers.
std::pair<Value, LossReport> loss_total(const LossTerms& terms, const LossWeights& weights);

}  // namespace prol
