#pragma once

#include <tuple>

#include "mstkd/net.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd {

// Scalar coefficients of every distillation term. Teacher-side tensors are
// detached inside each loss, so gradients only reach the student.
struct LossWeights {
    double alpha = 1.0;       // attention-sequence term
    double beta = 1.0;        // token term
    double lambda_mse = 1.0;  // logit discrepancy
    double lambda_kd = 1.0;   // standardized KL
    double tau = 1.0;         // standardization temperature
    double epsilon = 1.0;     // adversarial term inside the style loss
    double theta = 1.0;       // Gram matching term
    double lambda1 = 1.0, lambda2 = 1.0, lambda3 = 1.0, lambda4 = 1.0;

    void validate() const;
};

// Extreme-value attention sequences: reduce over the head axis at every
// position, then scale the attention stack by each statistic.
// A is (heads, N, N); returns (max*A, min*A, mean*A), shapes preserved.
std::tuple<Tensor, Tensor, Tensor> extreme_value_sequences(const Tensor& attn);

// Attention + token matching across all transformer blocks (global means).
Tensor ms_tkd_loss(const ForwardTrace& teacher, const ForwardTrace& student, const LossWeights& w);

// Mean squared difference of logits.
Tensor logit_mse(const Tensor& teacher_logits, const Tensor& student_logits);

// KL between class distributions of per-voxel standardized logits, averaged
// over voxels. Class axis is 0.
Tensor std_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau);

// lambda_mse * logit_mse + lambda_kd * tau^2 * std_kl_loss
Tensor logit_loss(const Tensor& teacher_logits, const Tensor& student_logits, const LossWeights& w);

}  // namespace mstkd
