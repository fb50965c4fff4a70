#include "mstkd/distill.hpp"

namespace mstkd {

void LossWeights::validate() const {
    for (double v : {alpha, beta, lambda_mse, lambda_kd, epsilon, theta, lambda1, lambda2, lambda3,
                     lambda4}) {
        if (v < 0.0) throw value_error("LossWeights: coefficients must be non-negative");
    }
    if (!(tau > 0.0)) throw value_error("LossWeights: tau must be > 0");
}

std::tuple<Tensor, Tensor, Tensor> extreme_value_sequences(const Tensor& attn) {
    if (attn.rank() != 3) {
        throw shape_error("extreme_value_sequences: expected (heads,N,N), got " +
                          shape_str(attn.shape()));
    }
    auto a_max = reduce(attn, 0, AxisReduceMode::kMax);
    auto a_min = reduce(attn, 0, AxisReduceMode::kMin);
    auto a_mean = reduce(attn, 0, AxisReduceMode::kMean);
    return {mul_broadcast_leading(attn, a_max), mul_broadcast_leading(attn, a_min),
            mul_broadcast_leading(attn, a_mean)};
}

Tensor ms_tkd_loss(const ForwardTrace& teacher, const ForwardTrace& student, const LossWeights& w) {
    if (teacher.attn.size() != student.attn.size() ||
        teacher.tokens.size() != student.tokens.size() || teacher.attn.empty()) {
        throw shape_error("ms_tkd_loss: traces disagree on block count");
    }
    Tensor ev_sum, tok_sum;
    std::int64_t ev_count = 0, tok_count = 0;
    auto accumulate = [](Tensor& acc, const Tensor& term) {
        acc = acc.defined() ? add(acc, term) : term;
    };
    for (std::size_t i = 0; i < teacher.attn.size(); ++i) {
        const auto& at = teacher.attn[i];
        const auto& as = student.attn[i];
        if (at.shape() != as.shape()) {
            throw shape_error("ms_tkd_loss: attention shape mismatch at block " + std::to_string(i) +
                              ": " + shape_str(at.shape()) + " vs " + shape_str(as.shape()));
        }
        auto [t1, t2, t3] = extreme_value_sequences(at.detach());
        auto [s1, s2, s3] = extreme_value_sequences(as);
        accumulate(ev_sum, sum_all(square(sub(s1, t1))));
        accumulate(ev_sum, sum_all(square(sub(s2, t2))));
        accumulate(ev_sum, sum_all(square(sub(s3, t3))));
        ev_count += 3 * at.numel();

        const auto& zt = teacher.tokens[i];
        const auto& zs = student.tokens[i];
        if (zt.shape() != zs.shape()) {
            throw shape_error("ms_tkd_loss: token shape mismatch at block " + std::to_string(i));
        }
        accumulate(tok_sum, sum_all(square(sub(zs, zt.detach()))));
        tok_count += zt.numel();
    }
    return add(mul_scalar(ev_sum, w.alpha / static_cast<double>(ev_count)),
               mul_scalar(tok_sum, w.beta / static_cast<double>(tok_count)));
}

Tensor logit_mse(const Tensor& teacher_logits, const Tensor& student_logits) {
    if (teacher_logits.shape() != student_logits.shape()) {
        throw shape_error("logit_mse: shape mismatch " + shape_str(teacher_logits.shape()) + " vs " +
                          shape_str(student_logits.shape()));
    }
    return mean_all(square(sub(student_logits, teacher_logits.detach())));
}

Tensor std_kl_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
    if (teacher_logits.shape() != student_logits.shape()) {
        throw shape_error("std_kl_loss: shape mismatch " + shape_str(teacher_logits.shape()) +
                          " vs " + shape_str(student_logits.shape()));
    }
    auto zt = standardize(teacher_logits.detach(), 0, tau);
    auto zs = standardize(student_logits, 0, tau);
    auto q_t = softmax(zt, 0);
    auto kl_terms = mul(q_t, sub(log_softmax(zt, 0), log_softmax(zs, 0)));
    const auto voxels = teacher_logits.numel() / teacher_logits.extent(0);
    return mul_scalar(sum_all(kl_terms), 1.0 / static_cast<double>(voxels));
}

Tensor logit_loss(const Tensor& teacher_logits, const Tensor& student_logits, const LossWeights& w) {
    auto mse = logit_mse(teacher_logits, student_logits);
    auto kl = std_kl_loss(teacher_logits, student_logits, w.tau);
    return add(mul_scalar(mse, w.lambda_mse), mul_scalar(kl, w.lambda_kd * w.tau * w.tau));
}

}  // namespace mstkd
