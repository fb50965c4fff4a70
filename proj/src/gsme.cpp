#include "mstkd/gsme.hpp"

#include <cmath>

namespace mstkd {

StyleFeatures style_features(const ForwardTrace& trace) {
    if (!trace.enc_penult.defined() || !trace.f_t.defined() || !trace.f_dec.defined()) {
        throw value_error("style_features: trace is missing style carriers");
    }
    auto enc8 = avg_pool3d(trace.enc_penult, 2);  // 1/4 -> 1/8 grid
    const auto flat = [](const Tensor& t) {
        return reshape(t, {t.extent(0), t.numel() / t.extent(0)});
    };
    StyleFeatures s;
    s.enc = flat(enc8);
    s.t = flat(trace.f_t);
    s.dec = flat(trace.f_dec);
    if (s.enc.extent(1) != s.t.extent(1) || s.t.extent(1) != s.dec.extent(1)) {
        throw shape_error("style_features: spatial lengths disagree");
    }
    return s;
}

std::tuple<Tensor, Tensor, Tensor> gram_pairs(const StyleFeatures& s) {
    if (s.enc.rank() != 2 || s.t.rank() != 2 || s.dec.rank() != 2) {
        throw shape_error("gram_pairs: features must be rank-2 (channels, S)");
    }
    if (s.enc.extent(1) != s.dec.extent(1) || s.enc.extent(1) != s.t.extent(1)) {
        throw shape_error("gram_pairs: spatial length mismatch: enc " + shape_str(s.enc.shape()) +
                          ", t " + shape_str(s.t.shape()) + ", dec " + shape_str(s.dec.shape()));
    }
    return {matmul(s.enc, transpose(s.dec)), matmul(s.enc, transpose(s.t)),
            matmul(s.dec, transpose(s.t))};
}

Discriminator::Discriminator(std::int64_t in_channels, std::int64_t hidden, std::uint64_t seed) {
    Rng rng(seed);
    const auto init = [&rng](const Shape& shape, std::int64_t fan_in) {
        return Tensor::uniform(shape, std::sqrt(1.0 / static_cast<double>(fan_in)), rng, true);
    };
    w1_ = init({in_channels, hidden}, in_channels);
    b1_ = Tensor::zeros({hidden}, true);
    w2_ = init({hidden, hidden}, hidden);
    b2_ = Tensor::zeros({hidden}, true);
    w3_ = init({hidden, 1}, hidden);
    b3_ = Tensor::zeros({1}, true);
    registry_ = {{"disc.w1", w1_}, {"disc.b1", b1_}, {"disc.w2", w2_},
                 {"disc.b2", b2_}, {"disc.w3", w3_}, {"disc.b3", b3_}};
}

Tensor Discriminator::forward(const Tensor& fused) const {
    Tensor pooled;
    if (fused.rank() == 4) {
        pooled = global_mean_pool(fused);
    } else if (fused.rank() == 1) {
        pooled = fused;
    } else {
        throw shape_error("discriminator: expected (C,H,W,D) or (C), got " + shape_str(fused.shape()));
    }
    if (pooled.extent(0) != w1_.extent(0)) {
        throw shape_error("discriminator: feature channels " + shape_str(pooled.shape()) +
                          " do not match input layer " + shape_str(w1_.shape()));
    }
    auto h = silu(add_rowvec(matmul(reshape(pooled, {1, pooled.extent(0)}), w1_), b1_));
    h = silu(add_rowvec(matmul(h, w2_), b2_));
    auto out = sigmoid(add_rowvec(matmul(h, w3_), b3_));
    return reshape(clamp(out, 1e-6, 1.0 - 1e-6), {1});
}

std::vector<NamedTensor> Discriminator::named_parameters() const {
    std::vector<NamedTensor> out;
    for (const auto& [name, t] : registry_) out.push_back({name, t});
    return out;
}

std::vector<Tensor> Discriminator::parameters() const {
    std::vector<Tensor> out;
    for (const auto& [name, t] : registry_) out.push_back(t);
    return out;
}

void Discriminator::load_parameters(const std::vector<NamedTensor>& ckpt) {
    if (ckpt.size() != registry_.size()) throw value_error("discriminator: bad checkpoint size");
    for (std::size_t i = 0; i < ckpt.size(); ++i) {
        auto& [name, dst] = registry_[i];
        if (ckpt[i].name != name || ckpt[i].tensor.shape() != dst.shape()) {
            throw value_error("discriminator: checkpoint mismatch at '" + ckpt[i].name + "'");
        }
        dst.data() = ckpt[i].tensor.data();
    }
}

void Discriminator::zero_grads() const {
    for (const auto& [name, t] : registry_) const_cast<Tensor&>(t).zero_grad();
}

AdversarialLosses adversarial_loss(const Discriminator& d, const Tensor& fused_teacher,
                                   const Tensor& fused_student) {
    if (fused_teacher.shape() != fused_student.shape()) {
        throw shape_error("adversarial_loss: fused shapes differ: " + shape_str(fused_teacher.shape()) +
                          " vs " + shape_str(fused_student.shape()));
    }
    auto one_minus = [](const Tensor& t) { return add_scalar(mul_scalar(t, -1.0), 1.0); };

    auto d_teacher = d.forward(fused_teacher.detach());
    auto d_student_det = d.forward(fused_student.detach());
    AdversarialLosses out;
    out.d_loss = mul_scalar(add(log(d_teacher), log(one_minus(d_student_det))), -1.0);
    out.g_loss = mul_scalar(log(d.forward(fused_student)), -1.0);
    return out;
}

double adversarial_report_value(const Discriminator& d, const Tensor& fused_teacher,
                                const Tensor& fused_student) {
    NoGradGuard ng;
    const double df = d.forward(fused_teacher).item();
    const double dm = d.forward(fused_student).item();
    return std::log(1.0 - df) + std::log(dm);
}

Tensor gram_match_loss(const StyleFeatures& teacher, const StyleFeatures& student,
                       const LossWeights& w) {
    StyleFeatures t_det{teacher.enc.detach(), teacher.t.detach(), teacher.dec.detach()};
    auto [mt1, mt2, mt3] = gram_pairs(t_det);
    auto [ms1, ms2, ms3] = gram_pairs(student);

    Tensor total;
    auto accumulate = [&total, &w](const Tensor& mt, const Tensor& ms) {
        if (mt.shape() != ms.shape()) {
            throw shape_error("gram_match_loss: Gram shapes differ: " + shape_str(mt.shape()) +
                              " vs " + shape_str(ms.shape()));
        }
        const double norm = w.theta / (4.0 * static_cast<double>(mt.extent(0)) *
                                       static_cast<double>(mt.extent(1)));
        auto term = mul_scalar(sum_all(square(sub(ms, mt))), norm);
        total = total.defined() ? add(total, term) : term;
    };
    accumulate(mt1, ms1);
    accumulate(mt2, ms2);
    accumulate(mt3, ms3);
    return total;
}

Tensor gsme_loss(const StyleFeatures& teacher, const StyleFeatures& student, const Tensor& adv,
                 const LossWeights& w) {
    if (!adv.defined() || adv.numel() != 1) {
        throw value_error("gsme_loss: adversarial term must be a scalar");
    }
    return add(mul_scalar(adv, w.epsilon), gram_match_loss(teacher, student, w));
}

}  // namespace mstkd
