#pragma once

#include <tuple>

#include "mstkd/distill.hpp"
#include "mstkd/net.hpp"
#include "mstkd/serialize.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd {

// The three style carriers flattened to (channels, S) with a shared spatial
// length S. Encoder features are average-pooled down to the 1/8 grid first.
struct StyleFeatures {
    Tensor enc;  // (C_e, S)
    Tensor t;    // (C_t, S)
    Tensor dec;  // (C_d, S)
};

StyleFeatures style_features(const ForwardTrace& trace);

// Gram-style pairings (enc*dec^T, enc*t^T, dec*t^T); entries are inner
// products over spatial positions.
std::tuple<Tensor, Tensor, Tensor> gram_pairs(const StyleFeatures& s);

// Small MLP on globally average-pooled fused features; output strictly in
// (0,1) via sigmoid + clamp.
class Discriminator {
  public:
    Discriminator(std::int64_t in_channels, std::int64_t hidden, std::uint64_t seed);

    Tensor forward(const Tensor& fused) const;  // (C,H,W,D) -> scalar tensor

    std::vector<NamedTensor> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void load_parameters(const std::vector<NamedTensor>& ckpt);
    void zero_grads() const;

  private:
    Tensor w1_, b1_, w2_, b2_, w3_, b3_;
    std::vector<std::pair<std::string, Tensor>> registry_;
};

// Non-saturating convention: the discriminator is trained to output 1 on
// teacher-fused features and 0 on student-fused ones; the student minimizes
// -log D(student). Teacher features are gradient-stopped in both.
struct AdversarialLosses {
    Tensor d_loss;  // -[log D(teacher) + log(1 - D(student))], student detached
    Tensor g_loss;  // -log D(student), gradient flows into the student
};
AdversarialLosses adversarial_loss(const Discriminator& d, const Tensor& fused_teacher,
                                   const Tensor& fused_student);

// Literal log(1 - D(teacher)) + log(D(student)) value, for reporting only.
double adversarial_report_value(const Discriminator& d, const Tensor& fused_teacher,
                                const Tensor& fused_student);

// theta-weighted Gram matching, each pair normalized by 4 * C_a * C_b.
Tensor gram_match_loss(const StyleFeatures& teacher, const StyleFeatures& student,
                       const LossWeights& w);

// epsilon * adv + gram_match_loss
Tensor gsme_loss(const StyleFeatures& teacher, const StyleFeatures& student, const Tensor& adv,
                 const LossWeights& w);

}  // namespace mstkd
