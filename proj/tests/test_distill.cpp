#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mstkd/distill.hpp"
#include "mstkd/verify.hpp"

#include "test_util.hpp"

using namespace mstkd;
using testutil::random_tensor;

namespace {

ForwardTrace trace_from(std::vector<Tensor> attn, std::vector<Tensor> tokens) {
    ForwardTrace t;
    t.attn = std::move(attn);
    t.tokens = std::move(tokens);
    return t;
}

}  // namespace

TEST_CASE("extreme value sequences") {
    SUBCASE("constant attention squares the constant") {
        for (double c : {0.5, 1.0, 3.0}) {
            auto a = Tensor::full({3, 2, 2}, c);
            auto [e1, e2, e3] = extreme_value_sequences(a);
            for (const auto* t : {&e1, &e2, &e3}) {
                CHECK(t->shape() == a.shape());
                for (double v : t->data()) CHECK(v == c * c);
            }
        }
    }
    SUBCASE("single head degenerates to elementwise square") {
        Rng rng(1);
        auto a = random_tensor({1, 3, 3}, rng, 0.0, 1.0);
        auto [e1, e2, e3] = extreme_value_sequences(a);
        for (std::int64_t i = 0; i < a.numel(); ++i) {
            const double want = a.value_at(i) * a.value_at(i);
            CHECK(e1.value_at(i) == want);
            CHECK(e2.value_at(i) == want);
            CHECK(e3.value_at(i) == want);
        }
    }
    SUBCASE("head statistics re-weight each head") {
        // heads carry 1 and 3 at the single position
        auto a = Tensor::from_data({2, 1, 1}, {1.0, 3.0});
        auto [e1, e2, e3] = extreme_value_sequences(a);
        CHECK(e1.data() == std::vector<double>{3.0, 9.0});   // A_max = 3
        CHECK(e2.data() == std::vector<double>{1.0, 3.0});   // A_min = 1
        CHECK(e3.data() == std::vector<double>{2.0, 6.0});   // A_mean = 2
    }
    CHECK_THROWS_AS(extreme_value_sequences(Tensor::zeros({2, 2})), shape_error);
}

TEST_CASE("ms_tkd_loss values") {
    Rng rng(2);
    LossWeights w;

    SUBCASE("identical traces give zero") {
        auto t = trace_from({softmax(random_tensor({2, 3, 3}, rng), 2)},
                            {random_tensor({3, 4}, rng)});
        CHECK(ms_tkd_loss(t, t, w).item() == 0.0);
    }

    SUBCASE("token-only term with unit offset") {
        w.alpha = 0.0;
        w.beta = 1.0;
        auto attn = softmax(random_tensor({2, 2, 2}, rng), 2);
        auto tok_t = random_tensor({2, 3}, rng);
        auto tok_s = add_scalar(tok_t, 1.0);
        auto lt = trace_from({attn}, {tok_t});
        auto ls = trace_from({attn}, {tok_s});
        CHECK(ms_tkd_loss(lt, ls, w).item() == doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("matches a brute-force recomputation on 2-block traces") {
        w.alpha = 0.7;
        w.beta = 1.3;
        for (int it = 0; it < 10; ++it) {
            std::vector<Tensor> ta, sa, tt, st;
            for (int b = 0; b < 2; ++b) {
                ta.push_back(random_tensor({2, 2, 2}, rng, 0.0, 1.0));
                sa.push_back(random_tensor({2, 2, 2}, rng, 0.0, 1.0));
                tt.push_back(random_tensor({2, 3}, rng));
                st.push_back(random_tensor({2, 3}, rng));
            }
            const double got = ms_tkd_loss(trace_from(ta, tt), trace_from(sa, st), w).item();

            // independent flattened recomputation
            double ev_acc = 0.0, tok_acc = 0.0;
            std::int64_t ev_n = 0, tok_n = 0;
            for (int b = 0; b < 2; ++b) {
                const auto& A_t = ta[static_cast<std::size_t>(b)];
                const auto& A_s = sa[static_cast<std::size_t>(b)];
                for (int pos = 0; pos < 4; ++pos) {  // N*N positions
                    double mx_t = -1e300, mn_t = 1e300, mean_t = 0.0;
                    double mx_s = -1e300, mn_s = 1e300, mean_s = 0.0;
                    for (int h = 0; h < 2; ++h) {
                        const double vt = A_t.value_at(h * 4 + pos);
                        const double vs = A_s.value_at(h * 4 + pos);
                        mx_t = std::max(mx_t, vt);
                        mn_t = std::min(mn_t, vt);
                        mean_t += vt / 2.0;
                        mx_s = std::max(mx_s, vs);
                        mn_s = std::min(mn_s, vs);
                        mean_s += vs / 2.0;
                    }
                    for (int h = 0; h < 2; ++h) {
                        const double vt = A_t.value_at(h * 4 + pos);
                        const double vs = A_s.value_at(h * 4 + pos);
                        const double d1 = mx_s * vs - mx_t * vt;
                        const double d2 = mn_s * vs - mn_t * vt;
                        const double d3 = mean_s * vs - mean_t * vt;
                        ev_acc += d1 * d1 + d2 * d2 + d3 * d3;
                        ev_n += 3;
                    }
                }
                for (int i = 0; i < 6; ++i) {
                    const double d = st[static_cast<std::size_t>(b)].value_at(i) -
                                     tt[static_cast<std::size_t>(b)].value_at(i);
                    tok_acc += d * d;
                    tok_n += 1;
                }
            }
            const double want = w.alpha * ev_acc / static_cast<double>(ev_n) +
                                w.beta * tok_acc / static_cast<double>(tok_n);
            CHECK(std::abs(got - want) <= 1e-12);
        }
    }

    SUBCASE("shape mismatch is rejected") {
        auto a = trace_from({random_tensor({2, 2, 2}, rng)}, {random_tensor({2, 3}, rng)});
        auto b = trace_from({random_tensor({2, 3, 3}, rng)}, {random_tensor({2, 3}, rng)});
        CHECK_THROWS_AS(ms_tkd_loss(a, b, w), shape_error);
    }
}

TEST_CASE("logit_mse") {
    Rng rng(3);
    auto l = random_tensor({3, 2, 2}, rng);
    CHECK(logit_mse(l, l).item() == 0.0);

    auto a = Tensor::from_data({2}, {1, 0});
    auto b = Tensor::from_data({2}, {0, 0});
    CHECK(logit_mse(a, b).item() == doctest::Approx(0.5));

    auto l2 = random_tensor({3, 2, 2}, rng);
    const double base = logit_mse(l, l2).item();
    CHECK(logit_mse(mul_scalar(l, 2.0), mul_scalar(l2, 2.0)).item() ==
          doctest::Approx(4.0 * base).epsilon(1e-12));

    CHECK_THROWS_AS(logit_mse(a, Tensor::zeros({3})), shape_error);
}

TEST_CASE("std_kl_loss") {
    Rng rng(4);

    SUBCASE("identical logits give zero") {
        auto l = random_tensor({3, 5}, rng);
        CHECK(std_kl_loss(l, l, 1.0).item() == 0.0);
    }

    SUBCASE("positive affine transforms are free") {
        auto l = random_tensor({3, 5}, rng, -50, 50);
        auto l2 = add_scalar(mul_scalar(l, 2.0), 5.0);
        CHECK(std_kl_loss(l, l2, 1.0).item() < 1e-9);
    }

    SUBCASE("matches a hand computation") {
        // single voxel, two classes
        auto lf = Tensor::from_data({2, 1}, {1.0, 0.0});
        auto lm = Tensor::from_data({2, 1}, {0.0, 1.0});
        const double got = std_kl_loss(lf, lm, 1.0).item();

        // standardize both by hand (mu=0.5, sigma=0.5), then softmax + KL
        auto standardized = [](double a, double b, double tau) {
            const double mu = (a + b) / 2.0;
            const double sigma = std::sqrt(((a - mu) * (a - mu) + (b - mu) * (b - mu)) / 2.0);
            const double denom = (sigma + 1e-7) * tau;
            return std::pair<double, double>{(a - mu) / denom, (b - mu) / denom};
        };
        auto [zf0, zf1] = standardized(1.0, 0.0, 1.0);
        auto [zm0, zm1] = standardized(0.0, 1.0, 1.0);
        const double qf0 = std::exp(zf0) / (std::exp(zf0) + std::exp(zf1));
        const double qf1 = 1.0 - qf0;
        const double qm0 = std::exp(zm0) / (std::exp(zm0) + std::exp(zm1));
        const double qm1 = 1.0 - qm0;
        const double want = qf0 * std::log(qf0 / qm0) + qf1 * std::log(qf1 / qm1);
        CHECK(got == doctest::Approx(want).epsilon(1e-12));
        CHECK(got >= 0.0);
    }

    SUBCASE("100 random affine draws stay under 1e-9") {
        for (int i = 0; i < 100; ++i) {
            auto l = random_tensor({3, 4}, rng, -100.0, 100.0);
            const double a = rng.uniform(0.05, 20.0);
            const double b = rng.uniform(-100.0, 100.0);
            auto l2 = add_scalar(mul_scalar(l, a), b);
            CHECK(std_kl_loss(l, l2, 1.0).item() < 1e-9);
        }
    }
}

TEST_CASE("logit_loss composition") {
    Rng rng(5);
    LossWeights w;
    auto l = random_tensor({3, 4}, rng);

    CHECK(logit_loss(l, l, w).item() == 0.0);

    auto l2 = random_tensor({3, 4}, rng);
    w.lambda_kd = 0.0;
    w.lambda_mse = 0.7;
    CHECK(logit_loss(l, l2, w).item() ==
          doctest::Approx(0.7 * logit_mse(l, l2).item()).epsilon(1e-12));

    // the tau^2 prefactor quadruples between tau=1 and tau=2 on the same KL value
    LossWeights w1;
    w1.lambda_mse = 0.0;
    LossWeights w2 = w1;
    w2.tau = 2.0;
    const double kl1 = std_kl_loss(l, l2, 1.0).item();
    const double kl2 = std_kl_loss(l, l2, 2.0).item();
    CHECK(logit_loss(l, l2, w1).item() == doctest::Approx(1.0 * kl1).epsilon(1e-12));
    CHECK(logit_loss(l, l2, w2).item() == doctest::Approx(4.0 * kl2).epsilon(1e-12));
}

TEST_CASE("loss gradients match finite differences and skip the teacher") {
    Rng rng(6);
    auto results = verify::run_loss_gradient_suite(rng, 20);
    for (const auto& r : results) {
        INFO(r.name << ": " << r.detail);
        CHECK(r.passed);
    }
}

TEST_CASE("losses are non-negative") {
    Rng rng(7);
    LossWeights w;
    for (int i = 0; i < 20; ++i) {
        auto a = trace_from({softmax(random_tensor({2, 3, 3}, rng), 2)},
                            {random_tensor({3, 4}, rng)});
        auto b = trace_from({softmax(random_tensor({2, 3, 3}, rng), 2)},
                            {random_tensor({3, 4}, rng)});
        CHECK(ms_tkd_loss(a, b, w).item() >= 0.0);
        auto lf = random_tensor({3, 4}, rng);
        auto lm = random_tensor({3, 4}, rng);
        CHECK(logit_mse(lf, lm).item() >= 0.0);
        CHECK(std_kl_loss(lf, lm, 1.5).item() >= 0.0);
    }
}

TEST_CASE("weight validation") {
    LossWeights w;
    w.validate();
    w.tau = 0.0;
    CHECK_THROWS_AS(w.validate(), value_error);
    w.tau = 1.0;
    w.alpha = -0.5;
    CHECK_THROWS_AS(w.validate(), value_error);
}
