#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mstkd/gsme.hpp"
#include "mstkd/train.hpp"
#include "mstkd/verify.hpp"

#include "test_util.hpp"

using namespace mstkd;
using testutil::random_tensor;

TEST_CASE("gram_pairs") {
    SUBCASE("orthonormal rows give identity matrices") {
        auto eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
        StyleFeatures s{eye, eye, eye};
        auto [m1, m2, m3] = gram_pairs(s);
        for (const auto* m : {&m1, &m2, &m3}) {
            CHECK(m->data() == std::vector<double>{1, 0, 0, 1});
        }
    }
    SUBCASE("opposing rows cancel") {
        StyleFeatures s{Tensor::from_data({1, 2}, {1, 1}), Tensor::from_data({1, 2}, {0, 0}),
                        Tensor::from_data({1, 2}, {1, -1})};
        auto [m1, m2, m3] = gram_pairs(s);
        CHECK(m1.item() == 0.0);  // enc . dec
    }
    SUBCASE("zero features give zero matrices") {
        StyleFeatures s{Tensor::zeros({2, 3}), Tensor::zeros({4, 3}), Tensor::zeros({2, 3})};
        auto [m1, m2, m3] = gram_pairs(s);
        CHECK(m1.shape() == Shape{2, 2});
        CHECK(m2.shape() == Shape{2, 4});
        CHECK(m3.shape() == Shape{2, 4});
        for (const auto* m : {&m1, &m2, &m3}) {
            for (double v : m->data()) CHECK(v == 0.0);
        }
    }
    SUBCASE("mismatched spatial lengths are rejected") {
        StyleFeatures s{Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), Tensor::zeros({2, 3})};
        CHECK_THROWS_AS(gram_pairs(s), shape_error);
    }
}

TEST_CASE("discriminator output lives strictly inside (0,1)") {
    Discriminator d(6, 16, 42);
    Rng rng(1);
    for (int i = 0; i < 30; ++i) {
        const double scale = i < 15 ? 1.0 : 1e4;  // includes saturating inputs
        auto f = random_tensor({6, 2, 2, 2}, rng, -scale, scale);
        const double v = d.forward(f).item();
        CHECK(v > 0.0);
        CHECK(v < 1.0);
    }
}

TEST_CASE("adversarial losses") {
    Rng rng(2);

    SUBCASE("a chance-level discriminator reports 2*log(1/2)") {
        // zero weights leave the sigmoid at exactly 0.5
        Discriminator d(3, 8, 7);
        for (auto& nt : d.named_parameters()) {
            std::fill(nt.tensor.data().begin(), nt.tensor.data().end(), 0.0);
        }
        auto ff = random_tensor({3, 2, 2, 2}, rng);
        auto fm = random_tensor({3, 2, 2, 2}, rng);
        CHECK(adversarial_report_value(d, ff, fm) ==
              doctest::Approx(2.0 * std::log(0.5)).epsilon(1e-9));

        auto adv = adversarial_loss(d, ff, fm);
        CHECK(adv.d_loss.item() == doctest::Approx(-2.0 * std::log(0.5)).epsilon(1e-9));
        CHECK(adv.g_loss.item() == doctest::Approx(-std::log(0.5)).epsilon(1e-9));
    }

    SUBCASE("identical fused inputs keep the generator gradient finite") {
        Discriminator d(3, 8, 8);
        auto f = random_tensor({3, 2, 2, 2}, rng);
        auto fm = f.clone();
        fm.set_requires_grad(true);
        auto adv = adversarial_loss(d, f, fm);
        backward(adv.g_loss);
        REQUIRE(fm.has_grad());
        for (double g : fm.grad()) CHECK(std::isfinite(g));
    }

    SUBCASE("saturating inputs never produce infinite logs") {
        Discriminator d(3, 8, 9);
        auto huge = Tensor::full({3, 2, 2, 2}, 1e6);
        auto tiny = Tensor::full({3, 2, 2, 2}, -1e6);
        auto adv = adversarial_loss(d, huge, tiny);
        CHECK(std::isfinite(adv.d_loss.item()));
        CHECK(std::isfinite(adv.g_loss.item()));
        CHECK(std::isfinite(adversarial_report_value(d, huge, tiny)));
    }

    SUBCASE("shape mismatch is rejected") {
        Discriminator d(3, 8, 10);
        CHECK_THROWS_AS(adversarial_loss(d, Tensor::zeros({3, 2, 2, 2}), Tensor::zeros({3, 4, 4, 4})),
                        shape_error);
    }
}

TEST_CASE("gsme_loss") {
    Rng rng(3);
    LossWeights w;

    SUBCASE("equal styles with epsilon=0 give zero") {
        StyleFeatures s{random_tensor({2, 4}, rng), random_tensor({3, 4}, rng),
                        random_tensor({2, 4}, rng)};
        LossWeights w0 = w;
        w0.epsilon = 0.0;
        CHECK(gsme_loss(s, s, Tensor::scalar(123.0), w0).item() == 0.0);
    }

    SUBCASE("normalization makes a unit Gram gap cost one") {
        // single-channel features; only the enc*dec pair differs, by exactly 1
        StyleFeatures teacher{Tensor::from_data({1, 1}, {1.0}), Tensor::from_data({1, 1}, {0.0}),
                              Tensor::from_data({1, 1}, {1.0})};
        StyleFeatures student{Tensor::from_data({1, 1}, {1.0}), Tensor::from_data({1, 1}, {0.0}),
                              Tensor::from_data({1, 1}, {0.0})};
        LossWeights w4 = w;
        w4.theta = 4.0;  // 4 n^2 with n = 1
        w4.epsilon = 0.0;
        CHECK(gsme_loss(teacher, student, Tensor::scalar(0.0), w4).item() ==
              doctest::Approx(1.0).epsilon(1e-12));
    }

    SUBCASE("adv term enters with weight epsilon") {
        StyleFeatures s{random_tensor({2, 4}, rng), random_tensor({3, 4}, rng),
                        random_tensor({2, 4}, rng)};
        LossWeights we = w;
        we.epsilon = 2.5;
        CHECK(gsme_loss(s, s, Tensor::scalar(1.25), we).item() ==
              doctest::Approx(2.5 * 1.25).epsilon(1e-12));
    }

    SUBCASE("brute force and permutation invariance") {
        Rng vr(11);
        for (const auto& r : verify::run_gram_suite(vr)) {
            INFO(r.name << ": " << r.detail);
            CHECK(r.passed);
        }
    }
}

TEST_CASE("alternating update moves the separation in opposite directions") {
    Rng rng(4);
    Discriminator d(3, 16, 21);
    auto disc_params = d.parameters();
    auto disc_adam = make_adam_state(disc_params);

    auto fused_teacher = random_tensor({3, 2, 2, 2}, rng);
    auto fused_student = random_tensor({3, 2, 2, 2}, rng);
    fused_student.set_requires_grad(true);
    std::vector<Tensor> student_side = {fused_student};
    auto student_adam = make_adam_state(student_side);

    const auto separation = [&] {
        NoGradGuard ng;
        return d.forward(fused_teacher).item() - d.forward(fused_student).item();
    };

    const double before = separation();
    // discriminator step: separation should grow
    for (int i = 0; i < 5; ++i) {
        auto adv = adversarial_loss(d, fused_teacher, fused_student);
        d.zero_grads();
        backward(adv.d_loss);
        adam_step(disc_params, disc_adam, 0.02, 0.9, 0.99, 1e-8);
    }
    const double after_d = separation();
    CHECK(after_d > before);

    // student step on its fused features: separation should shrink again
    for (int i = 0; i < 5; ++i) {
        auto adv = adversarial_loss(d, fused_teacher, fused_student);
        fused_student.zero_grad();
        backward(adv.g_loss);
        adam_step(student_side, student_adam, 0.05, 0.9, 0.99, 1e-8);
    }
    const double after_g = separation();
    CHECK(after_g < after_d);
}

TEST_CASE("style_features pools the encoder map onto the transformer grid") {
    NetConfig cfg;
    SegNet net(cfg, 31);
    Rng rng(5);
    auto trace = net.forward(random_tensor({4, 16, 16, 16}, rng, 0.0, 1.0));
    auto s = style_features(trace);
    CHECK(s.enc.shape() == Shape{64, 8});
    CHECK(s.t.shape() == Shape{32, 8});
    CHECK(s.dec.shape() == Shape{128, 8});

    // pooled values are block means of the penultimate encoder map
    const auto& ep = trace.enc_penult;
    double manual = 0.0;
    for (std::int64_t z = 0; z < 2; ++z) {
        for (std::int64_t y = 0; y < 2; ++y) {
            for (std::int64_t x = 0; x < 2; ++x) {
                manual += ep.value_at((z * 4 + y) * 4 + x);
            }
        }
    }
    manual /= 8.0;
    CHECK(s.enc.value_at(0) == doctest::Approx(manual).epsilon(1e-12));
}
