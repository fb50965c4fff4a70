#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mstkd/train.hpp"
#include "mstkd/verify.hpp"

#include "test_util.hpp"

using namespace mstkd;
using testutil::random_tensor;

namespace {

// Small configuration for fast training smokes.
TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.net.base_channels = 2;
    cfg.net.H = cfg.net.W = cfg.net.D = 8;
    cfg.net.embed_dim = 8;
    cfg.net.heads = 2;
    cfg.epochs = 2;
    cfg.seed = 5;
    return cfg;
}

Dataset tiny_dataset(int n = 5, std::int64_t e = 8) {
    return build_dataset(n, {e, e, e}, 77, 0.8);
}

bool same_tensors(const std::vector<NamedTensor>& a, const std::vector<NamedTensor>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].name != b[i].name || a[i].tensor.data() != b[i].tensor.data()) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config validation") {
    TrainConfig cfg;
    cfg.validate();

    TrainConfig bad = cfg;
    bad.epochs = 0;
    CHECK_THROWS_AS(bad.validate(), value_error);
    bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(bad.validate(), value_error);
    bad = cfg;
    bad.beta2 = 1.0;
    CHECK_THROWS_AS(bad.validate(), value_error);
}

TEST_CASE("adam") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        auto p = Tensor::from_data({3}, {1.0, -2.0, 3.0}, true);
        p.grad();  // allocate zeros
        std::vector<Tensor> params = {p};
        auto st = make_adam_state(params);
        adam_step(params, st, 0.1, 0.9, 0.99, 1e-8);
        CHECK(p.data() == std::vector<double>{1.0, -2.0, 3.0});
    }

    SUBCASE("constant gradient drives steps toward lr * sign(g)") {
        auto p = Tensor::from_data({2}, {0.0, 0.0}, true);
        std::vector<Tensor> params = {p};
        auto st = make_adam_state(params);
        const double lr = 0.01;
        double prev0 = 0.0;
        double step0 = 0.0;
        for (int i = 0; i < 200; ++i) {
            p.zero_grad();
            p.grad()[0] = 2.5;   // constant positive gradient
            p.grad()[1] = -0.3;  // constant negative gradient
            adam_step(params, st, lr, 0.9, 0.99, 1e-8);
            step0 = p.value_at(0) - prev0;
            prev0 = p.value_at(0);
        }
        CHECK(std::abs(step0 + lr) < 1e-4);  // descending at ~lr regardless of |g|
        CHECK(p.value_at(1) > 0.0);          // moved opposite to its gradient
    }

    SUBCASE("bit-identical across reruns") {
        auto run = [] {
            Rng rng(3);
            auto p = random_tensor({4}, rng);
            p.set_requires_grad(true);
            std::vector<Tensor> params = {p};
            auto st = make_adam_state(params);
            for (int i = 0; i < 50; ++i) {
                p.zero_grad();
                for (std::size_t j = 0; j < 4; ++j) {
                    p.grad()[j] = std::sin(0.1 * static_cast<double>(i + 1) * (1.0 + static_cast<double>(j)));
                }
                adam_step(params, st, 0.01, 0.9, 0.99, 1e-8);
            }
            return p.data();
        };
        CHECK(run() == run());
    }

    SUBCASE("non-finite gradients abort") {
        auto p = Tensor::from_data({1}, {1.0}, true);
        p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
        std::vector<Tensor> params = {p};
        auto st = make_adam_state(params);
        CHECK_THROWS_AS(adam_step(params, st, 0.1, 0.9, 0.99, 1e-8), numeric_error);
    }
}

TEST_CASE("soft dice loss") {
    SUBCASE("confident correct prediction costs almost nothing") {
        // nested support: 4, 2 and 1 voxels across the three channels
        auto label = Tensor::zeros({3, 2, 2, 2});
        for (std::int64_t i = 0; i < 4; ++i) label.data()[static_cast<std::size_t>(i)] = 1.0;
        for (std::int64_t i = 0; i < 2; ++i) label.data()[static_cast<std::size_t>(8 + i)] = 1.0;
        label.data()[16] = 1.0;
        auto logits = Tensor::zeros({3, 2, 2, 2});
        for (std::int64_t i = 0; i < 24; ++i) {
            logits.data()[static_cast<std::size_t>(i)] =
                label.value_at(i) > 0.5 ? 10.0 : -10.0;
        }
        CHECK(soft_dice_loss(logits, label).item() < 1e-3);
    }

    SUBCASE("uniform half-probability prediction on a 2^3 example") {
        // p = 0.5 everywhere; one region channel with |G| = 4 of 8 voxels
        auto label = Tensor::zeros({3, 2, 2, 2});
        for (std::int64_t i = 0; i < 4; ++i) label.data()[static_cast<std::size_t>(i)] = 1.0;
        auto logits = Tensor::zeros({3, 2, 2, 2});  // sigmoid(0) = 0.5
        const double s = 1e-5;
        // per channel: (2*0.5*|G| + s) / (4 + |G| + s), |G| = 4, 0, 0
        const double d0 = (2 * 0.5 * 4 + s) / (4.0 + 4.0 + s);
        const double d1 = (0.0 + s) / (4.0 + 0.0 + s);
        const double want = 1.0 - (d0 + d1 + d1) / 3.0;
        CHECK(soft_dice_loss(logits, label).item() == doctest::Approx(want).epsilon(1e-9));
    }

    SUBCASE("empty label with saturated negative logits is near zero via smoothing") {
        auto label = Tensor::zeros({3, 2, 2, 2});
        auto logits = Tensor::full({3, 2, 2, 2}, -30.0);
        CHECK(soft_dice_loss(logits, label).item() < 1e-3);
    }

    CHECK_THROWS_AS(soft_dice_loss(Tensor::zeros({3, 2, 2, 2}), Tensor::zeros({3, 2, 2, 4})),
                    shape_error);
}

TEST_CASE("total loss composition") {
    auto cfg = tiny_config();
    SegNet teacher(cfg.net, 1), student(cfg.net, 2);
    Rng rng(6);
    auto x = random_tensor({4, 8, 8, 8}, rng, 0.0, 1.0);
    auto label = generate_case(3, 8, 8, 8).label;

    ForwardTrace tt;
    {
        NoGradGuard ng;
        tt = teacher.forward(x);
    }
    auto ts = student.forward(x);
    auto adv = Tensor::scalar(0.4);

    LossWeights w;
    w.lambda1 = 0.3;
    w.lambda2 = 1.7;
    w.lambda3 = 0.9;
    w.lambda4 = 2.0;

    SUBCASE("equals the dot product of weights with component losses") {
        auto out = total_loss(tt, ts, adv, label, w, true, true, true);
        const double recomposed = w.lambda1 * out.ms_tkd_value() + w.lambda2 * out.logit_value() +
                                  w.lambda3 * out.gsme_value() + w.lambda4 * out.dice_value();
        CHECK(std::abs(out.total.item() - recomposed) <= 1e-12);
    }

    SUBCASE("flags zero their terms") {
        auto no_mstkd = total_loss(tt, ts, adv, label, w, false, true, true);
        CHECK_FALSE(no_mstkd.ms_tkd.defined());
        CHECK(no_mstkd.ms_tkd_value() == 0.0);

        auto no_gsme = total_loss(tt, ts, adv, label, w, true, false, true);
        CHECK(no_gsme.gsme_value() == 0.0);

        // slkd off removes the KL part but keeps the logit MSE
        auto no_slkd = total_loss(tt, ts, adv, label, w, true, true, false);
        CHECK(no_slkd.logit_value() ==
              doctest::Approx(w.lambda_mse * logit_mse(tt.logits, ts.logits).item()).epsilon(1e-12));

        // everything off leaves pure supervision
        auto supervised = total_loss(ForwardTrace{}, ts, Tensor(), label, w, false, false, false);
        CHECK(supervised.total.item() ==
              doctest::Approx(w.lambda4 * supervised.dice_value()).epsilon(1e-12));
        CHECK(supervised.logit_value() == 0.0);
    }

    SUBCASE("lambda weights zero terms as well") {
        LossWeights wz = w;
        wz.lambda2 = 0.0;
        wz.lambda3 = 0.0;
        wz.lambda4 = 0.0;
        auto out = total_loss(tt, ts, adv, label, wz, true, true, true);
        CHECK(out.total.item() ==
              doctest::Approx(wz.lambda1 * out.ms_tkd_value()).epsilon(1e-12));
    }

    SUBCASE("identical traces with zero adv make every distillation term vanish") {
        auto out = total_loss(ts, ts, Tensor::scalar(0.0), label, w, true, true, true);
        CHECK(out.ms_tkd_value() == 0.0);
        CHECK(out.logit_value() == 0.0);
        CHECK(out.gsme_value() == 0.0);
        CHECK(out.total.item() == doctest::Approx(w.lambda4 * out.dice_value()).epsilon(1e-12));
    }
}

TEST_CASE("teacher training smoke") {
    auto cfg = tiny_config();
    cfg.epochs = 5;
    auto ds = tiny_dataset(5);

    auto result = train_teacher(cfg, ds);
    REQUIRE(result.log.size() == 5);
    CHECK(result.log.back().dice < result.log.front().dice);  // the loss trends down
    CHECK(result.teacher_reads == 0);

    SUBCASE("bit-exact reproducibility") {
        auto again = train_teacher(cfg, ds);
        CHECK(same_tensors(result.checkpoint, again.checkpoint));
        CHECK(result.log.back().total == again.log.back().total);
    }

    SUBCASE("empty split and zero epochs are rejected") {
        TrainConfig bad = cfg;
        bad.epochs = 0;
        CHECK_THROWS_AS(train_teacher(bad, ds), value_error);
        Dataset empty = ds;
        empty.train_ids.clear();
        CHECK_THROWS_AS(train_teacher(cfg, empty), value_error);
    }
}

TEST_CASE("student training smoke") {
    auto cfg = tiny_config();
    cfg.epochs = 2;
    auto ds = tiny_dataset(5);
    auto teacher = train_teacher(cfg, ds);

    SUBCASE("teacher stays frozen and masks are sampled") {
        auto frozen_before = teacher.checkpoint;  // snapshot already detached
        TrainConfig scfg = cfg;
        scfg.seed = 9;
        auto student = train_student(scfg, ds, teacher.checkpoint);
        CHECK(same_tensors(teacher.checkpoint, frozen_before));
        std::int64_t draws = 0;
        for (auto c : student.mask_histogram) draws += c;
        CHECK(draws == 2 * 4);  // epochs * train cases
        CHECK(student.teacher_reads == draws);
        REQUIRE(student.log.size() == 2);
        CHECK(student.discriminator.size() == 6);
    }

    SUBCASE("all distillation flags off never touches the teacher") {
        TrainConfig scfg = cfg;
        scfg.use_ms_tkd = scfg.use_gsme = scfg.use_slkd = false;
        auto student = train_student(scfg, ds, teacher.checkpoint);
        CHECK(student.teacher_reads == 0);
        CHECK(student.discriminator.empty());
        for (const auto& row : student.log) {
            CHECK(row.ms_tkd == 0.0);
            CHECK(row.logit == 0.0);
            CHECK(row.gsme == 0.0);
        }
    }

    SUBCASE("same seed reproduces the checkpoint bit-exactly") {
        TrainConfig scfg = cfg;
        scfg.seed = 11;
        auto a = train_student(scfg, ds, teacher.checkpoint);
        auto b = train_student(scfg, ds, teacher.checkpoint);
        CHECK(same_tensors(a.checkpoint, b.checkpoint));
        CHECK(a.mask_histogram == b.mask_histogram);
    }

    SUBCASE("incompatible teacher checkpoint is rejected") {
        auto broken = teacher.checkpoint;
        broken.pop_back();
        CHECK_THROWS_AS(train_student(cfg, ds, broken), value_error);
    }
}

TEST_CASE("evaluation grid") {
    auto ds = tiny_dataset(5);

    SUBCASE("an oracle predictor scores perfectly") {
        auto oracle = [](const Tensor&, const VolumeCase& c) {
            return add_scalar(mul_scalar(c.label.detach(), 20.0), -10.0);
        };
        auto result = evaluate_predictions(ds, oracle);
        REQUIRE(result.rows.size() == 45);
        REQUIRE(result.region_averages.size() == 3);
        for (const auto& row : result.rows) {
            CHECK(row.dice == 1.0);
            REQUIRE(row.hd95.has_value());
            CHECK(*row.hd95 == 0.0);
        }
        for (const auto& avg : result.region_averages) {
            CHECK(avg.dice == 1.0);
            CHECK(*avg.hd95 == 0.0);
        }
    }

    SUBCASE("rows follow the combination grid order") {
        auto oracle = [](const Tensor&, const VolumeCase& c) {
            return add_scalar(mul_scalar(c.label.detach(), 20.0), -10.0);
        };
        auto result = evaluate_predictions(ds, oracle);
        const auto& combos = modality_combinations();
        for (std::size_t mi = 0; mi < combos.size(); ++mi) {
            for (std::size_t r = 0; r < 3; ++r) {
                CHECK(result.rows[mi * 3 + r].mask.bits() == combos[mi].bits());
                CHECK(result.rows[mi * 3 + r].region == kRegionNames[r]);
            }
        }
    }

    SUBCASE("a trained model evaluates deterministically") {
        auto cfg = tiny_config();
        cfg.epochs = 1;
        auto teacher = train_teacher(cfg, ds);
        auto r1 = evaluate_model(cfg.net, teacher.checkpoint, ds);
        auto r2 = evaluate_model(cfg.net, teacher.checkpoint, ds);
        REQUIRE(r1.rows.size() == r2.rows.size());
        for (std::size_t i = 0; i < r1.rows.size(); ++i) {
            CHECK(r1.rows[i].dice == r2.rows[i].dice);
            CHECK(r1.rows[i].hd95 == r2.rows[i].hd95);
        }
    }

    SUBCASE("empty test split is rejected") {
        Dataset empty = ds;
        empty.test_ids.clear();
        CHECK_THROWS_AS(evaluate_predictions(empty, [](const Tensor&, const VolumeCase& c) {
                            return c.label.detach();
                        }),
                        value_error);
    }
}

TEST_CASE("csv and table emissions") {
    namespace fs = std::filesystem;
    auto ds = tiny_dataset(5);
    auto oracle = [](const Tensor&, const VolumeCase& c) {
        return add_scalar(mul_scalar(c.label.detach(), 20.0), -10.0);
    };
    auto result = evaluate_predictions(ds, oracle);

    write_eval_csv("eval_out.csv", result);
    std::ifstream is("eval_out.csv");
    std::string line;
    int rows = 0;
    std::getline(is, line);
    CHECK(line == "mask_bits,region,dice,hd95");
    while (std::getline(is, line)) rows++;
    CHECK(rows == 48);  // 45 cells + 3 averages

    write_eval_markdown("eval_out.md", result);
    std::ifstream md("eval_out.md");
    std::stringstream buf;
    buf << md.rdbuf();
    const auto text = buf.str();
    CHECK(text.find("| WT |") != std::string::npos);
    // 15 combination columns + region + average
    const auto header_pos = text.find("| Region |");
    REQUIRE(header_pos != std::string::npos);
    const auto header = text.substr(header_pos, text.find('\n', header_pos) - header_pos);
    int pipes = 0;
    for (char c : header) pipes += c == '|';
    CHECK(pipes == 18);  // region + 15 masks + avg + trailing

    write_dice_barchart_svg("eval_out.svg", result);
    std::ifstream svg("eval_out.svg");
    std::stringstream sbuf;
    sbuf << svg.rdbuf();
    CHECK(sbuf.str().find("<svg") != std::string::npos);
    CHECK(sbuf.str().find("rect") != std::string::npos);

    fs::remove("eval_out.csv");
    fs::remove("eval_out.md");
    fs::remove("eval_out.svg");
}
