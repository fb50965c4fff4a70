#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mstkd/net.hpp"
#include "mstkd/verify.hpp"

#include "test_util.hpp"

using namespace mstkd;
using testutil::random_tensor;

namespace {

Tensor random_input(const NetConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    return random_tensor({cfg.in_channels, cfg.H, cfg.W, cfg.D}, rng, 0.0, 1.0);
}

}  // namespace

TEST_CASE("sequence length follows the grid formula") {
    NetConfig cfg;
    CHECK(cfg.seq_len() == 8);  // 16^3 -> 2^3 tokens at P=1

    NetConfig p2 = cfg;
    p2.patch = 2;
    CHECK(p2.seq_len() == 1);

    // five distinct configurations against (H/8)(W/8)(D/8)/P^3
    struct Case {
        std::int64_t h, w, d;
        int p;
    };
    for (const auto& c : {Case{16, 16, 16, 1}, Case{16, 16, 16, 2}, Case{24, 16, 16, 1},
                          Case{32, 16, 24, 1}, Case{16, 32, 16, 2}}) {
        NetConfig n = cfg;
        n.H = c.h;
        n.W = c.w;
        n.D = c.d;
        n.patch = c.p;
        n.validate();
        const auto p3 = static_cast<std::int64_t>(c.p) * c.p * c.p;
        CHECK(n.seq_len() == (c.h / 8) * (c.w / 8) * (c.d / 8) / p3);
    }

    NetConfig bad = cfg;
    bad.H = 12;  // not a multiple of 8
    CHECK_THROWS_AS(bad.validate(), value_error);
    NetConfig badk = cfg;
    badk.embed_dim = 30;  // not divisible by 4 heads
    CHECK_THROWS_AS(badk.validate(), value_error);
}

TEST_CASE("patch_embed shapes and errors") {
    NetConfig cfg;
    SegNet net(cfg, 1);
    Rng rng(2);
    auto bneck = random_tensor({32 * cfg.base_channels, 2, 2, 2}, rng);
    auto z = net.patch_embed(bneck);
    CHECK(z.shape() == Shape{8, cfg.embed_dim});

    NetConfig p2 = cfg;
    p2.patch = 2;
    SegNet net2(p2, 1);
    auto z2 = net2.patch_embed(bneck);
    CHECK(z2.shape() == Shape{1, cfg.embed_dim});

    NetConfig p3 = cfg;
    p3.patch = 2;
    SegNet net3(p3, 1);
    auto odd = random_tensor({32 * cfg.base_channels, 3, 2, 2}, rng);
    CHECK_THROWS_AS(net3.patch_embed(odd), shape_error);
}

TEST_CASE("attention is a distribution per row") {
    NetConfig cfg;
    SegNet net(cfg, 3);
    Rng rng(4);

    SUBCASE("single token attends to itself") {
        auto z = random_tensor({1, cfg.embed_dim}, rng);
        auto [z_out, attn] = net.msa_block(0, z);
        CHECK(attn.shape() == Shape{cfg.heads, 1, 1});
        for (std::int64_t i = 0; i < cfg.heads; ++i) CHECK(attn.value_at(i) == doctest::Approx(1.0));
    }

    SUBCASE("zeroed projections give uniform rows") {
        SegNet zn(cfg, 3);
        zn.zero_block_projections(0);
        auto z = Tensor::zeros({8, cfg.embed_dim});
        auto [z_out, attn] = zn.msa_block(0, z);
        for (std::int64_t i = 0; i < attn.numel(); ++i) {
            CHECK(attn.value_at(i) == doctest::Approx(1.0 / 8.0).epsilon(1e-12));
        }
    }

    SUBCASE("random tokens: rows sum to one") {
        auto z = random_tensor({8, cfg.embed_dim}, rng);
        auto [z_out, attn] = net.msa_block(1, z);
        const auto N = attn.extent(1);
        for (std::int64_t h = 0; h < cfg.heads; ++h) {
            for (std::int64_t r = 0; r < N; ++r) {
                double s = 0.0;
                for (std::int64_t c = 0; c < N; ++c) s += attn.value_at((h * N + r) * N + c);
                CHECK(std::abs(s - 1.0) <= 1e-6);
            }
        }
    }
}

TEST_CASE("encoder shapes") {
    NetConfig cfg;
    SegNet net(cfg, 5);
    auto enc = net.encoder_forward(random_input(cfg, 6));
    CHECK(enc.bottleneck.shape() == Shape{128, 2, 2, 2});  // 32*C at 1/8 scale
    CHECK(enc.penult.shape() == Shape{64, 4, 4, 4});
    CHECK(enc.f_enc.shape() == Shape{64});
    CHECK(enc.skips[0].extent(1) == 16);
    CHECK(enc.skips[1].extent(1) == 8);

    Rng rng(7);
    CHECK_THROWS_AS(net.encoder_forward(random_tensor({3, 16, 16, 16}, rng)), shape_error);
}

TEST_CASE("full forward trace") {
    NetConfig cfg;
    SegNet net(cfg, 8);
    auto x = random_input(cfg, 9);
    auto trace = net.forward(x);

    CHECK(trace.logits.shape() == Shape{3, 16, 16, 16});
    REQUIRE(trace.attn.size() == 3);
    REQUIRE(trace.tokens.size() == 3);
    for (const auto& a : trace.attn) CHECK(a.shape() == Shape{4, 8, 8});
    for (const auto& t : trace.tokens) CHECK(t.shape() == Shape{8, 32});
    CHECK(trace.f_t.shape() == Shape{32, 2, 2, 2});
    CHECK(trace.f_dec.shape() == Shape{128, 2, 2, 2});
    CHECK(trace.fused.shape() == Shape{96, 2, 2, 2});

    // attention rows sum to 1 +- 1e-6 in every block
    for (const auto& a : trace.attn) {
        for (std::int64_t h = 0; h < 4; ++h) {
            for (std::int64_t r = 0; r < 8; ++r) {
                double s = 0.0;
                for (std::int64_t c = 0; c < 8; ++c) s += a.value_at((h * 8 + r) * 8 + c);
                CHECK(std::abs(s - 1.0) <= 1e-6);
            }
        }
    }

    SUBCASE("deterministic forward") {
        auto again = net.forward(x);
        CHECK(again.logits.data() == trace.logits.data());
        CHECK(again.f_dec.data() == trace.f_dec.data());
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(again.attn[i].data() == trace.attn[i].data());
            CHECK(again.tokens[i].data() == trace.tokens[i].data());
        }
    }

    SUBCASE("teacher and student traces are shape-identical") {
        SegNet other(cfg, 1234);
        auto t2 = other.forward(x);
        CHECK(t2.logits.shape() == trace.logits.shape());
        CHECK(t2.fused.shape() == trace.fused.shape());
        CHECK(t2.f_t.shape() == trace.f_t.shape());
        for (std::size_t i = 0; i < 3; ++i) {
            CHECK(t2.attn[i].shape() == trace.attn[i].shape());
            CHECK(t2.tokens[i].shape() == trace.tokens[i].shape());
        }
    }
}

TEST_CASE("end-to-end gradient through one encoder weight") {
    NetConfig cfg;
    SegNet net(cfg, 10);
    auto x = random_input(cfg, 11);

    auto params = net.named_parameters();
    Tensor enc_w;
    for (auto& nt : params) {
        if (nt.name == "enc0.w") enc_w = nt.tensor;
    }
    REQUIRE(enc_w.defined());

    net.zero_grads();
    backward(sum_all(net.forward(x).logits));
    const std::size_t j = 7;  // an arbitrary weight element
    const double analytic = enc_w.grad()[j];

    const double h = 1e-5;
    const double saved = enc_w.data()[j];
    NoGradGuard ng;
    enc_w.data()[j] = saved + h;
    const double fp = sum_all(net.forward(x).logits).item();
    enc_w.data()[j] = saved - h;
    const double fm = sum_all(net.forward(x).logits).item();
    enc_w.data()[j] = saved;
    const double numeric = (fp - fm) / (2 * h);

    CHECK(std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-3}) <
          1e-3);
}

TEST_CASE("checkpoint round-trip restores the forward pass") {
    NetConfig cfg;
    SegNet net(cfg, 12);
    auto x = random_input(cfg, 13);
    auto before = net.forward(x).logits;

    const std::string path = "net_roundtrip.ckpt";
    save_checkpoint(path, net.named_parameters());
    SegNet restored(cfg, 999);  // different init
    restored.load_parameters(load_checkpoint(path));
    auto after = restored.forward(x).logits;
    CHECK(after.data() == before.data());

    SegNet wrong(cfg, 1);
    auto ckpt = load_checkpoint(path);
    ckpt.pop_back();
    CHECK_THROWS_AS(wrong.load_parameters(ckpt), value_error);
}
