#include "mstkd/net.hpp"

#include <cmath>

namespace mstkd {

namespace {

// Layer norm across the channel axis of a (C, H, W, D) map.
Tensor channel_norm(const Tensor& x, const Tensor& g, const Tensor& b) {
    const std::int64_t C = x.extent(0);
    const std::int64_t V = x.numel() / C;
    auto t = transpose(reshape(x, {C, V}));
    t = layer_norm(t, g, b);
    return reshape(transpose(t), x.shape());
}

}  // namespace

void NetConfig::validate() const {
    if (in_channels != 4) throw value_error("NetConfig: expected 4 input modalities");
    if (base_channels < 1 || embed_dim < 1 || heads < 1 || patch < 1) {
        throw value_error("NetConfig: channel/embedding parameters must be positive");
    }
    if (out_regions != 3) throw value_error("NetConfig: expected 3 output regions");
    if (blocks != 3) throw value_error("NetConfig: expected 3 transformer blocks");
    if (embed_dim % heads != 0) {
        throw value_error("NetConfig: embed_dim " + std::to_string(embed_dim) +
                          " not divisible by heads " + std::to_string(heads));
    }
    const std::int64_t q = 8ll * patch;
    if (H % q || W % q || D % q) {
        throw value_error("NetConfig: extents must be multiples of 8*patch = " + std::to_string(q));
    }
}

SegNet::ConvBlock SegNet::make_conv(const std::string& name, std::int64_t cin, std::int64_t cout,
                                    int k, Rng& rng) {
    const double bound = std::sqrt(1.0 / static_cast<double>(cin * k * k * k));
    ConvBlock blk;
    blk.w = Tensor::uniform({cout, cin, k, k, k}, bound, rng, true);
    blk.b = Tensor::zeros({cout}, true);
    blk.ln_g = Tensor::full({cout}, 1.0, true);
    blk.ln_b = Tensor::zeros({cout}, true);
    registry_.emplace_back(name + ".w", blk.w);
    registry_.emplace_back(name + ".b", blk.b);
    registry_.emplace_back(name + ".ln_g", blk.ln_g);
    registry_.emplace_back(name + ".ln_b", blk.ln_b);
    return blk;
}

Tensor SegNet::apply_conv(const ConvBlock& blk, const Tensor& x, int stride, int pad, bool act) const {
    auto y = conv3d(x, blk.w, blk.b, stride, pad);
    y = channel_norm(y, blk.ln_g, blk.ln_b);
    return act ? silu(y) : y;
}

SegNet::SegNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const std::int64_t C = cfg_.base_channels;
    const std::int64_t K = cfg_.embed_dim;
    const std::int64_t Kh = cfg_.head_dim();
    const std::int64_t N = cfg_.seq_len();
    const std::int64_t P = cfg_.patch;
    const std::int64_t tok_in = P * P * P * 32 * C;

    enc0_ = make_conv("enc0", cfg_.in_channels, C, 3, rng);
    enc1_ = make_conv("enc1", C, 4 * C, 3, rng);
    enc2_ = make_conv("enc2", 4 * C, 16 * C, 3, rng);
    enc3_ = make_conv("enc3", 16 * C, 32 * C, 3, rng);

    proj_w_ = Tensor::uniform({tok_in, K}, std::sqrt(1.0 / static_cast<double>(tok_in)), rng, true);
    registry_.emplace_back("proj.w", proj_w_);
    pos_emb_ = Tensor::uniform({N, K}, std::sqrt(1.0 / static_cast<double>(K)), rng, true);
    registry_.emplace_back("pos_emb", pos_emb_);

    const double wb = std::sqrt(1.0 / static_cast<double>(K));
    for (int i = 0; i < cfg_.blocks; ++i) {
        const std::string p = "blk" + std::to_string(i);
        TransformerBlock blk;
        blk.ln1_g = Tensor::full({K}, 1.0, true);
        blk.ln1_b = Tensor::zeros({K}, true);
        registry_.emplace_back(p + ".ln1_g", blk.ln1_g);
        registry_.emplace_back(p + ".ln1_b", blk.ln1_b);
        for (int h = 0; h < cfg_.heads; ++h) {
            const std::string hp = p + ".h" + std::to_string(h);
            blk.wq.push_back(Tensor::uniform({K, Kh}, wb, rng, true));
            blk.wk.push_back(Tensor::uniform({K, Kh}, wb, rng, true));
            blk.wv.push_back(Tensor::uniform({K, Kh}, wb, rng, true));
            registry_.emplace_back(hp + ".wq", blk.wq.back());
            registry_.emplace_back(hp + ".wk", blk.wk.back());
            registry_.emplace_back(hp + ".wv", blk.wv.back());
        }
        blk.wo = Tensor::uniform({static_cast<std::int64_t>(cfg_.heads) * Kh, K}, wb, rng, true);
        registry_.emplace_back(p + ".wo", blk.wo);
        blk.ln2_g = Tensor::full({K}, 1.0, true);
        blk.ln2_b = Tensor::zeros({K}, true);
        registry_.emplace_back(p + ".ln2_g", blk.ln2_g);
        registry_.emplace_back(p + ".ln2_b", blk.ln2_b);
        blk.mlp_w1 = Tensor::uniform({K, 2 * K}, wb, rng, true);
        blk.mlp_b1 = Tensor::zeros({2 * K}, true);
        blk.mlp_w2 = Tensor::uniform({2 * K, K}, std::sqrt(1.0 / static_cast<double>(2 * K)), rng, true);
        blk.mlp_b2 = Tensor::zeros({K}, true);
        registry_.emplace_back(p + ".mlp_w1", blk.mlp_w1);
        registry_.emplace_back(p + ".mlp_b1", blk.mlp_b1);
        registry_.emplace_back(p + ".mlp_w2", blk.mlp_w2);
        registry_.emplace_back(p + ".mlp_b2", blk.mlp_b2);
        blocks_.push_back(std::move(blk));
    }

    token_conv_ = make_conv("token_conv", K, K, 3, rng);
    dec_in_ = make_conv("dec_in", 16 * C + K, 32 * C, 3, rng);
    dec2_ = make_conv("dec2", 32 * C + 16 * C, 16 * C, 3, rng);
    dec1_ = make_conv("dec1", 16 * C + 4 * C, 4 * C, 3, rng);
    dec0_ = make_conv("dec0", 4 * C + C, C, 3, rng);

    head_w_ = Tensor::uniform({cfg_.out_regions, C, 1, 1, 1},
                              std::sqrt(1.0 / static_cast<double>(C)), rng, true);
    head_b_ = Tensor::zeros({cfg_.out_regions}, true);
    registry_.emplace_back("head.w", head_w_);
    registry_.emplace_back("head.b", head_b_);
}

SegNet::EncoderOut SegNet::encoder_forward(const Tensor& x) const {
    if (x.rank() != 4 || x.extent(0) != cfg_.in_channels) {
        throw shape_error("encoder: expected (" + std::to_string(cfg_.in_channels) +
                          ",H,W,D) input, got " + shape_str(x.shape()));
    }
    if (x.extent(1) != cfg_.H || x.extent(2) != cfg_.W || x.extent(3) != cfg_.D) {
        throw shape_error("encoder: input extents " + shape_str(x.shape()) +
                          " do not match the configuration");
    }
    EncoderOut out;
    auto s0 = apply_conv(enc0_, x, 1, 1, true);
    auto s1 = apply_conv(enc1_, s0, 2, 1, true);
    auto s2 = apply_conv(enc2_, s1, 2, 1, true);
    out.bottleneck = apply_conv(enc3_, s2, 2, 1, true);
    out.skips = {s0, s1, s2};
    out.penult = s2;
    out.f_enc = global_max_pool(s2);
    return out;
}

Tensor SegNet::patch_embed(const Tensor& bottleneck) const {
    if (bottleneck.rank() != 4) {
        throw shape_error("patch_embed: expected (C,H,W,D), got " + shape_str(bottleneck.shape()));
    }
    const std::int64_t Cb = bottleneck.extent(0);
    const std::int64_t P = cfg_.patch;
    for (int d = 1; d <= 3; ++d) {
        if (bottleneck.extent(d) % P != 0) {
            throw shape_error("patch_embed: extents " + shape_str(bottleneck.shape()) +
                              " not divisible by patch side " + std::to_string(P));
        }
    }
    const std::int64_t gh = bottleneck.extent(1) / P;
    const std::int64_t gw = bottleneck.extent(2) / P;
    const std::int64_t gd = bottleneck.extent(3) / P;
    Tensor rows;
    if (P == 1) {
        rows = transpose(reshape(bottleneck, {Cb, gh * gw * gd}));
    } else {
        // chunk order is row-major over the token grid; within a chunk,
        // channel-major then local voxel
        auto t = reshape(bottleneck, {Cb, gh, P, gw, P, gd, P});
        t = permute(t, {1, 3, 5, 0, 2, 4, 6});
        rows = reshape(t, {gh * gw * gd, Cb * P * P * P});
    }
    return matmul(rows, proj_w_);
}

std::pair<Tensor, Tensor> SegNet::msa_block(int i, const Tensor& z) const {
    const auto& blk = blocks_[static_cast<std::size_t>(i)];
    const std::int64_t N = z.extent(0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(cfg_.head_dim()));

    auto h = layer_norm(z, blk.ln1_g, blk.ln1_b);
    std::vector<Tensor> heads_out;
    std::vector<Tensor> attn_slices;
    for (int hd = 0; hd < cfg_.heads; ++hd) {
        const auto hu = static_cast<std::size_t>(hd);
        auto q = matmul(h, blk.wq[hu]);
        auto k = matmul(h, blk.wk[hu]);
        auto v = matmul(h, blk.wv[hu]);
        auto a = softmax(mul_scalar(matmul(q, transpose(k)), scale), 1);
        heads_out.push_back(matmul(a, v));
        attn_slices.push_back(reshape(a, {1, N, N}));
    }
    auto attn = concat(attn_slices, 0);
    auto sa = matmul(concat(heads_out, 1), blk.wo);
    auto z1 = add(z, sa);

    auto h2 = layer_norm(z1, blk.ln2_g, blk.ln2_b);
    auto m = silu(add_rowvec(matmul(h2, blk.mlp_w1), blk.mlp_b1));
    m = add_rowvec(matmul(m, blk.mlp_w2), blk.mlp_b2);
    return {add(z1, m), attn};
}

ForwardTrace SegNet::forward(const Tensor& x) const {
    ForwardTrace trace;
    auto enc = encoder_forward(x);
    trace.enc_penult = enc.penult;
    trace.f_enc = enc.f_enc;

    auto z = add(patch_embed(enc.bottleneck), pos_emb_);
    for (int i = 0; i < cfg_.blocks; ++i) {
        auto [z_out, attn] = msa_block(i, z);
        z = z_out;
        trace.attn.push_back(attn);
        trace.tokens.push_back(z);
    }

    // token sequence back to a (K, gh, gw, gd) grid, then conv + norm
    const std::int64_t gh = cfg_.grid(cfg_.H), gw = cfg_.grid(cfg_.W), gd = cfg_.grid(cfg_.D);
    auto grid = permute(reshape(z, {gh, gw, gd, cfg_.embed_dim}), {3, 0, 1, 2});
    auto f_t = apply_conv(token_conv_, grid, 1, 1, true);
    if (cfg_.patch > 1) f_t = upsample_nearest(f_t, cfg_.patch);  // back to the 1/8 grid
    trace.f_t = f_t;

    // broadcast pooled encoder feature over the 1/8 grid and fuse with f_t
    const std::int64_t vol8 = (cfg_.H / 8) * (cfg_.W / 8) * (cfg_.D / 8);
    auto ones = Tensor::full({1, vol8}, 1.0);
    auto enc_bcast = reshape(matmul(reshape(trace.f_enc, {trace.f_enc.extent(0), 1}), ones),
                             {trace.f_enc.extent(0), cfg_.H / 8, cfg_.W / 8, cfg_.D / 8});
    trace.fused = concat({enc_bcast, f_t}, 0);

    trace.f_dec = apply_conv(dec_in_, trace.fused, 1, 1, true);
    auto d2 = apply_conv(dec2_, concat({upsample_nearest(trace.f_dec, 2), enc.skips[2]}, 0), 1, 1, true);
    auto d1 = apply_conv(dec1_, concat({upsample_nearest(d2, 2), enc.skips[1]}, 0), 1, 1, true);
    auto d0 = apply_conv(dec0_, concat({upsample_nearest(d1, 2), enc.skips[0]}, 0), 1, 1, true);
    trace.logits = conv3d(d0, head_w_, head_b_, 1, 0);
    return trace;
}

std::vector<NamedTensor> SegNet::named_parameters() const {
    std::vector<NamedTensor> out;
    out.reserve(registry_.size());
    for (const auto& [name, t] : registry_) out.push_back({name, t});
    return out;
}

std::vector<Tensor> SegNet::parameters() const {
    std::vector<Tensor> out;
    out.reserve(registry_.size());
    for (const auto& [name, t] : registry_) out.push_back(t);
    return out;
}

void SegNet::load_parameters(const std::vector<NamedTensor>& ckpt) {
    if (ckpt.size() != registry_.size()) {
        throw value_error("load_parameters: checkpoint has " + std::to_string(ckpt.size()) +
                          " tensors, network has " + std::to_string(registry_.size()));
    }
    for (std::size_t i = 0; i < ckpt.size(); ++i) {
        auto& [name, dst] = registry_[i];
        if (ckpt[i].name != name) {
            throw value_error("load_parameters: expected tensor '" + name + "', found '" +
                              ckpt[i].name + "'");
        }
        if (ckpt[i].tensor.shape() != dst.shape()) {
            throw shape_error("load_parameters: shape mismatch for '" + name + "': " +
                              shape_str(ckpt[i].tensor.shape()) + " vs " + shape_str(dst.shape()));
        }
        dst.data() = ckpt[i].tensor.data();
    }
}

void SegNet::zero_grads() const {
    for (const auto& [name, t] : registry_) const_cast<Tensor&>(t).zero_grad();
}

void SegNet::zero_block_projections(int i) {
    auto& blk = blocks_[static_cast<std::size_t>(i)];
    auto zero = [](Tensor& t) { std::fill(t.data().begin(), t.data().end(), 0.0); };
    for (auto& t : blk.wq) zero(t);
    for (auto& t : blk.wk) zero(t);
    for (auto& t : blk.wv) zero(t);
}

}  // namespace mstkd
