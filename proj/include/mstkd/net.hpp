#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mstkd/serialize.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd {

// Architecture of the shared teacher/student backbone: conv encoder with
// three stride-2 stages, a small transformer over the 1/8-scale grid, and a
// conv decoder with encoder skip connections.
struct NetConfig {
    int in_channels = 4;
    int base_channels = 4;  // C; encoder widths C, 4C, 16C, 32C
    std::int64_t H = 16, W = 16, D = 16;
    int patch = 1;      // P, token chunk side on the 1/8-scale grid
    int embed_dim = 32;  // K
    int heads = 4;       // n
    int blocks = 3;
    int out_regions = 3;  // WT, TC, ET

    void validate() const;
    std::int64_t grid(std::int64_t extent) const { return extent / 8 / patch; }
    std::int64_t seq_len() const { return grid(H) * grid(W) * grid(D); }
    std::int64_t head_dim() const { return embed_dim / heads; }
};

// Everything one forward pass exposes to the distillation losses.
struct ForwardTrace {
    Tensor logits;               // (out_regions, H, W, D)
    std::vector<Tensor> attn;    // per block, (heads, N, N), post-softmax
    std::vector<Tensor> tokens;  // per block, (N, K)
    Tensor enc_penult;           // penultimate encoder feature map (16C, H/4, W/4, D/4)
    Tensor f_enc;                // global max pool of enc_penult, (16C)
    Tensor f_t;                  // transformer feature on the 1/8 grid, (K, H/8, W/8, D/8)
    Tensor f_dec;                // decoder first-conv output, (32C, H/8, W/8, D/8)
    Tensor fused;                // channel concat of broadcast f_enc with f_t
};

class SegNet {
  public:
    SegNet(const NetConfig& cfg, std::uint64_t seed);

    const NetConfig& config() const { return cfg_; }

    ForwardTrace forward(const Tensor& x) const;

    // Sub-passes exposed for direct testing.
    struct EncoderOut {
        std::vector<Tensor> skips;  // full, 1/2, 1/4 scale
        Tensor bottleneck;          // (32C, H/8, W/8, D/8)
        Tensor penult;              // (16C, H/4, W/4, D/4)
        Tensor f_enc;               // (16C)
    };
    EncoderOut encoder_forward(const Tensor& x) const;
    Tensor patch_embed(const Tensor& bottleneck) const;
    // Returns (z_out, attention) for block index i.
    std::pair<Tensor, Tensor> msa_block(int i, const Tensor& z) const;

    std::vector<NamedTensor> named_parameters() const;
    std::vector<Tensor> parameters() const;
    void load_parameters(const std::vector<NamedTensor>& ckpt);
    void zero_grads() const;
    // Zero out every projection of one transformer block (test hook for the
    // uniform-attention degenerate case).
    void zero_block_projections(int i);

  private:
    struct ConvBlock {
        Tensor w, b, ln_g, ln_b;
    };
    struct TransformerBlock {
        Tensor ln1_g, ln1_b;
        std::vector<Tensor> wq, wk, wv;  // per head, (K, K_h)
        Tensor wo;                       // (n*K_h, K)
        Tensor ln2_g, ln2_b;
        Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
    };

    ConvBlock make_conv(const std::string& name, std::int64_t cin, std::int64_t cout, int k, Rng& rng);
    Tensor apply_conv(const ConvBlock& blk, const Tensor& x, int stride, int pad, bool act) const;

    NetConfig cfg_;
    ConvBlock enc0_, enc1_, enc2_, enc3_;
    Tensor proj_w_;    // (P^3 * 32C, K)
    Tensor pos_emb_;   // (N, K)
    std::vector<TransformerBlock> blocks_;
    ConvBlock token_conv_;  // K -> K on the token grid
    ConvBlock dec_in_, dec2_, dec1_, dec0_;
    Tensor head_w_, head_b_;

    std::vector<std::pair<std::string, Tensor>> registry_;
};

}  // namespace mstkd
