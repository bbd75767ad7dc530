#pragma once

#include <string>
#include <vector>

#include "physemu/tokeniser.hpp"

namespace physemu {
namespace proc {

struct ProcessorConfig {
    int64_t blocks = 2;       // reference config: 6
    int64_t embed_dim = 128;  // reference config: 1088
    int64_t heads = 4;        // reference config: 16
    int64_t mlp_ratio = 4;    // SwiGLU expansion
    double drop_path_max = 0.05;
    int64_t latent_dim = 18;
    int64_t max_time = 32; // relative-bias table length (clipped distances)

    static ProcessorConfig reference() {
        ProcessorConfig c;
        c.blocks = 6;
        c.embed_dim = 1088;
        c.heads = 16;
        c.latent_dim = 18;
        return c;
    }

    void validate() const {
        if (blocks < 1) raise<ConfigError>("processor: blocks must be >= 1");
        if (embed_dim % heads != 0) raise<ConfigError>("processor: embed_dim ", embed_dim, " not divisible by heads ", heads);
        if ((embed_dim / heads) % 4 != 0)
            raise<ConfigError>("processor: head dim ", embed_dim / heads, " must be divisible by 4 for axial rotary pairs");
        if (latent_dim < 1) raise<ConfigError>("processor: latent_dim must be >= 1");
        if (max_time < 1) raise<ConfigError>("processor: max_time must be >= 1");
        if (drop_path_max < 0.0 || drop_path_max >= 1.0) raise<ConfigError>("processor: drop_path_max must lie in [0, 1)");
    }

    // Stochastic-depth rate of block i: linear ramp from 0 to drop_path_max.
    double drop_rate(int64_t block) const {
        if (blocks <= 1) return 0.0;
        return drop_path_max * double(block) / double(blocks - 1);
    }
};

// ----------------------------- processor block -----------------------------

// Pre-norm residual block: full spatial attention (axial RoPE), causal
// temporal attention (learned relative position biases), SwiGLU MLP.
template <class T>
struct ProcessorBlock {
    RmsGroupNorm<T> norm_spatial, norm_temporal, norm_mlp;
    Linear<T> sq, sk, sv, so;
    Linear<T> tq, tk, tv, to;
    Var<T> rel_bias; // (heads, max_time)
    Linear<T> mlp_w1, mlp_w3, mlp_w2;
    int64_t heads = 0;
    double rate = 0.0;

    ProcessorBlock() = default;
    ProcessorBlock(const ProcessorConfig& cfg, int64_t index, Rng& rng)
        : norm_spatial(cfg.embed_dim, cfg.heads),
          norm_temporal(cfg.embed_dim, cfg.heads),
          norm_mlp(cfg.embed_dim, cfg.heads),
          sq(cfg.embed_dim, cfg.embed_dim, rng),
          sk(cfg.embed_dim, cfg.embed_dim, rng),
          sv(cfg.embed_dim, cfg.embed_dim, rng),
          so(cfg.embed_dim, cfg.embed_dim, rng),
          tq(cfg.embed_dim, cfg.embed_dim, rng),
          tk(cfg.embed_dim, cfg.embed_dim, rng),
          tv(cfg.embed_dim, cfg.embed_dim, rng),
          to(cfg.embed_dim, cfg.embed_dim, rng),
          mlp_w1(cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, rng),
          mlp_w3(cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio, rng),
          mlp_w2(cfg.embed_dim * cfg.mlp_ratio, cfg.embed_dim, rng),
          heads(cfg.heads),
          rate(cfg.drop_rate(index)) {
        rel_bias = Var<T>::leaf(Tensor<T>::zeros({cfg.heads, cfg.max_time}), true);
    }

    // x: (B, T, H, W, D). The drop-path mask (one keep/scale factor per
    // sample) is drawn by the caller; an empty mask means identity.
    Var<T> operator()(const Var<T>& x, const Tensor<T>& dp_mask) const {
        const auto& s = x.val().shape();
        const int64_t B = s[0], Tt = s[1], H = s[2], W = s[3], D = s[4];
        using O = VarOps<T>;
        using N = NN<T>;

        auto droppath = [&](const Var<T>& branch) {
            if (dp_mask.numel() == 0) return branch;
            return O::scale_rows(branch, dp_mask);
        };

        // full spatial attention within each frame
        Var<T> y;
        {
            Var<T> h = norm_spatial(x);
            Var<T> rows = N::reshape(h, {B * Tt, H * W, D});
            Var<T> q = N::rope_axial(N::split_heads(sq(rows), heads), H, W);
            Var<T> k = N::rope_axial(N::split_heads(sk(rows), heads), H, W);
            Var<T> v = N::split_heads(sv(rows), heads);
            Var<T> att = N::merge_heads(N::attention(q, k, v, /*causal=*/false, {}));
            Var<T> out = N::reshape(so(att), {B, Tt, H, W, D});
            y = O::add(x, droppath(out));
        }

        // causal temporal attention along each spatial location
        {
            Var<T> h = N::time_inner(norm_temporal(y)); // (B, H, W, T, D)
            Var<T> rows = N::reshape(h, {B * H * W, Tt, D});
            Var<T> q = N::split_heads(tq(rows), heads);
            Var<T> k = N::split_heads(tk(rows), heads);
            Var<T> v = N::split_heads(tv(rows), heads);
            Var<T> att = N::merge_heads(N::attention(q, k, v, /*causal=*/true, rel_bias));
            Var<T> out = N::time_outer(N::reshape(to(att), {B, H, W, Tt, D}));
            y = O::add(y, droppath(out));
        }

        // SwiGLU MLP
        {
            Var<T> h = norm_mlp(y);
            Var<T> gate = O::silu(mlp_w1(h));
            Var<T> lin = mlp_w3(h);
            Var<T> out = mlp_w2(O::mul(gate, lin));
            y = O::add(y, droppath(out));
        }
        return y;
    }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        norm_spatial.collect(out, prefix + ".norm_spatial");
        sq.collect(out, prefix + ".spatial.q");
        sk.collect(out, prefix + ".spatial.k");
        sv.collect(out, prefix + ".spatial.v");
        so.collect(out, prefix + ".spatial.o");
        norm_temporal.collect(out, prefix + ".norm_temporal");
        tq.collect(out, prefix + ".temporal.q");
        tk.collect(out, prefix + ".temporal.k");
        tv.collect(out, prefix + ".temporal.v");
        to.collect(out, prefix + ".temporal.o");
        out.add(prefix + ".temporal.rel_bias", rel_bias);
        norm_mlp.collect(out, prefix + ".norm_mlp");
        mlp_w1.collect(out, prefix + ".mlp.w1");
        mlp_w3.collect(out, prefix + ".mlp.w3");
        mlp_w2.collect(out, prefix + ".mlp.w2");
    }
};

// ----------------------------- processor -----------------------------

template <class T>
class Processor {
public:
    Processor() = default;
    Processor(ProcessorConfig cfg, Rng& rng) : cfg_(cfg) {
        cfg_.validate();
        for (int64_t i = 0; i < cfg_.blocks; ++i) blocks_.emplace_back(cfg_, i, rng);
        final_norm_ = RmsGroupNorm<T>(cfg_.embed_dim, cfg_.heads);
    }

    const ProcessorConfig& config() const { return cfg_; }

    // tokens: (B, T, H, W, D). In train mode a drop-path mask is drawn per
    // block and sample from `rng`; eval mode is deterministic.
    Var<T> forward(const Var<T>& tokens, bool train_mode, Rng* rng = nullptr) const {
        check_shape(tokens.val().rank() == 5 && tokens.val().size(4) == cfg_.embed_dim,
                    "processor: tokens must be (B, T, H, W, " + std::to_string(cfg_.embed_dim) + "), got " + tokens.val().shape_str());
        check_shape(tokens.val().size(1) <= cfg_.max_time,
                    strcat_msg("processor: ", tokens.val().size(1), " frames exceed max_time ", cfg_.max_time));
        if (train_mode && cfg_.drop_path_max > 0.0 && rng == nullptr)
            raise<ConfigError>("processor: train mode with stochastic depth needs an RNG");
        const int64_t B = tokens.val().size(0);
        Var<T> h = tokens;
        for (const auto& blk : blocks_) {
            Tensor<T> mask; // empty = identity
            if (train_mode && blk.rate > 0.0) {
                mask = Tensor<T>({B});
                for (int64_t b = 0; b < B; ++b)
                    mask[b] = rng->uniform() < blk.rate ? T(0) : static_cast<T>(1.0 / (1.0 - blk.rate));
            }
            h = blk(h, mask);
        }
        return final_norm_(h);
    }

    NamedParams<T> named_parameters() const {
        NamedParams<T> p;
        for (size_t i = 0; i < blocks_.size(); ++i) blocks_[i].collect(p, "block" + std::to_string(i));
        final_norm_.collect(p, "final_norm");
        return p;
    }

private:
    ProcessorConfig cfg_;
    std::vector<ProcessorBlock<T>> blocks_;
    RmsGroupNorm<T> final_norm_;
};

// ----------------------------- latent <-> token projection -----------------------------

template <class T>
struct LatentProjection {
    Linear<T> in, out;

    LatentProjection() = default;
    LatentProjection(int64_t latent_dim, int64_t embed_dim, Rng& rng)
        : in(latent_dim, embed_dim, rng), out(embed_dim, latent_dim, rng) {}

    // latent (B, C, T, H, W) -> tokens (B, T, H, W, D)
    Var<T> project_in(const Var<T>& z) const {
        check_shape(z.val().rank() == 5 && z.val().size(1) == in.weight.val().size(1),
                    "project_in: latent channel dim mismatch, got " + z.val().shape_str());
        return in(NN<T>::channels_last(z));
    }

    // tokens (B, T, H, W, D) -> latent (B, C, T, H, W)
    Var<T> project_out(const Var<T>& t) const {
        check_shape(t.val().rank() == 5 && t.val().size(4) == out.weight.val().size(1),
                    "project_out: token dim mismatch, got " + t.val().shape_str());
        return NN<T>::channels_first(out(t));
    }

    void collect(NamedParams<T>& p, const std::string& prefix) const {
        in.collect(p, prefix + ".in");
        out.collect(p, prefix + ".out");
    }
};

// ----------------------------- full emulator -----------------------------

// Tokeniser + projection + processor; the autoregressive rollout model.
template <class T>
struct EmulatorModel {
    tok::Tokeniser<T> tokeniser;
    LatentProjection<T> projection;
    Processor<T> processor;

    EmulatorModel() = default;
    EmulatorModel(const tok::TokeniserConfig& tcfg, const ProcessorConfig& pcfg, Rng& rng) {
        if (tcfg.latent_channels != pcfg.latent_dim)
            raise<ConfigError>("emulator: tokeniser latent_channels ", tcfg.latent_channels, " != processor latent_dim ",
                               pcfg.latent_dim);
        tokeniser = tok::Tokeniser<T>(tcfg, rng);
        projection = LatentProjection<T>(pcfg.latent_dim, pcfg.embed_dim, rng);
        processor = Processor<T>(pcfg, rng);
    }

    NamedParams<T> named_parameters() const {
        NamedParams<T> p;
        p.extend("tokeniser", tokeniser.named_parameters());
        projection.collect(p, "projection");
        p.extend("processor", processor.named_parameters());
        return p;
    }

    // Full pipeline on an already-normalised context: encode -> project ->
    // process -> project back -> decode. Returns the decoded sequence.
    Var<T> process_sequence(const Var<T>& x, const tok::CompressionChoice& choice, const std::vector<int64_t>& active,
                            bool train_mode, Rng* rng = nullptr) const {
        Var<T> z = tokeniser.encode(x, choice, active);
        Var<T> t = projection.project_in(z);
        t = processor.forward(t, train_mode, rng);
        Var<T> z2 = projection.project_out(t);
        return tokeniser.decode(z2, choice, active);
    }

    // Next-frame prediction: the decoded field at the final temporal position.
    // Output (B, F, 1, H, W).
    Var<T> predict_next_frame(const Var<T>& context, const tok::CompressionChoice& choice, const std::vector<int64_t>& active,
                              bool train_mode = false, Rng* rng = nullptr) const {
        Var<T> y = process_sequence(context, choice, active, train_mode, rng);
        return ops::drop_leading_frames(y, y.val().size(2) - 1);
    }
};

// Mean absolute error of the next-frame prediction.
template <class T>
Var<T> rollout_loss(const Var<T>& target, const Var<T>& pred) {
    return VarOps<T>::mae_loss(pred, target);
}

} // namespace proc
} // namespace physemu
