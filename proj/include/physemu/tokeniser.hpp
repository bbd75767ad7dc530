#pragma once

#include <string>
#include <vector>

#include "physemu/data.hpp"
#include "physemu/ops.hpp"

namespace physemu {
namespace tok {

using ops::ScalePair;

// ----------------------------- configuration -----------------------------

inline std::vector<std::vector<ScalePair>> default_depth_scales() {
    // Depth #1 is fixed at (1,2); depths #2 and #3 sample {1,2} x {2,4}.
    return {
        {{1, 2}},
        {{1, 2}, {1, 4}, {2, 2}, {2, 4}},
        {{1, 2}, {1, 4}, {2, 2}, {2, 4}},
    };
}

struct TokeniserConfig {
    std::vector<int64_t> channels = {16, 32, 64}; // channel progression across the three depths
    int64_t latent_channels = 18;
    int64_t residual_blocks = 2;
    int64_t norm_groups = 8;
    int64_t c_total = 3; // maximum number of physical field channels
    std::vector<std::vector<ScalePair>> depth_scales = default_depth_scales();

    int64_t depths() const { return static_cast<int64_t>(depth_scales.size()); }

    void validate() const {
        if (channels.size() != depth_scales.size())
            raise<ConfigError>("tokeniser: channel progression has ", channels.size(), " entries but ", depth_scales.size(),
                               " downsampling depths");
        if (depth_scales.size() != 3) raise<ConfigError>("tokeniser: expected 3 downsampling depths, got ", depth_scales.size());
        if (latent_channels < 1) raise<ConfigError>("tokeniser: latent_channels must be >= 1");
        if (residual_blocks < 1) raise<ConfigError>("tokeniser: residual_blocks must be >= 1");
        if (c_total < 1) raise<ConfigError>("tokeniser: c_total must be >= 1");
        for (int64_t c : channels)
            if (c % norm_groups != 0)
                raise<ConfigError>("tokeniser: channel count ", c, " not divisible by norm_groups ", norm_groups);
        for (const auto& set : depth_scales) {
            if (set.empty()) raise<ConfigError>("tokeniser: empty scale set");
            for (const auto& s : set) ops::validate_scale(s);
        }
    }

    ScalePair max_scale(int64_t depth) const {
        ScalePair m{1, 1};
        for (const auto& s : depth_scales[static_cast<size_t>(depth)]) {
            m.st = std::max(m.st, s.st);
            m.ss = std::max(m.ss, s.ss);
        }
        return m;
    }
};

// Per-depth scale pairs selected for one forward pass.
struct CompressionChoice {
    std::vector<ScalePair> scales;

    int64_t total_st() const {
        int64_t p = 1;
        for (const auto& s : scales) p *= s.st;
        return p;
    }
    int64_t total_ss() const {
        int64_t p = 1;
        for (const auto& s : scales) p *= s.ss;
        return p;
    }

    void validate_against(const TokeniserConfig& cfg) const {
        if (static_cast<int64_t>(scales.size()) != cfg.depths())
            raise<ConfigError>("CompressionChoice: ", scales.size(), " entries for ", cfg.depths(), " depths");
        for (size_t d = 0; d < scales.size(); ++d) {
            bool found = false;
            for (const auto& s : cfg.depth_scales[d])
                if (s == scales[d]) found = true;
            if (!found)
                raise<ConfigError>("CompressionChoice: (", scales[d].st, ",", scales[d].ss, ") is not in depth ", d + 1,
                                   "'s factor set");
        }
    }
};

enum class SampleMode { train, validate };

// Validation fixes the scales; training samples each depth's factor
// independently and uniformly from its set.
inline CompressionChoice sample_compression(const TokeniserConfig& cfg, SampleMode mode, Rng& rng) {
    CompressionChoice c;
    if (mode == SampleMode::validate) {
        c.scales = {{1, 2}, {2, 2}, {2, 2}};
        c.validate_against(cfg);
        return c;
    }
    for (const auto& set : cfg.depth_scales) c.scales.push_back(set[static_cast<size_t>(rng.uniform_int(static_cast<int64_t>(set.size())))]);
    return c;
}

inline CompressionChoice validation_scales(const TokeniserConfig& cfg) {
    Rng unused(0);
    return sample_compression(cfg, SampleMode::validate, unused);
}

// ----------------------------- per-sample field normalisation -----------------------------

// One RMS scale per (sample, field), clamped below at 1e-7.
template <class T>
struct NormaliserState {
    Tensor<double> scales; // (B, n_fields)
};

inline constexpr double kRmsFloor = 1e-7;

// Divide each field's channel group by its RMS over all timesteps and spatial
// locations, independently per sample. The input must be finite.
template <class T>
std::pair<Tensor<T>, NormaliserState<T>> rms_normalise(const Tensor<T>& x, const data::FieldSchema& schema) {
    check_shape(x.rank() == 5, "rms_normalise: expected (B, C, T, H, W)");
    check_shape(x.size(1) == schema.total_channels(),
                strcat_msg("rms_normalise: ", x.size(1), " channels vs schema's ", schema.total_channels()));
    if (!x.all_finite()) raise<NumericsError>("rms_normalise: non-finite input");
    const int64_t B = x.size(0), C = x.size(1);
    const int64_t inner = x.size(2) * x.size(3) * x.size(4);
    const auto offsets = schema.channel_offsets();
    const int64_t nf = static_cast<int64_t>(schema.entries.size());

    NormaliserState<T> state;
    state.scales = Tensor<double>({B, nf});
    Tensor<T> out = x;
    for (int64_t b = 0; b < B; ++b)
        for (int64_t f = 0; f < nf; ++f) {
            const int64_t c0 = offsets[static_cast<size_t>(f)];
            const int64_t nc = data::channels_for(schema.entries[static_cast<size_t>(f)].rank);
            double sq = 0.0;
            for (int64_t c = c0; c < c0 + nc; ++c) {
                const T* p = x.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) sq += double(p[i]) * double(p[i]);
            }
            const double rms = std::sqrt(sq / double(nc * inner));
            const double scale = std::max(rms, kRmsFloor);
            state.scales.at(b, f) = scale;
            for (int64_t c = c0; c < c0 + nc; ++c) {
                T* p = out.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] = static_cast<T>(double(p[i]) / scale);
            }
        }
    return {std::move(out), std::move(state)};
}

// Apply an existing state to another tensor with the same batch and schema
// (e.g. the target frame of a context-normalised sample).
template <class T>
Tensor<T> normalise_with_state(const Tensor<T>& x, const data::FieldSchema& schema, const NormaliserState<T>& state) {
    check_shape(x.rank() == 5 && x.size(0) == state.scales.size(0), "normalise_with_state: batch mismatch");
    check_shape(x.size(1) == schema.total_channels(), "normalise_with_state: channel mismatch");
    const int64_t B = x.size(0), C = x.size(1);
    const int64_t inner = x.size(2) * x.size(3) * x.size(4);
    const auto offsets = schema.channel_offsets();
    Tensor<T> out = x;
    for (int64_t b = 0; b < B; ++b)
        for (size_t f = 0; f < schema.entries.size(); ++f) {
            const double scale = state.scales.at(b, static_cast<int64_t>(f));
            const int64_t c0 = offsets[f];
            const int64_t nc = data::channels_for(schema.entries[f].rank);
            for (int64_t c = c0; c < c0 + nc; ++c) {
                T* p = out.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] = static_cast<T>(double(p[i]) / scale);
            }
        }
    return out;
}

template <class T>
Tensor<T> denormalise(const Tensor<T>& x, const data::FieldSchema& schema, const NormaliserState<T>& state) {
    check_shape(x.rank() == 5 && x.size(0) == state.scales.size(0), "denormalise: batch mismatch");
    check_shape(x.size(1) == schema.total_channels(), "denormalise: channel mismatch");
    const int64_t B = x.size(0), C = x.size(1);
    const int64_t inner = x.size(2) * x.size(3) * x.size(4);
    const auto offsets = schema.channel_offsets();
    Tensor<T> out = x;
    for (int64_t b = 0; b < B; ++b)
        for (size_t f = 0; f < schema.entries.size(); ++f) {
            const double scale = state.scales.at(b, static_cast<int64_t>(f));
            const int64_t c0 = offsets[f];
            const int64_t nc = data::channels_for(schema.entries[f].rank);
            for (int64_t c = c0; c < c0 + nc; ++c) {
                T* p = out.data() + (b * C + c) * inner;
                for (int64_t i = 0; i < inner; ++i) p[i] = static_cast<T>(double(p[i]) * scale);
            }
        }
    return out;
}

// ----------------------------- residual block -----------------------------

// norm -> SiLU -> causal conv (k = 3), twice, with an additive skip.
template <class T>
struct ResidualBlock {
    CausalGroupNorm<T> norm1, norm2;
    Var<T> w1, b1, w2, b2;

    ResidualBlock() = default;
    ResidualBlock(int64_t channels, int64_t groups, Rng& rng) : norm1(channels, groups), norm2(channels, groups) {
        const int64_t fan_in = channels * 27;
        w1 = Var<T>::leaf(init::fan_in_uniform<T>({channels, channels, 3, 3, 3}, fan_in, rng), true);
        b1 = Var<T>::leaf(init::fan_in_uniform<T>({channels}, fan_in, rng), true);
        w2 = Var<T>::leaf(init::fan_in_uniform<T>({channels, channels, 3, 3, 3}, fan_in, rng), true);
        b2 = Var<T>::leaf(init::fan_in_uniform<T>({channels}, fan_in, rng), true);
    }

    Var<T> operator()(const Var<T>& x) const {
        Var<T> h = ops::causal_conv3d(VarOps<T>::silu(norm1(x)), w1, b1);
        h = ops::causal_conv3d(VarOps<T>::silu(norm2(h)), w2, b2);
        return VarOps<T>::add(x, h);
    }

    void collect(NamedParams<T>& out, const std::string& prefix) const {
        norm1.collect(out, prefix + ".norm1");
        out.add(prefix + ".conv1.weight", w1);
        out.add(prefix + ".conv1.bias", b1);
        norm2.collect(out, prefix + ".norm2");
        out.add(prefix + ".conv2.weight", w2);
        out.add(prefix + ".conv2.bias", b2);
    }
};

// ----------------------------- tokeniser -----------------------------

// Causal-convolutional encoder/decoder with flexible per-depth compression.
// Encoder: adaptive head, then per depth [residual blocks, flexible
// downsample], then a 1x1x1 bottleneck to the latent channels. The decoder
// mirrors the structure with a k=3 bottleneck and flexible depth-to-space
// upsampling. Latents are continuous; there is no quantisation.
template <class T>
class Tokeniser {
public:
    Tokeniser() = default;

    Tokeniser(TokeniserConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
        cfg_.validate();
        const auto& ch = cfg_.channels;
        const int64_t head_fan = cfg_.c_total * 27;
        enc_head_w_ = Var<T>::leaf(init::fan_in_uniform<T>({ch[0], cfg_.c_total, 3, 3, 3}, head_fan, rng), true);
        enc_head_b_ = Var<T>::leaf(init::fan_in_uniform<T>({ch[0]}, head_fan, rng), true);

        for (int64_t d = 0; d < cfg_.depths(); ++d) {
            const int64_t c_in = ch[static_cast<size_t>(d)];
            const int64_t c_out = ch[static_cast<size_t>(std::min<int64_t>(d + 1, cfg_.depths() - 1))];
            std::vector<ResidualBlock<T>> blocks;
            for (int64_t i = 0; i < cfg_.residual_blocks; ++i) blocks.emplace_back(c_in, cfg_.norm_groups, rng);
            enc_blocks_.push_back(std::move(blocks));
            enc_down_.emplace_back(c_in, c_out, cfg_.max_scale(d), rng);
        }

        const int64_t top = ch.back();
        enc_bottleneck_w_ = Var<T>::leaf(init::fan_in_uniform<T>({cfg_.latent_channels, top, 1, 1, 1}, top, rng), true);
        enc_bottleneck_b_ = Var<T>::leaf(init::fan_in_uniform<T>({cfg_.latent_channels}, top, rng), true);

        dec_bottleneck_w_ =
            Var<T>::leaf(init::fan_in_uniform<T>({top, cfg_.latent_channels, 3, 3, 3}, cfg_.latent_channels * 27, rng), true);
        dec_bottleneck_b_ = Var<T>::leaf(init::fan_in_uniform<T>({top}, cfg_.latent_channels * 27, rng), true);

        for (int64_t d = cfg_.depths() - 1; d >= 0; --d) {
            const int64_t c_in = ch[static_cast<size_t>(std::min<int64_t>(d + 1, cfg_.depths() - 1))];
            const int64_t c_out = ch[static_cast<size_t>(d)];
            dec_up_.emplace_back(c_in, c_out, cfg_.max_scale(d), rng);
            std::vector<ResidualBlock<T>> blocks;
            for (int64_t i = 0; i < cfg_.residual_blocks; ++i) blocks.emplace_back(c_out, cfg_.norm_groups, rng);
            dec_blocks_.push_back(std::move(blocks));
        }

        dec_head_w_ = Var<T>::leaf(init::fan_in_uniform<T>({cfg_.c_total, ch[0], 3, 3, 3}, ch[0] * 27, rng), true);
        dec_head_b_ = Var<T>::leaf(init::fan_in_uniform<T>({cfg_.c_total}, ch[0] * 27, rng), true);
    }

    const TokeniserConfig& config() const { return cfg_; }

    // All active fields, in order.
    std::vector<int64_t> all_fields() const {
        std::vector<int64_t> a(static_cast<size_t>(cfg_.c_total));
        for (int64_t i = 0; i < cfg_.c_total; ++i) a[static_cast<size_t>(i)] = i;
        return a;
    }

    void validate_input(const Tensor<T>& x, const CompressionChoice& choice, int64_t c_active) const {
        check_shape(x.rank() == 5, "encode: expected (B, C, T, H, W), got " + x.shape_str());
        check_shape(x.size(1) == c_active, strcat_msg("encode: input has ", x.size(1), " channels, active set has ", c_active));
        const int64_t Tt = x.size(2), H = x.size(3), W = x.size(4);
        check_shape(Tt >= 2 && data::grid_is_pow2(Tt - 1), strcat_msg("encode: T = ", Tt, " must be 1 + a power of two"));
        check_shape(data::grid_is_pow2(H) && data::grid_is_pow2(W), "encode: spatial sizes must be powers of two");
        const int64_t st = choice.total_st(), ss = choice.total_ss();
        check_shape((Tt - 1) % st == 0, strcat_msg("encode: T-1 = ", Tt - 1, " not divisible by total temporal stride ", st));
        check_shape(H % ss == 0 && W % ss == 0,
                    strcat_msg("encode: spatial size (", H, ",", W, ") not divisible by total spatial stride ", ss));
    }

    Var<T> encode(const Var<T>& x, const CompressionChoice& choice, const std::vector<int64_t>& active) const {
        choice.validate_against(cfg_);
        validate_input(x.val(), choice, static_cast<int64_t>(active.size()));
        Var<T> h = ops::adaptive_field_conv(x, enc_head_w_, enc_head_b_, active, ops::FieldSide::input);
        for (int64_t d = 0; d < cfg_.depths(); ++d) {
            for (const auto& blk : enc_blocks_[static_cast<size_t>(d)]) h = blk(h);
            h = ops::flexible_downsample(h, enc_down_[static_cast<size_t>(d)], choice.scales[static_cast<size_t>(d)]);
        }
        return ops::causal_conv3d(h, enc_bottleneck_w_, enc_bottleneck_b_);
    }

    Var<T> decode(const Var<T>& z, const CompressionChoice& choice, const std::vector<int64_t>& active) const {
        choice.validate_against(cfg_);
        check_shape(z.val().rank() == 5 && z.val().size(1) == cfg_.latent_channels,
                    "decode: latent must be (B, " + std::to_string(cfg_.latent_channels) + ", T', H', W'), got " + z.val().shape_str());
        Var<T> h = ops::causal_conv3d(z, dec_bottleneck_w_, dec_bottleneck_b_);
        for (int64_t i = 0; i < cfg_.depths(); ++i) {
            const int64_t d = cfg_.depths() - 1 - i; // mirrored depth index
            h = ops::flexible_depth_to_space(h, dec_up_[static_cast<size_t>(i)], choice.scales[static_cast<size_t>(d)]);
            for (const auto& blk : dec_blocks_[static_cast<size_t>(i)]) h = blk(h);
        }
        return ops::adaptive_field_conv(h, dec_head_w_, dec_head_b_, active, ops::FieldSide::output);
    }

    // Autoencoding pass; raises if the round trip does not restore the input
    // shape (latent produced with an inconsistent choice).
    Var<T> reconstruct(const Var<T>& x, const CompressionChoice& choice, const std::vector<int64_t>& active) const {
        Var<T> z = encode(x, choice, active);
        Var<T> y = decode(z, choice, active);
        check_shape(y.val().same_shape(x.val()),
                    "reconstruct: decode shape " + y.val().shape_str() + " does not match input " + x.val().shape_str());
        return y;
    }

    NamedParams<T> named_parameters() const {
        NamedParams<T> p;
        p.add("encoder.head.weight", enc_head_w_);
        p.add("encoder.head.bias", enc_head_b_);
        for (int64_t d = 0; d < cfg_.depths(); ++d) {
            const std::string stage = "encoder.stage" + std::to_string(d);
            for (size_t i = 0; i < enc_blocks_[static_cast<size_t>(d)].size(); ++i)
                enc_blocks_[static_cast<size_t>(d)][i].collect(p, stage + ".block" + std::to_string(i));
            enc_down_[static_cast<size_t>(d)].collect(p, stage + ".down");
        }
        p.add("encoder.bottleneck.weight", enc_bottleneck_w_);
        p.add("encoder.bottleneck.bias", enc_bottleneck_b_);
        p.add("decoder.bottleneck.weight", dec_bottleneck_w_);
        p.add("decoder.bottleneck.bias", dec_bottleneck_b_);
        for (int64_t i = 0; i < cfg_.depths(); ++i) {
            const int64_t d = cfg_.depths() - 1 - i;
            const std::string stage = "decoder.stage" + std::to_string(d);
            dec_up_[static_cast<size_t>(i)].collect(p, stage + ".up");
            for (size_t j = 0; j < dec_blocks_[static_cast<size_t>(i)].size(); ++j)
                dec_blocks_[static_cast<size_t>(i)][j].collect(p, stage + ".block" + std::to_string(j));
        }
        p.add("decoder.head.weight", dec_head_w_);
        p.add("decoder.head.bias", dec_head_b_);
        return p;
    }

private:
    TokeniserConfig cfg_;
    Var<T> enc_head_w_, enc_head_b_;
    std::vector<std::vector<ResidualBlock<T>>> enc_blocks_;
    std::vector<ops::BaseKernel<T>> enc_down_;
    Var<T> enc_bottleneck_w_, enc_bottleneck_b_;
    Var<T> dec_bottleneck_w_, dec_bottleneck_b_;
    std::vector<ops::D2SBaseKernel<T>> dec_up_; // stored in application order (deepest first)
    std::vector<std::vector<ResidualBlock<T>>> dec_blocks_;
    Var<T> dec_head_w_, dec_head_b_;
};

// Mean squared error over the full reconstructed sequence.
template <class T>
Var<T> tokeniser_loss(const Var<T>& x, const Var<T>& xhat) {
    return VarOps<T>::mse_loss(xhat, x);
}

} // namespace tok
} // namespace physemu
