#pragma once

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "physemu/checkpoint.hpp"
#include "physemu/metrics.hpp"
#include "physemu/processor.hpp"
#include "physemu/schedule.hpp"

namespace physemu {
namespace train {

// Reference step budgets for the two stages.
inline constexpr int64_t kPretrainReferenceSteps = 168000;
inline constexpr int64_t kRolloutReferenceSteps = 29400;
// Reference data-recycling budgets (unique batches per shard).
inline constexpr int64_t kPretrainReferenceUniqueBatches = 21000;
inline constexpr int64_t kRolloutReferenceUniqueBatches = 2100;

// ----------------------------- freezing -----------------------------

enum class FreezeMode { fully_trainable, mostly_frozen };

inline FreezeMode freeze_from_string(const std::string& s) {
    if (s == "full" || s == "fully-trainable") return FreezeMode::fully_trainable;
    if (s == "mostly-frozen") return FreezeMode::mostly_frozen;
    raise<ConfigError>("freeze: unknown mode '", s, "' (expected full | mostly-frozen)");
}

inline std::string freeze_to_string(FreezeMode m) {
    return m == FreezeMode::fully_trainable ? "full" : "mostly-frozen";
}

// Mostly frozen trains only the layers facing pixel space and latent space:
// the tokeniser's encoder head, decoder head and both bottlenecks. The
// processor and projection are always trainable. Accepts both emulator-tree
// names ("tokeniser.encoder.head...") and bare tokeniser trees.
inline bool is_trainable_under(FreezeMode mode, const std::string& name) {
    if (mode == FreezeMode::fully_trainable) return true;
    const std::string n = name.rfind("tokeniser.", 0) == 0 ? name.substr(10) : name;
    return n.rfind("encoder.head", 0) == 0 || n.rfind("decoder.head", 0) == 0 || n.rfind("encoder.bottleneck", 0) == 0 ||
           n.rfind("decoder.bottleneck", 0) == 0 || n.rfind("projection.", 0) == 0 || n.rfind("processor.", 0) == 0;
}

template <class T>
struct FreezePartition {
    std::vector<std::pair<std::string, Var<T>>> trainable;
    std::vector<std::pair<std::string, Var<T>>> frozen;

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& [k, v] : trainable) n += v.val().numel();
        return n;
    }
    int64_t total_count() const {
        int64_t n = trainable_count();
        for (const auto& [k, v] : frozen) n += v.val().numel();
        return n;
    }
    double fraction() const { return double(trainable_count()) / double(std::max<int64_t>(total_count(), 1)); }

    std::vector<Var<T>> trainable_vars() const {
        std::vector<Var<T>> out;
        for (const auto& [k, v] : trainable) out.push_back(v);
        return out;
    }
    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (const auto& [k, v] : trainable) out.push_back(k);
        return out;
    }

    // Restrict to a subtree (e.g. "tokeniser.") for Table-3 style reporting.
    FreezePartition filtered(const std::string& prefix) const {
        FreezePartition p;
        for (const auto& kv : trainable)
            if (kv.first.rfind(prefix, 0) == 0) p.trainable.push_back(kv);
        for (const auto& kv : frozen)
            if (kv.first.rfind(prefix, 0) == 0) p.frozen.push_back(kv);
        return p;
    }
};

// Sets requires_grad across the parameter tree and returns the partition.
// Trainable and frozen sets are disjoint and cover every parameter.
template <class T>
FreezePartition<T> apply_freeze(NamedParams<T>& params, FreezeMode mode) {
    FreezePartition<T> part;
    for (auto& [name, v] : params.items) {
        const bool t = is_trainable_under(mode, name);
        v.set_requires_grad(t);
        (t ? part.trainable : part.frozen).emplace_back(name, v);
    }
    return part;
}

struct TrainableCounts {
    int64_t trainable = 0;
    int64_t total = 0;
    double fraction = 0.0;
};

template <class T>
TrainableCounts trainable_fraction(const NamedParams<T>& params, FreezeMode mode) {
    TrainableCounts c;
    for (const auto& [name, v] : params.items) {
        const int64_t n = v.val().numel();
        c.total += n;
        if (is_trainable_under(mode, name)) c.trainable += n;
    }
    c.fraction = double(c.trainable) / double(std::max<int64_t>(c.total, 1));
    return c;
}

// ----------------------------- data recycling -----------------------------

// Per-worker disjoint shard with unique batches per pass. A pass draws a
// fresh permutation from an RNG derived from (seed, shard, pass); once the
// unique-batch budget is exhausted the loader reseeds and starts a new pass.
class ShardLoader {
public:
    ShardLoader() = default;

    ShardLoader(int64_t dataset_size, int64_t batch_size, int64_t shard_id, int64_t num_shards, uint64_t seed,
                int64_t unique_batch_budget = 0)
        : batch_(batch_size), shard_(shard_id), seed_(seed) {
        if (num_shards < 1 || shard_id < 0 || shard_id >= num_shards)
            raise<ConfigError>("ShardLoader: shard ", shard_id, " of ", num_shards, " is invalid");
        if (batch_size < 1) raise<ConfigError>("ShardLoader: batch size must be positive");
        for (int64_t i = shard_id; i < dataset_size; i += num_shards) samples_.push_back(i);
        if (samples_.empty()) raise<ConfigError>("ShardLoader: empty shard (dataset size ", dataset_size, ", shard ", shard_id,
                                                 " of ", num_shards, ")");
        const int64_t max_batches = static_cast<int64_t>(samples_.size()) / batch_size;
        if (max_batches < 1) raise<ConfigError>("ShardLoader: shard smaller than one batch");
        budget_ = unique_batch_budget > 0 ? std::min(unique_batch_budget, max_batches) : max_batches;
        start_pass();
    }

    int64_t budget() const { return budget_; }
    int64_t pass_index() const { return pass_; }
    int64_t batches_served_in_pass() const { return served_; }

    std::vector<int64_t> next_batch() {
        if (served_ == budget_) {
            ++pass_;
            served_ = 0;
            start_pass();
        }
        std::vector<int64_t> out(perm_.begin() + served_ * batch_, perm_.begin() + (served_ + 1) * batch_);
        ++served_;
        return out;
    }

    // Resume support: the permutation is a pure function of (seed, shard, pass).
    void restore(int64_t pass, int64_t served) {
        pass_ = pass;
        served_ = served;
        start_pass();
    }

private:
    void start_pass() {
        perm_ = samples_;
        Rng rng(derive_seed(seed_, 0x10adeful, static_cast<uint64_t>(shard_), static_cast<uint64_t>(pass_)));
        for (int64_t i = static_cast<int64_t>(perm_.size()) - 1; i > 0; --i) {
            const int64_t j = rng.uniform_int(i + 1);
            std::swap(perm_[static_cast<size_t>(i)], perm_[static_cast<size_t>(j)]);
        }
    }

    std::vector<int64_t> samples_;
    std::vector<int64_t> perm_;
    int64_t batch_ = 1;
    int64_t shard_ = 0;
    uint64_t seed_ = 0;
    int64_t budget_ = 0;
    int64_t pass_ = 0;
    int64_t served_ = 0;
};

// Uniform categorical draw over datasets, one per batch.
inline int64_t mixture_sample(int64_t n_datasets, Rng& rng) {
    if (n_datasets < 1) raise<ConfigError>("mixture_sample: need at least one dataset");
    return n_datasets == 1 ? 0 : rng.uniform_int(n_datasets);
}

// ----------------------------- windowed dataset -----------------------------

template <class T>
struct WindowedDataset {
    data::FieldSchema schema;
    int64_t H = 0, W = 0;
    int64_t window_len = 10;
    std::vector<Tensor<T>> trajectories;             // (frames, C, H, W)
    std::vector<std::pair<int32_t, int32_t>> windows; // (trajectory, start frame)
    int64_t skipped_short = 0;

    static WindowedDataset from_trajectories(data::FieldSchema schema_, std::vector<Tensor<T>> trajs, int64_t window_len_ = 10,
                                             int64_t stride = 0) {
        WindowedDataset d;
        d.schema = std::move(schema_);
        d.window_len = window_len_;
        d.trajectories = std::move(trajs);
        for (size_t t = 0; t < d.trajectories.size(); ++t) {
            const auto& tr = d.trajectories[t];
            check_shape(tr.rank() == 4, "WindowedDataset: trajectory must be (frames, C, H, W)");
            check_shape(tr.size(1) == d.schema.total_channels(), "WindowedDataset: trajectory channels do not match schema");
            if (d.H == 0) {
                d.H = tr.size(2);
                d.W = tr.size(3);
            }
            check_shape(tr.size(2) == d.H && tr.size(3) == d.W, "WindowedDataset: inconsistent grid across trajectories");
            auto plan = data::window_starts(tr.size(0), window_len_, stride);
            d.skipped_short += plan.skipped_short;
            for (int64_t s : plan.starts) d.windows.emplace_back(static_cast<int32_t>(t), static_cast<int32_t>(s));
        }
        return d;
    }

    static WindowedDataset from_archive(const std::string& path, int64_t window_len_ = 10, int64_t stride = 0) {
        data::ArchiveReader reader(path);
        std::vector<Tensor<T>> trajs;
        for (int64_t i = 0; i < reader.size(); ++i) {
            if constexpr (std::is_same_v<T, float>)
                trajs.push_back(reader.read(i));
            else
                trajs.push_back(reader.read(i).template cast<T>());
        }
        return from_trajectories(reader.schema(), std::move(trajs), window_len_, stride);
    }

    int64_t size() const { return static_cast<int64_t>(windows.size()); }

    // (B, C, window_len, H, W)
    Tensor<T> gather(const std::vector<int64_t>& idx) const {
        const int64_t B = static_cast<int64_t>(idx.size());
        const int64_t C = schema.total_channels();
        Tensor<T> out({B, C, window_len, H, W});
        for (int64_t b = 0; b < B; ++b) {
            const auto [traj, start] = windows[static_cast<size_t>(idx[static_cast<size_t>(b)])];
            const auto& tr = trajectories[static_cast<size_t>(traj)];
            for (int64_t t = 0; t < window_len; ++t)
                for (int64_t c = 0; c < C; ++c)
                    std::memcpy(out.data() + (((b * C + c) * window_len + t) * H * W),
                                tr.data() + (((start + t) * C + c) * H * W), sizeof(T) * static_cast<size_t>(H * W));
        }
        return out;
    }
};

// Frame-range slice of a (B, C, T, H, W) tensor.
template <class T>
Tensor<T> slice_frames(const Tensor<T>& x, int64_t start, int64_t count) {
    check_shape(x.rank() == 5 && start >= 0 && start + count <= x.size(2), "slice_frames: range out of bounds");
    const int64_t B = x.size(0), C = x.size(1), Tt = x.size(2), HW = x.size(3) * x.size(4);
    Tensor<T> out({B, C, count, x.size(3), x.size(4)});
    for (int64_t bc = 0; bc < B * C; ++bc)
        std::memcpy(out.data() + bc * count * HW, x.data() + (bc * Tt + start) * HW, sizeof(T) * static_cast<size_t>(count * HW));
    return out;
}

// ----------------------------- loop configuration and logging -----------------------------

struct LoopConfig {
    int64_t steps = 200;
    int64_t micro_batch = 2;
    int64_t accumulation = 8; // effective batch = micro_batch * accumulation
    int64_t context_frames = 9;
    int64_t window_len = 10;
    int64_t steps_per_epoch = 10; // schedule epoch mapping (rollout)
    int64_t val_cadence = 0;      // 0 = no validation during training
    int64_t val_examples = 16;
    int64_t checkpoint_cadence = 0; // 0 = final only
    int64_t unique_batch_budget = 0;
    int64_t num_shards = 1;
    int64_t shard_id = 0;
    bool sample_compression = true; // rollout: sample scales per step (validate-fixed otherwise)
    bool deterministic_timing = false;
    schedule::OptimiserConfig optim = schedule::OptimiserConfig::tokeniser_reference();
    schedule::ScheduleConfig sched; // rollout only
    FreezeMode freeze = FreezeMode::fully_trainable;

    void validate_common() const {
        if (steps < 1) raise<ConfigError>("training: steps must be positive");
        if (micro_batch < 1 || accumulation < 1) raise<ConfigError>("training: batch settings must be positive");
        if (window_len != context_frames + 1)
            raise<ConfigError>("training: window_len (", window_len, ") must equal context_frames + 1 (", context_frames + 1, ")");
        optim.validate();
    }
};

struct LogRow {
    int64_t step = 0;
    std::string split;  // train | val
    std::string field;  // field name or "all"
    int64_t frame = -1; // target frame index, -1 for aggregates
    std::string metric;
    double value = 0.0;
};

// Every compression the sampler can draw must divide the data geometry;
// checked once up front so a training run cannot die on an unlucky draw.
template <class T>
void validate_geometry(const tok::TokeniserConfig& tcfg, const WindowedDataset<T>& d, int64_t context_frames) {
    int64_t max_st = 1, max_ss = 1;
    for (int64_t depth = 0; depth < tcfg.depths(); ++depth) {
        max_st *= tcfg.max_scale(depth).st;
        max_ss *= tcfg.max_scale(depth).ss;
    }
    if ((context_frames - 1) % max_st != 0)
        raise<ConfigError>("training: context of ", context_frames, " frames does not support temporal stride ", max_st);
    if (d.H % max_ss != 0 || d.W % max_ss != 0)
        raise<ConfigError>("training: grid (", d.H, ",", d.W, ") does not support the maximum spatial stride ", max_ss);
}

using LogSink = std::function<void(const LogRow&)>;
using CheckpointSink = std::function<void(const ckpt::Checkpoint&, int64_t step)>;

namespace detail {

inline void emit(const LogSink& sink, int64_t step, const std::string& split, const std::string& field, int64_t frame,
                 const std::string& metric, double value) {
    if (sink) sink({step, split, field, frame, metric, value});
}

inline double elapsed_s(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace detail

// ----------------------------- tokeniser pretraining -----------------------------

template <class T>
class PretrainSession {
public:
    PretrainSession(tok::TokeniserConfig tcfg, LoopConfig lcfg, std::vector<WindowedDataset<T>> train_data,
                    std::optional<WindowedDataset<T>> val_data, uint64_t seed)
        : lcfg_(lcfg), train_data_(std::move(train_data)), val_data_(std::move(val_data)), seed_(seed) {
        lcfg_.validate_common();
        if (train_data_.empty()) raise<ConfigError>("pretrain: no training datasets");
        for (const auto& d : train_data_)
            if (d.schema.total_channels() != tcfg.c_total)
                raise<ConfigError>("pretrain: dataset has ", d.schema.total_channels(), " channels, tokeniser c_total is ",
                                   tcfg.c_total);
        for (const auto& d : train_data_) validate_geometry(tcfg, d, lcfg_.context_frames);
        Rng init_rng(derive_seed(seed, 0x1017));
        tokeniser_ = tok::Tokeniser<T>(tcfg, init_rng);
        params_ = tokeniser_.named_parameters();
        for (auto& [n, v] : params_.items) v.set_requires_grad(true);
        std::vector<Var<T>> vars;
        for (auto& [n, v] : params_.items) vars.push_back(v);
        opt_ = AdamW<T>(vars, {lcfg_.optim.lr, lcfg_.optim.beta1, lcfg_.optim.beta2, lcfg_.optim.weight_decay, lcfg_.optim.eps});
        for (size_t d = 0; d < train_data_.size(); ++d)
            loaders_.emplace_back(train_data_[d].size(), lcfg_.micro_batch, lcfg_.shard_id, lcfg_.num_shards,
                                  derive_seed(seed, 0xda7a, d), lcfg_.unique_batch_budget);
        data_rng_ = Rng(derive_seed(seed, 0x313));
        model_rng_ = Rng(derive_seed(seed, 0x717));
    }

    const tok::Tokeniser<T>& tokeniser() const { return tokeniser_; }
    int64_t step() const { return step_; }
    double last_loss() const { return last_loss_; }

    ckpt::Checkpoint snapshot() const {
        ckpt::Checkpoint c;
        c.meta["kind"] = "tokeniser_pretrain";
        c.meta["step"] = step_;
        c.put_rng("data", data_rng_);
        c.put_rng("model", model_rng_);
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : loaders_) ls.push_back({{"pass", l.pass_index()}, {"served", l.batches_served_in_pass()}});
        c.meta["loaders"] = ls;
        c.meta["optim_step"] = opt_.step_count();
        c.put_params(params_);
        auto& m = const_cast<AdamW<T>&>(opt_).m_state();
        auto& v = const_cast<AdamW<T>&>(opt_).v_state();
        for (size_t i = 0; i < params_.items.size(); ++i) {
            c.put_tensor("optim.m." + params_.items[i].first, m[i]);
            c.put_tensor("optim.v." + params_.items[i].first, v[i]);
        }
        return c;
    }

    void restore(const ckpt::Checkpoint& c) {
        if (c.meta.value("kind", "") != "tokeniser_pretrain") raise<IoError>("pretrain restore: checkpoint kind mismatch");
        c.load_params(params_);
        step_ = c.meta.at("step").get<int64_t>();
        data_rng_ = c.get_rng("data");
        model_rng_ = c.get_rng("model");
        const auto& ls = c.meta.at("loaders");
        for (size_t i = 0; i < loaders_.size(); ++i)
            loaders_[i].restore(ls.at(i).at("pass").get<int64_t>(), ls.at(i).at("served").get<int64_t>());
        opt_.set_step_count(c.meta.at("optim_step").get<int64_t>());
        auto& m = opt_.m_state();
        auto& v = opt_.v_state();
        for (size_t i = 0; i < params_.items.size(); ++i) {
            m[i] = c.template get_tensor<T>("optim.m." + params_.items[i].first);
            v[i] = c.template get_tensor<T>("optim.v." + params_.items[i].first);
        }
    }

    void run(const LogSink& log, const CheckpointSink& ckpt_sink) {
        const auto t0 = std::chrono::steady_clock::now();
        while (step_ < lcfg_.steps) {
            const double loss = train_step();
            ++step_;
            detail::emit(log, step_, "train", "all", -1, "loss", loss);
            detail::emit(log, step_, "train", "all", -1, "lr", opt_.lr());
            detail::emit(log, step_, "train", "all", -1, "wall_clock_s", lcfg_.deterministic_timing ? 0.0 : detail::elapsed_s(t0));
            if (lcfg_.val_cadence > 0 && step_ % lcfg_.val_cadence == 0) validate(log);
            if (ckpt_sink && lcfg_.checkpoint_cadence > 0 && step_ % lcfg_.checkpoint_cadence == 0 && step_ < lcfg_.steps)
                ckpt_sink(snapshot(), step_);
        }
        if (ckpt_sink) ckpt_sink(snapshot(), step_);
    }

    // One optimiser step (gradient accumulation over micro batches).
    double train_step() {
        opt_.zero_grad();
        double loss_acc = 0.0;
        for (int64_t a = 0; a < lcfg_.accumulation; ++a) {
            const int64_t ds = mixture_sample(static_cast<int64_t>(train_data_.size()), data_rng_);
            auto& dataset = train_data_[static_cast<size_t>(ds)];
            const auto idx = loaders_[static_cast<size_t>(ds)].next_batch();
            Tensor<T> window = dataset.gather(idx);
            Tensor<T> context = slice_frames(window, 0, lcfg_.context_frames);
            auto [ctx_n, state] = tok::rms_normalise(context, dataset.schema);
            const auto choice = tok::sample_compression(tokeniser_.config(), tok::SampleMode::train, model_rng_);
            Var<T> x = Var<T>::leaf(std::move(ctx_n));
            Var<T> recon = tokeniser_.reconstruct(x, choice, tokeniser_.all_fields());
            Var<T> loss = tok::tokeniser_loss(x, recon);
            const double lval = loss.val()[0];
            if (!std::isfinite(lval)) abort_non_finite(lval);
            loss_acc += lval / double(lcfg_.accumulation);
            VarOps<T>::scale(loss, static_cast<T>(1.0 / double(lcfg_.accumulation))).backward();
        }
        auto vars = trainable_vars();
        if (lcfg_.optim.grad_clip > 0.0) clip_grad_norm(vars, lcfg_.optim.grad_clip);
        opt_.step();
        last_loss_ = loss_acc;
        return loss_acc;
    }

    void validate(const LogSink& log) {
        if (!val_data_ || val_data_->size() == 0) return;
        NoGradGuard ng;
        const auto& vd = *val_data_;
        const auto part = metrics::BandPartition::make(vd.H, vd.W);
        const auto choice = tok::validation_scales(tokeniser_.config());
        const int64_t n = std::min<int64_t>(lcfg_.val_examples, vd.size());
        double mse_acc = 0.0;
        metrics::MetricReport rep;
        for (int64_t i = 0; i < n; ++i) {
            Tensor<T> window = vd.gather({i});
            Tensor<T> context = slice_frames(window, 0, lcfg_.context_frames);
            auto [ctx_n, state] = tok::rms_normalise(context, vd.schema);
            Var<T> x = Var<T>::leaf(ctx_n);
            Var<T> recon = tokeniser_.reconstruct(x, choice, tokeniser_.all_fields());
            mse_acc += tok::tokeniser_loss(x, recon).val()[0] / double(n);
            // physical-space reconstruction metrics
            Tensor<T> recon_phys = tok::denormalise(recon.val(), vd.schema, state);
            Tensor<double> tgt = frames_to_stack(context);
            Tensor<double> prd = frames_to_stack(recon_phys);
            auto r = metrics::evaluate_frames(tgt, prd, part);
            for (auto& row : r.rows) rep.rows.push_back(row);
        }
        rep.finalise();
        detail::emit(log, step_, "val", "all", -1, "recon_mse", mse_acc);
        detail::emit(log, step_, "val", "all", -1, "vrmse", rep.vrmse_mean);
        detail::emit(log, step_, "val", "all", -1, "neps_low", rep.neps_mean.low);
        detail::emit(log, step_, "val", "all", -1, "neps_mid", rep.neps_mean.mid);
        detail::emit(log, step_, "val", "all", -1, "neps_high", rep.neps_mean.high);
    }

private:
    [[noreturn]] void abort_non_finite(double lval) {
        raise<NumericsError>("pretrain: non-finite loss ", lval, " at step ", step_ + 1);
    }

    std::vector<Var<T>> trainable_vars() {
        std::vector<Var<T>> vars;
        for (auto& [n, v] : params_.items) vars.push_back(v);
        return vars;
    }

    // (B=1, C, T, H, W) -> (T, C, H, W) double stack for the metrics layer
    static Tensor<double> frames_to_stack(const Tensor<T>& x) {
        const int64_t C = x.size(1), Tt = x.size(2), H = x.size(3), W = x.size(4);
        Tensor<double> out({Tt, C, H, W});
        for (int64_t c = 0; c < C; ++c)
            for (int64_t t = 0; t < Tt; ++t)
                for (int64_t i = 0; i < H * W; ++i) out[(t * C + c) * H * W + i] = double(x[(c * Tt + t) * H * W + i]);
        return out;
    }

    LoopConfig lcfg_;
    std::vector<WindowedDataset<T>> train_data_;
    std::optional<WindowedDataset<T>> val_data_;
    uint64_t seed_ = 0;
    tok::Tokeniser<T> tokeniser_;
    NamedParams<T> params_;
    AdamW<T> opt_;
    std::vector<ShardLoader> loaders_;
    Rng data_rng_, model_rng_;
    int64_t step_ = 0;
    double last_loss_ = 0.0;
};

// ----------------------------- rollout training -----------------------------

// Loads tokeniser parameters saved by a pretraining run into the emulator's
// parameter tree (names are prefixed "tokeniser." there).
template <class T>
void init_tokeniser_from_checkpoint(NamedParams<T>& model_params, const ckpt::Checkpoint& c) {
    if (c.meta.value("kind", "") != "tokeniser_pretrain")
        raise<IoError>("tokeniser init: checkpoint kind '", c.meta.value("kind", "?"), "' is not tokeniser_pretrain");
    NamedParams<T> tok_params;
    for (auto& [name, v] : model_params.items)
        if (name.rfind("tokeniser.", 0) == 0) tok_params.items.emplace_back(name.substr(10), v);
    c.load_params(tok_params);
}

template <class T>
class RolloutSession {
public:
    RolloutSession(tok::TokeniserConfig tcfg, proc::ProcessorConfig pcfg, LoopConfig lcfg,
                   std::vector<WindowedDataset<T>> train_data, std::optional<WindowedDataset<T>> val_data, uint64_t seed,
                   const ckpt::Checkpoint* tokeniser_init = nullptr)
        : lcfg_(lcfg), train_data_(std::move(train_data)), val_data_(std::move(val_data)), seed_(seed) {
        lcfg_.validate_common();
        lcfg_.sched.validate();
        const int64_t epochs_needed = (lcfg_.steps + lcfg_.steps_per_epoch - 1) / lcfg_.steps_per_epoch;
        if (epochs_needed > lcfg_.sched.total_epochs)
            raise<ConfigError>("rollout: ", lcfg_.steps, " steps at ", lcfg_.steps_per_epoch, " steps/epoch need ", epochs_needed,
                               " epochs, schedule has ", lcfg_.sched.total_epochs);
        if (train_data_.empty()) raise<ConfigError>("rollout: no training datasets");
        for (const auto& d : train_data_)
            if (d.schema.total_channels() != tcfg.c_total)
                raise<ConfigError>("rollout: dataset has ", d.schema.total_channels(), " channels, tokeniser c_total is ",
                                   tcfg.c_total);
        if (lcfg_.sample_compression)
            for (const auto& d : train_data_) validate_geometry(tcfg, d, lcfg_.context_frames);

        Rng init_rng(derive_seed(seed, 0x2027));
        model_ = proc::EmulatorModel<T>(tcfg, pcfg, init_rng);
        params_ = model_.named_parameters();
        if (tokeniser_init) init_tokeniser_from_checkpoint(params_, *tokeniser_init);
        partition_ = apply_freeze(params_, lcfg_.freeze);
        opt_ = AdamW<T>(partition_.trainable_vars(),
                        {lcfg_.optim.lr, lcfg_.optim.beta1, lcfg_.optim.beta2, lcfg_.optim.weight_decay, lcfg_.optim.eps});
        for (size_t d = 0; d < train_data_.size(); ++d)
            loaders_.emplace_back(train_data_[d].size(), lcfg_.micro_batch, lcfg_.shard_id, lcfg_.num_shards,
                                  derive_seed(seed, 0xda7a, d), lcfg_.unique_batch_budget);
        data_rng_ = Rng(derive_seed(seed, 0x313));
        model_rng_ = Rng(derive_seed(seed, 0x717));
    }

    const proc::EmulatorModel<T>& model() const { return model_; }
    const FreezePartition<T>& partition() const { return partition_; }
    int64_t step() const { return step_; }
    double last_loss() const { return last_loss_; }
    double last_val_vrmse() const { return last_val_vrmse_; }

    double current_lr() const {
        const int64_t epoch = std::min<int64_t>(step_ / lcfg_.steps_per_epoch, lcfg_.sched.total_epochs);
        return schedule::lr_at_epoch(epoch, lcfg_.sched);
    }

    ckpt::Checkpoint snapshot() const {
        ckpt::Checkpoint c;
        c.meta["kind"] = "rollout_train";
        c.meta["step"] = step_;
        c.meta["freeze"] = freeze_to_string(lcfg_.freeze);
        nlohmann::json names = nlohmann::json::array();
        for (const auto& n : partition_.trainable_names()) names.push_back(n);
        c.meta["trainable"] = names;
        c.put_rng("data", data_rng_);
        c.put_rng("model", model_rng_);
        nlohmann::json ls = nlohmann::json::array();
        for (const auto& l : loaders_) ls.push_back({{"pass", l.pass_index()}, {"served", l.batches_served_in_pass()}});
        c.meta["loaders"] = ls;
        c.meta["optim_step"] = opt_.step_count();
        c.put_params(params_);
        auto& m = const_cast<AdamW<T>&>(opt_).m_state();
        auto& v = const_cast<AdamW<T>&>(opt_).v_state();
        const auto tnames = partition_.trainable_names();
        for (size_t i = 0; i < tnames.size(); ++i) {
            c.put_tensor("optim.m." + tnames[i], m[i]);
            c.put_tensor("optim.v." + tnames[i], v[i]);
        }
        return c;
    }

    void restore(const ckpt::Checkpoint& c) {
        if (c.meta.value("kind", "") != "rollout_train") raise<IoError>("rollout restore: checkpoint kind mismatch");
        if (c.meta.value("freeze", "") != freeze_to_string(lcfg_.freeze))
            raise<ConfigError>("rollout restore: freeze mode mismatch (checkpoint ", c.meta.value("freeze", "?"), ", config ",
                               freeze_to_string(lcfg_.freeze), ")");
        c.load_params(params_);
        step_ = c.meta.at("step").get<int64_t>();
        data_rng_ = c.get_rng("data");
        model_rng_ = c.get_rng("model");
        const auto& ls = c.meta.at("loaders");
        for (size_t i = 0; i < loaders_.size(); ++i)
            loaders_[i].restore(ls.at(i).at("pass").get<int64_t>(), ls.at(i).at("served").get<int64_t>());
        opt_.set_step_count(c.meta.at("optim_step").get<int64_t>());
        auto& m = opt_.m_state();
        auto& v = opt_.v_state();
        const auto tnames = partition_.trainable_names();
        for (size_t i = 0; i < tnames.size(); ++i) {
            m[i] = c.template get_tensor<T>("optim.m." + tnames[i]);
            v[i] = c.template get_tensor<T>("optim.v." + tnames[i]);
        }
    }

    void run(const LogSink& log, const CheckpointSink& ckpt_sink) {
        const auto t0 = std::chrono::steady_clock::now();
        while (step_ < lcfg_.steps) {
            const double loss = train_step();
            ++step_;
            detail::emit(log, step_, "train", "all", -1, "loss", loss);
            detail::emit(log, step_, "train", "all", -1, "lr", opt_.lr());
            detail::emit(log, step_, "train", "all", -1, "wall_clock_s", lcfg_.deterministic_timing ? 0.0 : detail::elapsed_s(t0));
            if (lcfg_.val_cadence > 0 && step_ % lcfg_.val_cadence == 0) validate(log);
            if (ckpt_sink && lcfg_.checkpoint_cadence > 0 && step_ % lcfg_.checkpoint_cadence == 0 && step_ < lcfg_.steps)
                ckpt_sink(snapshot(), step_);
        }
        if (ckpt_sink) ckpt_sink(snapshot(), step_);
    }

    double train_step() {
        opt_.set_lr(current_lr());
        opt_.zero_grad();
        double loss_acc = 0.0;
        for (int64_t a = 0; a < lcfg_.accumulation; ++a) {
            const int64_t ds = mixture_sample(static_cast<int64_t>(train_data_.size()), data_rng_);
            auto& dataset = train_data_[static_cast<size_t>(ds)];
            const auto idx = loaders_[static_cast<size_t>(ds)].next_batch();
            Tensor<T> window = dataset.gather(idx);
            Tensor<T> context = slice_frames(window, 0, lcfg_.context_frames);
            Tensor<T> target = slice_frames(window, lcfg_.context_frames, 1);
            auto [ctx_n, state] = tok::rms_normalise(context, dataset.schema);
            Tensor<T> tgt_n = tok::normalise_with_state(target, dataset.schema, state);
            const auto choice = lcfg_.sample_compression
                                    ? tok::sample_compression(model_.tokeniser.config(), tok::SampleMode::train, model_rng_)
                                    : tok::validation_scales(model_.tokeniser.config());
            Var<T> pred = model_.predict_next_frame(Var<T>::leaf(std::move(ctx_n)), choice, model_.tokeniser.all_fields(),
                                                    /*train_mode=*/true, &model_rng_);
            Var<T> loss = proc::rollout_loss(Var<T>::leaf(std::move(tgt_n)), pred);
            const double lval = loss.val()[0];
            if (!std::isfinite(lval)) raise<NumericsError>("rollout: non-finite loss ", lval, " at step ", step_ + 1);
            loss_acc += lval / double(lcfg_.accumulation);
            VarOps<T>::scale(loss, static_cast<T>(1.0 / double(lcfg_.accumulation))).backward();
        }
        auto vars = partition_.trainable_vars();
        if (lcfg_.optim.grad_clip > 0.0) clip_grad_norm(vars, lcfg_.optim.grad_clip);
        opt_.step();
        last_loss_ = loss_acc;
        return loss_acc;
    }

    // Next-frame validation at the fixed scales: VRMSE and banded NEPS on
    // denormalised physical fields.
    void validate(const LogSink& log) {
        if (!val_data_ || val_data_->size() == 0) return;
        NoGradGuard ng;
        const auto& vd = *val_data_;
        const auto part = metrics::BandPartition::make(vd.H, vd.W);
        const auto choice = tok::validation_scales(model_.tokeniser.config());
        const int64_t n = std::min<int64_t>(lcfg_.val_examples, vd.size());
        metrics::MetricReport rep;
        const auto offsets = vd.schema.channel_offsets();
        for (int64_t i = 0; i < n; ++i) {
            Tensor<T> window = vd.gather({i});
            Tensor<T> context = slice_frames(window, 0, lcfg_.context_frames);
            Tensor<T> target = slice_frames(window, lcfg_.context_frames, 1);
            auto [ctx_n, state] = tok::rms_normalise(context, vd.schema);
            Var<T> pred = model_.predict_next_frame(Var<T>::leaf(std::move(ctx_n)), choice, model_.tokeniser.all_fields());
            Tensor<T> pred_phys = tok::denormalise(pred.val(), vd.schema, state);
            // per-field rows on the single predicted frame
            const int64_t H = vd.H, W = vd.W;
            for (size_t f = 0; f < vd.schema.entries.size(); ++f) {
                const int64_t c0 = offsets[f];
                const int64_t nc = data::channels_for(vd.schema.entries[f].rank);
                for (int64_t c = c0; c < c0 + nc; ++c) {
                    metrics::MetricRow row;
                    row.frame = lcfg_.context_frames;
                    row.field = c;
                    row.vrmse = metrics::try_vrmse(target.data() + c * H * W, pred_phys.data() + c * H * W, H * W);
                    row.neps = metrics::neps(target.data() + c * H * W, pred_phys.data() + c * H * W, part);
                    rep.rows.push_back(row);
                }
            }
        }
        rep.finalise();
        last_val_vrmse_ = rep.vrmse_mean;
        detail::emit(log, step_, "val", "all", -1, "vrmse", rep.vrmse_mean);
        detail::emit(log, step_, "val", "all", -1, "neps_low", rep.neps_mean.low);
        detail::emit(log, step_, "val", "all", -1, "neps_mid", rep.neps_mean.mid);
        detail::emit(log, step_, "val", "all", -1, "neps_high", rep.neps_mean.high);
    }

private:
    LoopConfig lcfg_;
    std::vector<WindowedDataset<T>> train_data_;
    std::optional<WindowedDataset<T>> val_data_;
    uint64_t seed_ = 0;
    proc::EmulatorModel<T> model_;
    NamedParams<T> params_;
    FreezePartition<T> partition_;
    AdamW<T> opt_;
    std::vector<ShardLoader> loaders_;
    Rng data_rng_, model_rng_;
    int64_t step_ = 0;
    double last_loss_ = 0.0;
    double last_val_vrmse_ = std::numeric_limits<double>::quiet_NaN();
};

} // namespace train
} // namespace physemu
