#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <json.hpp>

#include "physemu/processor.hpp"
#include "physemu/schedule.hpp"
#include "physemu/tokeniser.hpp"
#include "physemu/training.hpp"

namespace physemu {
namespace config {

using nlohmann::json;

namespace detail {

inline void require_keys(const json& j, const std::string& where, const std::set<std::string>& allowed) {
    if (!j.is_object()) raise<ConfigError>("config: '", where, "' must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key())) raise<ConfigError>("config: unknown key '", where, ".", it.key(), "'");
}

template <class T>
T get_or(const json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        raise<ConfigError>("config: bad value for '", key, "': ", e.what());
    }
}

} // namespace detail

// ----------------------------- sections -----------------------------

struct DataSection {
    std::vector<std::string> train_archives;
    std::string val_archive; // optional
    int64_t window_stride = 0;

    static DataSection parse(const json& j) {
        detail::require_keys(j, "data", {"train", "val", "window_stride"});
        DataSection d;
        if (j.contains("train"))
            for (const auto& p : j.at("train")) d.train_archives.push_back(p.get<std::string>());
        d.val_archive = detail::get_or<std::string>(j, "val", "");
        d.window_stride = detail::get_or<int64_t>(j, "window_stride", 0);
        return d;
    }

    json to_json() const {
        return {{"train", train_archives}, {"val", val_archive}, {"window_stride", window_stride}};
    }
};

struct GenSection {
    std::string kind = "advection"; // advection | gaussian
    int64_t height = 32, width = 32;
    int64_t frames = 30;
    int64_t trajectories = 8;
    int64_t vx = 1, vy = 0;
    double beta = 2.0;            // gaussian spectral slope
    double smoothness_beta = 3.0; // advection base-field slope
    std::string out = "data.phta";

    static GenSection parse(const json& j) {
        detail::require_keys(j, "gen",
                             {"kind", "height", "width", "frames", "trajectories", "vx", "vy", "beta", "smoothness_beta", "out"});
        GenSection g;
        g.kind = detail::get_or<std::string>(j, "kind", g.kind);
        if (g.kind != "advection" && g.kind != "gaussian")
            raise<ConfigError>("config: gen.kind must be advection | gaussian, got '", g.kind, "'");
        g.height = detail::get_or<int64_t>(j, "height", g.height);
        g.width = detail::get_or<int64_t>(j, "width", g.width);
        g.frames = detail::get_or<int64_t>(j, "frames", g.frames);
        g.trajectories = detail::get_or<int64_t>(j, "trajectories", g.trajectories);
        g.vx = detail::get_or<int64_t>(j, "vx", g.vx);
        g.vy = detail::get_or<int64_t>(j, "vy", g.vy);
        g.beta = detail::get_or<double>(j, "beta", g.beta);
        g.smoothness_beta = detail::get_or<double>(j, "smoothness_beta", g.smoothness_beta);
        g.out = detail::get_or<std::string>(j, "out", g.out);
        return g;
    }

    json to_json() const {
        return {{"kind", kind},           {"height", height}, {"width", width},
                {"frames", frames},       {"trajectories", trajectories},
                {"vx", vx},               {"vy", vy},
                {"beta", beta},           {"smoothness_beta", smoothness_beta},
                {"out", out}};
    }
};

inline tok::TokeniserConfig parse_tokeniser(const json& j) {
    detail::require_keys(j, "tokeniser", {"channels", "latent_channels", "residual_blocks", "norm_groups", "c_total", "depth_scales"});
    tok::TokeniserConfig cfg;
    if (j.contains("channels")) cfg.channels = j.at("channels").get<std::vector<int64_t>>();
    cfg.latent_channels = detail::get_or<int64_t>(j, "latent_channels", cfg.latent_channels);
    cfg.residual_blocks = detail::get_or<int64_t>(j, "residual_blocks", cfg.residual_blocks);
    cfg.norm_groups = detail::get_or<int64_t>(j, "norm_groups", cfg.norm_groups);
    cfg.c_total = detail::get_or<int64_t>(j, "c_total", cfg.c_total);
    if (j.contains("depth_scales")) {
        cfg.depth_scales.clear();
        for (const auto& set : j.at("depth_scales")) {
            std::vector<ops::ScalePair> s;
            for (const auto& pair : set) {
                if (!pair.is_array() || pair.size() != 2) raise<ConfigError>("config: depth_scales entries must be [s_t, s_s]");
                s.push_back({pair.at(0).get<int64_t>(), pair.at(1).get<int64_t>()});
            }
            cfg.depth_scales.push_back(std::move(s));
        }
    }
    cfg.validate();
    return cfg;
}

inline json tokeniser_to_json(const tok::TokeniserConfig& cfg) {
    json scales = json::array();
    for (const auto& set : cfg.depth_scales) {
        json s = json::array();
        for (const auto& p : set) s.push_back({p.st, p.ss});
        scales.push_back(s);
    }
    return {{"channels", cfg.channels},
            {"latent_channels", cfg.latent_channels},
            {"residual_blocks", cfg.residual_blocks},
            {"norm_groups", cfg.norm_groups},
            {"c_total", cfg.c_total},
            {"depth_scales", scales}};
}

inline proc::ProcessorConfig parse_processor(const json& j, int64_t latent_dim) {
    detail::require_keys(j, "processor", {"blocks", "embed_dim", "heads", "mlp_ratio", "drop_path_max", "max_time"});
    proc::ProcessorConfig cfg;
    cfg.blocks = detail::get_or<int64_t>(j, "blocks", cfg.blocks);
    cfg.embed_dim = detail::get_or<int64_t>(j, "embed_dim", cfg.embed_dim);
    cfg.heads = detail::get_or<int64_t>(j, "heads", cfg.heads);
    cfg.mlp_ratio = detail::get_or<int64_t>(j, "mlp_ratio", cfg.mlp_ratio);
    cfg.drop_path_max = detail::get_or<double>(j, "drop_path_max", cfg.drop_path_max);
    cfg.max_time = detail::get_or<int64_t>(j, "max_time", cfg.max_time);
    cfg.latent_dim = latent_dim;
    cfg.validate();
    return cfg;
}

inline json processor_to_json(const proc::ProcessorConfig& cfg) {
    return {{"blocks", cfg.blocks},       {"embed_dim", cfg.embed_dim}, {"heads", cfg.heads},
            {"mlp_ratio", cfg.mlp_ratio}, {"drop_path_max", cfg.drop_path_max}, {"max_time", cfg.max_time}};
}

inline schedule::ScheduleConfig parse_schedule(const json& j, int64_t* steps_per_epoch) {
    detail::require_keys(j, "schedule", {"epochs", "warmup", "cooldown", "alpha", "kappa", "lr_peak", "steps_per_epoch"});
    schedule::ScheduleConfig cfg;
    cfg.total_epochs = detail::get_or<int64_t>(j, "epochs", 100);
    cfg.warmup_epochs = detail::get_or<int64_t>(j, "warmup", 5);
    cfg.cooldown_epochs = detail::get_or<int64_t>(j, "cooldown", 10);
    cfg.alpha = detail::get_or<double>(j, "alpha", 0.1);
    cfg.kappa = detail::get_or<double>(j, "kappa", 128.0);
    cfg.lr_peak = detail::get_or<double>(j, "lr_peak", 5e-5);
    *steps_per_epoch = detail::get_or<int64_t>(j, "steps_per_epoch", 10);
    cfg.validate();
    return cfg;
}

inline json schedule_to_json(const schedule::ScheduleConfig& cfg, int64_t steps_per_epoch) {
    return {{"epochs", cfg.total_epochs}, {"warmup", cfg.warmup_epochs}, {"cooldown", cfg.cooldown_epochs},
            {"alpha", cfg.alpha},         {"kappa", cfg.kappa},          {"lr_peak", cfg.lr_peak},
            {"steps_per_epoch", steps_per_epoch}};
}

inline schedule::OptimiserConfig parse_optimiser(const json& j, schedule::OptimiserConfig base) {
    detail::require_keys(j, "training.optimiser", {"kind", "lr", "beta1", "beta2", "weight_decay", "eps", "grad_clip"});
    base.kind = detail::get_or<std::string>(j, "kind", base.kind);
    base.lr = detail::get_or<double>(j, "lr", base.lr);
    base.beta1 = detail::get_or<double>(j, "beta1", base.beta1);
    base.beta2 = detail::get_or<double>(j, "beta2", base.beta2);
    base.weight_decay = detail::get_or<double>(j, "weight_decay", base.weight_decay);
    base.eps = detail::get_or<double>(j, "eps", base.eps);
    base.grad_clip = detail::get_or<double>(j, "grad_clip", base.grad_clip);
    base.validate();
    return base;
}

inline json optimiser_to_json(const schedule::OptimiserConfig& c) {
    return {{"kind", c.kind},  {"lr", c.lr},   {"beta1", c.beta1},       {"beta2", c.beta2},
            {"weight_decay", c.weight_decay}, {"eps", c.eps}, {"grad_clip", c.grad_clip}};
}

struct MetricsSection {
    int64_t band_low = -1;  // -1: equal thirds
    int64_t band_mid = -1;
    int64_t rollout_steps = 18;

    static MetricsSection parse(const json& j) {
        detail::require_keys(j, "metrics", {"band_low", "band_mid", "rollout_steps"});
        MetricsSection m;
        m.band_low = detail::get_or<int64_t>(j, "band_low", m.band_low);
        m.band_mid = detail::get_or<int64_t>(j, "band_mid", m.band_mid);
        m.rollout_steps = detail::get_or<int64_t>(j, "rollout_steps", m.rollout_steps);
        return m;
    }

    json to_json() const { return {{"band_low", band_low}, {"band_mid", band_mid}, {"rollout_steps", rollout_steps}}; }

    metrics::BandPartition partition(int64_t H, int64_t W) const {
        if (band_low >= 0 && band_mid > band_low)
            return metrics::BandPartition::make(H, W, std::make_pair(int(band_low), int(band_mid)));
        return metrics::BandPartition::make(H, W);
    }
};

// ----------------------------- run configuration -----------------------------

enum class Stage { pretrain, rollout };

struct RunConfig {
    uint64_t seed = 0;
    std::string out_dir = "runs/run";
    DataSection data;
    GenSection gen;
    tok::TokeniserConfig tokeniser;
    proc::ProcessorConfig processor;
    schedule::ScheduleConfig sched;
    MetricsSection metrics_cfg;
    train::LoopConfig loop; // stage-specific defaults applied at parse time
    std::string tokeniser_init = "fresh";

    static RunConfig parse(const json& j, Stage stage) {
        detail::require_keys(j, "<root>",
                             {"seed", "out", "data", "gen", "tokeniser", "processor", "schedule", "training", "metrics"});
        RunConfig rc;
        rc.seed = detail::get_or<uint64_t>(j, "seed", 0);
        rc.out_dir = detail::get_or<std::string>(j, "out", rc.out_dir);
        if (j.contains("data")) rc.data = DataSection::parse(j.at("data"));
        if (j.contains("gen")) rc.gen = GenSection::parse(j.at("gen"));
        rc.tokeniser = j.contains("tokeniser") ? parse_tokeniser(j.at("tokeniser")) : tok::TokeniserConfig{};
        rc.processor = j.contains("processor") ? parse_processor(j.at("processor"), rc.tokeniser.latent_channels)
                                               : proc::ProcessorConfig{};
        rc.processor.latent_dim = rc.tokeniser.latent_channels;
        int64_t spe = 10;
        if (j.contains("schedule"))
            rc.sched = parse_schedule(j.at("schedule"), &spe);
        else {
            rc.sched.total_epochs = 100;
            rc.sched.warmup_epochs = 5;
            rc.sched.cooldown_epochs = 10;
        }
        if (j.contains("metrics")) rc.metrics_cfg = MetricsSection::parse(j.at("metrics"));

        train::LoopConfig& l = rc.loop;
        l.optim = stage == Stage::pretrain ? schedule::OptimiserConfig::tokeniser_reference()
                                           : schedule::OptimiserConfig::rollout_reference();
        if (j.contains("training")) {
            const json& t = j.at("training");
            detail::require_keys(t, "training",
                                 {"steps", "micro_batch", "accumulation", "context_frames", "freeze", "compression_mode",
                                  "val_cadence", "val_examples", "checkpoint_cadence", "unique_batch_budget", "shards",
                                  "shard_id", "tokeniser_init", "optimiser"});
            l.steps = detail::get_or<int64_t>(t, "steps", l.steps);
            l.micro_batch = detail::get_or<int64_t>(t, "micro_batch", l.micro_batch);
            l.accumulation = detail::get_or<int64_t>(t, "accumulation", l.accumulation);
            l.context_frames = detail::get_or<int64_t>(t, "context_frames", l.context_frames);
            l.window_len = l.context_frames + 1;
            l.freeze = train::freeze_from_string(detail::get_or<std::string>(t, "freeze", "full"));
            const std::string cm = detail::get_or<std::string>(t, "compression_mode", "sample");
            if (cm != "sample" && cm != "fixed") raise<ConfigError>("config: training.compression_mode must be sample | fixed");
            l.sample_compression = cm == "sample";
            l.val_cadence = detail::get_or<int64_t>(t, "val_cadence", l.val_cadence);
            l.val_examples = detail::get_or<int64_t>(t, "val_examples", l.val_examples);
            l.checkpoint_cadence = detail::get_or<int64_t>(t, "checkpoint_cadence", l.checkpoint_cadence);
            l.unique_batch_budget = detail::get_or<int64_t>(t, "unique_batch_budget", l.unique_batch_budget);
            l.num_shards = detail::get_or<int64_t>(t, "shards", l.num_shards);
            l.shard_id = detail::get_or<int64_t>(t, "shard_id", l.shard_id);
            rc.tokeniser_init = detail::get_or<std::string>(t, "tokeniser_init", rc.tokeniser_init);
            if (t.contains("optimiser")) l.optim = parse_optimiser(t.at("optimiser"), l.optim);
        }
        l.sched = rc.sched;
        l.steps_per_epoch = spe;
        l.validate_common();
        return rc;
    }

    static RunConfig from_file(const std::string& path, Stage stage) {
        std::ifstream is(path);
        if (!is) raise<IoError>("config: cannot open '", path, "'");
        json j;
        try {
            j = json::parse(is);
        } catch (const json::exception& e) {
            raise<ConfigError>("config: '", path, "' is not valid json: ", e.what());
        }
        return parse(j, stage);
    }

    // Fully resolved snapshot (all defaults expanded).
    json snapshot() const {
        return {{"seed", seed},
                {"out", out_dir},
                {"data", data.to_json()},
                {"gen", gen.to_json()},
                {"tokeniser", tokeniser_to_json(tokeniser)},
                {"processor", processor_to_json(processor)},
                {"schedule", schedule_to_json(sched, loop.steps_per_epoch)},
                {"metrics", metrics_cfg.to_json()},
                {"training",
                 {{"steps", loop.steps},
                  {"micro_batch", loop.micro_batch},
                  {"accumulation", loop.accumulation},
                  {"context_frames", loop.context_frames},
                  {"freeze", train::freeze_to_string(loop.freeze)},
                  {"compression_mode", loop.sample_compression ? "sample" : "fixed"},
                  {"val_cadence", loop.val_cadence},
                  {"val_examples", loop.val_examples},
                  {"checkpoint_cadence", loop.checkpoint_cadence},
                  {"unique_batch_budget", loop.unique_batch_budget},
                  {"shards", loop.num_shards},
                  {"shard_id", loop.shard_id},
                  {"tokeniser_init", tokeniser_init},
                  {"optimiser", optimiser_to_json(loop.optim)}}}};
    }
};

} // namespace config
} // namespace physemu
