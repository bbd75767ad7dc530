// physemu command-line interface: synthetic data generation, the two training
// stages, next-frame and rollout evaluation, and report rendering.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "physemu/config.hpp"
#include "physemu/report.hpp"

namespace fs = std::filesystem;
using namespace physemu;
using nlohmann::json;

namespace {

// Exit codes: 0 ok, 2 config, 3 io/missing input, 4 shape, 5 numerics, 1 other.
constexpr int kOk = 0;
constexpr int kGenericError = 1;
constexpr int kConfigError = 2;
constexpr int kIoError = 3;
constexpr int kShapeError = 4;
constexpr int kNumericsError = 5;

bool deterministic_mode() {
    const char* v = std::getenv("PHYSEMU_DETERMINISTIC");
    return v && std::string(v) != "0";
}

void emit_error(const std::string& kind, const std::string& message) {
    json rec = {{"error", kind}, {"message", message}};
    std::cerr << rec.dump() << std::endl;
}

struct CommonOverrides {
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::optional<int64_t> steps;
    std::optional<std::string> freeze;
    std::optional<std::string> tokeniser_init;

    void apply(config::RunConfig& rc) const {
        if (seed) rc.seed = *seed;
        if (out) rc.out_dir = *out;
        if (steps) rc.loop.steps = *steps;
        if (freeze) rc.loop.freeze = train::freeze_from_string(*freeze);
        if (tokeniser_init) rc.tokeniser_init = *tokeniser_init;
        if (deterministic_mode()) rc.loop.deterministic_timing = true;
    }
};

void add_common(CLI::App* cmd, CommonOverrides& o) {
    cmd->add_option("--seed", o.seed, "Override the run seed");
    cmd->add_option("--out", o.out, "Override the output directory");
    cmd->add_option("--steps", o.steps, "Override the training step budget");
}

std::vector<train::WindowedDataset<float>> load_train_data(const config::RunConfig& rc) {
    if (rc.data.train_archives.empty()) raise<ConfigError>("config: data.train lists no archives");
    std::vector<train::WindowedDataset<float>> out;
    for (const auto& p : rc.data.train_archives) {
        if (!fs::exists(p)) raise<IoError>("data archive '", p, "' does not exist");
        out.push_back(train::WindowedDataset<float>::from_archive(p, rc.loop.window_len, rc.data.window_stride));
    }
    return out;
}

std::optional<train::WindowedDataset<float>> load_val_data(const config::RunConfig& rc) {
    if (rc.data.val_archive.empty()) return std::nullopt;
    if (!fs::exists(rc.data.val_archive)) raise<IoError>("validation archive '", rc.data.val_archive, "' does not exist");
    return train::WindowedDataset<float>::from_archive(rc.data.val_archive, rc.loop.window_len, rc.data.window_stride);
}

// ----------------------------- gen-data -----------------------------

int cmd_gen_data(const std::string& config_path, const CommonOverrides& o, std::optional<std::string> out_path) {
    auto rc = config::RunConfig::from_file(config_path, config::Stage::pretrain);
    o.apply(rc);
    const auto& g = rc.gen;
    const std::string out = out_path.value_or(g.out);
    if (out.empty()) raise<ConfigError>("gen-data: no output path (gen.out or --data-out)");
    if (auto parent = fs::path(out).parent_path(); !parent.empty()) fs::create_directories(parent);

    data::FieldSchema schema = g.kind == "advection" ? data::advection_schema() : data::gaussian_field_schema();
    data::DatasetMeta meta;
    meta.name = g.kind;
    meta.height = g.height;
    meta.width = g.width;
    meta.trajectory_length = g.frames;
    meta.tags["seed"] = std::to_string(rc.seed);
    if (g.kind == "advection") {
        meta.tags["velocity"] = "(" + std::to_string(g.vx) + "," + std::to_string(g.vy) + ")";
        meta.tags["smoothness_beta"] = std::to_string(g.smoothness_beta);
    } else {
        meta.tags["beta"] = std::to_string(g.beta);
    }

    data::ArchiveWriter writer(out, schema, meta);
    for (int64_t i = 0; i < g.trajectories; ++i) {
        const uint64_t seed = derive_seed(rc.seed, 0x9e4, static_cast<uint64_t>(i));
        Tensor<double> traj = g.kind == "advection"
                                  ? data::gen_advection_trajectory(g.height, g.width, g.vx, g.vy, g.frames, seed, g.smoothness_beta)
                                  : data::gen_gaussian_field_trajectory(g.height, g.width, g.beta, g.frames, seed);
        writer.add(traj.cast<float>());
    }
    writer.finish();
    std::cout << "wrote " << g.trajectories << " " << g.kind << " trajectories (" << g.frames << "x" << schema.total_channels()
              << "x" << g.height << "x" << g.width << ") to " << out << "\n";
    return kOk;
}

// ----------------------------- training -----------------------------

int cmd_pretrain(const std::string& config_path, const CommonOverrides& o) {
    auto rc = config::RunConfig::from_file(config_path, config::Stage::pretrain);
    o.apply(rc);
    report::RunDir run(rc.out_dir);
    run.write_snapshot(rc.snapshot());
    run.log_event("pretrain: loading data");
    auto train_data = load_train_data(rc);
    auto val_data = load_val_data(rc);

    train::PretrainSession<float> session(rc.tokeniser, rc.loop, std::move(train_data), std::move(val_data), rc.seed);
    run.log_event("pretrain: start (steps=" + std::to_string(rc.loop.steps) + ")");
    try {
        session.run([&](const train::LogRow& r) { run.append_metric(r); },
                    [&](const ckpt::Checkpoint& c, int64_t step) {
                        c.save(run.checkpoint_path(step));
                        run.log_event("checkpoint: step " + std::to_string(step));
                    });
    } catch (const NumericsError&) {
        auto snap = session.snapshot();
        snap.meta["kind_note"] = "diagnostic";
        snap.save(run.checkpoint_path(session.step()) + "_diagnostic");
        run.log_event("pretrain: aborted on non-finite loss; diagnostic checkpoint saved");
        throw;
    }
    run.log_event("pretrain: done, final loss " + report::format_value(session.last_loss()));
    std::cout << "pretrain finished at step " << session.step() << ", final loss " << session.last_loss() << "\n"
              << "run directory: " << run.root().string() << "\n";
    return kOk;
}

int cmd_rollout_train(const std::string& config_path, const CommonOverrides& o) {
    auto rc = config::RunConfig::from_file(config_path, config::Stage::rollout);
    o.apply(rc);
    report::RunDir run(rc.out_dir);
    run.write_snapshot(rc.snapshot());
    run.log_event("rollout-train: loading data");
    auto train_data = load_train_data(rc);
    auto val_data = load_val_data(rc);

    std::optional<ckpt::Checkpoint> init;
    if (rc.tokeniser_init != "fresh") {
        if (!fs::exists(rc.tokeniser_init)) raise<IoError>("tokeniser init checkpoint '", rc.tokeniser_init, "' does not exist");
        init = ckpt::Checkpoint::load(rc.tokeniser_init);
        run.log_event("rollout-train: tokeniser initialised from " + rc.tokeniser_init);
    }
    train::RolloutSession<float> session(rc.tokeniser, rc.processor, rc.loop, std::move(train_data), std::move(val_data), rc.seed,
                                         init ? &*init : nullptr);
    const auto counts = train::trainable_fraction(session.model().named_parameters(), rc.loop.freeze);
    run.log_event("rollout-train: trainable " + std::to_string(counts.trainable) + " of " + std::to_string(counts.total) +
                  " parameters (" + report::format_value(counts.fraction) + ")");
    run.log_event("rollout-train: start (steps=" + std::to_string(rc.loop.steps) + ", freeze=" +
                  train::freeze_to_string(rc.loop.freeze) + ")");
    try {
        session.run([&](const train::LogRow& r) { run.append_metric(r); },
                    [&](const ckpt::Checkpoint& c, int64_t step) {
                        c.save(run.checkpoint_path(step));
                        run.log_event("checkpoint: step " + std::to_string(step));
                    });
    } catch (const NumericsError&) {
        auto snap = session.snapshot();
        snap.meta["kind_note"] = "diagnostic";
        snap.save(run.checkpoint_path(session.step()) + "_diagnostic");
        run.log_event("rollout-train: aborted on non-finite loss; diagnostic checkpoint saved");
        throw;
    }
    run.log_event("rollout-train: done, final loss " + report::format_value(session.last_loss()));
    std::cout << "rollout training finished at step " << session.step() << ", final loss " << session.last_loss() << "\n"
              << "run directory: " << run.root().string() << "\n";
    return kOk;
}

// ----------------------------- evaluation -----------------------------

void write_eval_outputs(const metrics::MetricReport& rep, const data::FieldSchema& schema, const std::string& out_dir,
                        const std::string& stem) {
    fs::create_directories(out_dir);
    std::ofstream csv(fs::path(out_dir) / (stem + ".csv"));
    csv << report::kMetricsHeader << "\n";
    auto offsets = schema.channel_offsets();
    auto field_name = [&](int64_t channel) {
        for (size_t f = 0; f < schema.entries.size(); ++f) {
            const int64_t c0 = offsets[f];
            if (channel >= c0 && channel < c0 + data::channels_for(schema.entries[f].rank)) return schema.entries[f].name;
        }
        return std::string("channel") + std::to_string(channel);
    };
    auto put = [&](const std::string& field, int64_t frame, const std::string& metric, double value) {
        csv << 0 << ",eval," << field << ',' << frame << ',' << metric << ',' << report::format_value(value) << '\n';
    };
    for (const auto& r : rep.rows) {
        if (r.vrmse) put(field_name(r.field), r.frame, "vrmse", *r.vrmse);
        if (r.neps.low_defined()) put(field_name(r.field), r.frame, "neps_low", r.neps.low);
        if (r.neps.mid_defined()) put(field_name(r.field), r.frame, "neps_mid", r.neps.mid);
        if (r.neps.high_defined()) put(field_name(r.field), r.frame, "neps_high", r.neps.high);
    }
    put("all", -1, "vrmse", rep.vrmse_mean);
    put("all", -1, "neps_low", rep.neps_mean.low);
    put("all", -1, "neps_mid", rep.neps_mean.mid);
    put("all", -1, "neps_high", rep.neps_mean.high);

    json summary = {{"vrmse", rep.vrmse_mean},
                    {"neps_low", rep.neps_mean.low},
                    {"neps_mid", rep.neps_mean.mid},
                    {"neps_high", rep.neps_mean.high},
                    {"rows", rep.rows.size()},
                    {"degenerate_frames", rep.degenerate_frames}};
    std::ofstream js(fs::path(out_dir) / (stem + ".json"));
    js << summary.dump(2) << "\n";
    std::cout << stem << ": VRMSE " << rep.vrmse_mean << ", NEPS (" << rep.neps_mean.low << ", " << rep.neps_mean.mid << ", "
              << rep.neps_mean.high << ")\n";
}

// Archive-vs-archive comparison (predictions against targets, frame by frame).
int cmd_eval_archives(const config::RunConfig& rc, const std::string& pred_path, const std::string& target_path) {
    if (!fs::exists(pred_path)) raise<IoError>("prediction archive '", pred_path, "' does not exist");
    if (!fs::exists(target_path)) raise<IoError>("target archive '", target_path, "' does not exist");
    data::ArchiveReader pred(pred_path);
    data::ArchiveReader target(target_path, pred.schema());
    if (pred.size() != target.size())
        raise<ShapeError>("eval: archives hold ", pred.size(), " vs ", target.size(), " trajectories");
    auto part = rc.metrics_cfg.partition(target.meta().height, target.meta().width);
    metrics::MetricReport rep;
    for (int64_t i = 0; i < pred.size(); ++i) {
        Tensor<double> p = pred.read(i).cast<double>();
        Tensor<double> t = target.read(i).cast<double>();
        check_shape(p.same_shape(t), "eval: trajectory " + std::to_string(i) + " shapes differ");
        auto r = metrics::evaluate_frames(t, p, part);
        for (auto& row : r.rows) rep.rows.push_back(row);
    }
    rep.finalise();
    write_eval_outputs(rep, pred.schema(), rc.out_dir, "eval");
    return kOk;
}

// Next-frame evaluation of a trained model over the validation archive.
int cmd_eval_checkpoint(const config::RunConfig& rc, const std::string& ckpt_path) {
    if (!fs::exists(ckpt_path)) raise<IoError>("checkpoint '", ckpt_path, "' does not exist");
    auto c = ckpt::Checkpoint::load(ckpt_path);
    if (c.meta.value("kind", "") != "rollout_train")
        raise<IoError>("eval: checkpoint kind '", c.meta.value("kind", "?"), "' is not a rollout model");
    Rng init(derive_seed(rc.seed, 0x2027));
    proc::EmulatorModel<float> model(rc.tokeniser, rc.processor, init);
    auto params = model.named_parameters();
    c.load_params(params);

    if (rc.data.val_archive.empty()) raise<ConfigError>("eval: config needs data.val for checkpoint evaluation");
    auto vd = train::WindowedDataset<float>::from_archive(rc.data.val_archive, rc.loop.window_len, rc.data.window_stride);
    auto part = rc.metrics_cfg.partition(vd.H, vd.W);
    const auto choice = tok::validation_scales(model.tokeniser.config());
    const auto offsets = vd.schema.channel_offsets();
    NoGradGuard ng;
    metrics::MetricReport rep;
    const int64_t n = std::min<int64_t>(vd.size(), rc.loop.val_examples > 0 ? rc.loop.val_examples : vd.size());
    for (int64_t i = 0; i < n; ++i) {
        Tensor<float> window = vd.gather({i});
        Tensor<float> context = train::slice_frames(window, 0, rc.loop.context_frames);
        Tensor<float> target = train::slice_frames(window, rc.loop.context_frames, 1);
        auto [ctx_n, state] = tok::rms_normalise(context, vd.schema);
        auto pred = model.predict_next_frame(Var<float>::leaf(std::move(ctx_n)), choice, model.tokeniser.all_fields());
        Tensor<float> pred_phys = tok::denormalise(pred.val(), vd.schema, state);
        for (int64_t ch = 0; ch < vd.schema.total_channels(); ++ch) {
            metrics::MetricRow row;
            row.frame = rc.loop.context_frames;
            row.field = ch;
            row.vrmse = metrics::try_vrmse(target.data() + ch * vd.H * vd.W, pred_phys.data() + ch * vd.H * vd.W, vd.H * vd.W);
            row.neps = metrics::neps(target.data() + ch * vd.H * vd.W, pred_phys.data() + ch * vd.H * vd.W, part);
            rep.rows.push_back(row);
        }
    }
    (void)offsets;
    rep.finalise();
    write_eval_outputs(rep, vd.schema, rc.out_dir, "eval");
    return kOk;
}

int cmd_rollout_eval(const config::RunConfig& rc, const std::string& ckpt_path) {
    if (!fs::exists(ckpt_path)) raise<IoError>("checkpoint '", ckpt_path, "' does not exist");
    auto c = ckpt::Checkpoint::load(ckpt_path);
    if (c.meta.value("kind", "") != "rollout_train")
        raise<IoError>("rollout-eval: checkpoint kind '", c.meta.value("kind", "?"), "' is not a rollout model");
    Rng init(derive_seed(rc.seed, 0x2027));
    proc::EmulatorModel<float> model(rc.tokeniser, rc.processor, init);
    auto params = model.named_parameters();
    c.load_params(params);

    if (rc.data.val_archive.empty()) raise<ConfigError>("rollout-eval: config needs data.val");
    data::ArchiveReader reader(rc.data.val_archive);
    std::vector<Tensor<float>> trajs = reader.read_all();
    const auto schema = reader.schema();
    const auto choice = tok::validation_scales(model.tokeniser.config());
    const int64_t ctx = rc.loop.context_frames;
    NoGradGuard ng;

    // model adapter: (context, C, H, W) frame stack -> next frame (C, H, W)
    auto model_fn = [&](const Tensor<float>& window) {
        const int64_t C = window.size(1), H = window.size(2), W = window.size(3);
        Tensor<float> x({1, C, ctx, H, W});
        for (int64_t t = 0; t < ctx; ++t)
            for (int64_t ch = 0; ch < C; ++ch)
                std::memcpy(x.data() + (ch * ctx + t) * H * W, window.data() + (t * C + ch) * H * W,
                            sizeof(float) * static_cast<size_t>(H * W));
        auto [xn, state] = tok::rms_normalise(x, schema);
        auto pred = model.predict_next_frame(Var<float>::leaf(std::move(xn)), choice, model.tokeniser.all_fields());
        Tensor<float> phys = tok::denormalise(pred.val(), schema, state);
        return phys.reshaped({C, H, W});
    };

    auto buckets = metrics::rollout_evaluate<float>(model_fn, trajs, ctx, rc.metrics_cfg.rollout_steps);
    std::cout << "rollout horizons (VRMSE):\n"
              << "  steps 1-2:  " << buckets.early << "\n"
              << "  steps 3-6:  " << buckets.medium << "\n"
              << "  steps 7-18: " << buckets.long_ << "\n"
              << "  trajectories evaluated " << buckets.trajectories_evaluated << ", skipped (too short) "
              << buckets.trajectories_skipped << "\n";
    fs::create_directories(rc.out_dir);
    std::ofstream csv(fs::path(rc.out_dir) / "rollout.csv");
    csv << "bucket,steps,vrmse\n";
    csv << "early,1-2," << report::format_value(buckets.early) << "\n";
    csv << "medium,3-6," << report::format_value(buckets.medium) << "\n";
    csv << "long,7-18," << report::format_value(buckets.long_) << "\n";
    for (size_t s = 0; s < buckets.per_step.size(); ++s)
        csv << "step," << (s + 1) << "," << report::format_value(buckets.per_step[s]) << "\n";
    json summary = {{"early", buckets.early},
                    {"medium", buckets.medium},
                    {"long", buckets.long_},
                    {"per_step", buckets.per_step},
                    {"trajectories_evaluated", buckets.trajectories_evaluated},
                    {"trajectories_skipped", buckets.trajectories_skipped}};
    std::ofstream js(fs::path(rc.out_dir) / "rollout.json");
    js << summary.dump(2) << "\n";
    return kOk;
}

int cmd_lr_curve(const std::string& config_path, std::optional<std::string> out_path) {
    auto rc = config::RunConfig::from_file(config_path, config::Stage::rollout);
    std::ofstream file;
    std::ostream* os = &std::cout;
    if (out_path) {
        file.open(*out_path);
        if (!file) raise<IoError>("lr-curve: cannot write '", *out_path, "'");
        os = &file;
    }
    *os << "epoch,lr\n";
    for (int64_t e = 0; e <= rc.sched.total_epochs; ++e)
        *os << e << ',' << report::format_value(schedule::lr_at_epoch(e, rc.sched)) << '\n';
    return kOk;
}

int cmd_report(const std::string& run_dir) {
    const fs::path metrics_path = fs::path(run_dir) / "metrics.csv";
    if (!fs::exists(metrics_path)) raise<IoError>("report: '", metrics_path.string(), "' does not exist");
    auto rows = report::read_metrics_csv(metrics_path.string());
    report::write_curves_csv(rows, (fs::path(run_dir) / "curves.csv").string());
    report::render_curves_svg(rows, (fs::path(run_dir) / "curves.svg").string());
    std::cout << "report written: " << (fs::path(run_dir) / "curves.csv").string() << ", "
              << (fs::path(run_dir) / "curves.svg").string() << "\n";
    return kOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"physemu: flexible-compression tokeniser + spatiotemporal transformer physics emulation"};
    app.require_subcommand(1);

    std::string config_path, run_dir, ckpt_path, pred_path, target_path;
    std::optional<std::string> data_out;
    CommonOverrides o_pre, o_roll, o_gen, o_eval, o_reval;

    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic trajectory archive");
    gen->add_option("config", config_path, "Run configuration (json)")->required();
    gen->add_option("--data-out", data_out, "Override gen.out archive path");
    add_common(gen, o_gen);

    auto* pre = app.add_subcommand("pretrain", "Tokeniser pretraining (autoencoding MSE)");
    pre->add_option("config", config_path, "Run configuration (json)")->required();
    add_common(pre, o_pre);

    auto* roll = app.add_subcommand("rollout-train", "Autoregressive rollout training (next-frame MAE)");
    roll->add_option("config", config_path, "Run configuration (json)")->required();
    add_common(roll, o_roll);
    roll->add_option("--freeze", o_roll.freeze, "full | mostly-frozen");
    roll->add_option("--tokeniser-init", o_roll.tokeniser_init, "fresh | <pretrain checkpoint path>");

    auto* ev = app.add_subcommand("eval", "Next-frame metrics for a checkpoint, or archive-vs-archive comparison");
    ev->add_option("config", config_path, "Run configuration (json)")->required();
    ev->add_option("--checkpoint", ckpt_path, "Rollout checkpoint to evaluate");
    ev->add_option("--pred", pred_path, "Prediction archive (compare directly against --target)");
    ev->add_option("--target", target_path, "Target archive");
    add_common(ev, o_eval);

    auto* rev = app.add_subcommand("rollout-eval", "Autoregressive rollout evaluation with horizon buckets");
    rev->add_option("config", config_path, "Run configuration (json)")->required();
    rev->add_option("--checkpoint", ckpt_path, "Rollout checkpoint to evaluate")->required();
    add_common(rev, o_reval);

    auto* rep = app.add_subcommand("report", "Render learning curves (csv + svg) from a run directory");
    rep->add_option("run_dir", run_dir, "Run directory containing metrics.csv")->required();

    std::optional<std::string> lr_out;
    auto* lrc = app.add_subcommand("lr-curve", "Export the rollout learning-rate schedule as CSV");
    lrc->add_option("config", config_path, "Run configuration (json)")->required();
    lrc->add_option("--out", lr_out, "Output CSV path (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, o_gen, data_out);
        if (pre->parsed()) return cmd_pretrain(config_path, o_pre);
        if (roll->parsed()) return cmd_rollout_train(config_path, o_roll);
        if (ev->parsed()) {
            auto rc = config::RunConfig::from_file(config_path, config::Stage::rollout);
            o_eval.apply(rc);
            if (!pred_path.empty() || !target_path.empty()) {
                if (pred_path.empty() || target_path.empty()) raise<ConfigError>("eval: --pred and --target go together");
                return cmd_eval_archives(rc, pred_path, target_path);
            }
            if (ckpt_path.empty()) raise<ConfigError>("eval: need --checkpoint, or --pred with --target");
            return cmd_eval_checkpoint(rc, ckpt_path);
        }
        if (rev->parsed()) {
            auto rc = config::RunConfig::from_file(config_path, config::Stage::rollout);
            o_reval.apply(rc);
            return cmd_rollout_eval(rc, ckpt_path);
        }
        if (rep->parsed()) return cmd_report(run_dir);
        if (lrc->parsed()) return cmd_lr_curve(config_path, lr_out);
    } catch (const ConfigError& e) {
        emit_error("config", e.what());
        return kConfigError;
    } catch (const IoError& e) {
        emit_error("io", e.what());
        return kIoError;
    } catch (const ShapeError& e) {
        emit_error("shape", e.what());
        return kShapeError;
    } catch (const NumericsError& e) {
        emit_error("numerics", e.what());
        return kNumericsError;
    } catch (const std::exception& e) {
        emit_error("internal", e.what());
        return kGenericError;
    }
    return kGenericError;
}
