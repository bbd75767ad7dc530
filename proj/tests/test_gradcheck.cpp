#include <catch2/catch.hpp>

#include "helpers.hpp"
#include "physemu/processor.hpp"
#include "physemu/training.hpp"

using namespace physemu;

namespace {

// Tiny configuration: 2 processor blocks, embedding 32, inputs 9x16x16.
tok::TokeniserConfig grad_tok() {
    tok::TokeniserConfig cfg;
    cfg.channels = {4, 4, 8};
    cfg.latent_channels = 4;
    cfg.residual_blocks = 1;
    cfg.norm_groups = 2;
    cfg.c_total = 3;
    return cfg;
}

proc::ProcessorConfig grad_proc() {
    proc::ProcessorConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.latent_dim = 4;
    cfg.max_time = 16;
    return cfg;
}

struct Probe {
    size_t tensor_index;
    int64_t entry;
};

// gradcheck tolerance: |analytic - numeric| <= atol + rtol * |numeric|
constexpr double kRtol = 1e-3;
constexpr double kAtol = 1e-7;

template <class LossFn>
void run_gradcheck(NamedParams<double>& params, LossFn&& loss_fn, Rng& rng, int64_t n_tensors, int64_t entries_per_tensor) {
    Var<double> loss = loss_fn();
    loss.backward();

    std::vector<size_t> chosen;
    for (size_t i = 0; i < params.items.size(); ++i) chosen.push_back(i);
    // random subset of parameter tensors
    for (size_t i = chosen.size() - 1; i > 0; --i) std::swap(chosen[i], chosen[static_cast<size_t>(rng.uniform_int(int64_t(i + 1)))]);
    chosen.resize(static_cast<size_t>(std::min<int64_t>(n_tensors, int64_t(chosen.size()))));

    double worst = 0.0;
    for (size_t ci : chosen) {
        auto& [name, v] = params.items[ci];
        for (int64_t k = 0; k < entries_per_tensor; ++k) {
            const int64_t idx = rng.uniform_int(v.val().numel());
            const double analytic = v.has_grad() ? v.grad_view()[idx] : 0.0;
            const double numeric = testutil::central_diff(v, idx, [&]() { return loss_fn().val()[0]; }, 1e-6);
            const double err = std::abs(analytic - numeric);
            const double bound = kAtol + kRtol * std::abs(numeric);
            INFO(name << "[" << idx << "]: analytic " << analytic << " vs numeric " << numeric);
            CHECK(err <= bound);
            worst = std::max(worst, err / std::max(std::abs(numeric), 1e-4));
        }
    }
    INFO("worst relative error " << worst);
}

} // namespace

TEST_CASE("full-model gradients match central finite differences at float64") {
    Rng rng(2024);
    proc::EmulatorModel<double> model(grad_tok(), grad_proc(), rng);
    auto params = model.named_parameters();
    for (auto& [n, v] : params.items) v.set_requires_grad(true);

    auto traj = data::gen_advection_trajectory(16, 16, 1, 0, 10, 77);
    Tensor<double> window({1, 3, 10, 16, 16});
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t t = 0; t < 10; ++t)
            std::memcpy(window.data() + (c * 10 + t) * 256, traj.data() + (t * 3 + c) * 256, sizeof(double) * 256);
    Tensor<double> context = train::slice_frames(window, 0, 9);
    Tensor<double> target = train::slice_frames(window, 9, 1);
    auto [ctx_n, state] = tok::rms_normalise(context, data::advection_schema());
    Tensor<double> tgt_n = tok::normalise_with_state(target, data::advection_schema(), state);
    const auto choice = tok::validation_scales(model.tokeniser.config());
    const auto active = model.tokeniser.all_fields();

    SECTION("tokeniser reconstruction MSE") {
        auto loss_fn = [&]() {
            Var<double> x = Var<double>::leaf(ctx_n);
            return tok::tokeniser_loss(x, model.tokeniser.reconstruct(x, choice, active));
        };
        Rng probe_rng(1);
        run_gradcheck(params, loss_fn, probe_rng, 14, 3);
    }

    SECTION("next-frame rollout MAE through the full stack") {
        auto loss_fn = [&]() {
            Var<double> pred = model.predict_next_frame(Var<double>::leaf(ctx_n), choice, active, false);
            return proc::rollout_loss(Var<double>::leaf(tgt_n), pred);
        };
        Rng probe_rng(2);
        run_gradcheck(params, loss_fn, probe_rng, 14, 3);
    }
}
