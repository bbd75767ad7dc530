#include <catch2/catch.hpp>

#include "helpers.hpp"
#include "physemu/processor.hpp"

using namespace physemu;
using namespace physemu::proc;
using testutil::random_tensor;

namespace {

ProcessorConfig tiny_proc(int64_t latent = 6) {
    ProcessorConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 32;
    cfg.heads = 4;
    cfg.latent_dim = latent;
    cfg.max_time = 16;
    return cfg;
}

tok::TokeniserConfig tiny_tok(int64_t c_total = 3) {
    tok::TokeniserConfig cfg;
    cfg.channels = {8, 8, 16};
    cfg.latent_channels = 6;
    cfg.residual_blocks = 1;
    cfg.norm_groups = 4;
    cfg.c_total = c_total;
    return cfg;
}

} // namespace

TEST_CASE("projection: shape contract at reference and desk dims") {
    Rng rng(80);
    SECTION("reference 18 <-> 1088") {
        LatentProjection<float> proj(18, 1088, rng);
        NoGradGuard ng;
        auto z = Var<float>::leaf(random_tensor<float>({1, 18, 3, 8, 8}, rng));
        auto t = proj.project_in(z);
        CHECK(t.val().shape() == std::vector<int64_t>{1, 3, 8, 8, 1088});
        auto z2 = proj.project_out(t);
        CHECK(z2.val().shape() == z.val().shape());
    }
    SECTION("desk 18 <-> 128 behaves identically in the shape contract") {
        LatentProjection<float> proj(18, 128, rng);
        NoGradGuard ng;
        auto z = Var<float>::leaf(random_tensor<float>({2, 18, 5, 4, 4}, rng));
        auto t = proj.project_in(z);
        CHECK(t.val().shape() == std::vector<int64_t>{2, 5, 4, 4, 128});
        CHECK(proj.project_out(t).val().shape() == z.val().shape());
    }
    SECTION("dim mismatch rejected") {
        LatentProjection<float> proj(18, 128, rng);
        auto z(Var<float>::leaf(random_tensor<float>({1, 6, 3, 4, 4}, rng)));
        CHECK_THROWS_AS(proj.project_in(z), ShapeError);
    }
}

TEST_CASE("processor forward: shape preservation and eval determinism") {
    Rng rng(81);
    auto cfg = tiny_proc();
    Processor<float> proc(cfg, rng);
    NoGradGuard ng;
    auto t = Var<float>::leaf(random_tensor<float>({2, 5, 4, 4, 32}, rng));
    auto y1 = proc.forward(t, /*train_mode=*/false);
    CHECK(y1.val().shape() == t.val().shape());
    auto y2 = proc.forward(t, false);
    CHECK(y1.val().bit_identical(y2.val()));
}

TEST_CASE("processor forward: temporal causality in eval mode") {
    Rng rng(82);
    auto cfg = tiny_proc();
    Processor<float> proc(cfg, rng);
    NoGradGuard ng;
    Tensor<float> tv = random_tensor<float>({1, 6, 3, 3, 32}, rng);
    auto y1 = proc.forward(Var<float>::leaf(tv), false);
    // perturb all tokens at times >= 2
    Tensor<float> tp = tv;
    for (int64_t t = 2; t < 6; ++t)
        for (int64_t i = 0; i < 3 * 3 * 32; ++i) tp[(t * 3 * 3 * 32) + i] += 11.0f;
    auto y2 = proc.forward(Var<float>::leaf(tp), false);
    for (int64_t t = 0; t <= 1; ++t)
        for (int64_t i = 0; i < 3 * 3 * 32; ++i)
            REQUIRE(y1.val()[(t * 3 * 3 * 32) + i] == y2.val()[(t * 3 * 3 * 32) + i]);
}

TEST_CASE("drop path: linear schedule with zero rate at block 0") {
    auto cfg = tiny_proc();
    cfg.blocks = 6;
    CHECK(cfg.drop_rate(0) == 0.0);
    for (int64_t i = 1; i < 6; ++i) CHECK(cfg.drop_rate(i) == Approx(0.05 * double(i) / 5.0));
    cfg.blocks = 1;
    CHECK(cfg.drop_rate(0) == 0.0);
}

TEST_CASE("drop path: train mode draws per-sample masks, eval mode is identity") {
    Rng rng(83);
    auto cfg = tiny_proc();
    cfg.drop_path_max = 0.5;
    Processor<float> proc(cfg, rng);
    auto t = Var<float>::leaf(random_tensor<float>({4, 2, 2, 2, 32}, rng));
    NoGradGuard ng;
    Rng dp(7);
    auto y_train_a = proc.forward(t, true, &dp);
    Rng dp2(7);
    auto y_train_b = proc.forward(t, true, &dp2);
    CHECK(y_train_a.val().bit_identical(y_train_b.val())); // same rng stream, same masks
    // any nonzero rate perturbs the residual branch (dropped or rescaled), so
    // train output always differs from the deterministic eval output
    auto y_eval = proc.forward(t, false);
    CHECK_FALSE(y_train_a.val().bit_identical(y_eval.val()));
    CHECK_THROWS_AS(proc.forward(t, true, nullptr), ConfigError);
}

TEST_CASE("rollout_loss: fixed points, hand value, homogeneity") {
    Rng rng(84);
    Tensor<double> x = random_tensor<double>({1, 3, 1, 4, 4}, rng);
    SECTION("identity") {
        CHECK(rollout_loss(Var<double>::leaf(x), Var<double>::leaf(x)).val()[0] == 0.0);
    }
    SECTION("hand value") {
        Tensor<double> a({1, 1, 1, 1, 2}, {0.0, 2.0});
        Tensor<double> b({1, 1, 1, 1, 2}, {1.0, 1.0});
        CHECK(rollout_loss(Var<double>::leaf(a), Var<double>::leaf(b)).val()[0] == Approx(1.0));
    }
    SECTION("homogeneity: scaling both inputs scales the loss by |c|") {
        Tensor<double> xh = random_tensor<double>({1, 3, 1, 4, 4}, rng);
        const double base = rollout_loss(Var<double>::leaf(x), Var<double>::leaf(xh)).val()[0];
        for (double c : {2.0, -3.0}) {
            Tensor<double> xs = x, hs = xh;
            xs.scale_(c);
            hs.scale_(c);
            CHECK(rollout_loss(Var<double>::leaf(xs), Var<double>::leaf(hs)).val()[0] == Approx(std::abs(c) * base).epsilon(1e-12));
        }
    }
    SECTION("shape mismatch rejected") {
        Tensor<double> bad({1, 3, 1, 4, 5});
        CHECK_THROWS_AS(rollout_loss(Var<double>::leaf(x), Var<double>::leaf(bad)), ShapeError);
    }
}

TEST_CASE("predict_next_frame: shapes and identity-loss fixed point") {
    Rng rng(85);
    EmulatorModel<float> model(tiny_tok(), tiny_proc(), rng);
    NoGradGuard ng;
    auto choice = tok::validation_scales(model.tokeniser.config());
    Tensor<float> ctx = random_tensor<float>({1, 3, 9, 16, 16}, rng);
    auto pred = model.predict_next_frame(Var<float>::leaf(ctx), choice, model.tokeniser.all_fields());
    CHECK(pred.val().shape() == std::vector<int64_t>{1, 3, 1, 16, 16});
    CHECK(pred.val().all_finite());
    // rollout loss on a prediction equal to the target is 0
    auto l = rollout_loss(pred, pred);
    CHECK(l.val()[0] == 0.0);
}

TEST_CASE("predict_next_frame: causality through the whole stack") {
    Rng rng(86);
    EmulatorModel<float> model(tiny_tok(), tiny_proc(), rng);
    NoGradGuard ng;
    auto choice = tok::validation_scales(model.tokeniser.config()); // total s_t = 4
    auto active = model.tokeniser.all_fields();

    // prediction from the 9-frame context
    Tensor<float> seq17 = random_tensor<float>({1, 3, 17, 16, 16}, rng);
    Tensor<float> ctx9({1, 3, 9, 16, 16});
    for (int64_t c = 0; c < 3; ++c)
        std::memcpy(ctx9.data() + c * 9 * 256, seq17.data() + c * 17 * 256, sizeof(float) * 9 * 256);
    auto pred9 = model.predict_next_frame(Var<float>::leaf(ctx9), choice, active);

    // the same pipeline on the 17-frame sequence: output frame 8 is the
    // prediction made "as of frame 8" and must not see frames 9..16
    auto full_a = model.process_sequence(Var<float>::leaf(seq17), choice, active, false);
    Tensor<float> seq17_p = seq17;
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t t = 9; t < 17; ++t)
            for (int64_t i = 0; i < 256; ++i) seq17_p[(c * 17 + t) * 256 + i] -= 13.0f;
    auto full_b = model.process_sequence(Var<float>::leaf(seq17_p), choice, active, false);

    for (int64_t c = 0; c < 3; ++c)
        for (int64_t t = 0; t <= 8; ++t)
            for (int64_t i = 0; i < 256; ++i)
                REQUIRE(full_a.val()[(c * 17 + t) * 256 + i] == full_b.val()[(c * 17 + t) * 256 + i]);

    // and the 9-frame prediction coincides with the long sequence's frame 8
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t i = 0; i < 256; ++i)
            REQUIRE(pred9.val()[c * 256 + i] == full_a.val()[(c * 17 + 8) * 256 + i]);
}

TEST_CASE("context shorter than one temporal compression window is rejected") {
    Rng rng(87);
    EmulatorModel<float> model(tiny_tok(), tiny_proc(), rng);
    auto choice = tok::validation_scales(model.tokeniser.config()); // total s_t = 4
    // T = 3 gives T - 1 = 2, not divisible by 4
    CHECK_THROWS_AS(model.predict_next_frame(Var<float>::leaf(Tensor<float>({1, 3, 3, 16, 16})), choice, model.tokeniser.all_fields()),
                    ShapeError);
}

TEST_CASE("emulator parameter tree spans all three components") {
    Rng rng(88);
    EmulatorModel<float> model(tiny_tok(), tiny_proc(), rng);
    auto params = model.named_parameters();
    int tok_n = 0, proj_n = 0, proc_n = 0;
    for (const auto& [name, v] : params.items) {
        if (name.rfind("tokeniser.", 0) == 0) ++tok_n;
        if (name.rfind("projection.", 0) == 0) ++proj_n;
        if (name.rfind("processor.", 0) == 0) ++proc_n;
    }
    CHECK(tok_n > 0);
    CHECK(proj_n == 4); // in/out weight+bias
    CHECK(proc_n > 0);
    CHECK(size_t(tok_n + proj_n + proc_n) == params.items.size());
}
