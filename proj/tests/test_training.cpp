#include <catch2/catch.hpp>

#include <set>

#include "helpers.hpp"
#include "physemu/training.hpp"

using namespace physemu;
using namespace physemu::train;

namespace {

tok::TokeniserConfig tiny_tok() {
    tok::TokeniserConfig cfg;
    cfg.channels = {4, 4, 8};
    cfg.latent_channels = 4;
    cfg.residual_blocks = 1;
    cfg.norm_groups = 2;
    cfg.c_total = 3;
    return cfg;
}

proc::ProcessorConfig tiny_proc() {
    proc::ProcessorConfig cfg;
    cfg.blocks = 2;
    cfg.embed_dim = 16;
    cfg.heads = 2;
    cfg.latent_dim = 4;
    cfg.max_time = 16;
    return cfg;
}

WindowedDataset<float> advection_dataset(int64_t n_traj, int64_t frames, int64_t hw, uint64_t seed) {
    std::vector<Tensor<float>> trajs;
    for (int64_t i = 0; i < n_traj; ++i)
        trajs.push_back(data::gen_advection_trajectory(hw, hw, 1, 0, frames, seed + static_cast<uint64_t>(i)).cast<float>());
    return WindowedDataset<float>::from_trajectories(data::advection_schema(), std::move(trajs));
}

LoopConfig fast_loop(int64_t steps) {
    LoopConfig l;
    l.steps = steps;
    l.micro_batch = 2;
    l.accumulation = 1;
    l.val_cadence = 0;
    l.deterministic_timing = true;
    return l;
}

} // namespace

TEST_CASE("reference budgets match the training recipe") {
    CHECK(kPretrainReferenceSteps == 168000);
    CHECK(kRolloutReferenceSteps == 29400);
    CHECK(kPretrainReferenceUniqueBatches == 21000);
    CHECK(kRolloutReferenceUniqueBatches == 2100);
}

TEST_CASE("ShardLoader: uniqueness, reseeding, and shard disjointness") {
    SECTION("first `budget` batches are pairwise distinct") {
        ShardLoader loader(60, 2, 0, 1, 7, 10);
        CHECK(loader.budget() == 10);
        std::set<std::vector<int64_t>> seen;
        std::set<int64_t> samples_in_pass;
        for (int i = 0; i < 10; ++i) {
            auto b = loader.next_batch();
            CHECK(seen.insert(b).second); // batch composition unique
            for (auto s : b) CHECK(samples_in_pass.insert(s).second);
        }
        // batch 11 starts a new pass with a different stream
        CHECK(loader.pass_index() == 0);
        auto b11 = loader.next_batch();
        CHECK(loader.pass_index() == 1);
        CHECK(b11.size() == 2);
    }
    SECTION("reseed produces a different permutation") {
        ShardLoader loader(40, 2, 0, 1, 7, 0);
        std::vector<std::vector<int64_t>> pass0, pass1;
        for (int i = 0; i < 20; ++i) pass0.push_back(loader.next_batch());
        for (int i = 0; i < 20; ++i) pass1.push_back(loader.next_batch());
        CHECK(loader.pass_index() == 1);
        CHECK(pass0 != pass1);
        // both passes cover the full shard exactly once
        std::set<int64_t> c0, c1;
        for (auto& b : pass0)
            for (auto s : b) c0.insert(s);
        for (auto& b : pass1)
            for (auto s : b) c1.insert(s);
        CHECK(c0.size() == 40);
        CHECK(c1.size() == 40);
    }
    SECTION("shards are disjoint") {
        ShardLoader a(50, 2, 0, 2, 7, 0), b(50, 2, 1, 2, 7, 0);
        std::set<int64_t> sa, sb;
        for (int i = 0; i < a.budget(); ++i)
            for (auto s : a.next_batch()) sa.insert(s);
        for (int i = 0; i < b.budget(); ++i)
            for (auto s : b.next_batch()) sb.insert(s);
        for (auto s : sa) CHECK(sb.count(s) == 0);
    }
    SECTION("restore reproduces the stream") {
        ShardLoader a(30, 3, 0, 1, 9, 0);
        for (int i = 0; i < 7; ++i) a.next_batch();
        ShardLoader b(30, 3, 0, 1, 9, 0);
        b.restore(a.pass_index(), a.batches_served_in_pass());
        for (int i = 0; i < 9; ++i) CHECK(a.next_batch() == b.next_batch());
    }
    SECTION("empty shard rejected at construction") {
        CHECK_THROWS_AS(ShardLoader(1, 2, 1, 4, 0, 0), ConfigError);
        CHECK_THROWS_AS(ShardLoader(0, 2, 0, 1, 0, 0), ConfigError);
    }
}

TEST_CASE("mixture_sample: uniformity and determinism") {
    Rng rng(11);
    SECTION("single dataset always chosen") {
        for (int i = 0; i < 50; ++i) CHECK(mixture_sample(1, rng) == 0);
    }
    SECTION("three datasets, 30,000 draws, each about 1/3") {
        int64_t counts[3] = {0, 0, 0};
        for (int64_t i = 0; i < 30000; ++i) ++counts[mixture_sample(3, rng)];
        for (int64_t c : counts) CHECK(double(c) / 30000.0 == Approx(1.0 / 3.0).margin(0.02));
    }
    SECTION("reproducible under a fixed seed") {
        Rng a(5), b(5);
        for (int i = 0; i < 100; ++i) CHECK(mixture_sample(4, a) == mixture_sample(4, b));
    }
}

TEST_CASE("freeze partition: coverage, disjointness, and optimiser state") {
    Rng rng(13);
    proc::EmulatorModel<float> model(tiny_tok(), tiny_proc(), rng);
    auto params = model.named_parameters();

    SECTION("fully trainable: fraction 1.0") {
        auto c = trainable_fraction(params, FreezeMode::fully_trainable);
        CHECK(c.fraction == 1.0);
        CHECK(c.trainable == c.total);
    }
    SECTION("mostly frozen: exact partition, counts match an independent tree walk") {
        auto part = apply_freeze(params, FreezeMode::mostly_frozen);
        CHECK(part.trainable_count() + [&] {
            int64_t n = 0;
            for (const auto& [k, v] : part.frozen) n += v.val().numel();
            return n;
        }() == part.total_count());
        CHECK(part.trainable.size() + part.frozen.size() == params.items.size());

        // independent oracle: explicit name filter over the parameter tree
        int64_t oracle = 0;
        for (const auto& [name, v] : params.items) {
            const bool head_or_bottleneck = name.find("tokeniser.encoder.head") == 0 || name.find("tokeniser.decoder.head") == 0 ||
                                            name.find("tokeniser.encoder.bottleneck") == 0 ||
                                            name.find("tokeniser.decoder.bottleneck") == 0;
            const bool proc_or_proj = name.find("processor.") == 0 || name.find("projection.") == 0;
            if (head_or_bottleneck || proc_or_proj) oracle += v.val().numel();
        }
        CHECK(part.trainable_count() == oracle);

        // optimiser state exists only for trainable parameters
        AdamW<float> opt(part.trainable_vars(), {});
        CHECK(opt.state_size() == part.trainable.size());

        // every tokeniser intermediate block is frozen
        for (const auto& [name, v] : part.frozen) {
            CHECK(name.rfind("tokeniser.", 0) == 0);
            CHECK(name.find(".head") == std::string::npos);
            CHECK(name.find(".bottleneck") == std::string::npos);
        }
    }
    SECTION("paper-scale reference tokeniser reports a small trainable fraction") {
        tok::TokeniserConfig ref; // channels 16/32/64, latent 18
        ref.c_total = 18;
        Rng r2(1);
        tok::Tokeniser<float> tk(ref, r2);
        auto tparams = tk.named_parameters();
        auto c = trainable_fraction(tparams, FreezeMode::mostly_frozen);
        CHECK(c.fraction <= 0.05);
        CHECK(c.trainable > 0);
    }
}

TEST_CASE("pretraining halves the reconstruction loss on a seeded smoke run") {
    auto ds = advection_dataset(4, 30, 32, 100);
    LoopConfig l = fast_loop(100);
    PretrainSession<float> session(tiny_tok(), l, {ds}, std::nullopt, 42);

    double first_loss = -1, last_loss = -1;
    session.run(
        [&](const LogRow& r) {
            if (r.metric == "loss") {
                if (first_loss < 0) first_loss = r.value;
                last_loss = r.value;
            }
        },
        nullptr);
    CHECK(first_loss > 0);
    CHECK(last_loss < 0.5 * first_loss);
}

TEST_CASE("training is bit-reproducible and resumes exactly from a checkpoint") {
    auto ds = advection_dataset(3, 20, 32, 200);

    SECTION("pretrain: identical seeds give identical loss curves; resume is exact") {
        LoopConfig l = fast_loop(6);
        l.checkpoint_cadence = 3;

        std::vector<double> losses_a, losses_b;
        ckpt::Checkpoint mid;
        PretrainSession<float> a(tiny_tok(), l, {ds}, std::nullopt, 7);
        a.run([&](const LogRow& r) { if (r.metric == "loss") losses_a.push_back(r.value); },
              [&](const ckpt::Checkpoint& c, int64_t step) { if (step == 3) mid = c; });
        PretrainSession<float> b(tiny_tok(), l, {ds}, std::nullopt, 7);
        b.run([&](const LogRow& r) { if (r.metric == "loss") losses_b.push_back(r.value); }, nullptr);
        REQUIRE(losses_a.size() == losses_b.size());
        for (size_t i = 0; i < losses_a.size(); ++i) CHECK(losses_a[i] == losses_b[i]);

        PretrainSession<float> c(tiny_tok(), l, {ds}, std::nullopt, 7);
        c.restore(mid);
        CHECK(c.step() == 3);
        std::vector<double> resumed;
        c.run([&](const LogRow& r) { if (r.metric == "loss") resumed.push_back(r.value); }, nullptr);
        REQUIRE(resumed.size() == 3);
        for (size_t i = 0; i < 3; ++i) CHECK(resumed[i] == losses_a[3 + i]);
    }

    SECTION("rollout: resume is exact and respects the schedule") {
        LoopConfig l = fast_loop(6);
        l.checkpoint_cadence = 3;
        l.optim = schedule::OptimiserConfig::rollout_reference();
        l.steps_per_epoch = 2;
        l.sched.total_epochs = 10;
        l.sched.warmup_epochs = 2;
        l.sched.cooldown_epochs = 2;
        l.sched.lr_peak = 5e-5;

        std::vector<double> losses_a;
        ckpt::Checkpoint mid;
        RolloutSession<float> a(tiny_tok(), tiny_proc(), l, {ds}, std::nullopt, 7);
        a.run([&](const LogRow& r) { if (r.metric == "loss") losses_a.push_back(r.value); },
              [&](const ckpt::Checkpoint& c2, int64_t step) { if (step == 3) mid = c2; });

        RolloutSession<float> b(tiny_tok(), tiny_proc(), l, {ds}, std::nullopt, 7);
        b.restore(mid);
        std::vector<double> resumed;
        b.run([&](const LogRow& r) { if (r.metric == "loss") resumed.push_back(r.value); }, nullptr);
        REQUIRE(resumed.size() == 3);
        for (size_t i = 0; i < 3; ++i) CHECK(resumed[i] == losses_a[3 + i]);
    }
}

TEST_CASE("rollout training: freezing contract over real steps") {
    auto ds = advection_dataset(3, 20, 32, 300);
    LoopConfig l = fast_loop(10);
    l.optim = schedule::OptimiserConfig::rollout_reference();
    l.steps_per_epoch = 2;
    l.sched.total_epochs = 8;
    l.sched.warmup_epochs = 1;
    l.sched.cooldown_epochs = 1;
    l.sched.lr_peak = 1e-3; // large enough that any trained parameter moves
    l.freeze = FreezeMode::mostly_frozen;

    RolloutSession<float> s(tiny_tok(), tiny_proc(), l, {ds}, std::nullopt, 9);
    // record frozen parameter values before training
    std::vector<std::pair<std::string, Tensor<float>>> before;
    for (const auto& [name, v] : s.partition().frozen) before.emplace_back(name, v.val());
    std::vector<std::pair<std::string, Tensor<float>>> trainable_before;
    for (const auto& [name, v] : s.partition().trainable) trainable_before.emplace_back(name, v.val());

    s.run(nullptr, nullptr);

    size_t i = 0;
    for (const auto& [name, v] : s.partition().frozen) {
        CHECK(v.val().bit_identical(before[i].second));
        ++i;
    }
    // trainable parameters did move
    bool any_moved = false;
    i = 0;
    for (const auto& [name, v] : s.partition().trainable) {
        if (!v.val().bit_identical(trainable_before[i].second)) any_moved = true;
        ++i;
    }
    CHECK(any_moved);
}

TEST_CASE("tokeniser init from a pretraining checkpoint") {
    auto ds = advection_dataset(3, 20, 32, 400);
    LoopConfig l = fast_loop(2);
    PretrainSession<float> pre(tiny_tok(), l, {ds}, std::nullopt, 21);
    pre.run(nullptr, nullptr);
    auto pre_ckpt = pre.snapshot();

    LoopConfig rl = fast_loop(1);
    rl.optim = schedule::OptimiserConfig::rollout_reference();
    rl.steps_per_epoch = 1;
    rl.sched.total_epochs = 2;
    rl.sched.lr_peak = 5e-5;
    RolloutSession<float> roll(tiny_tok(), tiny_proc(), rl, {ds}, std::nullopt, 22, &pre_ckpt);

    // the emulator's tokeniser parameters equal the pretrained ones
    auto pre_params = pre.tokeniser().named_parameters();
    auto model_params = roll.model().named_parameters();
    for (const auto& [name, v] : model_params.items) {
        if (name.rfind("tokeniser.", 0) != 0) continue;
        bool found = false;
        for (const auto& [pname, pv] : pre_params.items)
            if (pname == name.substr(10)) {
                CHECK(v.val().bit_identical(pv.val()));
                found = true;
            }
        CHECK(found);
    }

    SECTION("incompatible checkpoint rejected with a shape diff") {
        auto other_cfg = tiny_tok();
        other_cfg.channels = {8, 8, 8};
        other_cfg.norm_groups = 4;
        try {
            RolloutSession<float> bad(other_cfg, tiny_proc(), rl, {ds}, std::nullopt, 23, &pre_ckpt);
            FAIL("expected shape mismatch");
        } catch (const IoError& e) {
            CHECK(std::string(e.what()).find("vs model") != std::string::npos);
        }
    }
}

TEST_CASE("non-finite loss aborts with a diagnostic error") {
    auto ds = advection_dataset(2, 20, 32, 500);
    LoopConfig l = fast_loop(3);
    PretrainSession<float> session(tiny_tok(), l, {ds}, std::nullopt, 31);
    // poison the decoder head so the (unnormalised) output overflows float
    auto params = session.tokeniser().named_parameters();
    for (auto& [name, v] : params.items)
        if (name == "decoder.head.weight") v.mutable_val().fill(1e30f);
    CHECK_THROWS_AS(session.run(nullptr, nullptr), NumericsError);
}
