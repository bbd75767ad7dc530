#include <catch2/catch.hpp>

#include <filesystem>

#include "helpers.hpp"
#include "physemu/checkpoint.hpp"
#include "physemu/config.hpp"
#include "physemu/report.hpp"

using namespace physemu;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

} // namespace

TEST_CASE("config: unknown keys are rejected at every level") {
    json good = {{"seed", 1}, {"training", {{"steps", 5}}}};
    CHECK_NOTHROW(config::RunConfig::parse(good, config::Stage::pretrain));

    json bad_root = good;
    bad_root["stepz"] = 3;
    CHECK_THROWS_AS(config::RunConfig::parse(bad_root, config::Stage::pretrain), ConfigError);

    json bad_nested = good;
    bad_nested["training"]["learning_rate"] = 0.1; // belongs under training.optimiser.lr
    CHECK_THROWS_AS(config::RunConfig::parse(bad_nested, config::Stage::pretrain), ConfigError);

    json bad_opt = good;
    bad_opt["training"]["optimiser"] = {{"lr", 1e-4}, {"momentum", 0.9}};
    CHECK_THROWS_AS(config::RunConfig::parse(bad_opt, config::Stage::pretrain), ConfigError);
}

TEST_CASE("config: stage defaults follow the two reference optimiser rows") {
    json j = json::object();
    auto pre = config::RunConfig::parse(j, config::Stage::pretrain);
    CHECK(pre.loop.optim.lr == 5e-4);
    CHECK(pre.loop.optim.beta1 == 0.95);
    CHECK(pre.loop.optim.grad_clip == 0.5);

    auto roll = config::RunConfig::parse(j, config::Stage::rollout);
    CHECK(roll.loop.optim.lr == 5e-5);
    CHECK(roll.loop.optim.beta2 == 0.999);
    CHECK(roll.loop.optim.grad_clip == 5.0);
    CHECK(roll.loop.optim.eps == 1e-10);
}

TEST_CASE("config: snapshot expands all defaults and reparses to itself") {
    json j = {{"seed", 9}, {"tokeniser", {{"channels", {8, 8, 16}}, {"latent_channels", 6}, {"norm_groups", 4}}}};
    auto rc = config::RunConfig::parse(j, config::Stage::rollout);
    json snap = rc.snapshot();
    // the snapshot is complete: every section present
    for (const char* k : {"seed", "out", "data", "gen", "tokeniser", "processor", "schedule", "training", "metrics"})
        CHECK(snap.contains(k));
    auto rc2 = config::RunConfig::parse(snap, config::Stage::rollout);
    CHECK(rc2.snapshot() == snap);
    CHECK(rc2.tokeniser.latent_channels == 6);
    CHECK(rc2.processor.latent_dim == 6);
}

TEST_CASE("config: overridable depth scales are validated") {
    json j = {{"tokeniser", {{"depth_scales", {{{1, 2}}, {{1, 2}, {2, 4}}, {{1, 3}}}}}}};
    CHECK_THROWS_AS(config::RunConfig::parse(j, config::Stage::pretrain), ShapeError); // 3 is not a power of two
}

TEST_CASE("checkpoint: bit-exact tensor round trip and loud version checks") {
    TempDir td("physemu_ckpt_test");
    Rng rng(4);
    ckpt::Checkpoint c;
    c.meta["kind"] = "test";
    c.meta["step"] = 17;
    Tensor<float> a = testutil::random_tensor<float>({3, 5, 2}, rng);
    Tensor<double> b = testutil::random_tensor<double>({7}, rng);
    c.put_tensor("a", a);
    c.put_tensor("b", b);
    c.put_rng("stream", rng);
    const std::string path = (td.path / "ck").string();
    c.save(path);

    auto r = ckpt::Checkpoint::load(path);
    CHECK(r.meta.at("step").get<int64_t>() == 17);
    CHECK(r.get_tensor<float>("a").bit_identical(a));
    CHECK(r.get_tensor<double>("b").bit_identical(b));
    Rng restored = r.get_rng("stream");
    Rng expect = rng;
    for (int i = 0; i < 16; ++i) CHECK(restored.next_u64() == expect.next_u64());

    SECTION("missing tensor and wrong dtype are loud") {
        CHECK_THROWS_AS(r.get_tensor<float>("missing"), IoError);
        CHECK_THROWS_AS(r.get_tensor<double>("a"), IoError);
    }
    SECTION("version mismatch rejected") {
        // corrupt the version field in place
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(4);
        uint32_t bad = 999;
        f.write(reinterpret_cast<const char*>(&bad), 4);
        f.close();
        CHECK_THROWS_AS(ckpt::Checkpoint::load(path), IoError);
    }
}

TEST_CASE("checkpoint: parameter shape mismatch reports a diff") {
    Rng rng(5);
    ckpt::Checkpoint c;
    c.put_tensor("param.w", testutil::random_tensor<float>({4, 4}, rng));
    NamedParams<float> p;
    p.add("w", Var<float>::leaf(Tensor<float>({3, 4}), true));
    try {
        c.load_params(p);
        FAIL("expected mismatch");
    } catch (const IoError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(4,4)") != std::string::npos);
        CHECK(msg.find("(3,4)") != std::string::npos);
    }
}

TEST_CASE("run directory: layout, lock file, and metrics round trip") {
    TempDir td("physemu_rundir_test");
    const std::string run = (td.path / "run1").string();
    {
        report::RunDir rd(run);
        rd.write_snapshot({{"seed", 1}});
        rd.log_event("hello");
        rd.append_metric({1, "train", "all", -1, "loss", 0.5});
        rd.append_metric({2, "val", "all", -1, "vrmse", 0.25});
        CHECK(fs::exists(fs::path(run) / ".lock"));
        // concurrent writer on the same directory is refused
        CHECK_THROWS_AS(report::RunDir(run), IoError);
    }
    CHECK_FALSE(fs::exists(fs::path(run) / ".lock")); // released
    CHECK(fs::exists(fs::path(run) / "config.snapshot"));
    CHECK(fs::exists(fs::path(run) / "checkpoints"));

    auto rows = report::read_metrics_csv((fs::path(run) / "metrics.csv").string());
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].step == 1);
    CHECK(rows[0].metric == "loss");
    CHECK(rows[0].value == 0.5);
    CHECK(rows[1].split == "val");
}

TEST_CASE("report: curves csv and svg from a metrics log") {
    TempDir td("physemu_report_test");
    const std::string run = (td.path / "run2").string();
    {
        report::RunDir rd(run);
        for (int64_t s = 10; s <= 50; s += 10) {
            rd.append_metric({s, "val", "all", -1, "vrmse", 1.0 / double(s)});
            rd.append_metric({s, "val", "all", -1, "neps_low", 0.5 / double(s)});
            rd.append_metric({s, "val", "all", -1, "neps_mid", 2.0 / double(s)});
            rd.append_metric({s, "val", "all", -1, "neps_high", 1.0});
            rd.append_metric({s, "train", "all", -1, "loss", 1.0});
        }
    }
    auto rows = report::read_metrics_csv((fs::path(run) / "metrics.csv").string());
    report::write_curves_csv(rows, (fs::path(run) / "curves.csv").string());
    report::render_curves_svg(rows, (fs::path(run) / "curves.svg").string());

    std::ifstream cs((fs::path(run) / "curves.csv").string());
    std::string line;
    std::getline(cs, line);
    CHECK(line == "step,vrmse,neps_low,neps_mid,neps_high");
    int n = 0;
    while (std::getline(cs, line))
        if (!line.empty()) ++n;
    CHECK(n == 5); // one row per logged step

    std::ifstream svg((fs::path(run) / "curves.svg").string());
    std::string content((std::istreambuf_iterator<char>(svg)), std::istreambuf_iterator<char>());
    CHECK(content.find("<svg") == 0);
    CHECK(content.find("VRMSE") != std::string::npos);
    CHECK(content.find("NEPS high") != std::string::npos);
    // four panels
    size_t panels = 0, pos = 0;
    while ((pos = content.find("<rect x=", pos)) != std::string::npos) {
        ++panels;
        pos += 5;
    }
    CHECK(panels == 4);
}
