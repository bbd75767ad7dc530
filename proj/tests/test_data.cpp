#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>

#include "helpers.hpp"
#include "physemu/data.hpp"
#include "physemu/metrics.hpp"

using namespace physemu;
using namespace physemu::data;

namespace {

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path((std::filesystem::temp_directory_path() / name).string()) {}
    ~TempFile() { std::remove(path.c_str()); }
};

// Least-squares slope of log P(k) vs log k over bins [2, kmax/2].
double measured_slope(const std::vector<double>& p, const metrics::BandPartition& part) {
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int64_t n = 0;
    for (int k = 2; k <= part.kmax / 2; ++k) {
        if (part.bin_count[static_cast<size_t>(k)] == 0 || p[static_cast<size_t>(k)] <= 0) continue;
        const double lx = std::log(double(k)), ly = std::log(p[static_cast<size_t>(k)]);
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
        ++n;
    }
    return (double(n) * sxy - sx * sy) / (double(n) * sxx - sx * sx);
}

} // namespace

TEST_CASE("gaussian field generator: determinism and spectral slope") {
    SECTION("same seed, same trajectory") {
        auto a = gen_gaussian_field_trajectory(32, 32, 2.0, 3, 42);
        auto b = gen_gaussian_field_trajectory(32, 32, 2.0, 3, 42);
        CHECK(a.bit_identical(b));
        auto c = gen_gaussian_field_trajectory(32, 32, 2.0, 3, 43);
        CHECK_FALSE(a.bit_identical(c));
    }
    SECTION("beta = 0 gives a flat spectrum within statistical tolerance") {
        const int64_t H = 64, W = 64;
        auto part = metrics::BandPartition::make(H, W);
        std::vector<double> mean_p(static_cast<size_t>(part.kmax + 1), 0.0);
        const int64_t reps = 100;
        for (int64_t r = 0; r < reps; ++r) {
            auto traj = gen_gaussian_field_trajectory(H, W, 0.0, 1, 1000 + static_cast<uint64_t>(r));
            auto p = metrics::power_spectrum(traj.data(), part);
            for (int k = 0; k <= part.kmax; ++k)
                if (part.bin_count[static_cast<size_t>(k)] > 0) mean_p[static_cast<size_t>(k)] += p[static_cast<size_t>(k)] / double(reps);
        }
        // compare mid bins against their own average
        double avg = 0;
        int64_t n = 0;
        for (int k = 2; k <= part.kmax / 2; ++k) {
            avg += mean_p[static_cast<size_t>(k)];
            ++n;
        }
        avg /= double(n);
        for (int k = 2; k <= part.kmax / 2; ++k)
            CHECK(mean_p[static_cast<size_t>(k)] == Approx(avg).epsilon(0.2));
    }
    SECTION("beta = 2 slope within +-0.2 of -2") {
        const int64_t H = 64, W = 64;
        auto part = metrics::BandPartition::make(H, W);
        std::vector<double> mean_p(static_cast<size_t>(part.kmax + 1), 0.0);
        const int64_t reps = 60;
        for (int64_t r = 0; r < reps; ++r) {
            auto traj = gen_gaussian_field_trajectory(H, W, 2.0, 1, 9000 + static_cast<uint64_t>(r));
            auto p = metrics::power_spectrum(traj.data(), part);
            for (int k = 0; k <= part.kmax; ++k)
                if (part.bin_count[static_cast<size_t>(k)] > 0) mean_p[static_cast<size_t>(k)] += p[static_cast<size_t>(k)] / double(reps);
        }
        CHECK(measured_slope(mean_p, part) == Approx(-2.0).margin(0.2));
    }
    SECTION("rejects non-pow2 grids") {
        CHECK_THROWS_AS(gen_gaussian_field_trajectory(33, 32, 2.0, 1, 0), ShapeError);
    }
}

TEST_CASE("advection generator: exact cyclic shifts and schema layout") {
    const int64_t H = 16, W = 16;
    auto traj = gen_advection_trajectory(H, W, 1, 0, 5, 7);
    CHECK(traj.shape() == std::vector<int64_t>{5, 3, H, W});

    SECTION("zero velocity: all frames identical") {
        auto still = gen_advection_trajectory(H, W, 0, 0, 4, 7);
        for (int64_t t = 1; t < 4; ++t)
            for (int64_t i = 0; i < H * W; ++i) CHECK(still[(t * 3) * H * W + i] == still[i]);
    }
    SECTION("frame 3 equals frame 0 rolled by 3 pixels") {
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j)
                CHECK(traj.at(int64_t(3), int64_t(0), i, j) == traj.at(int64_t(0), int64_t(0), i, (j - 3 + W) % W));
    }
    SECTION("velocity channels are the constant components") {
        for (int64_t t = 0; t < 5; ++t)
            for (int64_t i = 0; i < H * W; ++i) {
                CHECK(traj[(t * 3 + 1) * H * W + i] == 1.0);
                CHECK(traj[(t * 3 + 2) * H * W + i] == 0.0);
            }
    }
    SECTION("schema matches the channel layout") {
        auto schema = advection_schema();
        CHECK(schema.total_channels() == 3);
        CHECK(schema.entries[0].name == "tracer");
        CHECK(channels_for(schema.entries[1].rank) == 2);
    }
}

TEST_CASE("exact-shift oracle achieves zero VRMSE at every rollout horizon") {
    const int64_t H = 16, W = 16, vx = 1, vy = 0;
    auto traj_d = gen_advection_trajectory(H, W, vx, vy, 27, 11);
    // tracer-only trajectory: the velocity channels are constant (sigma = 0)
    Tensor<double> tracer({27, 1, H, W});
    for (int64_t t = 0; t < 27; ++t)
        std::memcpy(tracer.data() + t * H * W, traj_d.data() + (t * 3) * H * W, sizeof(double) * size_t(H * W));

    auto oracle = [&](const Tensor<double>& ctx) {
        Tensor<double> next({1, H, W});
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) next.at(int64_t(0), i, j) = ctx.at(int64_t(8), int64_t(0), i, (j - vx + W) % W);
        return next;
    };
    auto r = metrics::rollout_evaluate<double>(oracle, {tracer}, 9, 18);
    CHECK(r.early == Approx(0.0).margin(1e-12));
    CHECK(r.medium == Approx(0.0).margin(1e-12));
    CHECK(r.long_ == Approx(0.0).margin(1e-12));
}

TEST_CASE("window_starts: disjoint 10-frame sequences") {
    SECTION("exactly one window for a 10-frame trajectory") {
        auto plan = window_starts(10, 10);
        REQUIRE(plan.starts.size() == 1);
        CHECK(plan.starts[0] == 0);
    }
    SECTION("27 frames support the 18-step rollout protocol but give 2 training windows") {
        auto plan = window_starts(27, 10);
        CHECK(plan.starts == std::vector<int64_t>{0, 10});
    }
    SECTION("window count equals floor(L / 10) at stride 10") {
        Rng rng(3);
        for (int64_t L : {10, 15, 20, 35, 99, 100}) {
            auto plan = window_starts(L, 10);
            CHECK(int64_t(plan.starts.size()) == L / 10);
        }
    }
    SECTION("short trajectory yields an empty plan with a warning count") {
        auto plan = window_starts(7, 10);
        CHECK(plan.starts.empty());
        CHECK(plan.skipped_short == 1);
    }
}

TEST_CASE("archive: write-then-read round trip is bit-identical") {
    TempFile tf("physemu_test_archive.phta");
    auto schema = advection_schema();
    DatasetMeta meta;
    meta.name = "advection";
    meta.height = 8;
    meta.width = 8;
    meta.trajectory_length = 4;
    meta.tags["velocity"] = "(1,0)";

    Rng rng(5);
    std::vector<Tensor<float>> trajs;
    for (int n = 0; n < 3; ++n) trajs.push_back(testutil::random_tensor<float>({4, 3, 8, 8}, rng));
    {
        ArchiveWriter w(tf.path, schema, meta);
        for (const auto& t : trajs) w.add(t);
        w.finish();
    }
    ArchiveReader r(tf.path, schema);
    REQUIRE(r.size() == 3);
    CHECK(r.meta().name == "advection");
    CHECK(r.meta().tags.at("velocity") == "(1,0)");
    for (int64_t i = 0; i < 3; ++i) CHECK(r.read(i).bit_identical(trajs[static_cast<size_t>(i)]));
    // deterministic iteration order follows the archive index
    auto all = r.read_all();
    for (int64_t i = 0; i < 3; ++i) CHECK(all[static_cast<size_t>(i)].bit_identical(trajs[static_cast<size_t>(i)]));
}

TEST_CASE("archive: distinct failure modes") {
    auto schema = advection_schema();
    DatasetMeta meta;
    meta.name = "x";
    meta.height = 8;
    meta.width = 8;
    meta.trajectory_length = 2;

    SECTION("schema mismatch names the offending field") {
        TempFile tf("physemu_test_schema.phta");
        {
            ArchiveWriter w(tf.path, schema, meta);
            Rng rng(6);
            w.add(testutil::random_tensor<float>({2, 3, 8, 8}, rng));
            w.finish();
        }
        FieldSchema other{{"pressure", FieldRank::scalar}};
        try {
            ArchiveReader r(tf.path, other);
            FAIL("expected schema mismatch");
        } catch (const ConfigError& e) {
            CHECK(std::string(e.what()).find("tracer") != std::string::npos);
        }
    }
    SECTION("wrong channel count in a written trajectory is rejected") {
        TempFile tf("physemu_test_chan.phta");
        ArchiveWriter w(tf.path, schema, meta);
        Rng rng(7);
        CHECK_THROWS_AS(w.add(testutil::random_tensor<float>({2, 5, 8, 8}, rng)), ShapeError);
    }
    SECTION("corrupt header magic") {
        TempFile tf("physemu_test_magic.phta");
        {
            std::ofstream os(tf.path, std::ios::binary);
            os << "NOPE garbage";
        }
        CHECK_THROWS_AS(ArchiveReader(tf.path), IoError);
    }
    SECTION("truncated file") {
        TempFile tf("physemu_test_trunc.phta");
        {
            ArchiveWriter w(tf.path, schema, meta);
            Rng rng(8);
            w.add(testutil::random_tensor<float>({2, 3, 8, 8}, rng));
            w.finish();
        }
        const auto full = std::filesystem::file_size(tf.path);
        std::filesystem::resize_file(tf.path, full - 20);
        CHECK_THROWS_AS(ArchiveReader(tf.path), IoError);
    }
}
