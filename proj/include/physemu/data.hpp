#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "physemu/dft.hpp"
#include "physemu/tensor.hpp"

namespace physemu {
namespace data {

using nlohmann::json;

// ----------------------------- field schema -----------------------------

enum class FieldRank { scalar, vector, tensor };

inline int64_t channels_for(FieldRank r) {
    switch (r) {
        case FieldRank::scalar: return 1;
        case FieldRank::vector: return 2; // k = 2 spatial dimensions
        case FieldRank::tensor: return 4; // k^2
    }
    return 0;
}

inline std::string rank_name(FieldRank r) {
    switch (r) {
        case FieldRank::scalar: return "scalar";
        case FieldRank::vector: return "vector";
        case FieldRank::tensor: return "tensor";
    }
    return "?";
}

inline FieldRank rank_from_name(const std::string& s) {
    if (s == "scalar") return FieldRank::scalar;
    if (s == "vector") return FieldRank::vector;
    if (s == "tensor") return FieldRank::tensor;
    raise<ConfigError>("FieldSchema: unknown field rank '", s, "'");
}

struct FieldEntry {
    std::string name;
    FieldRank rank = FieldRank::scalar;
};

struct FieldSchema {
    std::vector<FieldEntry> entries;

    FieldSchema() = default;
    FieldSchema(std::initializer_list<FieldEntry> e) : entries(e) { validate(); }

    void validate() const {
        for (size_t i = 0; i < entries.size(); ++i) {
            if (entries[i].name.empty()) raise<ConfigError>("FieldSchema: empty field name");
            for (size_t j = i + 1; j < entries.size(); ++j)
                if (entries[i].name == entries[j].name) raise<ConfigError>("FieldSchema: duplicate field name '", entries[i].name, "'");
        }
    }

    int64_t total_channels() const {
        int64_t n = 0;
        for (const auto& e : entries) n += channels_for(e.rank);
        return n;
    }

    // First channel index of each field, schema order.
    std::vector<int64_t> channel_offsets() const {
        std::vector<int64_t> off;
        int64_t c = 0;
        for (const auto& e : entries) {
            off.push_back(c);
            c += channels_for(e.rank);
        }
        return off;
    }

    json to_json() const {
        json fields = json::array();
        for (const auto& e : entries) fields.push_back({{"name", e.name}, {"rank", rank_name(e.rank)}});
        return fields;
    }

    static FieldSchema from_json(const json& j) {
        FieldSchema s;
        for (const auto& f : j) s.entries.push_back({f.at("name").get<std::string>(), rank_from_name(f.at("rank").get<std::string>())});
        s.validate();
        return s;
    }

    bool operator==(const FieldSchema& o) const {
        if (entries.size() != o.entries.size()) return false;
        for (size_t i = 0; i < entries.size(); ++i)
            if (entries[i].name != o.entries[i].name || entries[i].rank != o.entries[i].rank) return false;
        return true;
    }
};

struct DatasetMeta {
    std::string name;
    int64_t height = 0;
    int64_t width = 0;
    int64_t trajectory_length = 0;
    std::map<std::string, std::string> tags; // free-form: boundary condition, gamma, ...

    json to_json() const {
        json t = json::object();
        for (const auto& [k, v] : tags) t[k] = v;
        return {{"name", name}, {"height", height}, {"width", width}, {"trajectory_length", trajectory_length}, {"tags", t}};
    }

    static DatasetMeta from_json(const json& j) {
        DatasetMeta m;
        m.name = j.at("name").get<std::string>();
        m.height = j.at("height").get<int64_t>();
        m.width = j.at("width").get<int64_t>();
        m.trajectory_length = j.at("trajectory_length").get<int64_t>();
        for (auto it = j.at("tags").begin(); it != j.at("tags").end(); ++it) m.tags[it.key()] = it.value().get<std::string>();
        return m;
    }
};

// ----------------------------- synthetic generators -----------------------------

inline bool grid_is_pow2(int64_t v) { return v > 0 && (v & (v - 1)) == 0; }

namespace detail {

// One realisation of an isotropic Gaussian random field with power spectrum
// proportional to |k|^-beta (DC amplitude zeroed). Hermitian symmetrisation
// keeps the inverse transform real.
inline void grf_frame(double* out, int64_t H, int64_t W, double beta, Rng& rng) {
    std::vector<dft::cplx> noise(static_cast<size_t>(H * W));
    for (auto& z : noise) z = dft::cplx(rng.normal(), rng.normal());
    std::vector<dft::cplx> spec(static_cast<size_t>(H * W));
    for (int64_t i = 0; i < H; ++i)
        for (int64_t j = 0; j < W; ++j) {
            const int64_t ni = (H - i) % H, nj = (W - j) % W; // index of -k
            const dft::cplx g = (noise[static_cast<size_t>(i * W + j)] + std::conj(noise[static_cast<size_t>(ni * W + nj)])) * 0.5;
            const double ki = double(i <= H / 2 ? i : i - H);
            const double kj = double(j <= W / 2 ? j : j - W);
            const double kmag = std::sqrt(ki * ki + kj * kj);
            const double amp = kmag > 0.0 ? std::pow(kmag, -beta / 2.0) : 0.0;
            spec[static_cast<size_t>(i * W + j)] = g * amp;
        }
    auto field = dft::fft2d(spec, H, W, /*inverse=*/true);
    // scale so pixel variance is O(1) regardless of grid size
    const double s = std::sqrt(double(H * W));
    for (int64_t p = 0; p < H * W; ++p) out[p] = field[static_cast<size_t>(p)].real() * s;
}

} // namespace detail

// Trajectory of independent Gaussian random field frames with isotropic power
// spectrum ~ k^-beta; single scalar field. Pure function of (params, seed).
inline Tensor<double> gen_gaussian_field_trajectory(int64_t H, int64_t W, double beta, int64_t frames, uint64_t seed) {
    check_shape(grid_is_pow2(H) && grid_is_pow2(W), "gen_gaussian_field_trajectory: grid must be powers of two");
    Tensor<double> traj({frames, 1, H, W});
    Rng rng(derive_seed(seed, 0x6752f, static_cast<uint64_t>(H), static_cast<uint64_t>(W)));
    for (int64_t t = 0; t < frames; ++t) detail::grf_frame(traj.data() + t * H * W, H, W, beta, rng);
    return traj;
}

inline FieldSchema gaussian_field_schema() { return FieldSchema{{"field", FieldRank::scalar}}; }

// Periodic advection with integer pixel velocity: frame t is frame 0 shifted
// cyclically by (t*vy, t*vx). Channels: tracer (scalar) then the constant
// velocity field (vector, 2 channels holding vx and vy).
inline Tensor<double> gen_advection_trajectory(int64_t H, int64_t W, int64_t vx, int64_t vy, int64_t frames, uint64_t seed,
                                               double smoothness_beta = 3.0) {
    check_shape(grid_is_pow2(H) && grid_is_pow2(W), "gen_advection_trajectory: grid must be powers of two");
    Tensor<double> base({H, W});
    Rng rng(derive_seed(seed, 0xadec7, static_cast<uint64_t>(vx + 1024), static_cast<uint64_t>(vy + 1024)));
    detail::grf_frame(base.data(), H, W, smoothness_beta, rng);

    Tensor<double> traj({frames, 3, H, W});
    for (int64_t t = 0; t < frames; ++t) {
        double* tracer = traj.data() + (t * 3 + 0) * H * W;
        double* velx = traj.data() + (t * 3 + 1) * H * W;
        double* vely = traj.data() + (t * 3 + 2) * H * W;
        const int64_t sh = ((t * vy) % H + H) % H;
        const int64_t sw = ((t * vx) % W + W) % W;
        for (int64_t i = 0; i < H; ++i)
            for (int64_t j = 0; j < W; ++j) tracer[i * W + j] = base.at((i - sh + H) % H, (j - sw + W) % W);
        for (int64_t p = 0; p < H * W; ++p) {
            velx[p] = double(vx);
            vely[p] = double(vy);
        }
    }
    return traj;
}

inline FieldSchema advection_schema() {
    return FieldSchema{{"tracer", FieldRank::scalar}, {"velocity", FieldRank::vector}};
}

// ----------------------------- sequence windowing -----------------------------

struct WindowPlan {
    std::vector<int64_t> starts;
    int64_t skipped_short = 0; // trajectories shorter than the window
};

// Consecutive fixed-length windows; default stride equals the length
// (disjoint 10-frame sequences).
inline WindowPlan window_starts(int64_t trajectory_frames, int64_t length = 10, int64_t stride = 0) {
    if (length <= 0) raise<ConfigError>("window_starts: length must be positive");
    if (stride <= 0) stride = length;
    WindowPlan plan;
    if (trajectory_frames < length) {
        plan.skipped_short = 1;
        return plan;
    }
    for (int64_t s = 0; s + length <= trajectory_frames; s += stride) plan.starts.push_back(s);
    return plan;
}

// ----------------------------- trajectory archive -----------------------------
//
// Little-endian layout:
//   "PHTA" | u32 version | u64 schema_json_len | schema json (includes grid + meta)
//   chunks: [u32 frames | float32 data (frames * C * H * W)] ...
//   index:  [u64 n | n x (u64 offset, u32 frames)] | u64 index_offset | "PHTX"
//
// Ingesting an external simulation collection reduces to one conversion pass
// through ArchiveWriter: declare a FieldSchema naming each physical field and
// its rank (scalar -> 1 channel, vector -> 2, tensor -> 4; schema order is
// channel order), fill DatasetMeta with the grid and any physics tags
// (boundary condition, gas constant, ...), then `add` each trajectory as a
// float32 (frames, channels, H, W) block. Readers validate the channel layout
// against the schema, so downstream training code is agnostic to where the
// trajectories came from.

namespace detail {

constexpr char kMagic[4] = {'P', 'H', 'T', 'A'};
constexpr char kTailMagic[4] = {'P', 'H', 'T', 'X'};
constexpr uint32_t kVersion = 1;

template <class T>
void write_pod(std::ostream& os, const T& v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::istream& is, const char* what) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) raise<IoError>("archive: truncated while reading ", what);
    return v;
}

} // namespace detail

class ArchiveWriter {
public:
    ArchiveWriter(const std::string& path, FieldSchema schema, DatasetMeta meta)
        : path_(path), schema_(std::move(schema)), meta_(std::move(meta)), os_(path, std::ios::binary) {
        if (!os_) raise<IoError>("archive: cannot open '", path, "' for writing");
        schema_.validate();
        os_.write(detail::kMagic, 4);
        detail::write_pod(os_, detail::kVersion);
        json header = {{"schema", schema_.to_json()}, {"meta", meta_.to_json()}};
        const std::string hs = header.dump();
        detail::write_pod(os_, static_cast<uint64_t>(hs.size()));
        os_.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    }

    void add(const Tensor<float>& traj) {
        check_shape(traj.rank() == 4, "archive: trajectory must be (frames, channels, H, W)");
        check_shape(traj.size(1) == schema_.total_channels(),
                    strcat_msg("archive: trajectory has ", traj.size(1), " channels, schema expects ", schema_.total_channels()));
        check_shape(traj.size(2) == meta_.height && traj.size(3) == meta_.width, "archive: trajectory grid does not match meta");
        index_.push_back({static_cast<uint64_t>(os_.tellp()), static_cast<uint32_t>(traj.size(0))});
        detail::write_pod(os_, static_cast<uint32_t>(traj.size(0)));
        os_.write(reinterpret_cast<const char*>(traj.data()), static_cast<std::streamsize>(sizeof(float) * traj.numel()));
    }

    void finish() {
        if (finished_) return;
        const uint64_t index_offset = static_cast<uint64_t>(os_.tellp());
        detail::write_pod(os_, static_cast<uint64_t>(index_.size()));
        for (const auto& [off, frames] : index_) {
            detail::write_pod(os_, off);
            detail::write_pod(os_, frames);
        }
        detail::write_pod(os_, index_offset);
        os_.write(detail::kTailMagic, 4);
        os_.flush();
        if (!os_) raise<IoError>("archive: write failure on '", path_, "'");
        finished_ = true;
    }

    ~ArchiveWriter() {
        try {
            finish();
        } catch (...) {
        }
    }

private:
    std::string path_;
    FieldSchema schema_;
    DatasetMeta meta_;
    std::ofstream os_;
    std::vector<std::pair<uint64_t, uint32_t>> index_;
    bool finished_ = false;
};

class ArchiveReader {
public:
    explicit ArchiveReader(const std::string& path, std::optional<FieldSchema> expected = std::nullopt) : path_(path), is_(path, std::ios::binary) {
        if (!is_) raise<IoError>("archive: cannot open '", path, "'");
        char magic[4];
        is_.read(magic, 4);
        if (!is_ || std::memcmp(magic, detail::kMagic, 4) != 0) raise<IoError>("archive: corrupt header (bad magic) in '", path, "'");
        const auto version = detail::read_pod<uint32_t>(is_, "version");
        if (version != detail::kVersion) raise<IoError>("archive: unsupported version ", version);
        const auto hlen = detail::read_pod<uint64_t>(is_, "header length");
        std::string hs(hlen, '\0');
        is_.read(hs.data(), static_cast<std::streamsize>(hlen));
        if (!is_) raise<IoError>("archive: truncated header json");
        json header;
        try {
            header = json::parse(hs);
        } catch (const json::exception& e) {
            raise<IoError>("archive: corrupt header json: ", e.what());
        }
        schema_ = FieldSchema::from_json(header.at("schema"));
        meta_ = DatasetMeta::from_json(header.at("meta"));
        if (expected && !(schema_ == *expected)) {
            std::string offending = "channel count";
            for (size_t i = 0; i < std::max(schema_.entries.size(), expected->entries.size()); ++i) {
                if (i >= schema_.entries.size() || i >= expected->entries.size() ||
                    !(schema_.entries[i].name == expected->entries[i].name && schema_.entries[i].rank == expected->entries[i].rank)) {
                    offending = i < schema_.entries.size() ? schema_.entries[i].name : expected->entries[i].name;
                    break;
                }
            }
            raise<ConfigError>("archive: schema mismatch in '", path, "' at field '", offending, "' (archive has ",
                               schema_.total_channels(), " channels, expected ", expected->total_channels(), ")");
        }

        // trailing index
        is_.seekg(0, std::ios::end);
        const int64_t fsize = is_.tellg();
        if (fsize < 12) raise<IoError>("archive: file too short for index footer");
        is_.seekg(fsize - 12);
        const auto index_offset = detail::read_pod<uint64_t>(is_, "index offset");
        char tail[4];
        is_.read(tail, 4);
        if (!is_ || std::memcmp(tail, detail::kTailMagic, 4) != 0) raise<IoError>("archive: corrupt index footer in '", path, "'");
        is_.seekg(static_cast<std::streamoff>(index_offset));
        const auto n = detail::read_pod<uint64_t>(is_, "index count");
        index_.resize(n);
        for (auto& [off, frames] : index_) {
            off = detail::read_pod<uint64_t>(is_, "index entry offset");
            frames = detail::read_pod<uint32_t>(is_, "index entry frames");
        }
    }

    const FieldSchema& schema() const { return schema_; }
    const DatasetMeta& meta() const { return meta_; }
    int64_t size() const { return static_cast<int64_t>(index_.size()); }

    Tensor<float> read(int64_t i) {
        check_shape(i >= 0 && i < size(), strcat_msg("archive: trajectory index ", i, " out of range ", size()));
        const auto [off, frames] = index_[static_cast<size_t>(i)];
        is_.clear();
        is_.seekg(static_cast<std::streamoff>(off));
        const auto stored_frames = detail::read_pod<uint32_t>(is_, "chunk frame count");
        if (stored_frames != frames) raise<IoError>("archive: chunk/index disagreement at trajectory ", i);
        Tensor<float> t({static_cast<int64_t>(frames), schema_.total_channels(), meta_.height, meta_.width});
        is_.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(sizeof(float) * t.numel()));
        if (!is_) raise<IoError>("archive: truncated chunk at trajectory ", i);
        return t;
    }

    std::vector<Tensor<float>> read_all() {
        std::vector<Tensor<float>> out;
        out.reserve(static_cast<size_t>(size()));
        for (int64_t i = 0; i < size(); ++i) out.push_back(read(i));
        return out;
    }

private:
    std::string path_;
    std::ifstream is_;
    FieldSchema schema_;
    DatasetMeta meta_;
    std::vector<std::pair<uint64_t, uint32_t>> index_;
};

} // namespace data
} // namespace physemu
