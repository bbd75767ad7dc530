#pragma once

#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "physemu/nn.hpp"

namespace physemu {
namespace ckpt {

using nlohmann::json;

constexpr uint32_t kFormatVersion = 1;

// Named-tensor container with a JSON metadata record (resolved config, global
// step, RNG states, freeze mask). Tensor payloads are raw little-endian IEEE
// bytes, so load(save(m)) reproduces every parameter bit-exactly.
class Checkpoint {
public:
    json meta = json::object();

    template <class T>
    void put_tensor(const std::string& name, const Tensor<T>& t) {
        Blob b;
        b.dtype = dtype_tag<T>();
        b.shape = t.shape();
        b.bytes.resize(sizeof(T) * static_cast<size_t>(t.numel()));
        std::memcpy(b.bytes.data(), t.data(), b.bytes.size());
        blobs_[name] = std::move(b);
    }

    bool has_tensor(const std::string& name) const { return blobs_.count(name) > 0; }

    std::vector<std::string> tensor_names() const {
        std::vector<std::string> names;
        for (const auto& [k, v] : blobs_) names.push_back(k);
        return names;
    }

    template <class T>
    Tensor<T> get_tensor(const std::string& name) const {
        auto it = blobs_.find(name);
        if (it == blobs_.end()) raise<IoError>("checkpoint: missing tensor '", name, "'");
        const Blob& b = it->second;
        if (b.dtype != dtype_tag<T>())
            raise<IoError>("checkpoint: tensor '", name, "' has dtype ", b.dtype, ", requested ", dtype_tag<T>());
        Tensor<T> t(b.shape);
        std::memcpy(t.data(), b.bytes.data(), b.bytes.size());
        return t;
    }

    std::vector<int64_t> tensor_shape(const std::string& name) const {
        auto it = blobs_.find(name);
        if (it == blobs_.end()) raise<IoError>("checkpoint: missing tensor '", name, "'");
        return it->second.shape;
    }

    // ---- named-parameter helpers ----

    template <class T>
    void put_params(const NamedParams<T>& params, const std::string& prefix = "param.") {
        for (const auto& [name, v] : params.items) put_tensor(prefix + name, v.val());
    }

    // Copies stored values into existing parameters. Shape mismatches are
    // collected and reported together as a diff.
    template <class T>
    void load_params(NamedParams<T>& params, const std::string& prefix = "param.") const {
        std::string diff;
        for (auto& [name, v] : params.items) {
            const std::string key = prefix + name;
            auto it = blobs_.find(key);
            if (it == blobs_.end()) {
                diff += "  missing: " + name + "\n";
                continue;
            }
            if (it->second.shape != v.val().shape()) {
                diff += "  " + name + ": checkpoint " + shape_str(it->second.shape) + " vs model " + v.val().shape_str() + "\n";
                continue;
            }
            v.mutable_val() = get_tensor<T>(key);
        }
        if (!diff.empty()) raise<IoError>("checkpoint: parameter tree incompatible with model:\n", diff);
    }

    void put_rng(const std::string& name, const Rng& rng) {
        json arr = json::array();
        for (uint64_t w : rng.state()) arr.push_back(w);
        meta["rng"][name] = arr;
    }

    Rng get_rng(const std::string& name) const {
        if (!meta.contains("rng") || !meta["rng"].contains(name)) raise<IoError>("checkpoint: missing rng state '", name, "'");
        std::array<uint64_t, 4> st{};
        const auto& arr = meta["rng"][name];
        for (size_t i = 0; i < 4; ++i) st[i] = arr.at(i).get<uint64_t>();
        return Rng::from_state(st);
    }

    // ---- file IO ----
    // "PHCK" | u32 format version | u64 meta_len | meta json |
    // n x [u64 name_len | name | u8 dtype_len | dtype | u32 rank | rank x i64 |
    //      u64 byte_len | bytes]

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) raise<IoError>("checkpoint: cannot open '", path, "' for writing");
        os.write("PHCK", 4);
        write_pod(os, kFormatVersion);
        json m = meta;
        m["format_version"] = kFormatVersion;
        m["tensor_count"] = blobs_.size();
        const std::string ms = m.dump();
        write_pod(os, static_cast<uint64_t>(ms.size()));
        os.write(ms.data(), static_cast<std::streamsize>(ms.size()));
        for (const auto& [name, b] : blobs_) {
            write_pod(os, static_cast<uint64_t>(name.size()));
            os.write(name.data(), static_cast<std::streamsize>(name.size()));
            write_pod(os, static_cast<uint8_t>(b.dtype.size()));
            os.write(b.dtype.data(), static_cast<std::streamsize>(b.dtype.size()));
            write_pod(os, static_cast<uint32_t>(b.shape.size()));
            for (int64_t d : b.shape) write_pod(os, d);
            write_pod(os, static_cast<uint64_t>(b.bytes.size()));
            os.write(b.bytes.data(), static_cast<std::streamsize>(b.bytes.size()));
        }
        os.flush();
        if (!os) raise<IoError>("checkpoint: write failure on '", path, "'");
    }

    static Checkpoint load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) raise<IoError>("checkpoint: cannot open '", path, "'");
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "PHCK", 4) != 0) raise<IoError>("checkpoint: bad magic in '", path, "'");
        const auto version = read_pod<uint32_t>(is, "format version");
        if (version != kFormatVersion)
            raise<IoError>("checkpoint: format version ", version, " unsupported (expected ", kFormatVersion, ")");
        Checkpoint c;
        const auto mlen = read_pod<uint64_t>(is, "meta length");
        std::string ms(mlen, '\0');
        is.read(ms.data(), static_cast<std::streamsize>(mlen));
        if (!is) raise<IoError>("checkpoint: truncated metadata");
        try {
            c.meta = json::parse(ms);
        } catch (const json::exception& e) {
            raise<IoError>("checkpoint: corrupt metadata json: ", e.what());
        }
        const uint64_t count = c.meta.value("tensor_count", uint64_t(0));
        for (uint64_t i = 0; i < count; ++i) {
            const auto nlen = read_pod<uint64_t>(is, "tensor name length");
            std::string name(nlen, '\0');
            is.read(name.data(), static_cast<std::streamsize>(nlen));
            Blob b;
            const auto dlen = read_pod<uint8_t>(is, "dtype length");
            b.dtype.resize(dlen);
            is.read(b.dtype.data(), dlen);
            const auto rank = read_pod<uint32_t>(is, "tensor rank");
            b.shape.resize(rank);
            for (auto& d : b.shape) d = read_pod<int64_t>(is, "tensor dim");
            const auto blen = read_pod<uint64_t>(is, "tensor byte length");
            b.bytes.resize(blen);
            is.read(b.bytes.data(), static_cast<std::streamsize>(blen));
            if (!is) raise<IoError>("checkpoint: truncated tensor '", name, "'");
            c.blobs_[name] = std::move(b);
        }
        return c;
    }

private:
    struct Blob {
        std::string dtype;
        std::vector<int64_t> shape;
        std::vector<char> bytes;
    };

    template <class T>
    static std::string dtype_tag() {
        if (std::is_same_v<T, float>) return "f32";
        if (std::is_same_v<T, double>) return "f64";
        return "u8";
    }

    static std::string shape_str(const std::vector<int64_t>& s) {
        std::string out = "(";
        for (size_t i = 0; i < s.size(); ++i) {
            if (i) out += ",";
            out += std::to_string(s[i]);
        }
        return out + ")";
    }

    template <class T>
    static void write_pod(std::ostream& os, const T& v) {
        os.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }

    template <class T>
    static T read_pod(std::istream& is, const char* what) {
        T v{};
        is.read(reinterpret_cast<char*>(&v), sizeof(T));
        if (!is) raise<IoError>("checkpoint: truncated while reading ", what);
        return v;
    }

    std::map<std::string, Blob> blobs_;
};

} // namespace ckpt
} // namespace physemu
