#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace physemu {

// ----------------------------- error taxonomy -----------------------------
// Each class maps to a distinct CLI exit code (see tools/).

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

class ShapeError : public std::invalid_argument {
public:
    explicit ShapeError(const std::string& msg) : std::invalid_argument(msg) {}
};

class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

class NumericsError : public std::runtime_error {
public:
    explicit NumericsError(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class A, class... Rest>
void format_into(std::ostringstream& os, const A& a, const Rest&... rest) {
    os << a;
    format_into(os, rest...);
}
} // namespace detail

template <class... Args>
std::string strcat_msg(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    return os.str();
}

template <class Err, class... Args>
[[noreturn]] void raise(const Args&... args) {
    throw Err(strcat_msg(args...));
}

inline void check_shape(bool ok, const std::string& msg) {
    if (!ok) throw ShapeError(msg);
}

// ----------------------------- deterministic RNG -----------------------------
// xoshiro256** with splitmix64 seeding. All stochastic behaviour in the library
// routes through this type so runs are reproducible and state is serialisable
// as four 64-bit words.

inline uint64_t splitmix64(uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    Rng() : Rng(0) {}

    explicit Rng(uint64_t seed) {
        uint64_t x = seed;
        for (auto& w : s_) w = splitmix64(x);
    }

    static Rng from_state(const std::array<uint64_t, 4>& st) {
        Rng r;
        r.s_ = st;
        return r;
    }

    std::array<uint64_t, 4> state() const { return s_; }
    void set_state(const std::array<uint64_t, 4>& st) { s_ = st; }

    uint64_t next_u64() {
        const uint64_t result = rotl(s_[1] * 5, 7) * 9;
        const uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // [0, 1), 53-bit resolution
    double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

    // [0, n); multiply-shift mapping (bias < 2^-53 for the n used here)
    int64_t uniform_int(int64_t n) {
        if (n <= 0) raise<NumericsError>("uniform_int: n must be positive, got ", n);
        return int64_t((static_cast<unsigned __int128>(next_u64()) * static_cast<uint64_t>(n)) >> 64);
    }

    // Box-Muller without a cached spare, so the state stream stays simple.
    double normal() {
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
    }

private:
    static uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }
    std::array<uint64_t, 4> s_{};
};

// Stable seed derivation for independent streams (loader shards, passes, init).
inline uint64_t derive_seed(uint64_t base, uint64_t a, uint64_t b = 0, uint64_t c = 0) {
    uint64_t x = base;
    uint64_t h = splitmix64(x);
    x = h ^ (a + 0x9e3779b97f4a7c15ULL);
    h = splitmix64(x);
    x = h ^ (b + 0x7f4a7c159e3779b9ULL);
    h = splitmix64(x);
    x = h ^ (c + 0x85ebca6b2b2ae35ULL);
    return splitmix64(x);
}

} // namespace physemu
