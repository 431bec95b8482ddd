#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace cfgen {

inline constexpr std::string_view kVersion = "0.3.0";

enum class ErrorKind {
    Placement,
    Parse,
    Exhaustion,
    Range,
    Shape,
    Vocabulary,
    Degenerate,
    Label,
    InsufficientSets,
    SetStructure,
    Input,
    Divergence,
    State,
    Config,
    Rejection,
    Io,
    Validation,
    Disjointness,
};

std::string_view to_string(ErrorKind kind);

// Every failure surfaced by the library is an Error with a kind; the CLI maps
// kinds to exit codes.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what, long long detail = -1)
        : std::runtime_error(what), kind_(kind), detail_(detail) {}

    ErrorKind kind() const noexcept { return kind_; }
    // Position for parse errors, step index for divergence, -1 otherwise.
    long long detail() const noexcept { return detail_; }

private:
    ErrorKind kind_;
    long long detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what, long long detail = -1) {
    throw Error(kind, what, detail);
}

// splitmix64 finalizer; used to derive independent seeds from (seed, stream).
constexpr uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t stream) {
    return mix64(mix64(seed) ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

constexpr uint64_t derive_seed(uint64_t seed, uint64_t a, uint64_t b) {
    return derive_seed(derive_seed(seed, a), b);
}

// xoshiro256** with explicit uniform/normal draws so results do not depend on
// the standard library's distribution implementations.
class Rng {
public:
    explicit Rng(uint64_t seed) {
        uint64_t s = seed;
        for (auto& w : state_) {
            s = mix64(s);
            w = s;
        }
    }

    uint64_t next() {
        const uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1).
    double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Uniform integer in [0, n).
    uint64_t below(uint64_t n) {
        if (n == 0) return 0;
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x = next();
        while (x >= limit) x = next();
        return x % n;
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * 3.14159265358979323846 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            const size_t j = static_cast<size_t>(below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    static constexpr uint64_t rotl(uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

    uint64_t state_[4]{};
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::string sha256_hex(std::span<const uint8_t> bytes);
std::string sha256_hex(std::string_view text);
std::string sha256_file(const std::string& path);

// Number of worker threads, from CFGEN_THREADS (default 1). Results never
// depend on this value.
int thread_count();

}  // namespace cfgen
