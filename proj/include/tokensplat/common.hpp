#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace tokensplat {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything derives from Error so callers can catch broadly;
// the concrete types map onto the distinct failure classes of the API
// contracts (shape mismatch, violated precondition, bad config, unparsable
// input, incompatible serialized state, degenerate numeric input).
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ParseError : Error {
    ParseError(const std::string& msg, std::size_t byte_offset)
        : Error(msg + " (byte offset " + std::to_string(byte_offset) + ")"),
          offset(byte_offset) {}
    std::size_t offset;
};

struct VersionError : Error {
    using Error::Error;
};

struct DegenerateInputError : Error {
    using Error::Error;
};

struct InvalidDqError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. The engine sequence of mt19937_64 is pinned by the
// standard; the float transforms below are ours, so streams are bit-identical
// across platforms and toolchains.
// ---------------------------------------------------------------------------

class Rng {
  public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Uniform in [0, 1) with 24 bits of mantissa entropy.
    float uniform01() {
        return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
    }

    float uniform(float lo, float hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; the spare value is cached so each draw costs one transform.
    float normal(float mean = 0.0f, float stddev = 1.0f) {
        if (has_spare_) {
            has_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0;
        while (u1 <= 1e-12) u1 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
        const double u2 = static_cast<double>(next_u64() >> 11) * (1.0 / 9007199254740992.0);
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 2.0 * 3.14159265358979323846 * u2;
        spare_ = static_cast<float>(r * std::sin(a));
        has_spare_ = true;
        return mean + stddev * static_cast<float>(r * std::cos(a));
    }

    // Uniform integer in [lo, hi] inclusive.
    int uniform_int(int lo, int hi) {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next_u64() % span);
    }

  private:
    std::mt19937_64 engine_;
    float spare_ = 0.0f;
    bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Worker pool helper. Worker count is capped by TOKENSPLAT_THREADS; chunking
// is a fixed function of (n, workers) so results that merge per-worker
// buffers in worker order are reproducible for a given configuration.
// ---------------------------------------------------------------------------

inline int worker_count(std::size_t n) {
    unsigned hw = std::thread::hardware_concurrency();
    if (hw == 0) hw = 1;
    if (const char* env = std::getenv("TOKENSPLAT_THREADS")) {
        const long v = std::strtol(env, nullptr, 10);
        if (v >= 1) hw = static_cast<unsigned>(v);
    }
    if (static_cast<std::size_t>(hw) > n) hw = static_cast<unsigned>(n == 0 ? 1 : n);
    return static_cast<int>(hw);
}

// fn(begin, end, worker_index) over [0, n), contiguous chunks.
inline void parallel_for(std::size_t n,
                         const std::function<void(std::size_t, std::size_t, int)>& fn) {
    const int workers = worker_count(n);
    if (workers <= 1 || n == 0) {
        fn(0, n, 0);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        const std::size_t b = std::min(n, static_cast<std::size_t>(w) * chunk);
        const std::size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back(fn, b, e, w);
    }
    for (auto& t : pool) t.join();
}

}  // namespace tokensplat
