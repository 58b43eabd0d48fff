// Copyright (c) 2026 the dualdit authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>

namespace dualdit {

// Error taxonomy. CLI maps ConfigError to exit code 2, everything else to 1.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DimensionError : Error {
    using Error::Error;
};
struct ContractError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct FormatError : Error {
    using Error::Error;
};
struct NumericError : Error {
    using Error::Error;
};

// Deterministic RNG. std::mt19937_64 plus hand-rolled draw helpers so results
// do not depend on libstdc++'s distribution internals and the full sampler
// state is the (text-serializable) engine state.
class Rng {
public:
    Rng() : eng_(0x9E3779B97F4A7C15ull) {}
    explicit Rng(std::uint64_t seed) : eng_(seed) {}

    std::uint64_t next_u64() { return eng_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    }

    // uniform integer in [lo, hi], inclusive
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (hi < lo) throw ContractError("uniform_int: empty range");
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        // rejection sampling keeps the draw unbiased
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        std::uint64_t v;
        do {
            v = eng_();
        } while (v >= limit);
        return lo + static_cast<std::int64_t>(v % span);
    }

    // standard normal, Box-Muller without spare caching (stateless beyond the engine)
    double gaussian() {
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    // derive an independent stream (e.g. per clip, per branch)
    Rng fork(std::uint64_t salt) {
        std::uint64_t s = eng_();
        s ^= salt + 0x9E3779B97F4A7C15ull + (s << 6) + (s >> 2);
        return Rng(s);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << eng_;
        return os.str();
    }
    static Rng deserialize(const std::string& s) {
        Rng r;
        std::istringstream is(s);
        is >> r.eng_;
        if (!is) throw FormatError("Rng::deserialize: malformed engine state");
        return r;
    }

    bool operator==(const Rng& o) const { return eng_ == o.eng_; }

private:
    std::mt19937_64 eng_;
};

}  // namespace dualdit
