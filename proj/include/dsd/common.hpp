#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dsd {

// Domain error (exit code 1 territory). Config errors use ConfigError below.
struct DomainError : std::runtime_error {
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

#define DSD_ERROR(name)                                                     \
    struct name : DomainError {                                             \
        explicit name(const std::string& msg) : DomainError(#name ": " + msg) {} \
    }

DSD_ERROR(UnknownFormat);
DSD_ERROR(TruncatedFile);
DSD_ERROR(NonpositiveDimensions);
DSD_ERROR(IoFailure);
DSD_ERROR(EmptyManifest);
DSD_ERROR(NoValidPixels);
DSD_ERROR(EmptySource);
DSD_ERROR(NegativeDepth);
DSD_ERROR(ImageTooSmall);
DSD_ERROR(ShapeMismatch);
DSD_ERROR(NonFiniteLogits);
DSD_ERROR(TooFewGlobals);
DSD_ERROR(GridMismatch);
DSD_ERROR(TooFewPoints);
DSD_ERROR(NameSetMismatch);
DSD_ERROR(StepOutOfRange);
DSD_ERROR(ResumeMismatch);
DSD_ERROR(TeacherNotFrozen);
DSD_ERROR(CheckpointIncompatible);
DSD_ERROR(DimensionMismatch);
DSD_ERROR(KTooLarge);
DSD_ERROR(SingleClassTrainSet);
DSD_ERROR(NoLabeledPixels);
DSD_ERROR(DegenerateFeatures);
DSD_ERROR(InvalidSpec);
DSD_ERROR(PathMissing);

#undef DSD_ERROR

// Deterministic RNG. All stochastic code goes through this wrapper so that
// results do not depend on the standard library's distribution internals.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // Uniform integer in [0, n), n >= 1. Rejection sampling, no modulo bias.
    uint64_t uniform_u64(uint64_t n) {
        if (n == 0) throw DomainError("uniform_u64: n must be positive");
        const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // Uniform double in [0, 1) with 53 bits of randomness.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // Box-Muller with cached spare.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        // avoid log(0)
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    bool bernoulli(double p) { return uniform() < p; }

    // Derive an independent stream, e.g. per image or per step.
    Rng fork(uint64_t salt) const {
        uint64_t s = seed_mix(gen_initial_, salt);
        return Rng(s);
    }

    static Rng seeded(uint64_t seed) {
        Rng r(seed);
        r.gen_initial_ = seed;
        return r;
    }

    uint64_t initial_seed() const { return gen_initial_; }

    static uint64_t seed_mix(uint64_t a, uint64_t b) {
        // splitmix64 finalizer over the combined value
        uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

private:
    std::mt19937_64 gen_;
    uint64_t gen_initial_ = 0;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

// FNV-1a, used for checkpoint fingerprints.
inline uint64_t fnv1a(const void* data, size_t n, uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace dsd
