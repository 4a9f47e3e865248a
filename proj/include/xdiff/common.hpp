#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace xdiff {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using BoolMatrix = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic>;

// Error taxonomy; the CLI maps these onto exit codes.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : Error { using Error::Error; };       // bad configuration / usage
struct DimensionError : Error { using Error::Error; };    // shape mismatch
struct VariantError : Error { using Error::Error; };      // op called on wrong crosscoder variant
struct StateError : Error { using Error::Error; };        // required state missing (e.g. theta unset)
struct NumericError : Error { using Error::Error; };      // non-finite values, divergence
struct IoError : Error { using Error::Error; };           // filesystem failures
struct FormatError : Error { using Error::Error; };       // bad magic / truncated / trailing bytes

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Counter-based deterministic RNG. std::normal_distribution is not
// bit-stable across standard libraries, so the samplers are explicit.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Derives an independent stream, e.g. per batch index.
    static Rng substream(std::uint64_t seed, std::uint64_t stream) {
        std::uint64_t s = seed;
        std::uint64_t a = splitmix64(s);
        s ^= stream * 0xd1342543de82ef95ULL + 0x2545f4914f6cdd1dULL;
        std::uint64_t b = splitmix64(s);
        return Rng(a ^ (b + 0x9e3779b97f4a7c15ULL));
    }

    std::uint64_t next_u64() { return splitmix64(state_); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    // standard normal via Box-Muller
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        double u2 = uniform();
        while (u1 <= 1e-300) u1 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double t = 2.0 * M_PI * u2;
        spare_ = r * std::sin(t);
        have_spare_ = true;
        return r * std::cos(t);
    }

    // Exponential(1)
    double exponential() {
        double u = uniform();
        while (u <= 1e-300) u = uniform();
        return -std::log(u);
    }

    bool bernoulli(double p) { return uniform() < p; }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Worker count for parallel analytics; XDIFF_THREADS caps it.
int worker_count();

// Runs fn(i) for i in [0, n). Each index must write only its own slots.
void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn);

}  // namespace xdiff
