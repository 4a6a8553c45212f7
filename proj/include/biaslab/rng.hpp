#pragma once

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

#include <cstdint>
#include <span>

namespace biaslab {

/// SplitMix64 finalizer; a bijective 64-bit mixer.
constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Seed for stream `stream` of a run seeded with `seed`. Depends only on the pair, never on
/// how many streams exist or which thread consumes them.
constexpr std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) noexcept {
    return splitmix64(splitmix64(seed) ^ splitmix64(stream ^ 0x632be59bd9b4e019ULL));
}

/// Tags separating stream families so that, e.g., oracle sampling never reuses engine streams.
enum class StreamFamily : std::uint64_t {
    engine = 0,
    oracle = 1,
    templates = 2,
};

/// Independent standard-normal stream.
class NormalStream {
public:
    NormalStream(std::uint64_t seed, std::uint64_t stream, StreamFamily family = StreamFamily::engine)
        : engine_(stream_seed(seed ^ (static_cast<std::uint64_t>(family) << 56), stream)) {}

    double operator()() { return normal_(engine_); }

    double uniform() { return uniform_(engine_); }

    void fill(std::span<double> out) {
        for (double& v : out) v = normal_(engine_);
    }

private:
    boost::random::mt19937_64 engine_;
    boost::random::normal_distribution<double> normal_;
    boost::random::uniform_01<double> uniform_;
};

}  // namespace biaslab
