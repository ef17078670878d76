#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <vector>

#include "diffmark/core/tensor.hpp"

namespace diffmark {

// Seedable generator. Streams are derived from (seed, tags...) so that a
// training step's randomness depends only on the seed and the step index,
// which keeps checkpoint/resume bit-exact without serializing engine state.
class Rng {
public:
    explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

    static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
        std::vector<std::uint32_t> words;
        auto push = [&](std::uint64_t v) {
            words.push_back(static_cast<std::uint32_t>(v));
            words.push_back(static_cast<std::uint32_t>(v >> 32));
        };
        push(seed);
        for (auto t : tags) push(t);
        std::seed_seq seq(words.begin(), words.end());
        Rng r;
        r.engine_.seed(seq);
        return r;
    }

    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
    double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
    double normal() { return normal_(engine_); }
    int randint(int n) { return std::uniform_int_distribution<int>(0, n - 1)(engine_); }
    bool bernoulli(double p = 0.5) { return uniform() < p; }
    std::uint64_t bits() { return engine_(); }

    template <typename T>
    Tensor<T> randn(Shape s, double stddev = 1.0) {
        Tensor<T> t(std::move(s));
        for (auto& v : t.data) v = static_cast<T>(normal() * stddev);
        return t;
    }

    std::mt19937_64& engine() { return engine_; }

private:
    std::mt19937_64 engine_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace diffmark
