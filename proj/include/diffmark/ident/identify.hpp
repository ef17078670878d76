#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "diffmark/codec/codec.hpp"

namespace diffmark::ident {

using codec::Secret;

// Bits packed little-endian into 64-bit words; bit i of the key is bit i % 64
// of word i / 64. Unused high bits are zero.
std::vector<std::uint64_t> pack(const Secret& s);
Secret unpack(const std::uint64_t* words, int L);
int packed_words(int L);

// Real keys first, then uniform random distractors. Immutable once built.
class KeyDatabase {
public:
    KeyDatabase() = default;
    KeyDatabase(int L, std::vector<std::uint64_t> packed, std::size_t tier_boundary, std::uint64_t seed);

    int bits() const { return L_; }
    int words() const { return words_; }
    std::size_t size() const { return words_ ? packed_.size() / words_ : 0; }
    std::size_t tier_boundary() const { return tier_boundary_; }
    std::uint64_t seed() const { return seed_; }
    Secret key(std::size_t i) const;
    const std::uint64_t* data() const { return packed_.data(); }

private:
    int L_ = 0;
    int words_ = 0;
    std::vector<std::uint64_t> packed_;
    std::size_t tier_boundary_ = 0;
    std::uint64_t seed_ = 0;
};

// N <= |real|: a seeded subsample of N real keys (original order kept).
// N > |real|: every real key plus N - |real| distractors.
KeyDatabase build_database(const std::vector<Secret>& real_keys, std::size_t N, std::uint64_t seed);

struct Identification {
    std::size_t best = 0;
    int distance = 0;
    // Another key shares the minimum distance; the lowest index won.
    bool tie = false;
    // 1-based position of the supplied true key in ascending (distance, index) order.
    std::optional<std::size_t> rank;
};

Identification identify(const Secret& decoded, const KeyDatabase& db, std::optional<std::size_t> true_index = {});

// Distances from `decoded` to every key, through the active kernel table.
std::vector<std::uint16_t> hamming_scan(const Secret& decoded, const KeyDatabase& db);

struct DetectionThreshold {
    int L = 0;
    double fpr_target = 0.0;
    // Detect when the number of matching bits m exceeds tau.
    int tau = 0;
    // P[Bin(L, 1/2) > tau], rounded to double for reporting.
    double tail = 0.0;
    bool detect(int matches) const { return matches > tau; }
};

// Minimal tau with P[Bin(L, 1/2) > tau] <= fpr, by exact integer enumeration.
DetectionThreshold compute_threshold(int L, double fpr);
// Exact comparison of the upper tail P[Bin(L, 1/2) > tau] against fpr:
// -1 when below, 0 when equal, +1 when above.
int compare_tail(int L, int tau, double fpr);

struct Metrics {
    std::vector<double> ber;
    double mean_ber = 0.0;
    double bit_acc = 0.0;
    // Fraction of samples detected at the threshold for `fpr`.
    double tpr_at_fpr = 0.0;
};
Metrics metrics(const std::vector<Secret>& decoded, const std::vector<Secret>& truth, double fpr = 1e-3);

struct Pearson {
    double r = 0.0;
    double p_value = 1.0;
    bool degenerate = false;
};
// Two-sided p-value from the t distribution with n - 2 degrees of freedom.
Pearson pearson(const std::vector<double>& x, const std::vector<double>& y);

struct Summary {
    double mean = 0.0, std = 0.0, min = 0.0, median = 0.0, max = 0.0;
};
Summary summarize(std::vector<double> v);

struct FlexibilityReport {
    Summary fixed, random;
    // Tercile bins of d_H(s_i, s*) over the random set.
    struct Bin {
        int lo = 0, hi = 0;
        std::size_t count = 0;
        double mean_ber = 0.0;
    };
    std::vector<Bin> bins;
    Pearson correlation;
};
FlexibilityReport key_flexibility_report(const std::vector<double>& fixed_set_bers,
                                         const std::vector<double>& random_set_bers,
                                         const std::vector<Secret>& keys, const Secret& training_key);

// Simulated decoder: each real key is decoded with independent bit flips of
// probability flip_p, then identified against the database.
struct ScalingTrial {
    std::size_t N = 0;
    std::size_t queries = 0;
    std::size_t correct = 0;
    std::size_t ties = 0;
    double top1() const { return queries ? static_cast<double>(correct) / queries : 0.0; }
};
ScalingTrial simulate_identification(int L, std::size_t real, std::size_t N, double flip_p, std::uint64_t seed);

// One hex key per line, most significant nibble first.
std::string to_hex(const Secret& s);
Secret from_hex(const std::string& hex, int L);
void write_keys(const std::filesystem::path& path, const std::vector<Secret>& keys);
std::vector<Secret> read_keys(const std::filesystem::path& path, int L);

}  // namespace diffmark::ident
