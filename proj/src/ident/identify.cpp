#include "diffmark/ident/identify.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <unordered_set>

#include <boost/math/distributions/students_t.hpp>
#include <boost/multiprecision/cpp_int.hpp>

#include "diffmark/simd/kernels.hpp"

namespace diffmark::ident {

namespace {

using boost::multiprecision::cpp_int;

std::uint64_t tail_mask(int L) {
    const int rem = L % 64;
    return rem == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << rem) - 1;
}

}  // namespace

int packed_words(int L) {
    if (L < 1) throw ShapeError("key length must be positive");
    return (L + 63) / 64;
}

std::vector<std::uint64_t> pack(const Secret& s) {
    std::vector<std::uint64_t> out(packed_words(s.size()), 0);
    for (int i = 0; i < s.size(); ++i)
        if (s.bits[i]) out[i / 64] |= std::uint64_t{1} << (i % 64);
    return out;
}

Secret unpack(const std::uint64_t* words, int L) {
    std::vector<int> bits(L);
    for (int i = 0; i < L; ++i) bits[i] = static_cast<int>((words[i / 64] >> (i % 64)) & 1);
    return Secret(std::move(bits));
}

KeyDatabase::KeyDatabase(int L, std::vector<std::uint64_t> packed, std::size_t tier_boundary, std::uint64_t seed)
    : L_(L), words_(packed_words(L)), packed_(std::move(packed)), tier_boundary_(tier_boundary), seed_(seed) {
    if (packed_.size() % words_) throw ShapeError("key database: packed size is not a multiple of the key width");
    if (tier_boundary_ > size()) throw ShapeError("key database: tier boundary beyond the key count");
}

Secret KeyDatabase::key(std::size_t i) const {
    if (i >= size()) throw RangeError("key index out of range");
    return unpack(packed_.data() + i * words_, L_);
}

KeyDatabase build_database(const std::vector<Secret>& real_keys, std::size_t N, std::uint64_t seed) {
    if (real_keys.empty()) throw PreconditionError("build_database: need at least one real key");
    if (N == 0) throw RangeError("build_database: N must be positive");
    const int L = real_keys[0].size();
    const int W = packed_words(L);
    std::vector<std::uint64_t> real;
    real.reserve(real_keys.size() * W);
    for (const auto& k : real_keys) {
        if (k.size() != L) throw ShapeError("build_database: keys differ in length");
        const auto p = pack(k);
        real.insert(real.end(), p.begin(), p.end());
    }
    std::set<std::vector<std::uint64_t>> seen;
    for (std::size_t i = 0; i < real_keys.size(); ++i)
        if (!seen.emplace(real.begin() + i * W, real.begin() + (i + 1) * W).second)
            throw PreconditionError("build_database: duplicate key in the real tier at index " + std::to_string(i));

    Rng rng = Rng::derive(seed, {0x1d});
    if (N <= real_keys.size()) {
        std::vector<std::size_t> idx(real_keys.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng.engine());
        idx.resize(N);
        std::sort(idx.begin(), idx.end());
        std::vector<std::uint64_t> out;
        out.reserve(N * W);
        for (auto i : idx) out.insert(out.end(), real.begin() + i * W, real.begin() + (i + 1) * W);
        return KeyDatabase(L, std::move(out), N, seed);
    }
    const std::size_t boundary = real_keys.size();
    real.resize(N * W);
    const std::uint64_t mask = tail_mask(L);
    for (std::size_t i = boundary; i < N; ++i) {
        for (int w = 0; w < W; ++w) real[i * W + w] = rng.bits();
        real[i * W + W - 1] &= mask;
    }
    return KeyDatabase(L, std::move(real), boundary, seed);
}

std::vector<std::uint16_t> hamming_scan(const Secret& decoded, const KeyDatabase& db) {
    if (decoded.size() != db.bits()) throw ShapeError("identify: decoded key length differs from the database");
    const auto q = pack(decoded);
    std::vector<std::uint16_t> d(db.size());
    simd::active().hamming_scan(db.data(), db.size(), db.words(), q.data(), d.data());
    return d;
}

Identification identify(const Secret& decoded, const KeyDatabase& db, std::optional<std::size_t> true_index) {
    if (db.size() == 0) throw PreconditionError("identify: empty database");
    const auto d = hamming_scan(decoded, db);
    Identification out;
    out.best = static_cast<std::size_t>(std::min_element(d.begin(), d.end()) - d.begin());
    out.distance = d[out.best];
    out.tie = std::count(d.begin() + out.best + 1, d.end(), d[out.best]) > 0;
    if (true_index) {
        const std::size_t t = *true_index;
        if (t >= db.size()) throw RangeError("identify: true index out of range");
        std::size_t ahead = 0;
        for (std::size_t j = 0; j < d.size(); ++j) ahead += d[j] < d[t] || (d[j] == d[t] && j < t);
        out.rank = ahead + 1;
    }
    return out;
}

int compare_tail(int L, int tau, double fpr) {
    if (L < 1) throw RangeError("compare_tail: L must be positive");
    // Tail count S = sum_{m > tau} C(L, m); compare S / 2^L with fpr = M * 2^e exactly.
    cpp_int c = 1, S = 0;
    for (int m = 0; m <= L; ++m) {
        if (m > tau) S += c;
        c = c * (L - m) / (m + 1);
    }
    int e = 0;
    const double frac = std::frexp(fpr, &e);
    const cpp_int M = static_cast<long long>(std::ldexp(frac, 53));
    e -= 53;
    cpp_int lhs = S, rhs = M << L;
    if (e < 0)
        lhs <<= -e;
    else
        rhs <<= e;
    return lhs < rhs ? -1 : (lhs == rhs ? 0 : 1);
}

DetectionThreshold compute_threshold(int L, double fpr) {
    if (L < 1) throw RangeError("compute_threshold: L must be positive");
    if (!(fpr > 0.0 && fpr <= 1.0)) throw RangeError("compute_threshold: fpr must lie in (0, 1]");
    DetectionThreshold t;
    t.L = L;
    t.fpr_target = fpr;
    t.tau = L;
    for (int tau = -1; tau <= L; ++tau)
        if (compare_tail(L, tau, fpr) <= 0) {
            t.tau = tau;
            break;
        }
    double tail = 0;
    for (int m = t.tau + 1; m <= L; ++m)
        tail += std::exp(std::lgamma(L + 1.0) - std::lgamma(m + 1.0) - std::lgamma(L - m + 1.0) - L * std::log(2.0));
    t.tail = tail;
    return t;
}

Metrics metrics(const std::vector<Secret>& decoded, const std::vector<Secret>& truth, double fpr) {
    if (decoded.size() != truth.size() || decoded.empty()) throw ShapeError("metrics: batch sizes differ or are empty");
    Metrics m;
    const int L = truth[0].size();
    const auto thr = compute_threshold(L, fpr);
    std::size_t detected = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (decoded[i].size() != truth[i].size()) throw ShapeError("metrics: key lengths differ");
        const int d = codec::hamming(decoded[i], truth[i]);
        m.ber.push_back(static_cast<double>(d) / truth[i].size());
        detected += thr.detect(truth[i].size() - d);
    }
    m.mean_ber = std::accumulate(m.ber.begin(), m.ber.end(), 0.0) / m.ber.size();
    m.bit_acc = 1.0 - m.mean_ber;
    m.tpr_at_fpr = static_cast<double>(detected) / truth.size();
    return m;
}

Pearson pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ShapeError("pearson: length mismatch");
    Pearson p;
    const std::size_t n = x.size();
    if (n < 3) {
        p.degenerate = true;
        return p;
    }
    const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    auto constant = [](const std::vector<double>& v) {
        const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
        return *lo == *hi;
    };
    if (constant(x) || constant(y) || sxx == 0 || syy == 0) {
        p.degenerate = true;
        return p;
    }
    p.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
    if (std::abs(p.r) == 1.0) {
        p.p_value = 0.0;
        return p;
    }
    const double dof = static_cast<double>(n - 2);
    const double t = p.r * std::sqrt(dof / (1 - p.r * p.r));
    const boost::math::students_t dist(dof);
    p.p_value = 2 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
    return p;
}

Summary summarize(std::vector<double> v) {
    Summary s;
    if (v.empty()) return s;
    std::sort(v.begin(), v.end());
    s.min = v.front();
    s.max = v.back();
    s.median = v.size() % 2 ? v[v.size() / 2] : 0.5 * (v[v.size() / 2 - 1] + v[v.size() / 2]);
    s.mean = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
    double sq = 0;
    for (double x : v) sq += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(sq / v.size());
    return s;
}

FlexibilityReport key_flexibility_report(const std::vector<double>& fixed_set_bers,
                                         const std::vector<double>& random_set_bers,
                                         const std::vector<Secret>& keys, const Secret& training_key) {
    if (keys.size() != random_set_bers.size()) throw ShapeError("key_flexibility_report: keys and BERs differ in count");
    FlexibilityReport r;
    r.fixed = summarize(fixed_set_bers);
    r.random = summarize(random_set_bers);
    std::vector<double> dist;
    for (const auto& k : keys) dist.push_back(codec::hamming(k, training_key));
    r.correlation = pearson(dist, random_set_bers);
    if (dist.empty()) return r;
    // Terciles by rank of distance; bins carry their distance range.
    std::vector<std::size_t> order(dist.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return dist[a] < dist[b]; });
    for (int b = 0; b < 3; ++b) {
        const std::size_t lo = order.size() * b / 3, hi = order.size() * (b + 1) / 3;
        if (lo == hi) continue;
        FlexibilityReport::Bin bin;
        bin.lo = static_cast<int>(dist[order[lo]]);
        bin.hi = static_cast<int>(dist[order[hi - 1]]);
        bin.count = hi - lo;
        for (std::size_t i = lo; i < hi; ++i) bin.mean_ber += random_set_bers[order[i]];
        bin.mean_ber /= bin.count;
        r.bins.push_back(bin);
    }
    return r;
}

ScalingTrial simulate_identification(int L, std::size_t real, std::size_t N, double flip_p, std::uint64_t seed) {
    Rng keys_rng = Rng::derive(seed, {0x5ca1e, 0});
    std::vector<Secret> keys;
    std::unordered_set<std::string> seen;
    while (keys.size() < real) {
        Secret s = Secret::random(L, keys_rng);
        if (seen.insert(s.str()).second) keys.push_back(std::move(s));
    }
    const KeyDatabase db = build_database(keys, N, seed);
    Rng flip = Rng::derive(seed, {0x5ca1e, 1});
    ScalingTrial t;
    t.N = N;
    for (std::size_t i = 0; i < db.tier_boundary(); ++i) {
        Secret q = db.key(i);
        for (auto& b : q.bits)
            if (flip.bernoulli(flip_p)) b ^= 1;
        const auto id = identify(q, db);
        t.correct += id.best == i;
        t.ties += id.tie;
        ++t.queries;
    }
    return t;
}

std::string to_hex(const Secret& s) {
    static const char* digits = "0123456789abcdef";
    const int pad = (4 - s.size() % 4) % 4;
    std::string out;
    int nib = 0, n = pad;
    for (int b : s.bits) {
        nib = nib << 1 | b;
        if (++n == 4) {
            out += digits[nib];
            nib = 0;
            n = 0;
        }
    }
    return out;
}

Secret from_hex(const std::string& hex, int L) {
    const int pad = (4 - L % 4) % 4;
    if (static_cast<int>(hex.size()) * 4 != L + pad) throw ShapeError("from_hex: expected " + std::to_string((L + pad) / 4) + " hex digits");
    std::vector<int> bits;
    for (char c : hex) {
        int v;
        if (c >= '0' && c <= '9') v = c - '0';
        else if (c >= 'a' && c <= 'f') v = c - 'a' + 10;
        else if (c >= 'A' && c <= 'F') v = c - 'A' + 10;
        else throw RangeError(std::string("from_hex: invalid digit '") + c + "'");
        for (int k = 3; k >= 0; --k) bits.push_back(v >> k & 1);
    }
    for (int i = 0; i < pad; ++i)
        if (bits[i]) throw RangeError("from_hex: padding bits must be zero");
    return Secret(std::vector<int>(bits.begin() + pad, bits.end()));
}

void write_keys(const std::filesystem::path& path, const std::vector<Secret>& keys) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path);
    if (!out) throw StateError("cannot write key file " + path.string());
    for (const auto& k : keys) out << to_hex(k) << "\n";
}

std::vector<Secret> read_keys(const std::filesystem::path& path, int L) {
    std::ifstream in(path);
    if (!in) throw StateError("cannot read key file " + path.string());
    std::vector<Secret> keys;
    for (std::string line; std::getline(in, line);) {
        while (!line.empty() && std::isspace(static_cast<unsigned char>(line.back()))) line.pop_back();
        if (!line.empty()) keys.push_back(from_hex(line, L));
    }
    return keys;
}

}  // namespace diffmark::ident
