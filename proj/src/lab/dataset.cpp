#include "diffmark/lab/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "diffmark/core/rng.hpp"
#include "diffmark/io/image.hpp"

namespace diffmark::lab {

namespace {

constexpr int S = kImageSize;

// Base hues for the two palettes; the shape picks one and jitters it.
constexpr std::array<std::array<float, 3>, 2> kPalette{{{0.9f, 0.45f, 0.15f}, {0.15f, 0.5f, 0.9f}}};

bool inside(int shape, double dx, double dy, double r) {
    switch (shape) {
        case 0:  // disk
            return dx * dx + dy * dy <= r * r;
        case 1:  // square
            return std::abs(dx) <= r * 0.85 && std::abs(dy) <= r * 0.85;
        case 2:  // triangle
            return dy <= r * 0.8 && dy >= -r && std::abs(dx) <= (dy + r) * 0.6;
        case 3:  // horizontal bar
            return std::abs(dy) <= r * 0.35 && std::abs(dx) <= r * 1.3;
        default:  // ring
        {
            const double d = std::sqrt(dx * dx + dy * dy);
            return d <= r && d >= r * 0.55;
        }
    }
}

void render(float* img, int label, Rng& rng) {
    // Background: a few low-frequency cosines per channel.
    const float base = static_cast<float>(rng.uniform(-0.6, 0.2));
    for (int c = 0; c < 3; ++c) {
        float* ch = img + c * S * S;
        std::fill(ch, ch + S * S, base + static_cast<float>(rng.uniform(-0.1, 0.1)));
        for (int k = 0; k < 3; ++k) {
            const double fx = rng.uniform(-3, 3), fy = rng.uniform(-3, 3);
            const double ph = rng.uniform(0, 2 * std::numbers::pi), amp = rng.uniform(0.03, 0.12);
            for (int y = 0; y < S; ++y)
                for (int x = 0; x < S; ++x)
                    ch[y * S + x] += static_cast<float>(amp * std::cos(2 * std::numbers::pi * (fx * x + fy * y) / S + ph));
        }
    }
    const int shape = label % 5;
    const auto& hue = kPalette[label / 5];
    const double r = rng.uniform(6.0, 10.0);
    const double cx = rng.uniform(r, S - r), cy = rng.uniform(r, S - r);
    std::array<float, 3> col;
    for (int c = 0; c < 3; ++c) col[c] = std::clamp(hue[c] + static_cast<float>(rng.uniform(-0.12, 0.12)), 0.0f, 1.0f) * 2 - 1;
    for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
            // 2x2 supersampling for soft edges.
            int hits = 0;
            for (int sy = 0; sy < 2; ++sy)
                for (int sx = 0; sx < 2; ++sx)
                    hits += inside(shape, x + 0.25 + 0.5 * sx - cx, y + 0.25 + 0.5 * sy - cy, r);
            if (!hits) continue;
            const float a = hits / 4.0f;
            for (int c = 0; c < 3; ++c) {
                float& p = img[c * S * S + y * S + x];
                p = (1 - a) * p + a * col[c];
            }
        }
    for (int i = 0; i < 3 * S * S; ++i) img[i] = std::clamp(img[i], -1.0f, 1.0f);
}

}  // namespace

Dataset generate_dataset(int n, std::uint64_t seed) {
    if (n < 0) throw RangeError("dataset size must be non-negative");
    Dataset d;
    d.images = Tensor<float>({n, 3, S, S});
    d.labels.resize(n);
    for (int i = 0; i < n; ++i) d.labels[i] = i % kNumClasses;
    Rng perm = Rng::derive(seed, {0xda7a});
    std::shuffle(d.labels.begin(), d.labels.end(), perm.engine());
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed, {0xda7b, static_cast<std::uint64_t>(i)});
        render(d.images.ptr() + static_cast<std::size_t>(i) * 3 * S * S, d.labels[i], rng);
    }
    return d;
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream m(dir / "manifest.csv");
    m << "file,label\n";
    char name[32];
    for (int i = 0; i < d.size(); ++i) {
        std::snprintf(name, sizeof name, "%06d.png", i);
        io::write_png(dir / name, d.images.ptr() + static_cast<std::size_t>(i) * 3 * S * S, S, S);
        m << name << "," << d.labels[i] << "\n";
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::vector<std::pair<std::string, int>> entries;
    if (std::filesystem::exists(dir / "manifest.csv")) {
        std::ifstream m(dir / "manifest.csv");
        std::string line;
        std::getline(m, line);
        while (std::getline(m, line)) {
            if (line.empty()) continue;
            const auto comma = line.find(',');
            if (comma == std::string::npos) throw ConfigError("bad manifest line: " + line);
            entries.emplace_back(line.substr(0, comma), std::stoi(line.substr(comma + 1)));
        }
    } else {
        for (const auto& e : std::filesystem::directory_iterator(dir))
            if (e.path().extension() == ".png") entries.emplace_back(e.path().filename().string(), 0);
        std::sort(entries.begin(), entries.end());
    }
    Dataset d;
    d.images = Tensor<float>({static_cast<int>(entries.size()), 3, S, S});
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const Tensor<float> img = io::read_png(dir / entries[i].first);
        if (img.shape != Shape{3, S, S})
            throw ShapeError("image " + entries[i].first + " is " + shape_str(img.shape) + ", expected 32x32 RGB");
        std::copy(img.data.begin(), img.data.end(), d.images.ptr() + i * img.size());
        if (entries[i].second < 0 || entries[i].second >= kNumClasses) throw RangeError("label out of range in manifest");
        d.labels.push_back(entries[i].second);
    }
    return d;
}

}  // namespace diffmark::lab
