#include "diffmark/pipeline/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <fstream>
#include <numbers>

#include "diffmark/core/errors.hpp"
#include "diffmark/io/image.hpp"

namespace diffmark::pipeline {

namespace {

// Plain 1D DFT; the maps here are at most 32 wide.
std::vector<std::complex<double>> dft(const std::vector<std::complex<double>>& x) {
    const std::size_t n = x.size();
    std::vector<std::complex<double>> y(n);
    for (std::size_t k = 0; k < n; ++k) {
        std::complex<double> s = 0;
        for (std::size_t j = 0; j < n; ++j)
            s += x[j] * std::polar(1.0, -2.0 * std::numbers::pi * static_cast<double>(k * j % n) / static_cast<double>(n));
        y[k] = s;
    }
    return y;
}

}  // namespace

std::vector<double> channel_l2(const Tensor<float>& delta) {
    const bool batched = delta.shape.size() == 4;
    if (!(delta.shape.size() == 3 || (batched && delta.dim(0) == 1)))
        throw ShapeError("channel_l2: expected (C, h, w) or (1, C, h, w)");
    const int c = delta.dim(batched ? 1 : 0);
    const std::size_t per = delta.size() / c;
    std::vector<double> out(c, 0.0);
    for (int k = 0; k < c; ++k) {
        for (std::size_t i = 0; i < per; ++i) out[k] += double(delta[k * per + i]) * delta[k * per + i];
        out[k] = std::sqrt(out[k]);
    }
    return out;
}

Tensor<double> log_power_spectrum(const Tensor<float>& map) {
    if (map.shape.size() != 2) throw ShapeError("log_power_spectrum: expected (H, W)");
    const int h = map.dim(0), w = map.dim(1);
    std::vector<std::vector<std::complex<double>>> rows(h);
    for (int y = 0; y < h; ++y) {
        std::vector<std::complex<double>> r(w);
        for (int x = 0; x < w; ++x) r[x] = map[y * w + x];
        rows[y] = dft(r);
    }
    Tensor<double> out({h, w});
    for (int x = 0; x < w; ++x) {
        std::vector<std::complex<double>> col(h);
        for (int y = 0; y < h; ++y) col[y] = rows[y][x];
        const auto f = dft(col);
        for (int y = 0; y < h; ++y) {
            const int cy = (y + h / 2) % h, cx = (x + w / 2) % w;
            out[cy * w + cx] = std::log1p(std::norm(f[y]));
        }
    }
    return out;
}

std::vector<double> radial_profile(const Tensor<double>& s) {
    const int h = s.dim(0), w = s.dim(1);
    const int rmax = static_cast<int>(std::ceil(std::hypot(h / 2, w / 2))) + 1;
    std::vector<double> sum(rmax, 0.0), cnt(rmax, 0.0);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const int r = static_cast<int>(std::lround(std::hypot(y - h / 2, x - w / 2)));
            sum[r] += s[y * w + x];
            cnt[r] += 1;
        }
    std::vector<double> out;
    for (int r = 0; r < rmax; ++r)
        if (cnt[r] > 0) out.push_back(sum[r] / cnt[r]);
    return out;
}

BandSplit band_split(const Tensor<double>& s, double radius) {
    const int h = s.dim(0), w = s.dim(1);
    double in = 0, out = 0;
    long ni = 0, no = 0;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            if (std::hypot(y - h / 2, x - w / 2) <= radius) {
                in += s[y * w + x];
                ++ni;
            } else {
                out += s[y * w + x];
                ++no;
            }
        }
    if (ni == 0 || no == 0) throw RangeError("band_split: radius leaves one band empty");
    return {in / ni, out / no};
}

Tensor<float> channel_mean(const Tensor<float>& x) {
    if (x.shape.size() != 3) throw ShapeError("channel_mean: expected (C, H, W)");
    const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
    Tensor<float> m({h, w});
    for (int k = 0; k < c; ++k)
        for (int i = 0; i < h * w; ++i) m[i] += x[k * h * w + i] / static_cast<float>(c);
    return m;
}

Tensor<float> difference_map(const Tensor<float>& a, const Tensor<float>& b, double gain) {
    if (a.shape != b.shape || a.shape.size() != 3) throw ShapeError("difference_map: expected matching (C, H, W)");
    const int c = a.dim(0), hw = a.dim(1) * a.dim(2);
    Tensor<float> m({a.dim(1), a.dim(2)});
    for (int i = 0; i < hw; ++i) {
        double s = 0;
        for (int k = 0; k < c; ++k) s += std::abs(double(a[k * hw + i]) - b[k * hw + i]);
        m[i] = static_cast<float>(std::clamp(gain * s / c, 0.0, 1.0));
    }
    return m;
}

SignalReport write_signal_report(const std::filesystem::path& dir, const Tensor<float>& delta,
                                 const Tensor<float>& watermarked, const Tensor<float>& clean, double gain) {
    if (watermarked.shape != clean.shape || watermarked.shape.size() != 4)
        throw ShapeError("write_signal_report: image batches differ");
    std::filesystem::create_directories(dir);
    SignalReport rep;
    rep.l2 = channel_l2(delta);
    Tensor<float> d3 = delta;
    if (d3.shape.size() == 4) d3.shape.erase(d3.shape.begin());
    const auto spec = log_power_spectrum(channel_mean(d3));
    rep.radial = radial_profile(spec);
    rep.radius = spec.dim(0) / 4.0;
    rep.band = band_split(spec, rep.radius);

    double lo = spec.data[0], hi = spec.data[0];
    for (double v : spec.data) lo = std::min(lo, v), hi = std::max(hi, v);
    Tensor<float> norm(spec.shape);
    for (std::size_t i = 0; i < spec.size(); ++i)
        norm[i] = static_cast<float>(hi > lo ? (spec[i] - lo) / (hi - lo) : 0.0);
    io::write_png_gray(dir / "delta_spectrum.png", norm.ptr(), norm.dim(0), norm.dim(1));

    std::ofstream csv(dir / "signal.csv");
    csv << "quantity,index,value\n";
    for (std::size_t k = 0; k < rep.l2.size(); ++k) csv << "channel_l2," << k << ',' << rep.l2[k] << '\n';
    for (std::size_t r = 0; r < rep.radial.size(); ++r) csv << "radial_log_power," << r << ',' << rep.radial[r] << '\n';
    csv << "band_inside,0," << rep.band.inside << "\nband_outside,0," << rep.band.outside << '\n';

    const int n = watermarked.dim(0), per = static_cast<int>(watermarked.size()) / n;
    const int h = watermarked.dim(2), w = watermarked.dim(3);
    std::ofstream dcsv(dir / "difference.csv");
    dcsv << "image,mean_abs_diff\n";
    for (int i = 0; i < std::min(n, 8); ++i) {
        Tensor<float> a({3, h, w}), b({3, h, w});
        std::copy_n(watermarked.data.begin() + i * per, per, a.data.begin());
        std::copy_n(clean.data.begin() + i * per, per, b.data.begin());
        const auto raw = difference_map(a, b, 1.0);
        double s = 0;
        for (float v : raw.data) s += v;
        dcsv << i << ',' << s / raw.size() << '\n';
        const auto amp = difference_map(a, b, gain);
        io::write_png(dir / ("wm_" + std::to_string(i) + ".png"), a);
        io::write_png(dir / ("clean_" + std::to_string(i) + ".png"), b);
        io::write_png_gray(dir / ("diff_" + std::to_string(i) + ".png"), amp.ptr(), h, w);
    }
    return rep;
}

}  // namespace diffmark::pipeline
