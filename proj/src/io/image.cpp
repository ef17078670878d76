#include "diffmark/io/image.hpp"

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <stdexcept>

#include <jpeglib.h>
#include <png.h>

namespace diffmark::io {

std::vector<std::uint8_t> to_rgb8(const float* chw, int h, int w) {
    std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w * 3);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h * w; ++i) {
            const float v = std::clamp((chw[c * h * w + i] + 1.0f) * 127.5f, 0.0f, 255.0f);
            out[static_cast<std::size_t>(i) * 3 + c] = static_cast<std::uint8_t>(std::lround(v));
        }
    return out;
}

void from_rgb8(const std::uint8_t* rgb, int h, int w, float* chw) {
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < h * w; ++i) chw[c * h * w + i] = rgb[static_cast<std::size_t>(i) * 3 + c] / 127.5f - 1.0f;
}

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

void write_png_raw(const std::filesystem::path& p, const std::uint8_t* data, int h, int w, int color_type,
                   int channels) {
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::unique_ptr<std::FILE, FileCloser> f(std::fopen(p.c_str(), "wb"));
    if (!f) throw std::runtime_error("cannot write " + p.string());
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png_create_info_struct(png);
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw std::runtime_error("png encode failed for " + p.string());
    }
    png_init_io(png, f.get());
    png_set_IHDR(png, info, w, h, 8, color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < h; ++y)
        png_write_row(png, const_cast<png_bytep>(data + static_cast<std::size_t>(y) * w * channels));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png(const std::filesystem::path& p, const float* chw, int h, int w) {
    const auto rgb = to_rgb8(chw, h, w);
    write_png_raw(p, rgb.data(), h, w, PNG_COLOR_TYPE_RGB, 3);
}

void write_png(const std::filesystem::path& p, const Tensor<float>& img) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("write_png expects (3, H, W), got " + shape_str(img.shape));
    write_png(p, img.ptr(), img.dim(1), img.dim(2));
}

void write_png_gray(const std::filesystem::path& p, const float* map, int h, int w) {
    std::vector<std::uint8_t> g(static_cast<std::size_t>(h) * w);
    for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = static_cast<std::uint8_t>(std::lround(std::clamp(map[i], 0.0f, 1.0f) * 255.0f));
    write_png_raw(p, g.data(), h, w, PNG_COLOR_TYPE_GRAY, 1);
}

Tensor<float> read_png(const std::filesystem::path& p) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, p.c_str()))
        throw std::runtime_error("cannot read png " + p.string() + ": " + image.message);
    image.format = PNG_FORMAT_RGB;
    std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(image));
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        png_image_free(&image);
        throw std::runtime_error("png decode failed for " + p.string());
    }
    const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
    Tensor<float> out({3, h, w});
    from_rgb8(buf.data(), h, w, out.ptr());
    return out;
}

namespace {

struct JpegError {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
};

void jpeg_throw(j_common_ptr cinfo) {
    auto* err = reinterpret_cast<JpegError*>(cinfo->err);
    std::longjmp(err->jump, 1);
}

}  // namespace

Tensor<float> jpeg_roundtrip(const Tensor<float>& img, int quality) {
    if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("jpeg_roundtrip expects (3, H, W)");
    if (quality < 1 || quality > 100) throw RangeError("jpeg quality must be in [1, 100]");
    const int h = img.dim(1), w = img.dim(2);
    auto rgb = to_rgb8(img.ptr(), h, w);

    unsigned char* mem = nullptr;
    unsigned long mem_size = 0;
    {
        jpeg_compress_struct c{};
        JpegError err{};
        c.err = jpeg_std_error(&err.mgr);
        err.mgr.error_exit = jpeg_throw;
        if (setjmp(err.jump)) {
            jpeg_destroy_compress(&c);
            std::free(mem);
            throw std::runtime_error("jpeg encode failed");
        }
        jpeg_create_compress(&c);
        jpeg_mem_dest(&c, &mem, &mem_size);
        c.image_width = static_cast<JDIMENSION>(w);
        c.image_height = static_cast<JDIMENSION>(h);
        c.input_components = 3;
        c.in_color_space = JCS_RGB;
        jpeg_set_defaults(&c);
        jpeg_set_quality(&c, quality, TRUE);
        jpeg_start_compress(&c, TRUE);
        while (c.next_scanline < c.image_height) {
            JSAMPROW row = rgb.data() + static_cast<std::size_t>(c.next_scanline) * w * 3;
            jpeg_write_scanlines(&c, &row, 1);
        }
        jpeg_finish_compress(&c);
        jpeg_destroy_compress(&c);
    }

    std::vector<std::uint8_t> decoded(static_cast<std::size_t>(h) * w * 3);
    {
        jpeg_decompress_struct d{};
        JpegError err{};
        d.err = jpeg_std_error(&err.mgr);
        err.mgr.error_exit = jpeg_throw;
        if (setjmp(err.jump)) {
            jpeg_destroy_decompress(&d);
            std::free(mem);
            throw std::runtime_error("jpeg decode failed");
        }
        jpeg_create_decompress(&d);
        jpeg_mem_src(&d, mem, mem_size);
        jpeg_read_header(&d, TRUE);
        d.out_color_space = JCS_RGB;
        jpeg_start_decompress(&d);
        while (d.output_scanline < d.output_height) {
            JSAMPROW row = decoded.data() + static_cast<std::size_t>(d.output_scanline) * w * 3;
            jpeg_read_scanlines(&d, &row, 1);
        }
        jpeg_finish_decompress(&d);
        jpeg_destroy_decompress(&d);
    }
    std::free(mem);

    Tensor<float> out({3, h, w});
    from_rgb8(decoded.data(), h, w, out.ptr());
    return out;
}

}  // namespace diffmark::io
