#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <vector>

#include "tensor.hpp"

// Image utilities. Images are [3,H,W] (or [H,W] grayscale) tensors with
// float values in [0,1]; disk format is binary PPM (P6) / PGM (P5) with
// 8-bit channels. Quantization is round-half-away via llround, so a
// write/read round trip is the same as quantize+dequantize in memory.

namespace nd {
namespace img {

inline uint8_t to_u8(double v) {
    const double c = std::min(1.0, std::max(0.0, v));
    return static_cast<uint8_t>(std::llround(c * 255.0));
}

inline double from_u8(uint8_t b) { return static_cast<double>(b) / 255.0; }

inline std::vector<uint8_t> quantize_u8(const Tensor& t) {
    std::vector<uint8_t> out(static_cast<size_t>(t.numel()));
    auto v = t.v();
    for (size_t i = 0; i < out.size(); ++i) out[i] = to_u8(v[i]);
    return out;
}

// Clamp + 8-bit round trip; the canonical form every saved image takes.
inline Tensor canonicalize_u8(const Tensor& t) {
    Tensor out(t.shape());
    auto src = t.v();
    auto dst = out.v();
    for (i64 i = 0; i < t.numel(); ++i) dst[i] = from_u8(to_u8(src[i]));
    return out;
}

inline void write_ppm(const std::filesystem::path& path, const Tensor& t) {
    ND_CHECK(t.rank() == 3 && t.dim(0) == 3, DimensionError,
             "write_ppm: expects [3,H,W], got " << shape_str(t.shape()));
    const i64 h = t.dim(1), w = t.dim(2);
    std::ofstream os(path, std::ios::binary);
    ND_CHECK(os.good(), ArtifactError, "cannot open for write: " << path.string());
    os << "P6\n" << w << " " << h << "\n255\n";
    auto v = t.v();
    std::vector<uint8_t> row(static_cast<size_t>(w * 3));
    for (i64 y = 0; y < h; ++y) {
        for (i64 x = 0; x < w; ++x)
            for (i64 c = 0; c < 3; ++c)
                row[static_cast<size_t>(x * 3 + c)] = to_u8(v[(c * h + y) * w + x]);
        os.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    ND_CHECK(os.good(), ArtifactError, "write failed: " << path.string());
}

namespace detail {
inline int next_pnm_int(std::istream& is, const char* what) {
    // skips whitespace and '#' comments per the PNM grammar
    int c = is.get();
    while (c != EOF && (std::isspace(c) || c == '#')) {
        if (c == '#')
            while (c != EOF && c != '\n') c = is.get();
        c = is.get();
    }
    ND_CHECK(c != EOF && std::isdigit(c), ArtifactError, "malformed PNM header at " << what);
    int val = 0;
    while (c != EOF && std::isdigit(c)) {
        val = val * 10 + (c - '0');
        c = is.get();
    }
    return val;
}
}  // namespace detail

inline Tensor read_ppm(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    ND_CHECK(is.good(), ArtifactError, "cannot open image: " << path.string());
    char m0 = 0, m1 = 0;
    is.get(m0);
    is.get(m1);
    ND_CHECK(m0 == 'P' && m1 == '6', ArtifactError, "not a P6 PPM file: " << path.string());
    const int w = detail::next_pnm_int(is, "width");
    const int h = detail::next_pnm_int(is, "height");
    const int maxval = detail::next_pnm_int(is, "maxval");
    ND_CHECK(maxval == 255, ArtifactError, "unsupported PPM maxval " << maxval);
    std::vector<uint8_t> buf(static_cast<size_t>(w) * h * 3);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    ND_CHECK(static_cast<size_t>(is.gcount()) == buf.size(), ArtifactError,
             "truncated PPM payload: " << path.string());
    Tensor t(Shape{3, h, w});
    auto v = t.v();
    for (i64 y = 0; y < h; ++y)
        for (i64 x = 0; x < w; ++x)
            for (i64 c = 0; c < 3; ++c)
                v[(c * h + y) * w + x] = from_u8(buf[static_cast<size_t>((y * w + x) * 3 + c)]);
    return t;
}

inline void write_pgm(const std::filesystem::path& path, const Tensor& t) {
    ND_CHECK(t.rank() == 2, DimensionError, "write_pgm: expects [H,W]");
    const i64 h = t.dim(0), w = t.dim(1);
    std::ofstream os(path, std::ios::binary);
    ND_CHECK(os.good(), ArtifactError, "cannot open for write: " << path.string());
    os << "P5\n" << w << " " << h << "\n255\n";
    auto v = t.v();
    for (i64 i = 0; i < h * w; ++i) os.put(static_cast<char>(to_u8(v[i])));
    ND_CHECK(os.good(), ArtifactError, "write failed: " << path.string());
}

// ITU-R BT.601 luma from [3,H,W] -> [H,W]
inline Tensor luminance(const Tensor& rgb) {
    ND_CHECK(rgb.rank() == 3 && rgb.dim(0) == 3, DimensionError,
             "luminance: expects [3,H,W], got " << shape_str(rgb.shape()));
    const i64 h = rgb.dim(1), w = rgb.dim(2);
    Tensor y(Shape{h, w});
    auto rv = rgb.v();
    auto yv = y.v();
    const i64 plane = h * w;
    for (i64 i = 0; i < plane; ++i)
        yv[i] = 0.299 * rv[i] + 0.587 * rv[plane + i] + 0.114 * rv[2 * plane + i];
    return y;
}

// Tile [3,H,W] images into one [3, rows*H, cols*W] sheet (row-major order,
// unused cells black).
inline Tensor montage(const std::vector<Tensor>& images, i64 cols) {
    ND_CHECK(!images.empty() && cols >= 1, DimensionError, "montage: no images or cols < 1");
    const i64 h = images[0].dim(1), w = images[0].dim(2);
    for (const auto& im : images)
        ND_CHECK(im.rank() == 3 && im.dim(0) == 3 && im.dim(1) == h && im.dim(2) == w,
                 DimensionError, "montage: all images must share shape");
    const i64 rows = (static_cast<i64>(images.size()) + cols - 1) / cols;
    Tensor sheet(Shape{3, rows * h, cols * w});
    auto sv = sheet.v();
    const i64 sh = rows * h, sw = cols * w;
    for (size_t idx = 0; idx < images.size(); ++idx) {
        const i64 r0 = (static_cast<i64>(idx) / cols) * h;
        const i64 c0 = (static_cast<i64>(idx) % cols) * w;
        auto iv = images[idx].v();
        for (i64 c = 0; c < 3; ++c)
            for (i64 y = 0; y < h; ++y)
                for (i64 x = 0; x < w; ++x)
                    sv[(c * sh + r0 + y) * sw + c0 + x] = iv[(c * h + y) * w + x];
    }
    return sheet;
}

}  // namespace img
}  // namespace nd
