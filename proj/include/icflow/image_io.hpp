#ifndef ICFLOW_IMAGE_IO_HPP
#define ICFLOW_IMAGE_IO_HPP

#include "icflow/core.hpp"
#include "icflow/latent.hpp"

#include <png.h>

#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

namespace icflow {

// 8-bit RGB PNG round trip. Quantization: u8 = round(clamp(v,0,1) * 255),
// v = u8 / 255. Only the patchify codec is exact; PNG is for humans and
// for the optional compressed dataset image format.

namespace detail {

struct PngWriteBuf {
    std::vector<unsigned char>* out;
};

inline void png_write_to_vector(png_structp png, png_bytep data,
                                png_size_t len) {
    auto* buf = static_cast<PngWriteBuf*>(png_get_io_ptr(png));
    buf->out->insert(buf->out->end(), data, data + len);
}

inline void png_noop_flush(png_structp) {}

struct PngReadBuf {
    const unsigned char* data;
    size_t size;
    size_t pos;
};

inline void png_read_from_buffer(png_structp png, png_bytep out,
                                 png_size_t len) {
    auto* buf = static_cast<PngReadBuf*>(png_get_io_ptr(png));
    if (buf->pos + len > buf->size)
        png_error(png, "read past end of buffer");
    std::memcpy(out, buf->data + buf->pos, len);
    buf->pos += len;
}

}  // namespace detail

template <typename T>
std::vector<unsigned char> encode_png(const ImageTensor<T>& img) {
    if (img.channels != 3)
        throw Error("encode_png: expected 3 channels, got " +
                    std::to_string(img.channels));
    if (img.height < 1 || img.width < 1)
        throw Error("encode_png: empty image");

    std::vector<unsigned char> rows(static_cast<size_t>(img.height) *
                                    img.width * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c) {
                double v = static_cast<double>(img.at(c, y, x));
                v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
                rows[(static_cast<size_t>(y) * img.width + x) * 3 +
                     static_cast<size_t>(c)] =
                    static_cast<unsigned char>(std::lround(v * 255.0));
            }

    std::vector<unsigned char> out;
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png)
        throw Error("encode_png: png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw Error("encode_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw Error("encode_png: libpng error");
    }
    detail::PngWriteBuf buf{&out};
    png_set_write_fn(png, &buf, detail::png_write_to_vector,
                     detail::png_noop_flush);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int y = 0; y < img.height; ++y)
        png_write_row(png,
                      rows.data() + static_cast<size_t>(y) * img.width * 3);
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    return out;
}

template <typename T = float>
ImageTensor<T> decode_png(const unsigned char* data, size_t size) {
    png_structp png =
        png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png)
        throw Error("decode_png: png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw Error("decode_png: png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw Error("decode_png: libpng error (corrupt data?)");
    }
    detail::PngReadBuf buf{data, size, 0};
    png_set_read_fn(png, &buf, detail::png_read_from_buffer);
    png_read_info(png, info);

    png_uint_32 width = png_get_image_width(png, info);
    png_uint_32 height = png_get_image_height(png, info);
    png_byte color_type = png_get_color_type(png, info);
    png_byte bit_depth = png_get_bit_depth(png, info);

    // normalize whatever we were given to 8-bit RGB
    if (bit_depth == 16)
        png_set_strip_16(png);
    if (color_type == PNG_COLOR_TYPE_PALETTE)
        png_set_palette_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8)
        png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_tRNS_to_alpha(png);
    if (color_type == PNG_COLOR_TYPE_GRAY ||
        color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
        png_set_gray_to_rgb(png);
    if (color_type == PNG_COLOR_TYPE_RGB_ALPHA ||
        color_type == PNG_COLOR_TYPE_GRAY_ALPHA ||
        png_get_valid(png, info, PNG_INFO_tRNS))
        png_set_strip_alpha(png);
    png_read_update_info(png, info);

    std::vector<unsigned char> rowbuf(static_cast<size_t>(width) * 3);
    ImageTensor<T> img(3, static_cast<int>(height), static_cast<int>(width));
    for (png_uint_32 y = 0; y < height; ++y) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (png_uint_32 x = 0; x < width; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, static_cast<int>(y), static_cast<int>(x)) =
                    static_cast<T>(rowbuf[static_cast<size_t>(x) * 3 +
                                          static_cast<size_t>(c)] /
                                   255.0);
    }
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

template <typename T = float>
ImageTensor<T> decode_png(const std::vector<unsigned char>& bytes) {
    return decode_png<T>(bytes.data(), bytes.size());
}

template <typename T>
void write_png(const std::string& path, const ImageTensor<T>& img) {
    std::vector<unsigned char> bytes = encode_png(img);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os)
        throw Error("write_png: cannot open " + path);
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os)
        throw Error("write_png: write failed: " + path);
}

template <typename T = float>
ImageTensor<T> read_png(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is)
        throw Error("read_png: cannot open " + path);
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
    if (bytes.empty())
        throw Error("read_png: empty file: " + path);
    return decode_png<T>(bytes.data(), bytes.size());
}

}  // namespace icflow

#endif  // ICFLOW_IMAGE_IO_HPP
