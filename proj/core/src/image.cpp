#include "mlcl/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include <png.h>

#include "mlcl/errors.hpp"

namespace mlcl {

Tensor image_to_tensor(const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ShapeError("image must have 1 or 3 channels, got " + std::to_string(img.channels));
    }
    Tensor t({3, img.height, img.width});
    const double inv = 1.0 / 255.0;
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < 3; ++c) {
                std::size_t src_c = img.channels == 1 ? 0 : c;
                t.at3(c, y, x) = static_cast<double>(img.at(y, x, src_c)) * inv;
            }
        }
    }
    return t;
}

ImageU8 tensor_to_image_u8(const Tensor& t) {
    if (t.shape().size() != 3) {
        throw ShapeError("expected [C, H, W] tensor, got " + t.shape_str());
    }
    std::size_t ch = t.shape()[0];
    if (ch != 1 && ch != 3) {
        throw ShapeError("expected 1 or 3 channels, got " + std::to_string(ch));
    }
    ImageU8 img;
    img.height = t.shape()[1];
    img.width = t.shape()[2];
    img.channels = ch;
    img.data.resize(img.height * img.width * ch);
    for (std::size_t y = 0; y < img.height; ++y) {
        for (std::size_t x = 0; x < img.width; ++x) {
            for (std::size_t c = 0; c < ch; ++c) {
                double v = std::clamp(t.at3(c, y, x), 0.0, 1.0);
                img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(v * 255.0));
            }
        }
    }
    return img;
}

namespace {

int skip_pnm_whitespace(std::istream& in) {
    int c = in.get();
    while (c == ' ' || c == '\t' || c == '\r' || c == '\n' || c == '#') {
        if (c == '#') {
            while (c != '\n' && c != EOF) c = in.get();
        }
        c = in.get();
    }
    return c;
}

std::size_t read_pnm_int(std::istream& in) {
    int c = skip_pnm_whitespace(in);
    if (c < '0' || c > '9') throw IoError("malformed PNM header");
    std::size_t v = 0;
    while (c >= '0' && c <= '9') {
        v = v * 10 + static_cast<std::size_t>(c - '0');
        c = in.get();
    }
    return v;
}

ImageU8 read_pnm(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    char magic[2];
    in.read(magic, 2);
    if (!in || magic[0] != 'P' || (magic[1] != '5' && magic[1] != '6')) {
        throw IoError("unsupported PNM magic in " + path.string());
    }
    ImageU8 img;
    img.channels = magic[1] == '6' ? 3 : 1;
    img.width = read_pnm_int(in);
    img.height = read_pnm_int(in);
    std::size_t maxval = read_pnm_int(in);
    if (maxval != 255) throw IoError("only maxval 255 PNM supported, got " + std::to_string(maxval));
    img.data.resize(img.height * img.width * img.channels);
    in.read(reinterpret_cast<char*>(img.data.data()), static_cast<std::streamsize>(img.data.size()));
    if (!in) throw IoError("truncated PNM data in " + path.string());
    return img;
}

void png_error_handler(png_structp png, png_const_charp msg) {
    throw IoError(std::string("png: ") + msg);
    (void)png;
}

void png_warning_handler(png_structp, png_const_charp) {}

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};

ImageU8 read_png(const std::filesystem::path& path) {
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw IoError("cannot open " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                             png_error_handler, png_warning_handler);
    if (!png) throw IoError("png: failed to create read struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw IoError("png: failed to create info struct");
    }

    ImageU8 img;
    try {
        png_init_io(png, fp.get());
        png_read_info(png, info);

        png_uint_32 w = png_get_image_width(png, info);
        png_uint_32 h = png_get_image_height(png, info);
        int bit_depth = png_get_bit_depth(png, info);
        int color_type = png_get_color_type(png, info);

        if (bit_depth == 16) png_set_strip_16(png);
        if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
        if (color_type == PNG_COLOR_TYPE_GRAY && bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
        if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
        png_set_strip_alpha(png);
        png_read_update_info(png, info);

        color_type = png_get_color_type(png, info);
        img.channels = (color_type == PNG_COLOR_TYPE_GRAY) ? 1 : 3;
        img.width = w;
        img.height = h;
        img.data.resize(img.height * img.width * img.channels);

        std::vector<png_bytep> rows(h);
        for (png_uint_32 y = 0; y < h; ++y) {
            rows[y] = img.data.data() + static_cast<std::size_t>(y) * img.width * img.channels;
        }
        png_read_image(png, rows.data());
        png_read_end(png, nullptr);
    } catch (...) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw;
    }
    png_destroy_read_struct(&png, &info, nullptr);
    return img;
}

} // namespace

ImageU8 read_image(const std::filesystem::path& path) {
    std::ifstream probe(path, std::ios::binary);
    if (!probe) throw IoError("cannot open " + path.string());
    unsigned char sig[8] = {};
    probe.read(reinterpret_cast<char*>(sig), 8);
    probe.close();
    if (sig[0] == 0x89 && sig[1] == 'P' && sig[2] == 'N' && sig[3] == 'G') {
        return read_png(path);
    }
    if (sig[0] == 'P' && (sig[1] == '5' || sig[1] == '6')) {
        return read_pnm(path);
    }
    throw IoError("unrecognized image format: " + path.string());
}

void write_ppm(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ShapeError("PNM supports 1 or 3 channels, got " + std::to_string(img.channels));
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << (img.channels == 3 ? "P6" : "P5") << "\n"
        << img.width << " " << img.height << "\n255\n";
    out.write(reinterpret_cast<const char*>(img.data.data()),
              static_cast<std::streamsize>(img.data.size()));
    if (!out) throw IoError("failed writing " + path.string());
}

void write_png(const std::filesystem::path& path, const ImageU8& img) {
    if (img.channels != 1 && img.channels != 3) {
        throw ShapeError("PNG writer supports 1 or 3 channels, got " + std::to_string(img.channels));
    }
    std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot write " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                              png_error_handler, png_warning_handler);
    if (!png) throw IoError("png: failed to create write struct");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png: failed to create info struct");
    }

    try {
        png_init_io(png, fp.get());
        int color_type = img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY;
        png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                     static_cast<png_uint_32>(img.height), 8, color_type,
                     PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        std::vector<png_const_bytep> rows(img.height);
        for (std::size_t y = 0; y < img.height; ++y) {
            rows[y] = img.data.data() + y * img.width * img.channels;
        }
        png_write_image(png, const_cast<png_bytepp>(rows.data()));
        png_write_end(png, nullptr);
    } catch (...) {
        png_destroy_write_struct(&png, &info);
        throw;
    }
    png_destroy_write_struct(&png, &info);
}

Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
    if (img.shape().size() != 3) {
        throw ShapeError("expected [C, H, W] tensor, got " + img.shape_str());
    }
    if (out_h == 0 || out_w == 0) throw ShapeError("resize target must be nonzero");
    std::size_t ch = img.shape()[0];
    std::size_t in_h = img.shape()[1];
    std::size_t in_w = img.shape()[2];
    Tensor out({ch, out_h, out_w});
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);
    for (std::size_t oy = 0; oy < out_h; ++oy) {
        double fy = (static_cast<double>(oy) + 0.5) * sy - 0.5;
        fy = std::clamp(fy, 0.0, static_cast<double>(in_h - 1));
        std::size_t y0 = static_cast<std::size_t>(fy);
        std::size_t y1 = std::min(y0 + 1, in_h - 1);
        double wy = fy - static_cast<double>(y0);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
            double fx = (static_cast<double>(ox) + 0.5) * sx - 0.5;
            fx = std::clamp(fx, 0.0, static_cast<double>(in_w - 1));
            std::size_t x0 = static_cast<std::size_t>(fx);
            std::size_t x1 = std::min(x0 + 1, in_w - 1);
            double wx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < ch; ++c) {
                double top = img.at3(c, y0, x0) * (1.0 - wx) + img.at3(c, y0, x1) * wx;
                double bot = img.at3(c, y1, x0) * (1.0 - wx) + img.at3(c, y1, x1) * wx;
                out.at3(c, oy, ox) = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    return out;
}

Tensor gaussian_blur(const Tensor& img, double sigma, std::size_t ksize) {
    if (img.shape().size() != 3) {
        throw ShapeError("expected [C, H, W] tensor, got " + img.shape_str());
    }
    if (ksize % 2 == 0 || ksize == 0) {
        throw ShapeError("blur kernel size must be odd, got " + std::to_string(ksize));
    }
    if (sigma <= 0.0) throw NumericError("blur sigma must be positive");
    std::size_t ch = img.shape()[0];
    std::size_t h = img.shape()[1];
    std::size_t w = img.shape()[2];
    std::ptrdiff_t r = static_cast<std::ptrdiff_t>(ksize / 2);

    std::vector<double> kernel(ksize);
    double sum = 0.0;
    for (std::ptrdiff_t i = -r; i <= r; ++i) {
        double v = std::exp(-static_cast<double>(i * i) / (2.0 * sigma * sigma));
        kernel[static_cast<std::size_t>(i + r)] = v;
        sum += v;
    }
    for (auto& v : kernel) v /= sum;

    auto clampi = [](std::ptrdiff_t v, std::ptrdiff_t hi) {
        return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, hi));
    };

    Tensor tmp({ch, h, w});
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::ptrdiff_t i = -r; i <= r; ++i) {
                    std::size_t sx = clampi(static_cast<std::ptrdiff_t>(x) + i,
                                            static_cast<std::ptrdiff_t>(w) - 1);
                    acc += img.at3(c, y, sx) * kernel[static_cast<std::size_t>(i + r)];
                }
                tmp.at3(c, y, x) = acc;
            }
        }
    }
    Tensor out({ch, h, w});
    for (std::size_t c = 0; c < ch; ++c) {
        for (std::size_t y = 0; y < h; ++y) {
            for (std::size_t x = 0; x < w; ++x) {
                double acc = 0.0;
                for (std::ptrdiff_t i = -r; i <= r; ++i) {
                    std::size_t sy = clampi(static_cast<std::ptrdiff_t>(y) + i,
                                            static_cast<std::ptrdiff_t>(h) - 1);
                    acc += tmp.at3(c, sy, x) * kernel[static_cast<std::size_t>(i + r)];
                }
                out.at3(c, y, x) = acc;
            }
        }
    }
    return out;
}

Tensor normalize_channels(const Tensor& img, const std::array<double, 3>& mean,
                          const std::array<double, 3>& stddev) {
    for (double s : stddev) {
        if (s <= 0.0) throw NumericError("channel std must be positive");
    }
    Tensor out = img;
    if (img.shape().size() == 3) {
        if (img.shape()[0] != 3) throw ShapeError("expected 3 channels, got " + img.shape_str());
        std::size_t plane = img.shape()[1] * img.shape()[2];
        for (std::size_t c = 0; c < 3; ++c) {
            double* p = out.data() + c * plane;
            for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) / stddev[c];
        }
    } else if (img.shape().size() == 4) {
        if (img.shape()[1] != 3) throw ShapeError("expected 3 channels, got " + img.shape_str());
        std::size_t plane = img.shape()[2] * img.shape()[3];
        for (std::size_t n = 0; n < img.shape()[0]; ++n) {
            for (std::size_t c = 0; c < 3; ++c) {
                double* p = out.data() + (n * 3 + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - mean[c]) / stddev[c];
            }
        }
    } else {
        throw ShapeError("expected [3, H, W] or [N, 3, H, W], got " + img.shape_str());
    }
    return out;
}

} // namespace mlcl
