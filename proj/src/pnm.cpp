#include "dri/pnm.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "dri/errors.hpp"

namespace dri {
namespace {

class HeaderReader {
public:
    HeaderReader(std::string_view b, const std::string& src) : bytes_(b), source_(src) {}

    void skip_space_and_comments() {
        while (pos_ < bytes_.size()) {
            const char c = bytes_[pos_];
            if (c == '#') {
                while (pos_ < bytes_.size() && bytes_[pos_] != '\n' && bytes_[pos_] != '\r') ++pos_;
            } else if (std::isspace(static_cast<unsigned char>(c))) {
                ++pos_;
            } else {
                break;
            }
        }
    }

    std::size_t number(const char* field) {
        skip_space_and_comments();
        if (pos_ >= bytes_.size() || !std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            throw ParseError(source_ + ": bad or missing " + field + " in PNM header");
        }
        std::size_t v = 0;
        while (pos_ < bytes_.size() && std::isdigit(static_cast<unsigned char>(bytes_[pos_]))) {
            v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
            if (v > 1u << 24) throw ParseError(source_ + ": " + field + " too large in PNM header");
            ++pos_;
        }
        return v;
    }

    std::size_t pos_ = 0;
    std::string_view bytes_;
    const std::string& source_;
};

}  // namespace

PnmImage parse_pnm(std::string_view bytes, const std::string& source) {
    if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
        throw ParseError(source + ": bad magic (expected P5 or P6)");
    }
    PnmImage img;
    img.channels = bytes[1] == '5' ? 1 : 3;
    HeaderReader r(bytes, source);
    r.pos_ = 2;
    if (r.pos_ < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[r.pos_])) && bytes[r.pos_] != '#') {
        throw ParseError(source + ": bad magic (expected whitespace after P5/P6)");
    }
    img.width = r.number("width");
    img.height = r.number("height");
    const std::size_t maxval = r.number("maxval");
    if (img.width == 0) throw ParseError(source + ": width must be positive");
    if (img.height == 0) throw ParseError(source + ": height must be positive");
    if (maxval != 255) throw ParseError(source + ": maxval " + std::to_string(maxval) + " unsupported (need 255)");
    if (r.pos_ >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[r.pos_]))) {
        throw ParseError(source + ": missing whitespace after maxval");
    }
    ++r.pos_;
    const std::size_t need = img.width * img.height * img.channels;
    if (bytes.size() - r.pos_ < need) {
        throw ParseError(source + ": truncated pixel payload (" + std::to_string(bytes.size() - r.pos_) + " of " +
                         std::to_string(need) + " bytes)");
    }
    img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_),
                      bytes.begin() + static_cast<std::ptrdiff_t>(r.pos_ + need));
    return img;
}

PnmImage read_pnm(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open image " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_pnm(ss.str(), path);
}

std::string encode_pnm(const PnmImage& img) {
    if (img.channels != 1 && img.channels != 3) throw ContractError("encode_pnm: channels must be 1 or 3");
    if (img.pixels.size() != img.width * img.height * img.channels)
        throw DimensionError("encode_pnm: pixel buffer does not match geometry");
    std::string out = (img.channels == 1 ? "P5\n" : "P6\n") + std::to_string(img.width) + " " +
                      std::to_string(img.height) + "\n255\n";
    out.append(img.pixels.begin(), img.pixels.end());
    return out;
}

void write_pnm(const std::string& path, const PnmImage& img) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write image " + path);
    const std::string bytes = encode_pnm(img);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for " + path);
}

Tensor<float> to_tensor(const PnmImage& img, std::size_t channels) {
    const std::size_t C = channels == 0 ? img.channels : channels;
    if (C != img.channels && !(img.channels == 1 && C == 3)) {
        throw DimensionError("image has " + std::to_string(img.channels) + " channel(s), model expects " +
                             std::to_string(C));
    }
    const std::size_t H = img.height, W = img.width;
    Tensor<float> t(Shape{C, H, W});
    for (std::size_t c = 0; c < C; ++c) {
        const std::size_t src_c = img.channels == 1 ? 0 : c;
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x)
                t.data[(c * H + y) * W + x] = static_cast<float>(img.pixels[(y * W + x) * img.channels + src_c]) / 255.0f;
    }
    return t;
}

Tensor<float> load_image(const std::string& path, std::size_t channels) {
    return to_tensor(read_pnm(path), channels);
}

}  // namespace dri
