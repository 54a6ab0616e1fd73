#include "vct/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace vct {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

constexpr char kMagic[8] = {'V', 'C', 'T', 'A', 'R', 'R', '0', '1'};

std::uint8_t to_byte(double v) {
    const double scaled = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
    return static_cast<std::uint8_t>(scaled);
}

double from_byte(std::uint8_t b) { return b / 127.5 - 1.0; }

template <typename T>
void put(std::ostream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::filesystem::path& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw ValidationError("truncated container " + path.string());
    return v;
}

std::string read_token(std::istream& in) {
    std::string tok;
    char c;
    while (in.get(c)) {
        if (c == '#') {
            std::string line;
            std::getline(in, line);
            continue;
        }
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(c);
    }
    return tok;
}

}  // namespace

Tensor read_image(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open image " + path.string());
    if (read_token(in) != "P6") throw ValidationError(path.string() + " is not a binary PPM (P6) image");
    int w = 0, h = 0, maxval = 0;
    try {
        w = std::stoi(read_token(in));
        h = std::stoi(read_token(in));
        maxval = std::stoi(read_token(in));
    } catch (const std::exception&) {
        throw ValidationError("malformed PPM header in " + path.string());
    }
    if (w <= 0 || h <= 0 || maxval != 255) throw ValidationError("unsupported PPM geometry in " + path.string());
    std::vector<std::uint8_t> bytes(static_cast<std::size_t>(w) * h * 3);
    in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!in) throw ValidationError("truncated PPM data in " + path.string());
    Tensor img(Shape{3, h, w});
    const std::size_t plane = static_cast<std::size_t>(w) * h;
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) img[c * plane + p] = from_byte(bytes[p * 3 + c]);
    }
    return img;
}

void write_image(const std::filesystem::path& path, const Tensor& image) {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ValidationError("write_image expects a (3, H, W) tensor, got " + shape_str(image.shape()));
    }
    const auto h = image.dim(1);
    const auto w = image.dim(2);
    const std::size_t plane = static_cast<std::size_t>(w * h);
    std::vector<std::uint8_t> bytes(plane * 3);
    for (std::size_t p = 0; p < plane; ++p) {
        for (std::size_t c = 0; c < 3; ++c) bytes[p * 3 + c] = to_byte(image[c * plane + p]);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write image " + path.string());
    out << "P6\n" << w << ' ' << h << "\n255\n";
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Tensor quantize_image(const Tensor& image) {
    Tensor out = image;
    for (auto& v : out.values()) v = from_byte(to_byte(v));
    return out;
}

void write_container(const std::filesystem::path& path, const ArrayContainer& container) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ValidationError("cannot write " + path.string());
    out.write(kMagic, sizeof(kMagic));
    const std::string meta = container.metadata.dump();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(meta.size()));
    out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(container.blocks.size()));
    std::vector<float> buf;
    for (const auto& block : container.blocks) {
        if (block.name.size() > 0xFFFF) throw ValidationError("block name too long");
        put<std::uint16_t>(out, static_cast<std::uint16_t>(block.name.size()));
        out.write(block.name.data(), static_cast<std::streamsize>(block.name.size()));
        put<std::uint8_t>(out, static_cast<std::uint8_t>(block.value.rank()));
        for (auto d : block.value.shape()) put<std::int64_t>(out, d);
        buf.resize(block.value.size());
        std::transform(block.value.values().begin(), block.value.values().end(), buf.begin(),
                       [](double v) { return static_cast<float>(v); });
        out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size() * sizeof(float)));
    }
    if (!out) throw ValidationError("failed writing " + path.string());
}

ArrayContainer read_container(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path.string());
    char magic[sizeof(kMagic)];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw ValidationError(path.string() + " is not a VCT array container");
    }
    ArrayContainer c;
    const auto meta_len = get<std::uint32_t>(in, path);
    std::string meta(meta_len, '\0');
    in.read(meta.data(), meta_len);
    if (!in) throw ValidationError("truncated container " + path.string());
    try {
        c.metadata = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("bad container metadata in " + path.string() + ": " + e.what());
    }
    const auto count = get<std::uint32_t>(in, path);
    std::vector<float> buf;
    for (std::uint32_t b = 0; b < count; ++b) {
        const auto name_len = get<std::uint16_t>(in, path);
        std::string name(name_len, '\0');
        in.read(name.data(), name_len);
        const auto rank = get<std::uint8_t>(in, path);
        Shape shape;
        for (std::uint8_t r = 0; r < rank; ++r) shape.push_back(get<std::int64_t>(in, path));
        const auto n = static_cast<std::size_t>(shape_numel(shape));
        buf.resize(n);
        in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
        if (!in) throw ValidationError("truncated block '" + name + "' in " + path.string());
        c.blocks.push_back({std::move(name), Tensor(std::move(shape), std::vector<double>(buf.begin(), buf.end()))});
    }
    return c;
}

}  // namespace vct
