#include "jemlab/io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace jemlab {

namespace {

void put_bytes(std::ostream& os, const void* p, std::size_t n) {
    os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class U>
void put_le(std::ostream& os, U v) {
    unsigned char buf[sizeof(U)];
    for (std::size_t i = 0; i < sizeof(U); ++i)
        buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    put_bytes(os, buf, sizeof(U));
}

template <class U>
U get_le(std::istream& is) {
    unsigned char buf[sizeof(U)];
    is.read(reinterpret_cast<char*>(buf), sizeof(U));
    if (!is) throw IoError("checkpoint: truncated payload");
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
    return v;
}

}  // namespace

void write_checkpoint(const std::string& path, const CheckpointFile& file) {
    for (const auto& e : file.entries) {
        for (const double v : e.values)
            if (!std::isfinite(v))
                throw ValueError("checkpoint: non-finite value in entry '" + e.name + "'");
        if (e.values.size() != shape_numel(e.shape))
            throw ValueError("checkpoint: entry '" + e.name + "' shape/value mismatch");
    }
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    put_bytes(os, kCheckpointMagic, sizeof(kCheckpointMagic));
    const std::uint8_t tag = static_cast<std::uint8_t>(file.dtype);
    put_bytes(os, &tag, 1);
    put_le<std::uint64_t>(os, file.entries.size());
    for (const auto& e : file.entries) {
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.name.size()));
        put_bytes(os, e.name.data(), e.name.size());
        put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e.shape.size()));
        for (const auto ext : e.shape) put_le<std::uint64_t>(os, ext);
        if (file.dtype == DtypeTag::f32) {
            for (const double v : e.values) {
                const float f = static_cast<float>(v);
                std::uint32_t bits;
                std::memcpy(&bits, &f, 4);
                put_le<std::uint32_t>(os, bits);
            }
        } else {
            for (const double v : e.values) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                put_le<std::uint64_t>(os, bits);
            }
        }
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

CheckpointFile read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw IoError("'" + path + "' is not a checkpoint file (bad magic)");
    std::uint8_t tag;
    is.read(reinterpret_cast<char*>(&tag), 1);
    if (!is || tag > 1) throw IoError("'" + path + "': unknown dtype tag");
    CheckpointFile file;
    file.dtype = static_cast<DtypeTag>(tag);
    const auto count = get_le<std::uint64_t>(is);
    file.entries.reserve(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        const auto name_len = get_le<std::uint32_t>(is);
        e.name.resize(name_len);
        is.read(e.name.data(), name_len);
        if (!is) throw IoError("checkpoint: truncated payload");
        const auto rank = get_le<std::uint32_t>(is);
        e.shape.resize(rank);
        for (auto& ext : e.shape) ext = get_le<std::uint64_t>(is);
        const std::size_t numel = shape_numel(e.shape);
        e.values.resize(numel);
        if (file.dtype == DtypeTag::f32) {
            for (auto& v : e.values) {
                const auto bits = get_le<std::uint32_t>(is);
                float f;
                std::memcpy(&f, &bits, 4);
                v = static_cast<double>(f);
            }
        } else {
            for (auto& v : e.values) {
                const auto bits = get_le<std::uint64_t>(is);
                double d;
                std::memcpy(&d, &bits, 8);
                v = d;
            }
        }
        file.entries.push_back(std::move(e));
    }
    return file;
}

// IDX: magic = 0x00 0x00 <dtype> <ndims> big-endian, u32 big-endian extents.
// Only the unsigned-byte dtype (0x08) is supported.

namespace {

std::uint32_t get_be32(std::istream& is, const std::string& path) {
    unsigned char buf[4];
    is.read(reinterpret_cast<char*>(buf), 4);
    if (!is) throw IoError("'" + path + "': truncated IDX header");
    return (std::uint32_t(buf[0]) << 24) | (std::uint32_t(buf[1]) << 16) |
           (std::uint32_t(buf[2]) << 8) | std::uint32_t(buf[3]);
}

}  // namespace

IdxData read_idx(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    unsigned char magic[4];
    is.read(reinterpret_cast<char*>(magic), 4);
    if (!is || magic[0] != 0 || magic[1] != 0)
        throw IoError("'" + path + "': bad IDX magic number");
    if (magic[2] != 0x08) throw IoError("'" + path + "': unsupported IDX dtype (want ubyte)");
    const std::size_t ndims = magic[3];
    if (ndims == 0 || ndims > 4) throw IoError("'" + path + "': unsupported IDX rank");
    IdxData d;
    d.dims.resize(ndims);
    std::size_t total = 1;
    for (auto& dim : d.dims) {
        dim = get_be32(is, path);
        total *= dim;
    }
    d.bytes.resize(total);
    is.read(reinterpret_cast<char*>(d.bytes.data()), static_cast<std::streamsize>(total));
    if (!is) throw IoError("'" + path + "': truncated IDX payload");
    return d;
}

void write_idx(const std::string& path, const std::vector<std::size_t>& dims,
               const std::vector<std::uint8_t>& bytes) {
    std::size_t total = 1;
    for (const auto d : dims) total *= d;
    if (total != bytes.size()) throw ValueError("write_idx: dims/payload mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    const unsigned char magic[4] = {0, 0, 0x08, static_cast<unsigned char>(dims.size())};
    os.write(reinterpret_cast<const char*>(magic), 4);
    for (const auto d : dims) {
        const auto v = static_cast<std::uint32_t>(d);
        const unsigned char buf[4] = {static_cast<unsigned char>(v >> 24),
                                      static_cast<unsigned char>(v >> 16),
                                      static_cast<unsigned char>(v >> 8),
                                      static_cast<unsigned char>(v)};
        os.write(reinterpret_cast<const char*>(buf), 4);
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for '" + path + "'");
}

void write_raster(const std::string& path, std::size_t channels, std::size_t height,
                  std::size_t width, const std::vector<double>& values, double lo, double hi) {
    if (channels != 1 && channels != 3)
        throw ValueError("write_raster: 1 or 3 channels supported");
    if (values.size() != channels * height * width)
        throw ValueError("write_raster: value count mismatch");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << (channels == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
    const double span = hi - lo;
    std::vector<unsigned char> row(width * channels);
    for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t x = 0; x < width; ++x)
            for (std::size_t c = 0; c < channels; ++c) {
                // planar (C,H,W) in, interleaved out
                const double v = values[(c * height + y) * width + x];
                const double t = std::clamp((v - lo) / span, 0.0, 1.0);
                row[x * channels + c] = static_cast<unsigned char>(std::lround(t * 255.0));
            }
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size()));
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

void ensure_dir(const std::string& path) {
    std::error_code ec;
    std::filesystem::create_directories(path, ec);
    if (ec) throw IoError("cannot create directory '" + path + "': " + ec.message());
}

void write_text_file(const std::string& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << content;
    if (!os) throw IoError("write failed for '" + path + "'");
}

std::string read_text_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

}  // namespace jemlab
