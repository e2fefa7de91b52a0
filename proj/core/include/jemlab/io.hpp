#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/params.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

// ---- checkpoint / sample-dump container ----
//
// Binary layout: magic "JEMLAB01", dtype tag u8 (0 = f32, 1 = f64), entry
// count u64, then per entry: name length u32, UTF-8 name, rank u32, extents
// u64 each, row-major little-endian values. Values are held here as doubles;
// f32 <-> f64 conversion is exact for values that originated as f32.

inline constexpr char kCheckpointMagic[8] = {'J', 'E', 'M', 'L', 'A', 'B', '0', '1'};

enum class DtypeTag : std::uint8_t { f32 = 0, f64 = 1 };

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct CheckpointFile {
    DtypeTag dtype = DtypeTag::f32;
    std::vector<CheckpointEntry> entries;

    const CheckpointEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }
};

// Throws IoError on filesystem/format problems, ValueError on non-finite
// values (never silently stored).
void write_checkpoint(const std::string& path, const CheckpointFile& file);
CheckpointFile read_checkpoint(const std::string& path);

template <class T>
constexpr DtypeTag dtype_tag_of() {
    return sizeof(T) == 4 ? DtypeTag::f32 : DtypeTag::f64;
}

template <class T>
CheckpointEntry make_entry(std::string name, const Tensor<T>& t) {
    CheckpointEntry e;
    e.name = std::move(name);
    e.shape = t.shape();
    e.values.assign(t.data().begin(), t.data().end());
    return e;
}

template <class T>
Tensor<T> entry_tensor(const CheckpointEntry& e) {
    std::vector<T> data(e.values.size());
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<T>(e.values[i]);
    return Tensor<T>(e.shape, std::move(data));
}

template <class T>
void append_params(CheckpointFile& file, const ParameterSet<T>& params,
                   const std::string& prefix = "") {
    for (const auto& e : params) file.entries.push_back(make_entry(prefix + e.name, e.tensor));
}

// ---- IDX image/label files (big-endian dims, unsigned byte payload) ----

struct IdxData {
    std::vector<std::size_t> dims;
    std::vector<std::uint8_t> bytes;
};

IdxData read_idx(const std::string& path);
void write_idx(const std::string& path, const std::vector<std::size_t>& dims,
               const std::vector<std::uint8_t>& bytes);

// ---- portable raster dump (PGM P5 for 1 channel, PPM P6 for 3) ----
// Values in [lo, hi] map affinely onto [0, 255].
void write_raster(const std::string& path, std::size_t channels, std::size_t height,
                  std::size_t width, const std::vector<double>& values, double lo = -1.0,
                  double hi = 1.0);

// ---- misc filesystem helpers ----
void ensure_dir(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace jemlab
