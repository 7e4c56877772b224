#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include <json.hpp>

#include "convolt/error.hpp"
#include "convolt/grid.hpp"
#include "convolt/volumetry.hpp"

// Volume files: <base>.json sidecar
//   {"dims":[nx,ny,nz],"spacing":[dx,dy,dz],"dtype":"f32"|"u16","components":1|3,"order":"x-fastest"}
// next to <base>.raw holding exactly nx*ny*nz*components little-endian values.

namespace convolt::io {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace detail {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

inline fs::path sidecar(const fs::path& base) { return fs::path(base.string() + ".json"); }
inline fs::path rawfile(const fs::path& base) { return fs::path(base.string() + ".raw"); }

inline void write_sidecar(const fs::path& base, const VoxelGrid& g, const char* dtype, int components) {
    json j;
    j["dims"] = {g.nx(), g.ny(), g.nz()};
    j["spacing"] = {g.spacing()[0], g.spacing()[1], g.spacing()[2]};
    j["dtype"] = dtype;
    j["components"] = components;
    j["order"] = "x-fastest";
    std::ofstream os(sidecar(base));
    if (!os) throw IoError("cannot write " + sidecar(base).string());
    os << j.dump(2) << '\n';
    if (!os) throw IoError("write failed: " + sidecar(base).string());
}

struct Header {
    VoxelGrid grid;
    std::string dtype;
    int components = 1;
};

inline Header read_sidecar(const fs::path& base) {
    const auto path = sidecar(base);
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(is);
        Header h;
        const auto dims = j.at("dims").get<std::vector<std::size_t>>();
        const auto spacing = j.at("spacing").get<std::vector<double>>();
        if (dims.size() != 3 || spacing.size() != 3) throw IoError(path.string() + ": dims and spacing need 3 entries");
        h.grid = VoxelGrid({dims[0], dims[1], dims[2]}, {spacing[0], spacing[1], spacing[2]});
        h.dtype = j.at("dtype").get<std::string>();
        h.components = j.at("components").get<int>();
        if (j.at("order").get<std::string>() != "x-fastest") throw IoError(path.string() + ": order must be x-fastest");
        return h;
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path.string() + ": malformed sidecar: " + e.what());
    } catch (const ValidationError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

template <typename Stored>
void write_raw(const fs::path& path, const std::vector<Stored>& values) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path.string());
    std::vector<Stored> le(values.size());
    for (std::size_t n = 0; n < values.size(); ++n) le[n] = to_little(values[n]);
    os.write(reinterpret_cast<const char*>(le.data()), static_cast<std::streamsize>(le.size() * sizeof(Stored)));
    if (!os) throw IoError("write failed: " + path.string());
}

template <typename Stored>
std::vector<Stored> read_raw(const fs::path& path, std::size_t count) {
    std::ifstream is(path, std::ios::binary | std::ios::ate);
    if (!is) throw IoError("cannot open " + path.string());
    const auto bytes = static_cast<std::uintmax_t>(is.tellg());
    const std::uintmax_t expected = count * sizeof(Stored);
    if (bytes != expected) {
        throw IoError(path.string() + ": size mismatch at byte offset " + std::to_string(std::min(bytes, expected)) +
                      " (expected " + std::to_string(expected) + " bytes, found " + std::to_string(bytes) + ")");
    }
    is.seekg(0);
    std::vector<Stored> out(count);
    is.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(expected));
    if (!is) throw IoError(path.string() + ": read failed");
    for (auto& v : out) v = to_little(v);
    return out;
}

inline void expect(const Header& h, const fs::path& base, const char* dtype, int components) {
    if (h.dtype != dtype || h.components != components) {
        throw IoError(sidecar(base).string() + ": expected dtype " + dtype + " with " + std::to_string(components) +
                      " component(s), found " + h.dtype + " with " + std::to_string(h.components));
    }
}

inline std::vector<float> to_f32(const std::vector<double>& v) {
    return {v.begin(), v.end()};
}

} // namespace detail

inline void write_volume(const fs::path& base, const ScalarVolume& vol) {
    detail::write_sidecar(base, vol.grid(), "f32", 1);
    detail::write_raw(detail::rawfile(base), detail::to_f32(vol.data()));
}

inline void write_field(const fs::path& base, const DisplacementField& field) {
    detail::write_sidecar(base, field.grid(), "f32", 3);
    detail::write_raw(detail::rawfile(base), detail::to_f32(field.data()));
}

inline void write_labels(const fs::path& base, const LabelMap& labels) {
    detail::write_sidecar(base, labels.grid(), "u16", 1);
    detail::write_raw(detail::rawfile(base), labels.data());
}

inline ScalarVolume read_volume(const fs::path& base) {
    const auto h = detail::read_sidecar(base);
    detail::expect(h, base, "f32", 1);
    const auto raw = detail::read_raw<float>(detail::rawfile(base), h.grid.size());
    try {
        return ScalarVolume(h.grid, std::vector<double>(raw.begin(), raw.end()));
    } catch (const ValidationError& e) {
        throw ValidationError(detail::rawfile(base).string() + ": " + e.what());
    }
}

inline DisplacementField read_field(const fs::path& base) {
    const auto h = detail::read_sidecar(base);
    detail::expect(h, base, "f32", 3);
    const auto raw = detail::read_raw<float>(detail::rawfile(base), 3 * h.grid.size());
    try {
        return DisplacementField(h.grid, std::vector<double>(raw.begin(), raw.end()));
    } catch (const ValidationError& e) {
        throw ValidationError(detail::rawfile(base).string() + ": " + e.what());
    }
}

inline LabelMap read_labels(const fs::path& base) {
    const auto h = detail::read_sidecar(base);
    detail::expect(h, base, "u16", 1);
    LabelMap labels(h.grid, detail::read_raw<LabelId>(detail::rawfile(base), h.grid.size()));
    try {
        labels.validate_contiguous();
    } catch (const ValidationError& e) {
        throw ValidationError(detail::rawfile(base).string() + ": " + e.what());
    }
    return labels;
}

/// Rounds every value to the nearest f32 so in-memory data matches what the
/// file format can hold.
inline void round_to_f32(std::vector<double>& v) {
    for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
}

} // namespace convolt::io
