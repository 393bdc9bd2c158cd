#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "amflow/tensor.hpp"

namespace amflow {

// Container layout: "AMFT", u32 version, u32 rank, u64 extents..., f64 payload.
// Everything little-endian.
inline constexpr std::uint32_t kContainerVersion = 1;

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    os.write(reinterpret_cast<const char*>(b.data()), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
    std::array<unsigned char, sizeof(T)> b;
    if (!is.read(reinterpret_cast<char*>(b.data()), sizeof(T))) throw std::runtime_error("tensor container: truncated");
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    T v;
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
    os.write("AMFT", 4);
    detail::put_le<std::uint32_t>(os, kContainerVersion);
    detail::put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape) detail::put_le<std::uint64_t>(os, e);
    for (double v : t.data) detail::put_le<double>(os, v);
}

inline Tensor read_tensor(std::istream& is) {
    char magic[4];
    if (!is.read(magic, 4) || std::memcmp(magic, "AMFT", 4) != 0) throw std::runtime_error("tensor container: bad magic");
    const auto version = detail::get_le<std::uint32_t>(is);
    if (version != kContainerVersion) throw std::runtime_error("tensor container: unsupported version " + std::to_string(version));
    const auto rank = detail::get_le<std::uint32_t>(is);
    Shape s(rank);
    for (auto& e : s) e = detail::get_le<std::uint64_t>(is);
    Tensor t(s);
    for (double& v : t.data) v = detail::get_le<double>(is);
    return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_tensor(os, t);
}

inline Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_tensor(is);
}

// 8-bit binary PGM, values scaled so that `vmax` maps to 255.
inline void save_pgm(const std::string& path, std::size_t rows, std::size_t cols, const std::vector<double>& v,
                     double vmax) {
    if (v.size() != rows * cols) throw std::invalid_argument("save_pgm: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    os << "P5\n" << cols << ' ' << rows << "\n255\n";
    for (double x : v) {
        const double s = vmax > 0 ? std::clamp(x / vmax, 0.0, 1.0) : 0.0;
        os.put(static_cast<char>(static_cast<unsigned char>(s * 255.0 + 0.5)));
    }
}

}  // namespace amflow
