#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>

#include "tdsnet/tensor.hpp"

namespace tdsnet {

// Tensor wire format, bit-exact:
//   magic "TDSN" | version u32 LE | dtype u8 (0=f32, 1=f64) | rank u8 |
//   extents u32 LE each | row-major payload LE.
inline constexpr std::uint32_t kTensorFormatVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "tensor files are little-endian; big-endian hosts are unsupported");

namespace detail {

template <class V>
void write_pod(std::ostream& os, V v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V read_pod(std::istream& is) {
    V v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(V));
    if (!is) throw std::runtime_error("tensor read: truncated stream");
    return v;
}

template <class T> struct DtypeCode;
template <> struct DtypeCode<float> { static constexpr std::uint8_t value = 0; };
template <> struct DtypeCode<double> { static constexpr std::uint8_t value = 1; };

} // namespace detail

template <class T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write("TDSN", 4);
    detail::write_pod<std::uint32_t>(os, kTensorFormatVersion);
    detail::write_pod<std::uint8_t>(os, detail::DtypeCode<T>::value);
    detail::write_pod<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(e));
    os.write(reinterpret_cast<const char*>(t.data()), t.numel() * sizeof(T));
    if (!os) throw std::runtime_error("tensor write: stream failure");
}

template <class T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "TDSN", 4) != 0)
        throw std::runtime_error("tensor read: bad magic");
    const auto version = detail::read_pod<std::uint32_t>(is);
    if (version != kTensorFormatVersion)
        throw std::runtime_error("tensor read: unsupported version " + std::to_string(version));
    const auto dtype = detail::read_pod<std::uint8_t>(is);
    if (dtype != detail::DtypeCode<T>::value)
        throw std::runtime_error("tensor read: dtype code " + std::to_string(int(dtype)) +
                                 " does not match requested scalar type");
    const auto rank = detail::read_pod<std::uint8_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = detail::read_pod<std::uint32_t>(is);
    std::vector<T> data(numel(shape));
    is.read(reinterpret_cast<char*>(data.data()), data.size() * sizeof(T));
    if (!is) throw std::runtime_error("tensor read: truncated payload");
    return Tensor<T>::from_vec(std::move(shape), std::move(data));
}

template <class T>
void save_tensor(const std::string& path, const Tensor<T>& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    write_tensor(os, t);
}

template <class T>
Tensor<T> load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open: " + path);
    return read_tensor<T>(is);
}

} // namespace tdsnet
