#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "tensel/tensor.hpp"

// RFT1 tensor file format:
//   bytes 0..3   magic "RFT1"
//   byte  4      dtype: 0 = f32, 1 = f64
//   bytes 5..20  dims N,C,H,W as u32 little-endian
//   payload      row-major little-endian scalars

namespace tensel {

inline constexpr char kRftMagic[4] = {'R', 'F', 'T', '1'};

template <typename Scalar>
void write_rft(const std::filesystem::path& path, const Tensor<Scalar>& t) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for writing: " + path.string());
  f.write(kRftMagic, 4);
  const char dtype = std::is_same_v<Scalar, float> ? 0 : 1;
  f.write(&dtype, 1);
  const Dims& d = t.dims();
  const std::uint32_t dims[4] = {
      static_cast<std::uint32_t>(d.n), static_cast<std::uint32_t>(d.c),
      static_cast<std::uint32_t>(d.h), static_cast<std::uint32_t>(d.w)};
  f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  f.write(reinterpret_cast<const char*>(t.data()),
          static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  if (!f) throw IoError("short write: " + path.string());
}

/// Reads an RFT1 file, converting the stored dtype to Scalar when they differ.
template <typename Scalar>
Tensor<Scalar> read_rft(const std::filesystem::path& path) {
  static_assert(std::is_same_v<Scalar, float> || std::is_same_v<Scalar, double>);
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open for reading: " + path.string());
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kRftMagic, 4) != 0)
    throw IoError("bad RFT1 magic in " + path.string());
  char dtype = -1;
  f.read(&dtype, 1);
  if (!f || (dtype != 0 && dtype != 1))
    throw IoError("bad RFT1 dtype in " + path.string());
  std::uint32_t dims[4];
  f.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!f) throw IoError("truncated RFT1 header in " + path.string());
  const Dims d{static_cast<int>(dims[0]), static_cast<int>(dims[1]),
               static_cast<int>(dims[2]), static_cast<int>(dims[3])};
  Tensor<Scalar> out(d);
  const std::int64_t count = d.numel();
  if (dtype == 0) {
    std::vector<float> buf(count);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(count * sizeof(float)));
    if (!f) throw IoError("truncated RFT1 payload in " + path.string());
    for (std::int64_t i = 0; i < count; ++i)
      out[i] = static_cast<Scalar>(buf[i]);
  } else {
    std::vector<double> buf(count);
    f.read(reinterpret_cast<char*>(buf.data()),
           static_cast<std::streamsize>(count * sizeof(double)));
    if (!f) throw IoError("truncated RFT1 payload in " + path.string());
    for (std::int64_t i = 0; i < count; ++i)
      out[i] = static_cast<Scalar>(buf[i]);
  }
  return out;
}

}  // namespace tensel
