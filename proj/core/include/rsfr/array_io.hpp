#pragma once

// Array container used for every artifact the tools exchange.
//
// Files are NumPy `.npy` version 1.0: magic "\x93NUMPY", a little-endian u16
// header length, an ASCII dict header padded to a 64-byte boundary, then the
// raw little-endian row-major payload. Supported dtypes are `<f8`, `<c16`
// and `|u1`. Metadata that does not fit the header (b-value, direction, units,
// normalisation range, ...) goes into a JSON sidecar `<file>.json`.

#include <complex>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rsfr/image.hpp"

namespace rsfr::io {

struct NpyArray {
  std::string dtype;  // "<f8", "<c16" or "|u1"
  std::vector<std::size_t> shape;
  std::vector<double> real;                 // filled for <f8 and |u1
  std::vector<std::complex<double>> cplx;   // filled for <c16

  [[nodiscard]] std::size_t count() const;
};

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               const std::vector<double>& values);
void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               const std::vector<std::complex<double>>& values);
void write_npy_u8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  const std::vector<std::uint8_t>& values);
NpyArray read_npy(const std::filesystem::path& path);

/// Writes `image` as a 2D `<f8` array; the sidecar always records the
/// normalisation range (when present) and source shape.
void write_image(const std::filesystem::path& path, const Image& image,
                 const std::string& sidecar_json = "{}");
Image read_image(const std::filesystem::path& path);

std::filesystem::path sidecar_path(const std::filesystem::path& array_path);
std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);

/// FNV-1a 64-bit digest rendered as 16 hex characters.
std::string hash_hex(std::string_view bytes);
std::string file_hash(const std::filesystem::path& path);

}  // namespace rsfr::io
