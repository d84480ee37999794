#include "rsfr/array_io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace rsfr {

std::string to_string(Shape2 s) { return std::to_string(s.rows) + "x" + std::to_string(s.cols); }

Image::Image(int rows, int cols, double fill)
    : source_shape{rows, cols}, shape_{rows, cols}, pixels_(static_cast<std::size_t>(rows) * cols, fill) {
  if (rows < 0 || cols < 0) throw std::invalid_argument("Image: negative shape");
}

Image::Image(Shape2 shape, std::vector<double> pixels)
    : source_shape(shape), shape_(shape), pixels_(std::move(pixels)) {
  if (pixels_.size() != shape.size()) throw std::invalid_argument("Image: pixel count does not match shape");
}

double Image::min() const { return pixels_.empty() ? 0.0 : *std::min_element(pixels_.begin(), pixels_.end()); }
double Image::max() const { return pixels_.empty() ? 0.0 : *std::max_element(pixels_.begin(), pixels_.end()); }
bool Image::all_finite() const {
  return std::all_of(pixels_.begin(), pixels_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace rsfr

namespace rsfr::io {
namespace {

constexpr char kMagic[] = "\x93NUMPY";

std::string shape_tuple(const std::vector<std::size_t>& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    s += std::to_string(shape[i]);
    if (shape.size() == 1 || i + 1 < shape.size()) s += ",";
    if (i + 1 < shape.size()) s += " ";
  }
  return s + ")";
}

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void write_raw(const std::filesystem::path& path, const std::string& dtype,
               const std::vector<std::size_t>& shape, const void* data, std::size_t bytes) {
  std::string header = "{'descr': '" + dtype + "', 'fortran_order': False, 'shape': " + shape_tuple(shape) + ", }";
  const std::size_t unpadded = 6 + 2 + 2 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header.push_back('\n');
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out.write(kMagic, 6);
  const unsigned char version[2] = {1, 0};
  out.write(reinterpret_cast<const char*>(version), 2);
  const auto len = static_cast<std::uint16_t>(header.size());
  const unsigned char len_le[2] = {static_cast<unsigned char>(len & 0xff), static_cast<unsigned char>(len >> 8)};
  out.write(reinterpret_cast<const char*>(len_le), 2);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error("write failed: " + path.string());
}

std::string dict_value(const std::string& header, const std::string& key) {
  const auto k = header.find("'" + key + "'");
  if (k == std::string::npos) throw Error("npy header missing key " + key);
  auto colon = header.find(':', k);
  auto start = header.find_first_not_of(' ', colon + 1);
  if (header[start] == '(') return header.substr(start, header.find(')', start) - start + 1);
  if (header[start] == '\'') return header.substr(start + 1, header.find('\'', start + 1) - start - 1);
  auto end = header.find_first_of(",}", start);
  return header.substr(start, end - start);
}

}  // namespace

static_assert(std::endian::native == std::endian::little, "array container assumes a little-endian host");

std::size_t NpyArray::count() const { return product(shape); }

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               const std::vector<double>& values) {
  if (values.size() != product(shape)) throw std::invalid_argument("write_npy: value count does not match shape");
  write_raw(path, "<f8", shape, values.data(), values.size() * sizeof(double));
}

void write_npy(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
               const std::vector<std::complex<double>>& values) {
  if (values.size() != product(shape)) throw std::invalid_argument("write_npy: value count does not match shape");
  write_raw(path, "<c16", shape, values.data(), values.size() * sizeof(std::complex<double>));
}

void write_npy_u8(const std::filesystem::path& path, const std::vector<std::size_t>& shape,
                  const std::vector<std::uint8_t>& values) {
  if (values.size() != product(shape)) throw std::invalid_argument("write_npy: value count does not match shape");
  write_raw(path, "|u1", shape, values.data(), values.size());
}

NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open array file: " + path.string());
  char magic[6];
  in.read(magic, 6);
  if (!in || std::memcmp(magic, kMagic, 6) != 0) throw Error("not an npy file: " + path.string());
  unsigned char version[2];
  in.read(reinterpret_cast<char*>(version), 2);
  std::size_t header_len = 0;
  if (version[0] == 1) {
    unsigned char b[2];
    in.read(reinterpret_cast<char*>(b), 2);
    header_len = b[0] | (b[1] << 8);
  } else {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    header_len = b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::size_t>(b[3]) << 24);
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  if (dict_value(header, "fortran_order") != "False") throw Error("fortran-order arrays are not supported");

  NpyArray arr;
  arr.dtype = dict_value(header, "descr");
  std::string tuple = dict_value(header, "shape");
  std::string digits;
  for (char ch : tuple) {
    if (std::isdigit(static_cast<unsigned char>(ch))) {
      digits.push_back(ch);
    } else if (!digits.empty()) {
      arr.shape.push_back(std::stoull(digits));
      digits.clear();
    }
  }
  const std::size_t n = arr.count();
  if (arr.dtype == "<f8") {
    arr.real.resize(n);
    in.read(reinterpret_cast<char*>(arr.real.data()), static_cast<std::streamsize>(n * sizeof(double)));
  } else if (arr.dtype == "<c16") {
    arr.cplx.resize(n);
    in.read(reinterpret_cast<char*>(arr.cplx.data()), static_cast<std::streamsize>(n * sizeof(std::complex<double>)));
  } else if (arr.dtype == "|u1") {
    std::vector<std::uint8_t> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
    arr.real.assign(raw.begin(), raw.end());
  } else {
    throw Error("unsupported npy dtype " + arr.dtype);
  }
  if (!in) throw Error("truncated array file: " + path.string());
  return arr;
}

std::filesystem::path sidecar_path(const std::filesystem::path& array_path) {
  auto p = array_path;
  p += ".json";
  return p;
}

void write_image(const std::filesystem::path& path, const Image& image, const std::string& sidecar_json) {
  write_npy(path, {static_cast<std::size_t>(image.rows()), static_cast<std::size_t>(image.cols())}, image.vector());
  auto meta = nlohmann::json::parse(sidecar_json);
  meta["source_shape"] = {image.source_shape.rows, image.source_shape.cols};
  if (image.norm) meta["normalization"] = {{"vmin", image.norm->vmin}, {"vmax", image.norm->vmax}};
  write_text(sidecar_path(path), meta.dump(2) + "\n");
}

Image read_image(const std::filesystem::path& path) {
  auto arr = read_npy(path);
  if (arr.shape.size() != 2 || arr.real.empty()) throw Error("expected a real 2D array: " + path.string());
  Image img(Shape2{static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1])}, std::move(arr.real));
  const auto side = sidecar_path(path);
  if (std::filesystem::exists(side)) {
    auto meta = nlohmann::json::parse(read_text(side));
    if (meta.contains("normalization")) {
      img.norm = NormalizationRecord{meta["normalization"]["vmin"].get<double>(),
                                     meta["normalization"]["vmax"].get<double>()};
    }
    if (meta.contains("source_shape")) {
      img.source_shape = Shape2{meta["source_shape"][0].get<int>(), meta["source_shape"][1].get<int>()};
    }
  }
  return img;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open: " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open for writing: " + path.string());
  out << text;
}

std::string hash_hex(std::string_view bytes) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::filesystem::path& path) { return hash_hex(read_text(path)); }

}  // namespace rsfr::io
