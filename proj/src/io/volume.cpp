#include "morphgen/io/volume.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "morphgen/core/errors.hpp"

namespace morphgen::io {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'M', 'V', 'L', '1'};

void put_u32_le(std::uint32_t v, std::ostream& os) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32_le(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f32_le(float v, unsigned char* out) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  out[0] = static_cast<unsigned char>(bits & 0xff);
  out[1] = static_cast<unsigned char>((bits >> 8) & 0xff);
  out[2] = static_cast<unsigned char>((bits >> 16) & 0xff);
  out[3] = static_cast<unsigned char>((bits >> 24) & 0xff);
}

float get_f32_le(const unsigned char* in) {
  std::uint32_t bits = static_cast<std::uint32_t>(in[0]) | (static_cast<std::uint32_t>(in[1]) << 8) |
                       (static_cast<std::uint32_t>(in[2]) << 16) |
                       (static_cast<std::uint32_t>(in[3]) << 24);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

bool Volume::all_finite() const {
  for (float v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
  if (v.data.size() != static_cast<std::size_t>(v.shape.cells()))
    throw ValidationError("write_volume: data size does not match shape " + v.shape.str());

  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("write_volume: cannot open " + path.string());

  json header = {
      {"dtype", "f32"},
      {"shape", {v.shape.x, v.shape.y, v.shape.z}},
      {"spacing", {v.spacing_mm[0], v.spacing_mm[1], v.spacing_mm[2]}},
      {"orientation", v.orientation},
      {"creator", "morphgen"},
  };
  const std::string header_str = header.dump();

  os.write(kMagic, 4);
  put_u32_le(static_cast<std::uint32_t>(header_str.size()), os);
  os.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));

  std::vector<unsigned char> payload(v.data.size() * 4);
  for (std::size_t i = 0; i < v.data.size(); ++i) put_f32_le(v.data[i], payload.data() + i * 4);
  os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  if (!os) throw IoError("write_volume: write failed for " + path.string());
}

Volume read_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("read_volume: cannot open " + path.string());

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError("read_volume: magic mismatch in " + path.string());

  const std::uint32_t header_len = get_u32_le(is);
  if (!is) throw ParseError("read_volume: truncated header length in " + path.string());
  std::string header_str(header_len, '\0');
  is.read(header_str.data(), header_len);
  if (!is) throw ParseError("read_volume: truncated header in " + path.string());

  json header;
  try {
    header = json::parse(header_str);
  } catch (const json::exception& e) {
    throw ParseError("read_volume: bad header json in " + path.string() + ": " + e.what());
  }
  if (header.value("dtype", "") != "f32")
    throw ParseError("read_volume: unsupported dtype in " + path.string());

  Volume v;
  const auto shp = header.at("shape");
  v.shape = {shp.at(0).get<long>(), shp.at(1).get<long>(), shp.at(2).get<long>()};
  if (v.shape.x <= 0 || v.shape.y <= 0 || v.shape.z <= 0)
    throw ParseError("read_volume: non-positive shape in " + path.string());
  if (header.contains("spacing")) {
    const auto sp = header.at("spacing");
    v.spacing_mm = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
  }
  v.orientation = header.value("orientation", "RAS+");

  const std::size_t n = static_cast<std::size_t>(v.shape.cells());
  std::vector<unsigned char> payload(n * 4);
  is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
  const std::size_t got = static_cast<std::size_t>(is.gcount());
  if (got < payload.size())
    throw ParseError("read_volume: truncated payload in " + path.string() + " (expected " +
                     std::to_string(payload.size()) + " bytes, got " + std::to_string(got) + ")");
  // anything after the declared payload is a length mismatch, not slack
  char extra;
  if (is.read(&extra, 1))
    throw ParseError("read_volume: payload length exceeds header shape in " + path.string());

  v.data.resize(n);
  for (std::size_t i = 0; i < n; ++i) v.data[i] = get_f32_le(payload.data() + i * 4);
  return v;
}

}  // namespace morphgen::io
