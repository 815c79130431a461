#include "visid/serialize.hpp"

#include <cstring>
#include <fstream>

namespace visid {

namespace {

struct BlobHeader {
  char magic[4];
  std::uint16_t version;
  std::uint16_t pad;
  std::uint32_t dim;
  std::uint32_t count;
};
static_assert(sizeof(BlobHeader) == 16);

template <class T>
void write_blob(const std::filesystem::path& path, const char* magic, const std::vector<T>& data,
                std::uint32_t dim) {
  if (dim == 0 || data.size() % dim != 0)
    fail(errc::shape_mismatch, "blob payload size not a multiple of dim");
  BlobHeader h{};
  std::memcpy(h.magic, magic, 4);
  h.version = kBlobVersion;
  h.pad = 0;
  h.dim = dim;
  h.count = static_cast<std::uint32_t>(data.size() / dim);
  std::uint32_t crc = crc32(&h, sizeof h);
  crc = crc32(data.data(), data.size() * sizeof(T), crc);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(errc::io_failure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(&h), sizeof h);
  out.write(reinterpret_cast<const char*>(data.data()),
            static_cast<std::streamsize>(data.size() * sizeof(T)));
  out.write(reinterpret_cast<const char*>(&crc), sizeof crc);
  if (!out) fail(errc::io_failure, "short write on " + path.string());
}

template <class T>
std::vector<T> read_blob(const std::filesystem::path& path, const char* magic,
                         std::uint32_t* dim_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(errc::missing_file, "missing blob: " + path.string());
  BlobHeader h{};
  in.read(reinterpret_cast<char*>(&h), sizeof h);
  if (!in) fail(errc::io_failure, "truncated header in " + path.string());
  if (std::memcmp(h.magic, magic, 4) != 0)
    fail(errc::version_mismatch, "bad magic in " + path.string());
  if (h.version != kBlobVersion)
    fail(errc::version_mismatch, "unsupported blob version in " + path.string());
  std::vector<T> data(static_cast<std::size_t>(h.dim) * h.count);
  in.read(reinterpret_cast<char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(T)));
  std::uint32_t stored = 0;
  in.read(reinterpret_cast<char*>(&stored), sizeof stored);
  if (!in) fail(errc::io_failure, "truncated payload in " + path.string());
  std::uint32_t crc = crc32(&h, sizeof h);
  crc = crc32(data.data(), data.size() * sizeof(T), crc);
  if (crc != stored) fail(errc::checksum_mismatch, "checksum mismatch in " + path.string());
  if (dim_out) *dim_out = h.dim;
  return data;
}

}  // namespace

void write_blob_f32(const std::filesystem::path& path, const std::vector<float>& data,
                    std::uint32_t dim) {
  write_blob(path, "SFGE", data, dim);
}

std::vector<float> read_blob_f32(const std::filesystem::path& path, std::uint32_t* dim_out) {
  return read_blob<float>(path, "SFGE", dim_out);
}

void write_blob_f64(const std::filesystem::path& path, const Vec& data, std::uint32_t dim) {
  write_blob(path, "SFGD", data, dim);
}

Vec read_blob_f64(const std::filesystem::path& path, std::uint32_t* dim_out) {
  return read_blob<double>(path, "SFGD", dim_out);
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(errc::io_failure, "cannot write " + path.string());
  for (const auto& l : lines) {
    out << l << '\n';
  }
  if (!out) fail(errc::io_failure, "short write on " + path.string());
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(errc::missing_file, "missing file: " + path.string());
  std::vector<std::string> lines;
  std::string l;
  while (std::getline(in, l)) lines.push_back(l);
  return lines;
}

}  // namespace visid
