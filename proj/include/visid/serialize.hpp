// Flat binary blob storage for embedding and parameter payloads.
//
// Layout: 16-byte header (magic[4], version u16, dim u32, count u32, pad u16),
// then count*dim little-endian values, then a CRC32 of header+payload.
// Magic "SFGE" marks float32 payloads, "SFGD" float64.
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "visid/common.hpp"

namespace visid {

inline constexpr std::uint16_t kBlobVersion = 1;

void write_blob_f32(const std::filesystem::path& path, const std::vector<float>& data,
                    std::uint32_t dim);
std::vector<float> read_blob_f32(const std::filesystem::path& path, std::uint32_t* dim_out);

void write_blob_f64(const std::filesystem::path& path, const Vec& data, std::uint32_t dim);
Vec read_blob_f64(const std::filesystem::path& path, std::uint32_t* dim_out);

// Line-delimited JSON helpers. Each element of `lines` is one serialized row.
void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines);
std::vector<std::string> read_lines(const std::filesystem::path& path);

}  // namespace visid
