#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace sma {

// Interleaved 8-bit raster: channels == 1 (PGM, P5) or 3 (PPM, P6).
struct Image8 {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;
};

/// Reads binary P5/P6 with maxval 255. Throws ParseError (with byte offset)
/// on malformed or truncated content, IoError if the file cannot be opened.
Image8 read_pnm(const std::filesystem::path& path);
Image8 parse_pnm(const std::vector<std::uint8_t>& bytes);

std::vector<std::uint8_t> encode_pnm(const Image8& image);
/// Writes through a temporary sibling and renames into place.
void write_pnm(const std::filesystem::path& path, const Image8& image);

// Shared by every writer that must not leave a partial file behind.
void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);
void write_file_atomic(const std::filesystem::path& path, const std::string& text);
std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);

}  // namespace sma
