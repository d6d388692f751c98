#include "sma/image_io.hpp"

#include <cctype>
#include <fstream>
#include <string>

#include "sma/errors.hpp"

namespace sma {

namespace {

class HeaderReader {
 public:
  explicit HeaderReader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  void skip_space_and_comments() {
    while (pos_ < bytes_.size()) {
      if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else if (std::isspace(bytes_[pos_])) {
        ++pos_;
      } else {
        return;
      }
    }
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    if (pos_ >= bytes_.size()) throw ParseError(std::string("truncated header: missing ") + what, pos_);
    if (!std::isdigit(bytes_[pos_])) throw ParseError(std::string("expected ") + what, pos_);
    std::size_t v = 0;
    while (pos_ < bytes_.size() && std::isdigit(bytes_[pos_])) {
      v = v * 10 + static_cast<std::size_t>(bytes_[pos_] - '0');
      if (v > (1u << 24)) throw ParseError(std::string(what) + " too large", pos_);
      ++pos_;
    }
    return v;
  }

  std::size_t pos() const { return pos_; }
  void advance(std::size_t n) { pos_ += n; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Image8 parse_pnm(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 2) throw ParseError("truncated file: no magic number", bytes.size());
  if (bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6'))
    throw ParseError("unsupported magic, expected P5 or P6", 0);
  Image8 img;
  img.channels = bytes[1] == '6' ? 3 : 1;
  HeaderReader r(bytes);
  r.advance(2);
  img.width = r.number("width");
  img.height = r.number("height");
  const std::size_t maxval = r.number("maxval");
  if (img.width == 0 || img.height == 0) throw ParseError("zero image dimension", r.pos());
  if (maxval != 255) throw ParseError("unsupported maxval " + std::to_string(maxval), r.pos());
  if (r.pos() >= bytes.size() || !std::isspace(bytes[r.pos()]))
    throw ParseError("missing whitespace after maxval", r.pos());
  r.advance(1);
  const std::size_t need = img.width * img.height * img.channels;
  if (bytes.size() - r.pos() < need)
    throw ParseError("truncated pixel data: need " + std::to_string(need) + " bytes, have " +
                         std::to_string(bytes.size() - r.pos()),
                     bytes.size());
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(r.pos()),
                    bytes.begin() + static_cast<std::ptrdiff_t>(r.pos() + need));
  return img;
}

Image8 read_pnm(const std::filesystem::path& path) { return parse_pnm(read_file_bytes(path)); }

std::vector<std::uint8_t> encode_pnm(const Image8& image) {
  if (image.channels != 1 && image.channels != 3)
    throw ContractViolation("encode_pnm: channels must be 1 or 3");
  if (image.pixels.size() != image.width * image.height * image.channels)
    throw ContractViolation("encode_pnm: pixel buffer does not match dimensions");
  std::string header = (image.channels == 3 ? "P6\n" : "P5\n") + std::to_string(image.width) + " " +
                       std::to_string(image.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), image.pixels.begin(), image.pixels.end());
  return out;
}

void write_pnm(const std::filesystem::path& path, const Image8& image) {
  write_file_atomic(path, encode_pnm(image));
}

void write_file_atomic(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

void write_file_atomic(const std::filesystem::path& path, const std::string& text) {
  write_file_atomic(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(is), {});
}

}  // namespace sma
