#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>

#include "capdet/error.hpp"
#include "capdet/image.hpp"

namespace capdet {

namespace {

// Skips whitespace and '#' comments between PPM header fields.
void skip_header_space(std::istream& in) {
  while (true) {
    const int c = in.peek();
    if (c == '#') {
      std::string line;
      std::getline(in, line);
    } else if (c == ' ' || c == '\n' || c == '\r' || c == '\t') {
      in.get();
    } else {
      return;
    }
  }
}

}  // namespace

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open image for writing: " + path.string());
  out << "P6\n" << image.width << ' ' << image.height << "\n255\n";
  std::string bytes(image.pixels.size(), '\0');
  for (std::size_t i = 0; i < image.pixels.size(); ++i) {
    const float v = std::clamp(image.pixels[i], 0.0f, 1.0f);
    bytes[i] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
  }
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("failed writing image: " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (!in || magic[0] != 'P' || magic[1] != '6') {
    throw DataError("corrupt image header (expected binary PPM P6): " + path.string());
  }
  int width = 0, height = 0, maxval = 0;
  skip_header_space(in);
  in >> width;
  skip_header_space(in);
  in >> height;
  skip_header_space(in);
  in >> maxval;
  if (!in || width <= 0 || height <= 0 || maxval != 255) {
    throw DataError("corrupt image header (dimensions or maxval): " + path.string());
  }
  in.get();  // single whitespace byte before the raster
  Image image(height, width);
  std::string bytes(image.pixels.size(), '\0');
  in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    throw DataError("truncated image raster: " + path.string());
  }
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    image.pixels[i] = static_cast<float>(static_cast<unsigned char>(bytes[i])) / 255.0f;
  }
  return image;
}

}  // namespace capdet
