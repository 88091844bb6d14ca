#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace tsq {

// 8-bit interleaved image, row-major H x W x C.
struct Image {
  std::size_t h = 0, w = 0, c = 0;
  std::vector<std::uint8_t> data;
};

// PNG via libpng; gray (c=1), gray+alpha, RGB and RGBA files are accepted
// and normalized to c=1 or c=3. Raises IoError with the path on failure.
Image read_png(const std::string& path);
void write_png(const std::string& path, const Image& img);

// Binary PGM (P5, 8-bit).
Image read_pgm(const std::string& path);

}  // namespace tsq
