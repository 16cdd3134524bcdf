#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hsb/scene.hpp"
#include "hsb/tensor.hpp"

namespace hsb {

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// 8-bit PNG helpers. RGB images are exchanged as {1, 3, H, W} float tensors on
// the 1/255 grid; gray images as raw byte rows.
void write_png_rgb(const std::string& path, const ImageTensor& img);
ImageTensor read_png_rgb(const std::string& path);
void write_png_gray(const std::string& path, int w, int h, const std::vector<uint8_t>& pixels);
std::vector<uint8_t> read_png_gray(const std::string& path, int& w, int& h);

// Row-major boolean run-length encoding; runs alternate false/true starting
// with false, and sum to w*h.
std::vector<int64_t> rle_encode(const BoolMask& mask);
BoolMask rle_decode(const std::vector<int64_t>& runs, int w, int h);

uint32_t crc32_of_file(const std::string& path);

// Layout: <dir>/images/<id>.png, <dir>/annotations.json, <dir>/manifest.json
// (counts plus a CRC32 per file). read_dataset verifies every checksum.
void write_dataset(const std::vector<AnnotatedScene>& scenes, const std::string& dir);
std::vector<AnnotatedScene> read_dataset(const std::string& dir);

}  // namespace hsb
