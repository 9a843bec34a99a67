#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "pliv/face_types.hpp"

namespace pliv::io {

void write_png_rgb8(const std::string& path, int w, int h, const uint8_t* rgb);
std::vector<uint8_t> read_png_rgb8(const std::string& path, int& w, int& h);

// Frame [3,H,W] floats on the 1/255 grid <-> interleaved 8-bit RGB.
std::vector<uint8_t> frame_to_rgb8(const Frame& f);
Frame rgb8_to_frame(const std::vector<uint8_t>& rgb, int w, int h);

void write_frame_png(const std::string& path, const Frame& f);
Frame read_frame_png(const std::string& path);

}  // namespace pliv::io
