#pragma once

#include <string>

#include "tensor.hpp"

namespace mvb {

// 8-bit RGB PNG round trip. Values are clamped to [0,1] and quantized with
// round-half-up on write; identical tensors always produce identical bytes.
void write_png(const std::string& path, const Tensor& rgb);
Tensor read_png(const std::string& path);  // -> [3,H,W] in [0,1]

}  // namespace mvb
