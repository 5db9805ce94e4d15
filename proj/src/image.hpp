#pragma once

#include <optional>

#include "camera.hpp"
#include "tensor.hpp"

namespace mvb {

enum class ViewRole { kCondition, kTarget, kAnchor };

// An H x W x 3 image in [0,1] (stored [3,H,W]) with its camera pose. The
// coverage mask (1 = object, 0 = background) is kept when the source renderer
// provides one; it backs the occupancy losses and the foreground metrics.
struct ViewImage {
  Tensor rgb;  // [3,H,W]
  CameraPose pose;
  ViewRole role = ViewRole::kCondition;
  std::optional<Tensor> mask;  // [H,W]

  int height() const { return rgb.dim(1); }
  int width() const { return rgb.dim(2); }
};

// Foreground estimate for images without a stored mask: anything visibly
// darker than the white background.
Tensor estimate_mask(const Tensor& rgb, double white_thresh = 0.98);

}  // namespace mvb
