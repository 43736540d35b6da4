#pragma once

#include "cbvila/common.hpp"
#include "cbvila/image.hpp"

namespace cbvila {

/// Image cut into non-overlapping P x P patches in row-major patch order.
/// Patch vector layout: entry index = (dy*P + dx)*C + c.
template <typename S>
struct ImagePatchGrid {
  int height = 0, width = 0, channels = 0, patch = 0;
  Mat<S> patches;  // N x (P*P*C)

  int grid_h() const { return height / patch; }
  int grid_w() const { return width / patch; }
  int count() const { return grid_h() * grid_w(); }
  int patch_dim() const { return patch * patch * channels; }
};

template <typename S>
ImagePatchGrid<S> patchify(const Image<S>& img, int patch) {
  require_input(patch > 0 && img.height % patch == 0 && img.width % patch == 0,
                "patchify: image dimensions must be divisible by the patch size");
  for (S v : img.data)
    require_input(std::isfinite(static_cast<double>(v)) && v >= S(0) && v <= S(1),
                  "patchify: pixel values must lie in [0,1]");
  ImagePatchGrid<S> grid;
  grid.height = img.height;
  grid.width = img.width;
  grid.channels = img.channels;
  grid.patch = patch;
  grid.patches = Mat<S>(grid.count(), grid.patch_dim());
  for (int py = 0; py < grid.grid_h(); ++py)
    for (int px = 0; px < grid.grid_w(); ++px) {
      const int row = py * grid.grid_w() + px;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < img.channels; ++c)
            grid.patches(row, (dy * patch + dx) * img.channels + c) =
                img.at(py * patch + dy, px * patch + dx, c);
    }
  return grid;
}

template <typename S>
Image<S> unpatchify(const ImagePatchGrid<S>& grid) {
  Image<S> img = Image<S>::zeros(grid.height, grid.width, grid.channels);
  const int patch = grid.patch;
  for (int py = 0; py < grid.grid_h(); ++py)
    for (int px = 0; px < grid.grid_w(); ++px) {
      const int row = py * grid.grid_w() + px;
      for (int dy = 0; dy < patch; ++dy)
        for (int dx = 0; dx < patch; ++dx)
          for (int c = 0; c < grid.channels; ++c)
            img.at(py * patch + dy, px * patch + dx, c) =
                grid.patches(row, (dy * patch + dx) * grid.channels + c);
    }
  return img;
}

/// Raw pixel rows (patch vectors) reassembled into a P x P patch image.
template <typename S>
Image<S> patch_to_image(const RowVec<S>& patch_vec, int patch, int channels) {
  Image<S> img = Image<S>::zeros(patch, patch, channels);
  for (int dy = 0; dy < patch; ++dy)
    for (int dx = 0; dx < patch; ++dx)
      for (int c = 0; c < channels; ++c)
        img.at(dy, dx, c) = patch_vec((dy * patch + dx) * channels + c);
  return img;
}

}  // namespace cbvila
