#pragma once

// Volume type and a minimal NIfTI-1 subset: uncompressed single-file .nii,
// 348-byte header, scalar 3D volumes plus dim[5]=3 vector volumes for flow
// fields. Byte order is auto-detected from sizeof_hdr.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ncamorph/flow.hpp"
#include "ncamorph/grid.hpp"

namespace ncam {

struct Volume {
  Shape3 shape;
  std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f};  // x, y, z (mm)
  std::array<double, 16> affine = {1, 0, 0, 0, 0, 1, 0, 0,
                                   0, 0, 1, 0, 0, 0, 0, 1};  // row-major 4x4
  std::vector<float> data;  // z, y, x order, x fastest

  Volume() = default;
  explicit Volume(Shape3 shape_, float fill = 0.0f) : shape(shape_) {
    data.assign(shape_.voxels(), fill);
  }

  Grid<float> grid() const {
    Grid<float> g(1, shape);
    g.data = data;
    return g;
  }

  static Volume from_grid(const Grid<float>& g) {
    Volume v(g.shape);
    v.data = g.data;
    return v;
  }

  float& at(int z, int y, int x) {
    return data[(static_cast<std::size_t>(z) * shape.h + y) * shape.w + x];
  }
  float at(int z, int y, int x) const {
    return data[(static_cast<std::size_t>(z) * shape.h + y) * shape.w + x];
  }
};

// Raw decoded NIfTI payload; channels == 1 for scalar volumes, 3 for vector
// (flow) volumes.
struct NiftiImage {
  int channels = 1;
  Shape3 shape;
  std::array<float, 3> spacing = {1.0f, 1.0f, 1.0f};
  std::array<double, 16> affine = {1, 0, 0, 0, 0, 1, 0, 0,
                                   0, 0, 1, 0, 0, 0, 0, 1};
  std::int16_t datatype = 0;
  std::vector<float> data;
};

NiftiImage read_nifti(const std::string& path);
Volume read_volume(const std::string& path);
LabelMap read_labels(const std::string& path);
FlowField read_flow(const std::string& path);

void write_nifti(const Volume& vol, const std::string& path);
void write_nifti(const LabelMap& labels, const std::string& path,
                 const std::array<float, 3>& spacing = {1, 1, 1});
void write_nifti(const FlowField& flow, const std::string& path,
                 const std::array<float, 3>& spacing = {1, 1, 1});

// Min-max normalization to [0,1]; constant volumes are degenerate.
Volume normalize(const Volume& v);

struct PairPaths {
  std::string fixed_img;
  std::optional<std::string> fixed_seg;
  std::string moving_img;
  std::optional<std::string> moving_seg;
};

struct PairDataset {
  std::vector<PairPaths> pairs;
};

// Manifest: one pair per line, four tab-separated paths
// (fixed_img, fixed_seg, moving_img, moving_seg), "-" for absent
// segmentations. Relative paths resolve against the manifest directory.
PairDataset read_manifest(const std::string& path);
void write_manifest(const PairDataset& ds, const std::string& path);

// A fully loaded training/evaluation pair.
struct LoadedPair {
  Grid<float> fixed, moving;  // single-channel
  std::optional<LabelMap> fixed_seg, moving_seg;
};

LoadedPair load_pair(const PairPaths& paths);

}  // namespace ncam
