#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "promise/volume.hpp"

namespace promise {

// Supported on-disk formats:
//   *.nii / *.nii.gz  NIfTI-1 single file
//   *.raw             little-endian float32 C-order array with a *.json sidecar
//                     {"shape":[d,h,w], "spacing":[sz,sy,sx], "origin":[..], "dtype":"float32"}
// Arrays are C-order with axis 0 = NIfTI k (slowest) and axis 2 = NIfTI i (fastest), so
// Volume::spacing is (pixdim[3], pixdim[2], pixdim[1]).

Volume load_volume(const std::filesystem::path &path);
LabelMask load_mask(const std::filesystem::path &path);
/// Image plus optional mask; the mask must be binary and aligned with the image.
std::pair<Volume, std::optional<LabelMask>> load_case(const std::filesystem::path &image,
                                                      const std::optional<std::filesystem::path> &mask = std::nullopt);

void save_volume(const Volume &v, const std::filesystem::path &path);
void save_mask(const LabelMask &m, const std::filesystem::path &path);

/// In-memory NIfTI codec (gzip detected from the stream magic).
Volume decode_nifti(const std::string &bytes, const std::string &id = {});
std::string encode_nifti(const Volume &v, bool gzip);
std::string encode_nifti(const LabelMask &m, bool gzip);

/// Spacing in NIfTI (x, y, z) order.
inline Spacing spacing_xyz(const Spacing &axis_order) { return {axis_order[2], axis_order[1], axis_order[0]}; }

// ---------------------------------------------------------------------------
// Dataset manifest: JSON list of {image_path, mask_path, split}.

enum class Split { train, val, test };

struct ManifestEntry {
    std::filesystem::path image_path;
    std::filesystem::path mask_path;
    Split split = Split::train;
};

std::vector<ManifestEntry> load_manifest(const std::filesystem::path &path);
void save_manifest(const std::vector<ManifestEntry> &entries, const std::filesystem::path &path);
/// Deterministic 0.7 / 0.1 / 0.2 split assignment over n cases.
std::vector<Split> assign_splits(std::size_t n, uint64_t seed);
std::string to_string(Split s);

} // namespace promise
