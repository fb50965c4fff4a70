#pragma once

#include <optional>
#include <string>

#include "mstkd/synth.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd {

inline constexpr std::array<const char*, 3> kRegionNames = {"WT", "TC", "ET"};

// One evaluation cell: a modality subset, a region, and its two scores.
// hd95 is empty when either mask side has no voxels (reported as a dash and
// excluded from averages).
struct MetricsRow {
    ModalityMask mask;
    std::string region;
    double dice = 0.0;
    std::optional<double> hd95;
};

// 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty. Inputs must be binary.
double dice(const Tensor& pred, const Tensor& gt);

// 95th percentile (nearest rank) of the pooled symmetric boundary-to-boundary
// Euclidean distances, unit voxel spacing. Boundary voxel: a mask voxel with
// at least one 6-connected non-mask neighbor, with everything outside the
// grid counting as non-mask. Empty on either empty mask.
std::optional<double> hd95(const Tensor& pred, const Tensor& gt);

// sigmoid(logit) > threshold per channel, strict inequality.
Tensor binarize(const Tensor& logits, double threshold = 0.5);

}  // namespace mstkd
