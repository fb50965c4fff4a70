#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "mstkd/rng.hpp"
#include "mstkd/tensor.hpp"

namespace mstkd {

// Channel order everywhere: FLAIR, T1, T1Gd, T2.
inline constexpr std::array<const char*, 4> kModalityNames = {"FLAIR", "T1", "T1Gd", "T2"};

struct ModalityMask {
    std::array<bool, 4> present{};

    int count() const;
    std::string bits() const;   // e.g. "0011" in channel order
    std::string label() const;  // e.g. "T1Gd+T2"
};

// One synthetic subject. Labels are nested: ET inside TC inside WT.
struct VolumeCase {
    std::string id;
    Tensor image;  // (4, H, W, D), values in [0,1]
    Tensor label;  // (3, H, W, D), values in {0,1}: WT, TC, ET
};

// Deterministic phantom: 1-3 ellipsoidal lesions with concentric core and
// enhancing interior, modality-specific contrasts, a smooth bias field and
// seeded voxel noise. Identical seeds give bit-identical cases.
VolumeCase generate_case(std::uint64_t seed, std::int64_t H, std::int64_t W, std::int64_t D);

// Zero-fills absent channels; requires at least one present modality.
Tensor apply_modality_mask(const VolumeCase& c, const ModalityMask& mask);

// The 15 non-empty modality subsets in the fixed evaluation column order
// (singles T2, T1Gd, T1, FLAIR; then pairs; then triples; then all four).
const std::vector<ModalityMask>& modality_combinations();

struct AugmentParams {
    std::array<bool, 3> flip{};          // per spatial axis
    int rot_pair = 0;                    // 0:(H,W) 1:(H,D) 2:(W,D)
    int rot_quarters = 0;                // quarter turns, 0..3
    std::array<std::int64_t, 3> crop{};  // cropped extents
    std::array<std::int64_t, 3> src_off{};
    std::array<std::int64_t, 3> dst_off{};
};

AugmentParams identity_augment(const VolumeCase& c);
AugmentParams sample_augment(const VolumeCase& c, Rng& rng);
// Applies the same voxel transform to image and label (crop pads with zeros).
VolumeCase apply_augment(const VolumeCase& c, const AugmentParams& p);
VolumeCase augment(const VolumeCase& c, std::uint64_t seed);

// Seeded shuffle then split into disjoint, exhaustive index sets.
std::pair<std::vector<int>, std::vector<int>> make_split(int n_cases, double train_fraction,
                                                         std::uint64_t seed);

// On-disk dataset: one binary tensor file per case image/label plus a
// JSON-lines index carrying (id, seed, dims, split).
struct Dataset {
    std::vector<VolumeCase> cases;
    std::vector<int> train_ids;  // indices into cases
    std::vector<int> test_ids;
    Shape dims;
    std::uint64_t seed = 0;
};

Dataset build_dataset(int n_cases, const Shape& dims, std::uint64_t seed, double train_fraction);
void write_dataset(const std::string& dir, const Dataset& ds);
Dataset read_dataset(const std::string& dir);

}  // namespace mstkd
