#include "mstkd/metrics.hpp"

#include <algorithm>
#include <cmath>

namespace mstkd {

namespace {

void require_binary(const Tensor& t, const char* what) {
    for (double v : t.data()) {
        if (v != 0.0 && v != 1.0) {
            throw value_error(std::string(what) + ": mask values must be exactly 0 or 1");
        }
    }
}

struct Voxel {
    std::int64_t z, y, x;
};

// Boundary voxels of a rank-3 binary volume; out-of-grid counts as non-mask.
std::vector<Voxel> boundary_voxels(const Tensor& mask) {
    const std::int64_t H = mask.extent(0), W = mask.extent(1), D = mask.extent(2);
    const auto& m = mask.data();
    const auto at = [&](std::int64_t z, std::int64_t y, std::int64_t x) {
        if (z < 0 || z >= H || y < 0 || y >= W || x < 0 || x >= D) return 0.0;
        return m[static_cast<std::size_t>((z * W + y) * D + x)];
    };
    std::vector<Voxel> out;
    for (std::int64_t z = 0; z < H; ++z) {
        for (std::int64_t y = 0; y < W; ++y) {
            for (std::int64_t x = 0; x < D; ++x) {
                if (at(z, y, x) == 0.0) continue;
                if (at(z - 1, y, x) == 0.0 || at(z + 1, y, x) == 0.0 || at(z, y - 1, x) == 0.0 ||
                    at(z, y + 1, x) == 0.0 || at(z, y, x - 1) == 0.0 || at(z, y, x + 1) == 0.0) {
                    out.push_back({z, y, x});
                }
            }
        }
    }
    return out;
}

double min_distance(const Voxel& p, const std::vector<Voxel>& targets) {
    std::int64_t best = std::numeric_limits<std::int64_t>::max();
    for (const auto& t : targets) {
        const std::int64_t dz = p.z - t.z, dy = p.y - t.y, dx = p.x - t.x;
        best = std::min(best, dz * dz + dy * dy + dx * dx);
        if (best == 0) break;
    }
    return std::sqrt(static_cast<double>(best));
}

}  // namespace

double dice(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw shape_error("dice: shape mismatch " + shape_str(pred.shape()) + " vs " +
                          shape_str(gt.shape()));
    }
    require_binary(pred, "dice");
    require_binary(gt, "dice");
    std::int64_t np = 0, ng = 0, inter = 0;
    const auto& p = pred.data();
    const auto& g = gt.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        np += p[i] != 0.0;
        ng += g[i] != 0.0;
        inter += (p[i] != 0.0 && g[i] != 0.0);
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
}

std::optional<double> hd95(const Tensor& pred, const Tensor& gt) {
    if (pred.shape() != gt.shape()) {
        throw shape_error("hd95: shape mismatch " + shape_str(pred.shape()) + " vs " +
                          shape_str(gt.shape()));
    }
    if (pred.rank() != 3) {
        throw shape_error("hd95: expected rank-3 masks, got " + shape_str(pred.shape()));
    }
    require_binary(pred, "hd95");
    require_binary(gt, "hd95");

    const auto bp = boundary_voxels(pred);
    const auto bg = boundary_voxels(gt);
    if (bp.empty() || bg.empty()) return std::nullopt;

    std::vector<double> distances;
    distances.reserve(bp.size() + bg.size());
    for (const auto& p : bp) distances.push_back(min_distance(p, bg));
    for (const auto& g : bg) distances.push_back(min_distance(g, bp));
    std::sort(distances.begin(), distances.end());

    const auto m = static_cast<double>(distances.size());
    const auto rank = static_cast<std::size_t>(std::ceil(0.95 * m));  // nearest rank, 1-based
    return distances[std::max<std::size_t>(rank, 1) - 1];
}

Tensor binarize(const Tensor& logits, double threshold) {
    if (!(threshold > 0.0 && threshold < 1.0)) {
        throw value_error("binarize: threshold must be in (0,1)");
    }
    std::vector<double> out(logits.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = logits.data()[i];
        const double s = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
        out[i] = s > threshold ? 1.0 : 0.0;
    }
    return Tensor::from_data(logits.shape(), std::move(out));
}

}  // namespace mstkd
