#include "mstkd/synth.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "mstkd/serialize.hpp"

namespace mstkd {

namespace {

constexpr double kPi = 3.141592653589793;

// Per-modality intensity model: background level plus additive offsets for
// every region a voxel belongs to (a core voxel receives WT+TC, an enhancing
// voxel WT+TC+ET). The table is chosen so that each region boundary is
// clearly visible in some modalities and nearly invisible in others.
constexpr std::array<double, 4> kBase = {0.30, 0.55, 0.35, 0.40};           // FLAIR,T1,T1Gd,T2
constexpr std::array<double, 4> kWtOffset = {0.35, -0.05, 0.02, 0.25};
constexpr std::array<double, 4> kTcOffset = {0.08, -0.20, 0.05, 0.15};
constexpr std::array<double, 4> kEtOffset = {0.02, 0.05, 0.40, -0.10};

struct Ellipsoid {
    double cx, cy, cz;
    double rx, ry, rz;
    bool contains(double x, double y, double z, double scale) const {
        const double dx = (x - cx) / (rx * scale);
        const double dy = (y - cy) / (ry * scale);
        const double dz = (z - cz) / (rz * scale);
        return dx * dx + dy * dy + dz * dz <= 1.0;
    }
};

}  // namespace

int ModalityMask::count() const {
    int n = 0;
    for (bool b : present) n += b ? 1 : 0;
    return n;
}

std::string ModalityMask::bits() const {
    std::string s;
    for (bool b : present) s += b ? '1' : '0';
    return s;
}

std::string ModalityMask::label() const {
    std::string s;
    for (std::size_t i = 0; i < present.size(); ++i) {
        if (present[i]) {
            if (!s.empty()) s += '+';
            s += kModalityNames[i];
        }
    }
    return s;
}

VolumeCase generate_case(std::uint64_t seed, std::int64_t H, std::int64_t W, std::int64_t D) {
    if (H % 8 || W % 8 || D % 8) {
        throw value_error("generate_case: dims must be multiples of 8, got " +
                          shape_str({H, W, D}));
    }
    Rng rng(seed ^ 0xC0FFEEull);

    const int n_lesions = static_cast<int>(rng.uniform_int(1, 3));
    std::vector<Ellipsoid> lesions;
    for (int i = 0; i < n_lesions; ++i) {
        Ellipsoid e;
        e.cx = rng.uniform(0.30, 0.70) * static_cast<double>(H);
        e.cy = rng.uniform(0.30, 0.70) * static_cast<double>(W);
        e.cz = rng.uniform(0.30, 0.70) * static_cast<double>(D);
        e.rx = rng.uniform(0.15, 0.32) * static_cast<double>(H);
        e.ry = rng.uniform(0.15, 0.32) * static_cast<double>(W);
        e.rz = rng.uniform(0.15, 0.32) * static_cast<double>(D);
        lesions.push_back(e);
    }
    constexpr double kCoreScale = 0.65;
    constexpr double kEnhScale = 0.40;

    // smooth low-frequency bias field per modality
    struct Bias {
        double fx, fy, fz, phase, amp;
    };
    std::array<Bias, 4> bias{};
    for (auto& b : bias) {
        b.fx = static_cast<double>(rng.uniform_int(1, 2));
        b.fy = static_cast<double>(rng.uniform_int(1, 2));
        b.fz = static_cast<double>(rng.uniform_int(1, 2));
        b.phase = rng.uniform(0.0, 2.0 * kPi);
        b.amp = 0.05;
    }

    const std::int64_t vol = H * W * D;
    std::vector<double> image(static_cast<std::size_t>(4 * vol));
    std::vector<double> label(static_cast<std::size_t>(3 * vol), 0.0);

    for (std::int64_t z = 0; z < H; ++z) {
        for (std::int64_t y = 0; y < W; ++y) {
            for (std::int64_t x = 0; x < D; ++x) {
                const std::int64_t v = (z * W + y) * D + x;
                const double fz = static_cast<double>(z) + 0.5;
                const double fy = static_cast<double>(y) + 0.5;
                const double fx = static_cast<double>(x) + 0.5;
                bool wt = false, tc = false, et = false;
                for (const auto& e : lesions) {
                    if (e.contains(fz, fy, fx, 1.0)) wt = true;
                    if (e.contains(fz, fy, fx, kCoreScale)) tc = true;
                    if (e.contains(fz, fy, fx, kEnhScale)) et = true;
                }
                if (wt) label[static_cast<std::size_t>(v)] = 1.0;
                if (tc) label[static_cast<std::size_t>(vol + v)] = 1.0;
                if (et) label[static_cast<std::size_t>(2 * vol + v)] = 1.0;
                for (int m = 0; m < 4; ++m) {
                    const auto& b = bias[static_cast<std::size_t>(m)];
                    double val = kBase[static_cast<std::size_t>(m)] +
                                 b.amp * std::sin(2.0 * kPi *
                                                      (b.fx * fz / static_cast<double>(H) +
                                                       b.fy * fy / static_cast<double>(W) +
                                                       b.fz * fx / static_cast<double>(D)) +
                                                  b.phase);
                    if (wt) val += kWtOffset[static_cast<std::size_t>(m)];
                    if (tc) val += kTcOffset[static_cast<std::size_t>(m)];
                    if (et) val += kEtOffset[static_cast<std::size_t>(m)];
                    val += rng.uniform(-0.02, 0.02);
                    image[static_cast<std::size_t>(m * vol + v)] = std::clamp(val, 0.0, 1.0);
                }
            }
        }
    }

    VolumeCase c;
    c.id = "case_" + std::to_string(seed);
    c.image = Tensor::from_data({4, H, W, D}, std::move(image));
    c.label = Tensor::from_data({3, H, W, D}, std::move(label));
    return c;
}

Tensor apply_modality_mask(const VolumeCase& c, const ModalityMask& mask) {
    if (mask.count() == 0) {
        throw value_error("apply_modality_mask: at least one modality must be present");
    }
    auto out = c.image.detach();
    const std::int64_t vol = out.numel() / 4;
    for (int m = 0; m < 4; ++m) {
        if (!mask.present[static_cast<std::size_t>(m)]) {
            std::fill_n(out.data().begin() + m * vol, vol, 0.0);
        }
    }
    return out;
}

const std::vector<ModalityMask>& modality_combinations() {
    // column order of the evaluation grid (FLAIR, T1, T1Gd, T2 bits)
    static const std::vector<ModalityMask> kCombos = [] {
        const std::array<std::array<int, 4>, 15> rows = {{
            {0, 0, 0, 1}, {0, 0, 1, 0}, {0, 1, 0, 0}, {1, 0, 0, 0},
            {0, 0, 1, 1}, {0, 1, 1, 0}, {1, 1, 0, 0}, {0, 1, 0, 1},
            {1, 0, 0, 1}, {1, 0, 1, 0}, {1, 1, 1, 0}, {1, 1, 0, 1},
            {1, 0, 1, 1}, {0, 1, 1, 1}, {1, 1, 1, 1},
        }};
        std::vector<ModalityMask> out;
        for (const auto& r : rows) {
            ModalityMask m;
            for (int i = 0; i < 4; ++i) m.present[static_cast<std::size_t>(i)] = r[static_cast<std::size_t>(i)] != 0;
            out.push_back(m);
        }
        return out;
    }();
    return kCombos;
}

AugmentParams identity_augment(const VolumeCase& c) {
    AugmentParams p;
    for (int d = 0; d < 3; ++d) {
        p.crop[static_cast<std::size_t>(d)] = c.image.extent(d + 1);
        p.src_off[static_cast<std::size_t>(d)] = 0;
        p.dst_off[static_cast<std::size_t>(d)] = 0;
    }
    return p;
}

AugmentParams sample_augment(const VolumeCase& c, Rng& rng) {
    AugmentParams p;
    for (auto& f : p.flip) f = rng.coin();
    p.rot_pair = static_cast<int>(rng.uniform_int(0, 2));
    p.rot_quarters = static_cast<int>(rng.uniform_int(0, 3));
    for (int d = 0; d < 3; ++d) {
        const std::int64_t e = c.image.extent(d + 1);
        const std::int64_t shrink = rng.uniform_int(0, std::min<std::int64_t>(2, e - 1));
        p.crop[static_cast<std::size_t>(d)] = e - shrink;
        p.src_off[static_cast<std::size_t>(d)] = rng.uniform_int(0, shrink);
        p.dst_off[static_cast<std::size_t>(d)] = rng.uniform_int(0, shrink);
    }
    return p;
}

namespace {

Tensor transform_volume(const Tensor& t, const AugmentParams& p) {
    const std::int64_t C = t.extent(0);
    std::int64_t E[3] = {t.extent(1), t.extent(2), t.extent(3)};
    std::vector<double> cur = t.data();

    auto at = [&](const std::vector<double>& buf, std::int64_t c, std::int64_t i, std::int64_t j,
                  std::int64_t k) { return buf[static_cast<std::size_t>(((c * E[0] + i) * E[1] + j) * E[2] + k)]; };

    // flips
    {
        std::vector<double> nxt(cur.size());
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t i = 0; i < E[0]; ++i) {
                for (std::int64_t j = 0; j < E[1]; ++j) {
                    for (std::int64_t k = 0; k < E[2]; ++k) {
                        const std::int64_t si = p.flip[0] ? E[0] - 1 - i : i;
                        const std::int64_t sj = p.flip[1] ? E[1] - 1 - j : j;
                        const std::int64_t sk = p.flip[2] ? E[2] - 1 - k : k;
                        nxt[static_cast<std::size_t>(((c * E[0] + i) * E[1] + j) * E[2] + k)] =
                            at(cur, c, si, sj, sk);
                    }
                }
            }
        }
        cur = std::move(nxt);
    }

    // quarter-turn rotations in one axis pair; only when the two extents match
    const int a = p.rot_pair == 2 ? 1 : 0;
    const int b = p.rot_pair == 0 ? 1 : 2;
    if (E[a] == E[b]) {
        for (int q = 0; q < p.rot_quarters % 4; ++q) {
            std::vector<double> nxt(cur.size());
            const std::int64_t n = E[a];
            for (std::int64_t c = 0; c < C; ++c) {
                for (std::int64_t i = 0; i < E[0]; ++i) {
                    for (std::int64_t j = 0; j < E[1]; ++j) {
                        for (std::int64_t k = 0; k < E[2]; ++k) {
                            std::int64_t idx[3] = {i, j, k};
                            // destination (u,v) draws from source (v, n-1-u)
                            std::int64_t src[3] = {i, j, k};
                            src[a] = idx[b];
                            src[b] = n - 1 - idx[a];
                            nxt[static_cast<std::size_t>(((c * E[0] + i) * E[1] + j) * E[2] + k)] =
                                at(cur, c, src[0], src[1], src[2]);
                        }
                    }
                }
            }
            cur = std::move(nxt);
        }
    }

    // crop then paste into a zero volume of the original size
    {
        std::vector<double> nxt(cur.size(), 0.0);
        for (std::int64_t c = 0; c < C; ++c) {
            for (std::int64_t i = 0; i < p.crop[0]; ++i) {
                for (std::int64_t j = 0; j < p.crop[1]; ++j) {
                    for (std::int64_t k = 0; k < p.crop[2]; ++k) {
                        const std::int64_t di = p.dst_off[0] + i, dj = p.dst_off[1] + j,
                                           dk = p.dst_off[2] + k;
                        nxt[static_cast<std::size_t>(((c * E[0] + di) * E[1] + dj) * E[2] + dk)] =
                            at(cur, c, p.src_off[0] + i, p.src_off[1] + j, p.src_off[2] + k);
                    }
                }
            }
        }
        cur = std::move(nxt);
    }
    return Tensor::from_data(t.shape(), std::move(cur));
}

}  // namespace

VolumeCase apply_augment(const VolumeCase& c, const AugmentParams& p) {
    VolumeCase out;
    out.id = c.id;
    out.image = transform_volume(c.image, p);
    out.label = transform_volume(c.label, p);
    return out;
}

VolumeCase augment(const VolumeCase& c, std::uint64_t seed) {
    Rng rng(seed ^ 0xA46ull);
    return apply_augment(c, sample_augment(c, rng));
}

std::pair<std::vector<int>, std::vector<int>> make_split(int n_cases, double train_fraction,
                                                         std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw value_error("make_split: train_fraction must be in (0,1)");
    }
    std::vector<int> ids(static_cast<std::size_t>(n_cases));
    for (int i = 0; i < n_cases; ++i) ids[static_cast<std::size_t>(i)] = i;
    Rng rng(seed ^ 0x5417ull);
    for (int i = n_cases - 1; i > 0; --i) {
        const auto j = rng.uniform_int(0, i);
        std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(j)]);
    }
    const int n_train = static_cast<int>(std::llround(static_cast<double>(n_cases) * train_fraction));
    if (n_train <= 0 || n_train >= n_cases) {
        throw value_error("make_split: split leaves an empty side (" + std::to_string(n_train) + "/" +
                          std::to_string(n_cases - n_train) + ")");
    }
    return {std::vector<int>(ids.begin(), ids.begin() + n_train),
            std::vector<int>(ids.begin() + n_train, ids.end())};
}

Dataset build_dataset(int n_cases, const Shape& dims, std::uint64_t seed, double train_fraction) {
    if (dims.size() != 3) throw value_error("build_dataset: dims must be (H,W,D)");
    Dataset ds;
    ds.dims = dims;
    ds.seed = seed;
    for (int i = 0; i < n_cases; ++i) {
        const std::uint64_t case_seed = seed * 1000003ull + static_cast<std::uint64_t>(i);
        auto c = generate_case(case_seed, dims[0], dims[1], dims[2]);
        c.id = "case_" + std::string(4 - std::min<std::size_t>(4, std::to_string(i).size()), '0') +
               std::to_string(i);
        ds.cases.push_back(std::move(c));
    }
    std::tie(ds.train_ids, ds.test_ids) = make_split(n_cases, train_fraction, seed);
    // canonical order: membership is the split, index order is the storage form
    std::sort(ds.train_ids.begin(), ds.train_ids.end());
    std::sort(ds.test_ids.begin(), ds.test_ids.end());
    return ds;
}

void write_dataset(const std::string& dir, const Dataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream index(fs::path(dir) / "index.jsonl");
    if (!index) throw value_error("write_dataset: cannot write index in " + dir);
    std::vector<char> split_of(ds.cases.size(), 't');
    for (int i : ds.test_ids) split_of[static_cast<std::size_t>(i)] = 'e';
    for (std::size_t i = 0; i < ds.cases.size(); ++i) {
        const auto& c = ds.cases[i];
        save_tensor((fs::path(dir) / (c.id + "_image.bin")).string(), c.image);
        save_tensor((fs::path(dir) / (c.id + "_label.bin")).string(), c.label);
        nlohmann::json j;
        j["id"] = c.id;
        j["seed"] = ds.seed * 1000003ull + i;
        j["dims"] = {ds.dims[0], ds.dims[1], ds.dims[2]};
        j["split"] = split_of[i] == 't' ? "train" : "test";
        index << j.dump() << "\n";
    }
}

Dataset read_dataset(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream index(fs::path(dir) / "index.jsonl");
    if (!index) throw value_error("read_dataset: no index.jsonl in " + dir);
    Dataset ds;
    std::string line;
    int i = 0;
    while (std::getline(index, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        VolumeCase c;
        c.id = j.at("id").get<std::string>();
        c.image = load_tensor((fs::path(dir) / (c.id + "_image.bin")).string());
        c.label = load_tensor((fs::path(dir) / (c.id + "_label.bin")).string());
        if (ds.dims.empty()) {
            ds.dims = {c.image.extent(1), c.image.extent(2), c.image.extent(3)};
        }
        if (j.at("split").get<std::string>() == "train") {
            ds.train_ids.push_back(i);
        } else {
            ds.test_ids.push_back(i);
        }
        ds.cases.push_back(std::move(c));
        ++i;
    }
    if (ds.cases.empty()) throw value_error("read_dataset: empty dataset in " + dir);
    return ds;
}

}  // namespace mstkd
