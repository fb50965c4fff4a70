#pragma once

#include <vector>

#include "mstkd/rng.hpp"
#include "mstkd/tensor.hpp"

namespace testutil {

inline mstkd::Tensor random_tensor(const mstkd::Shape& shape, mstkd::Rng& rng, double lo = -2.0,
                                   double hi = 2.0) {
    std::vector<double> d(static_cast<std::size_t>(mstkd::shape_numel(shape)));
    for (auto& x : d) x = rng.uniform(lo, hi);
    return mstkd::Tensor::from_data(shape, std::move(d));
}

inline mstkd::Shape random_shape(mstkd::Rng& rng, int max_rank = 3, int max_extent = 4) {
    const int r = static_cast<int>(rng.uniform_int(1, max_rank));
    mstkd::Shape s;
    for (int i = 0; i < r; ++i) s.push_back(rng.uniform_int(1, max_extent));
    return s;
}

// Fixed random weights used to scalarize op outputs so elementwise gradient
// errors cannot cancel. Draw once per instance, outside the checked function.
inline mstkd::Tensor make_weights(const mstkd::Shape& shape, mstkd::Rng& rng) {
    return random_tensor(shape, rng, -1.0, 1.0);
}

}  // namespace testutil
