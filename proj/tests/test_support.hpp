#pragma once

#include <cstdint>

#include "sinewich/numerics.hpp"
#include "sinewich/random.hpp"
#include "sinewich/tensor.hpp"

namespace sinewich::testing {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, std::uint64_t stream = 0, double sigma = 1.0) {
    RandomStream rng(seed, stream);
    return sample_gaussian(rng, std::move(shape), sigma);
}

}  // namespace sinewich::testing
