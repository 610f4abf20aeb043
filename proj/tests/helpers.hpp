#pragma once

#include <cmath>
#include <cstdint>
#include <random>

#include "timeguard/core/mat.hpp"
#include "timeguard/core/rng.hpp"

namespace tg::test {

inline Mat random_mat(std::size_t r, std::size_t c, std::mt19937_64& rng, double scale = 1.0) {
    Mat m(r, c);
    for (double& v : m.data) v = scale * normal_draw(rng);
    return m;
}

inline bool close(double a, double b, double rel, double abs_tol = 0.0) {
    return std::abs(a - b) <= std::max(abs_tol, rel * std::max(std::abs(a), std::abs(b)));
}

}  // namespace tg::test
