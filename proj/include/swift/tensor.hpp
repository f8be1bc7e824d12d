#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "error.hpp"

namespace swift {

/// Row-major dense matrix; one row per sample throughout the engine.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Labels = std::vector<std::uint32_t>;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Index of the largest entry; ties go to the lowest index.
template <typename Row>
std::size_t argmax(const Row& row) {
    std::size_t best = 0;
    for (Eigen::Index c = 1; c < row.size(); ++c) {
        if (row(c) > row(static_cast<Eigen::Index>(best))) {
            best = static_cast<std::size_t>(c);
        }
    }
    return best;
}

inline Labels argmax_rows(const Matrix& m) {
    Labels out(static_cast<std::size_t>(m.rows()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        out[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(argmax(m.row(i)));
    }
    return out;
}

/// Number of data-parallel workers, capped by the SWIFT_THREADS environment variable.
inline std::size_t worker_count() {
    const char* env = std::getenv("SWIFT_THREADS");
    if (env == nullptr || *env == '\0') {
        return 1;
    }
    char* end = nullptr;
    const long value = std::strtol(env, &end, 10);
    if (end == env || value < 1) {
        return 1;
    }
    const auto hw = std::max(1u, std::thread::hardware_concurrency());
    return std::min<std::size_t>(static_cast<std::size_t>(value), hw);
}

/// Runs fn(begin, end) over contiguous row chunks. Chunks write disjoint outputs, so the
/// result does not depend on the worker count.
template <typename Fn>
void parallel_rows(std::size_t rows, Fn&& fn) {
    const std::size_t workers = std::min(worker_count(), std::max<std::size_t>(1, rows / 256));
    if (workers <= 1) {
        fn(std::size_t{0}, rows);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (rows + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(rows, begin + chunk);
        if (begin >= end) {
            break;
        }
        pool.emplace_back([&fn, begin, end] { fn(begin, end); });
    }
    for (auto& t : pool) {
        t.join();
    }
}

} // namespace swift
