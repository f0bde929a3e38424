#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace qbsde {

/// Splits [0, n) into chunks of a fixed size and runs body(chunk, begin, end).
/// Chunk boundaries never depend on the worker count, so any per-chunk
/// partial results combined in chunk order are bit-identical for every
/// choice of `workers`.
template <class Body>
void parallel_chunks(std::size_t n, std::size_t chunk, unsigned workers, Body&& body) {
    if (n == 0) return;
    chunk = std::max<std::size_t>(chunk, 1);
    const std::size_t chunks = (n + chunk - 1) / chunk;
    if (workers <= 1 || chunks == 1) {
        for (std::size_t c = 0; c < chunks; ++c) body(c, c * chunk, std::min(n, (c + 1) * chunk));
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto run = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1);
            if (c >= chunks) return;
            try {
                body(c, c * chunk, std::min(n, (c + 1) * chunk));
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
            }
        }
    };
    const unsigned spawn = static_cast<unsigned>(std::min<std::size_t>(workers, chunks));
    std::vector<std::jthread> pool;
    pool.reserve(spawn - 1);
    for (unsigned w = 1; w < spawn; ++w) pool.emplace_back(run);
    run();
    pool.clear();
    if (failure) std::rethrow_exception(failure);
}

/// Element-wise loop over [0, n) with the same chunking rules.
template <class Body>
void parallel_for(std::size_t n, unsigned workers, Body&& body, std::size_t chunk = 2048) {
    parallel_chunks(n, chunk, workers, [&](std::size_t, std::size_t b, std::size_t e) {
        for (std::size_t i = b; i < e; ++i) body(i);
    });
}

}  // namespace qbsde
