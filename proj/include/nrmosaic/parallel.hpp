#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace nrmosaic {

/// Worker count resolution: explicit request, capped by the
/// NRMOSAIC_MAX_WORKERS environment variable when set. 0 means "hardware".
inline int resolve_workers(int requested) {
    int n = requested > 0 ? requested
                          : static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* cap = std::getenv("NRMOSAIC_MAX_WORKERS")) {
        const int c = std::atoi(cap);
        if (c >= 1) n = std::min(n, c);
    }
    return n;
}

/// Runs fn(begin, end) over fixed-size chunks of [0, n). Chunk boundaries
/// depend only on n and grain, never on the worker count, so any result
/// written per index (or reduced per chunk in chunk order afterwards) is
/// identical for 1 and N workers.
inline void parallel_for(std::size_t n, int workers,
                         const std::function<void(std::size_t, std::size_t)>& fn,
                         std::size_t grain = 0) {
    if (n == 0) return;
    workers = std::max(1, workers);
    if (grain == 0) grain = std::max<std::size_t>(1, n / 64);
    const std::size_t nchunks = (n + grain - 1) / grain;

    if (workers == 1 || nchunks == 1) {
        for (std::size_t c = 0; c < nchunks; ++c)
            fn(c * grain, std::min(n, (c + 1) * grain));
        return;
    }

    std::atomic<std::size_t> next{0};
    auto body = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= nchunks) break;
            fn(c * grain, std::min(n, (c + 1) * grain));
        }
    };
    std::vector<std::thread> pool;
    const int nthreads = static_cast<int>(std::min<std::size_t>(workers, nchunks));
    pool.reserve(nthreads - 1);
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
}

/// Chunked variant exposing the chunk id, for order-independent partial
/// reductions that the caller combines sequentially by chunk index.
inline std::size_t chunk_count(std::size_t n, std::size_t grain) {
    return n == 0 ? 0 : (n + grain - 1) / grain;
}

inline void parallel_for_chunks(std::size_t n, std::size_t grain, int workers,
                                const std::function<void(std::size_t, std::size_t, std::size_t)>& fn) {
    if (n == 0) return;
    const std::size_t nchunks = chunk_count(n, grain);
    std::atomic<std::size_t> next{0};
    auto body = [&] {
        for (;;) {
            const std::size_t c = next.fetch_add(1, std::memory_order_relaxed);
            if (c >= nchunks) break;
            fn(c, c * grain, std::min(n, (c + 1) * grain));
        }
    };
    workers = std::max(1, workers);
    if (workers == 1 || nchunks == 1) {
        body();
        return;
    }
    std::vector<std::thread> pool;
    const int nthreads = static_cast<int>(std::min<std::size_t>(workers, nchunks));
    pool.reserve(nthreads - 1);
    for (int t = 1; t < nthreads; ++t) pool.emplace_back(body);
    body();
    for (auto& th : pool) th.join();
}

}  // namespace nrmosaic
