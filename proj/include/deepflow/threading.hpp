// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <thread>
#include <vector>

namespace deepflow {

// Worker cap: hardware concurrency, clamped by DEEPFLOW_THREADS when set.
inline int worker_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n < 1) n = 1;
    if (const char* env = std::getenv("DEEPFLOW_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1) n = std::min(n, cap);
    }
    return n;
}

// Static round-robin over [0, n_items); work items must be independent and
// write to disjoint slots so results do not depend on the worker count.
template <typename F>
void parallel_for(std::int64_t n_items, F f) {
    const int workers = std::min<std::int64_t>(worker_count(), n_items) > 0
                            ? static_cast<int>(std::min<std::int64_t>(worker_count(), n_items))
                            : 1;
    if (workers <= 1 || n_items <= 1) {
        for (std::int64_t i = 0; i < n_items; ++i) f(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&, w] {
            for (std::int64_t i = w; i < n_items; i += workers) f(i);
        });
    for (auto& t : pool) t.join();
}

} // namespace deepflow
