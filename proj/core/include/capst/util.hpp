#pragma once

#include <cstdlib>
#include <functional>
#include <string>
#include <thread>
#include <vector>

namespace capst {

// Worker cap from CAPST_THREADS; default 1 for bit-determinism.
inline int worker_count() {
    const char* env = std::getenv("CAPST_THREADS");
    if (!env) return 1;
    int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

// Chunked parallel loop over [0, n). Each index is processed exactly once
// and writes only its own outputs, so results are bitwise identical to the
// serial order for independent iterations.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& body) {
    int workers = worker_count();
    if (workers <= 1 || n < 2) {
        for (std::size_t i = 0; i < n; ++i) body(i);
        return;
    }
    if (static_cast<std::size_t>(workers) > n) workers = static_cast<int>(n);
    std::vector<std::thread> threads;
    threads.reserve(static_cast<std::size_t>(workers));
    for (int w = 0; w < workers; ++w) {
        threads.emplace_back([&, w] {
            for (std::size_t i = static_cast<std::size_t>(w); i < n;
                 i += static_cast<std::size_t>(workers)) {
                body(i);
            }
        });
    }
    for (auto& t : threads) t.join();
}

}  // namespace capst
