#pragma once

#include <atomic>
#include <cstdlib>
#include <functional>
#include <thread>
#include <vector>

namespace off2on {

/// Worker-count cap: min(hardware, OFF2ON_THREADS when set).
inline int worker_count() {
    int n = static_cast<int>(std::thread::hardware_concurrency());
    if (n <= 0) n = 1;
    if (const char* env = std::getenv("OFF2ON_THREADS")) {
        const int cap = std::atoi(env);
        if (cap >= 1 && cap < n) n = cap;
    }
    return n;
}

/// Runs fn(i) for i in [0, count). With n_threads <= 1 this degenerates to a
/// plain loop (the deterministic single-threaded mode). Tasks must write only
/// to their own slots; results are index-addressed, so scheduling does not
/// affect outcomes.
inline void parallel_for(int count, int n_threads, const std::function<void(int)>& fn) {
    if (n_threads <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    std::atomic<int> next{0};
    const int used = std::min(n_threads, count);
    workers.reserve(used);
    for (int t = 0; t < used; ++t) {
        workers.emplace_back([&]() {
            for (int i = next.fetch_add(1); i < count; i = next.fetch_add(1)) fn(i);
        });
    }
    for (auto& w : workers) w.join();
}

}  // namespace off2on
