#pragma once

#include <atomic>
#include <cstdlib>
#include <exception>
#include <thread>
#include <vector>

namespace mudok {

// Worker cap for read-only sharded work (evaluation); MUDOK_THREADS, default 1.
inline std::size_t worker_count() {
    const char* env = std::getenv("MUDOK_THREADS");
    if (!env) return 1;
    const long v = std::strtol(env, nullptr, 10);
    if (v <= 1) return 1;
    const long hw = static_cast<long>(std::thread::hardware_concurrency());
    return static_cast<std::size_t>(hw > 0 && v > hw ? hw : v);
}

// Runs f(i) for i in [0, n) across the configured workers. Callers keep
// determinism by writing to disjoint slots and reducing sequentially.
template <class F>
void parallel_for(std::size_t n, F&& f) {
    const std::size_t workers = std::min(worker_count(), n);
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    auto worker = [&]() {
        try {
            for (std::size_t i = next.fetch_add(1); i < n && !failed.load();
                 i = next.fetch_add(1))
                f(i);
        } catch (...) {
            if (!failed.exchange(true)) error = std::current_exception();
        }
    };
    std::vector<std::thread> threads;
    for (std::size_t w = 0; w < workers; ++w) threads.emplace_back(worker);
    for (auto& t : threads) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace mudok
