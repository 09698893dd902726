#ifndef IDPATCH_PARALLEL_HPP
#define IDPATCH_PARALLEL_HPP

#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace idpatch {

// Runs fn(i) for i in [0, n). Work is strided across workers; any exception
// is rethrown on the calling thread after all workers join.
inline void parallel_for(int n, int n_threads, const std::function<void(int)>& fn) {
    if (n <= 0) return;
    const int workers = std::max(1, std::min(n_threads, n));
    if (workers == 1) {
        for (int i = 0; i < n; i++) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex mu;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; w++) {
        pool.emplace_back([&, w] {
            try {
                for (int i = w; i < n; i += workers) fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (!first_error) first_error = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace idpatch

#endif  // IDPATCH_PARALLEL_HPP
