#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace mcmamba {

namespace detail {
inline std::atomic<std::size_t>& worker_count_storage() {
    static std::atomic<std::size_t> count{1};
    return count;
}
}  // namespace detail

/// Number of worker threads used by lane-parallel kernels. Defaults to 1.
inline std::size_t worker_count() { return detail::worker_count_storage().load(); }

inline void set_worker_count(std::size_t n) { detail::worker_count_storage().store(std::max<std::size_t>(1, n)); }

/// Calls fn(begin, end) over a partition of [0, n). Each index is visited exactly once and
/// every work item must write disjoint outputs, so results never depend on the worker count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, std::size_t workers = worker_count()) {
    workers = std::min(workers, n);
    if (workers <= 1) {
        if (n > 0) fn(std::size_t{0}, n);
        return;
    }
    std::vector<std::thread> threads;
    std::vector<std::exception_ptr> errors(workers);
    threads.reserve(workers);
    const std::size_t per = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * per;
        const std::size_t end = std::min(n, begin + per);
        if (begin >= end) break;
        threads.emplace_back([&, w, begin, end] {
            try {
                fn(begin, end);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : threads) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace mcmamba
