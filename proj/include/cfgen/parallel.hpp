#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

#include "cfgen/core.hpp"

namespace cfgen {

// Runs fn(i) for i in [0, n) on thread_count() workers. Each index is handled
// by exactly one call, so callers writing to slot i get results that do not
// depend on the thread count.
template <typename Fn>
void parallel_for(size_t n, Fn&& fn) {
    const size_t workers = std::min<size_t>(static_cast<size_t>(thread_count()), n);
    if (workers <= 1) {
        for (size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            for (size_t i = w; i < n; i += workers) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

}  // namespace cfgen
