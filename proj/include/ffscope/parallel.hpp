#pragma once

#include <algorithm>
#include <cstddef>
#include <exception>
#include <thread>
#include <vector>

namespace ffscope {

std::size_t default_thread_count() noexcept;

// Splits [0, count) into `threads` contiguous shards and runs fn(shard, begin, end)
// on each, rethrowing the first exception after all workers join. Shards are
// numbered in index order.
template <typename Fn>
void for_each_shard(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, count));
    if (threads == 1) {
        fn(std::size_t{0}, std::size_t{0}, count);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    {
        std::vector<std::jthread> workers;
        workers.reserve(threads);
        for (std::size_t s = 0; s < threads; ++s) {
            const std::size_t begin = count * s / threads;
            const std::size_t end = count * (s + 1) / threads;
            workers.emplace_back([&, s, begin, end] {
                try {
                    fn(s, begin, end);
                } catch (...) {
                    errors[s] = std::current_exception();
                }
            });
        }
    }
    for (auto& error : errors) {
        if (error) {
            std::rethrow_exception(error);
        }
    }
}

} // namespace ffscope
