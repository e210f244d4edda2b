#pragma once

#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace emnet {

// Worker count for parallel loops. Overridable via EMNET_THREADS; 1
// disables threading entirely.
inline unsigned thread_count() {
    static const unsigned n = [] {
        if (const char* env = std::getenv("EMNET_THREADS")) {
            const long v = std::atol(env);
            if (v >= 1) return static_cast<unsigned>(std::min<long>(v, 64));
        }
        const unsigned hw = std::thread::hardware_concurrency();
        return hw ? hw : 1u;
    }();
    return n;
}

namespace detail {

// Persistent pool; spawning threads per loop costs more than the loops.
class ThreadPool {
public:
    static ThreadPool& instance() {
        static ThreadPool pool(thread_count() - 1);
        return pool;
    }

    // Runs fn(w) for w in [0, workers) on the pool plus the calling thread.
    void run(unsigned workers, const std::function<void(unsigned)>& fn) {
        if (workers <= 1 || threads_.empty()) {
            for (unsigned w = 0; w < workers; ++w) fn(w);
            return;
        }
        {
            std::unique_lock lock(mutex_);
            task_ = &fn;
            task_workers_ = workers;
            next_worker_ = 1;
            pending_ = workers - 1;
            ++generation_;
        }
        cv_.notify_all();
        fn(0);
        std::unique_lock lock(mutex_);
        done_cv_.wait(lock, [&] { return pending_ == 0; });
        task_ = nullptr;
    }

    unsigned pool_width() const { return static_cast<unsigned>(threads_.size()) + 1; }

private:
    explicit ThreadPool(unsigned extra_threads) {
        for (unsigned i = 0; i < extra_threads; ++i)
            threads_.emplace_back([this] { worker_loop(); });
    }

    ~ThreadPool() {
        {
            std::unique_lock lock(mutex_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& t : threads_) t.join();
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(unsigned)>* task = nullptr;
            unsigned my_worker = 0;
            {
                std::unique_lock lock(mutex_);
                cv_.wait(lock, [&] { return stop_ || (task_ && generation_ != seen &&
                                                      next_worker_ < task_workers_); });
                if (stop_) return;
                seen = generation_;
                task = task_;
                my_worker = next_worker_++;
            }
            (*task)(my_worker);
            {
                std::unique_lock lock(mutex_);
                if (--pending_ == 0) done_cv_.notify_all();
            }
        }
    }

    std::vector<std::thread> threads_;
    std::mutex mutex_;
    std::condition_variable cv_, done_cv_;
    const std::function<void(unsigned)>* task_ = nullptr;
    unsigned task_workers_ = 0;
    unsigned next_worker_ = 0;
    unsigned pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace detail

// Splits [0, n) into one contiguous chunk per worker and runs fn(lo, hi)
// on each. Each index is processed by exactly one worker and per-index
// reduction orders are untouched, so results are bitwise identical for any
// worker count.
template <class Fn>
void parallel_chunks(std::size_t n, Fn&& fn) {
    if (n == 0) return;
    const unsigned workers =
        static_cast<unsigned>(std::min<std::size_t>(thread_count(), n));
    if (workers <= 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t chunk = (n + workers - 1) / workers;
    detail::ThreadPool::instance().run(workers, [&](unsigned w) {
        const std::size_t lo = static_cast<std::size_t>(w) * chunk;
        const std::size_t hi = std::min(n, lo + chunk);
        if (lo < hi) fn(lo, hi);
    });
}

template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    parallel_chunks(n, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) fn(i);
    });
}

}  // namespace emnet
