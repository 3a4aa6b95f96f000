#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <functional>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace olseg {

// Persistent worker pool for row-parallel kernels. Work is split into fixed-size
// chunks so results never depend on how many workers happen to run; callers that
// reduce partial results must do so in chunk order.
class ThreadPool {
    struct Job {
        const std::function<void(size_t, size_t, size_t)>* fn = nullptr;
        size_t n = 0;
        size_t grain = 1;
        size_t chunks = 0;
        std::atomic<size_t> next{0};
        std::atomic<size_t> remaining{0};
    };

  public:
    static ThreadPool& instance() {
        static ThreadPool pool;
        return pool;
    }

    int worker_count() const { return static_cast<int>(workers_.size()) + 1; }

    // fn(chunk_index, begin, end); chunks are [grain]-sized ranges of [0, n).
    void run_chunks(size_t n, size_t grain, const std::function<void(size_t, size_t, size_t)>& fn) {
        if (n == 0) return;
        if (grain == 0) grain = 1;
        const size_t chunks = (n + grain - 1) / grain;
        if (chunks == 1 || workers_.empty()) {
            for (size_t c = 0; c < chunks; ++c) {
                fn(c, c * grain, std::min(n, (c + 1) * grain));
            }
            return;
        }
        auto job = std::make_shared<Job>();
        job->fn = &fn;
        job->n = n;
        job->grain = grain;
        job->chunks = chunks;
        job->remaining.store(chunks, std::memory_order_relaxed);
        {
            std::lock_guard<std::mutex> lock(mutex_);
            current_ = job;
            ++generation_;
        }
        wake_.notify_all();

        drain(*job);  // caller participates

        std::unique_lock<std::mutex> lock(mutex_);
        done_.wait(lock, [&] { return job->remaining.load(std::memory_order_acquire) == 0; });
        if (current_ == job) current_.reset();
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mutex_);
            stop_ = true;
            ++generation_;
        }
        wake_.notify_all();
        for (auto& t : workers_) t.join();
    }

  private:
    ThreadPool() {
        int n = 0;
        if (const char* env = std::getenv("OLSEG_THREADS")) n = std::atoi(env);
        if (n <= 0) n = static_cast<int>(std::thread::hardware_concurrency());
        if (n <= 0) n = 1;
        for (int i = 0; i < n - 1; ++i) {
            workers_.emplace_back([this] { worker_main(); });
        }
    }

    void worker_main() {
        uint64_t seen = 0;
        for (;;) {
            std::shared_ptr<Job> job;
            {
                std::unique_lock<std::mutex> lock(mutex_);
                wake_.wait(lock, [&] { return stop_ || (generation_ != seen && current_); });
                seen = generation_;
                if (stop_) return;
                job = current_;
            }
            if (job) drain(*job);
        }
    }

    void drain(Job& job) {
        for (;;) {
            const size_t c = job.next.fetch_add(1, std::memory_order_relaxed);
            if (c >= job.chunks) break;
            (*job.fn)(c, c * job.grain, std::min(job.n, (c + 1) * job.grain));
            if (job.remaining.fetch_sub(1, std::memory_order_acq_rel) == 1) {
                std::lock_guard<std::mutex> lock(mutex_);
                done_.notify_all();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex mutex_;
    std::condition_variable wake_;
    std::condition_variable done_;
    std::shared_ptr<Job> current_;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

// Parallel loop over [0, n) with deterministic chunking; fn(begin, end).
inline void parallel_for(size_t n, size_t grain, const std::function<void(size_t, size_t)>& fn) {
    ThreadPool::instance().run_chunks(n, grain, [&](size_t, size_t b, size_t e) { fn(b, e); });
}

}  // namespace olseg
