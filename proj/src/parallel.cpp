#include "procformer/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace procformer {
namespace {

std::atomic<int> g_threads{1};

// Set while a thread is executing a pool job. The pool runs one job at a
// time, so a parallel_for issued from inside another one (a kernel inside a
// fanned-out micro-batch, say) must run inline rather than re-enter the pool.
thread_local bool tl_in_pool_job = false;

// Minimum iterations per worker before fanning out; below this the
// coordination cost dwarfs the work.
constexpr int64_t kGrain = 1024;

// Persistent pool: workers sleep until a job arrives, grab chunk indices from
// a shared counter, then report completion. Lazily grown on first use.
class Pool {
public:
    static Pool& instance() {
        static Pool p;
        return p;
    }

    void run(int workers, int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
        ensure(workers - 1);
        std::unique_lock<std::mutex> lock(mu_);
        job_ = &fn;
        job_n_ = n;
        job_workers_ = workers;
        next_chunk_.store(0, std::memory_order_relaxed);
        // Every pool thread answers every generation bump exactly once, so
        // completion must count all of them -- threads beyond the requested
        // worker count just find the chunk counter exhausted and check out.
        pending_ = static_cast<int>(threads_.size());
        ++generation_;
        cv_start_.notify_all();
        lock.unlock();

        tl_in_pool_job = true;
        work(n, workers); // chunk 0 onwards, shared with the pool
        tl_in_pool_job = false;

        lock.lock();
        cv_done_.wait(lock, [this] { return pending_ == 0; });
        job_ = nullptr;
    }

private:
    Pool() = default;
    ~Pool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
            ++generation_;
            cv_start_.notify_all();
        }
        for (auto& t : threads_) t.join();
    }

    void ensure(size_t count) {
        std::lock_guard<std::mutex> lock(mu_);
        while (threads_.size() < count) {
            threads_.emplace_back([this] { worker_loop(); });
        }
    }

    void worker_loop() {
        tl_in_pool_job = true; // pool threads only ever run inside a job
        uint64_t seen = 0;
        for (;;) {
            std::unique_lock<std::mutex> lock(mu_);
            cv_start_.wait(lock, [&] { return generation_ != seen; });
            seen = generation_;
            if (stop_) return;
            if (job_ == nullptr) continue;
            int64_t n = job_n_;
            int workers = job_workers_;
            lock.unlock();

            work(n, workers);

            lock.lock();
            if (--pending_ == 0) cv_done_.notify_one();
        }
    }

    // Pull chunks until none remain. Chunk boundaries depend only on n and
    // the requested worker count, not on scheduling.
    void work(int64_t n, int workers) {
        int64_t chunks = workers;
        for (;;) {
            int64_t c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
            if (c >= chunks) return;
            int64_t begin = n * c / chunks;
            int64_t end = n * (c + 1) / chunks;
            if (begin < end) (*job_)(begin, end);
        }
    }

    std::mutex mu_;
    std::condition_variable cv_start_;
    std::condition_variable cv_done_;
    std::vector<std::thread> threads_;
    const std::function<void(int64_t, int64_t)>* job_ = nullptr;
    int64_t job_n_ = 0;
    int job_workers_ = 1;
    std::atomic<int64_t> next_chunk_{0};
    int pending_ = 0;
    uint64_t generation_ = 0;
    bool stop_ = false;
};

} // namespace

void set_num_threads(int n) {
    g_threads.store(n < 1 ? 1 : n, std::memory_order_relaxed);
}

int num_threads() {
    return g_threads.load(std::memory_order_relaxed);
}

void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& fn) {
    parallel_for(n, kGrain, fn);
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
    if (n <= 0) return;
    if (grain < 1) grain = 1;
    int workers = num_threads();
    int64_t max_useful = (n + grain - 1) / grain;
    if (workers > max_useful) workers = static_cast<int>(max_useful);
    if (workers <= 1 || tl_in_pool_job) {
        fn(0, n);
        return;
    }
    Pool::instance().run(workers, n, fn);
}

} // namespace procformer
