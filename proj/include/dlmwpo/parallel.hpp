#pragma once

// A small persistent thread pool with a blocking parallel_for.
//
// Determinism contract: parallel_for only ever splits index ranges whose
// iterations write disjoint outputs, and each iteration accumulates in its own
// fixed order, so results are bit-identical for any thread count.

#include <atomic>
#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dlmwpo {

class ThreadPool {
 public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  int threads() const { return n_threads_; }

  void set_threads(int n) {
    if (n < 1) n = 1;
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    stop_workers();
    n_threads_ = n;
    start_workers();
  }

  // Runs body(chunk) for chunk in [0, chunks); blocks until all finish.
  void run(int chunks, const std::function<void(int)>& body) {
    if (chunks <= 0) return;
    if (n_threads_ == 1 || chunks == 1) {
      for (int c = 0; c < chunks; ++c) body(c);
      return;
    }
    std::lock_guard<std::mutex> run_lock(run_mutex_);
    {
      std::lock_guard<std::mutex> lk(mutex_);
      body_ = &body;
      next_chunk_.store(0, std::memory_order_relaxed);
      chunks_ = chunks;
      pending_ = chunks;
      generation_++;
    }
    cv_.notify_all();
    work(generation_.load());  // the calling thread participates
    std::unique_lock<std::mutex> lk(mutex_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    body_ = nullptr;
  }

  ~ThreadPool() { stop_workers(); }

 private:
  ThreadPool() { start_workers(); }

  void start_workers() {
    stop_ = false;
    for (int i = 1; i < n_threads_; ++i) {
      workers_.emplace_back([this] {
        std::uint64_t seen = 0;
        while (true) {
          std::unique_lock<std::mutex> lk(mutex_);
          cv_.wait(lk, [&] { return stop_ || generation_.load() != seen; });
          if (stop_) return;
          seen = generation_.load();
          lk.unlock();
          work(seen);
        }
      });
    }
  }

  void stop_workers() {
    {
      std::lock_guard<std::mutex> lk(mutex_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& w : workers_) w.join();
    workers_.clear();
  }

  void work(std::uint64_t gen) {
    if (generation_.load() != gen) return;
    while (true) {
      int c = next_chunk_.fetch_add(1, std::memory_order_relaxed);
      if (c >= chunks_) break;
      (*body_)(c);
      std::lock_guard<std::mutex> lk(mutex_);
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  int n_threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mutex_, run_mutex_;
  std::condition_variable cv_, done_cv_;
  std::atomic<std::uint64_t> generation_{0};
  std::atomic<int> next_chunk_{0};
  int chunks_ = 0;
  int pending_ = 0;
  bool stop_ = false;
  const std::function<void(int)>* body_ = nullptr;
};

// Splits [0, n) into contiguous ranges of at least `grain` and runs
// f(begin, end) on the pool.
template <class F>
inline void parallel_for(long n, long grain, F&& f) {
  if (n <= 0) return;
  ThreadPool& pool = ThreadPool::instance();
  int max_chunks = static_cast<int>((n + grain - 1) / grain);
  int chunks = pool.threads() < max_chunks ? pool.threads() : max_chunks;
  if (chunks <= 1) {
    f(0L, n);
    return;
  }
  long per = (n + chunks - 1) / chunks;
  pool.run(chunks, [&](int c) {
    long b = c * per;
    long e = b + per < n ? b + per : n;
    if (b < e) f(b, e);
  });
}

}  // namespace dlmwpo
