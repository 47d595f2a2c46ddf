#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace zmesh {

// Persistent worker pool with static contiguous partitioning. Each index in
// [0, n) is processed by exactly one thread, and every per-index computation
// is serial, so results are bit-identical regardless of the worker count.
class ThreadPool {
public:
  static ThreadPool& instance() {
    static ThreadPool pool;
    return pool;
  }

  ~ThreadPool() { shutdown(); }

  int width() const { return width_; }

  /// Sets the total number of lanes (worker threads + the calling thread).
  void resize(int width) {
    width = std::max(1, width);
    if (width == width_) return;
    shutdown();
    width_ = width;
    stop_ = false;
    for (int lane = 1; lane < width_; ++lane) {
      threads_.emplace_back([this, lane] { worker_loop(lane); });
    }
  }

  void run(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    if (n <= 0) return;
    if (width_ == 1 || n == 1 || in_job_) {
      for (std::int64_t i = 0; i < n; ++i) fn(i);
      return;
    }
    {
      std::unique_lock<std::mutex> lock(mutex_);
      job_n_ = n;
      job_fn_ = &fn;
      pending_ = width_ - 1;
      ++generation_;
    }
    cv_start_.notify_all();
    in_job_ = true;
    run_chunk(0, n, fn);
    in_job_ = false;
    std::unique_lock<std::mutex> lock(mutex_);
    cv_done_.wait(lock, [this] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

private:
  ThreadPool() { resize(static_cast<int>(std::thread::hardware_concurrency())); }

  void run_chunk(int lane, std::int64_t n,
                 const std::function<void(std::int64_t)>& fn) {
    const int lanes = static_cast<int>(std::min<std::int64_t>(width_, n));
    if (lane >= lanes) return;
    const std::int64_t lo = n * lane / lanes;
    const std::int64_t hi = n * (lane + 1) / lanes;
    for (std::int64_t i = lo; i < hi; ++i) fn(i);
  }

  void worker_loop(int lane) {
    std::uint64_t seen = 0;
    for (;;) {
      const std::function<void(std::int64_t)>* fn = nullptr;
      std::int64_t n = 0;
      {
        std::unique_lock<std::mutex> lock(mutex_);
        cv_start_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
        fn = job_fn_;
        n = job_n_;
      }
      if (fn) {
        in_job_ = true;
        run_chunk(lane, n, *fn);
        in_job_ = false;
      }
      {
        std::unique_lock<std::mutex> lock(mutex_);
        if (--pending_ == 0) cv_done_.notify_one();
      }
    }
  }

  void shutdown() {
    {
      std::unique_lock<std::mutex> lock(mutex_);
      stop_ = true;
      ++generation_;
    }
    cv_start_.notify_all();
    for (auto& t : threads_) t.join();
    threads_.clear();
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable cv_start_, cv_done_;
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  std::int64_t job_n_ = 0;
  const std::function<void(std::int64_t)>* job_fn_ = nullptr;
  bool stop_ = false;
  int width_ = 0;
  static thread_local bool in_job_;
};

inline thread_local bool ThreadPool::in_job_ = false;

inline void set_workers(int n) { ThreadPool::instance().resize(n); }
inline int workers() { return ThreadPool::instance().width(); }

template <typename Fn>
void parallel_for(std::int64_t n, const Fn& fn) {
  if (n <= 0) return;
  ThreadPool& pool = ThreadPool::instance();
  if (pool.width() == 1 || n == 1) {
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::function<void(std::int64_t)> wrapped = fn;
  pool.run(n, wrapped);
}

}  // namespace zmesh
