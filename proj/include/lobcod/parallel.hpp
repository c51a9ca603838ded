#pragma once

#include <condition_variable>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lobcod {

/// Fixed-size worker pool for data-parallel loops over disjoint index ranges.
/// parallel_for splits [0, count) into one contiguous chunk per worker; the
/// calling thread works too, so a pool of size 1 runs everything inline.
/// Work items must write to disjoint state; results are then independent of
/// the worker count and of scheduling.
class ThreadPool {
 public:
  explicit ThreadPool(int threads) {
    if (threads <= 0) {
      unsigned hw = std::thread::hardware_concurrency();
      threads = hw == 0 ? 1 : static_cast<int>(hw);
    }
    size_ = threads;
    workers_.reserve(static_cast<std::size_t>(size_ - 1));
    for (int i = 1; i < size_; ++i) workers_.emplace_back([this, i] { worker_loop(i); });
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_work_.notify_all();
    for (std::thread& t : workers_) t.join();
  }

  int size() const { return size_; }

  /// Runs fn(begin, end) over a static partition of [0, count). Blocks until
  /// every chunk finished. The first exception (from the lowest chunk index)
  /// is rethrown on the caller.
  void parallel_for(int count, const std::function<void(int, int)>& fn) {
    if (count <= 0) return;
    if (size_ == 1 || count == 1) {
      fn(0, count);
      return;
    }
    const int chunks = std::min(size_, count);
    {
      std::lock_guard<std::mutex> lock(mu_);
      fn_ = &fn;
      count_ = count;
      chunks_ = chunks;
      next_chunk_ = 0;
      done_chunks_ = 0;
      errors_.assign(static_cast<std::size_t>(chunks), nullptr);
      ++generation_;
    }
    cv_work_.notify_all();
    run_chunks();
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_done_.wait(lock, [this] { return done_chunks_ == chunks_; });
      fn_ = nullptr;
      for (const std::exception_ptr& e : errors_)
        if (e) std::rethrow_exception(e);
    }
  }

 private:
  void worker_loop(int /*worker_index*/) {
    std::uint64_t seen = 0;
    for (;;) {
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_work_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      run_chunks();
    }
  }

  void run_chunks() {
    for (;;) {
      int chunk;
      const std::function<void(int, int)>* fn;
      int count, chunks;
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (fn_ == nullptr || next_chunk_ >= chunks_) return;
        chunk = next_chunk_++;
        fn = fn_;
        count = count_;
        chunks = chunks_;
      }
      const int begin = static_cast<int>((static_cast<long long>(chunk) * count) / chunks);
      const int end = static_cast<int>((static_cast<long long>(chunk + 1) * count) / chunks);
      std::exception_ptr err = nullptr;
      try {
        if (begin < end) (*fn)(begin, end);
      } catch (...) {
        err = std::current_exception();
      }
      {
        std::lock_guard<std::mutex> lock(mu_);
        if (err) errors_[static_cast<std::size_t>(chunk)] = err;
        if (++done_chunks_ == chunks_) cv_done_.notify_all();
      }
    }
  }

  int size_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_work_;
  std::condition_variable cv_done_;
  const std::function<void(int, int)>* fn_ = nullptr;
  int count_ = 0;
  int chunks_ = 0;
  int next_chunk_ = 0;
  int done_chunks_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  std::vector<std::exception_ptr> errors_;
};

}  // namespace lobcod
