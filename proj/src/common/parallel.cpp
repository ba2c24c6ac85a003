#include "common/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <exception>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

namespace voxelseg {
namespace {

thread_local bool t_inside_task = false;

class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) threads_.emplace_back([this] { loop(); });
  }

  ~Pool() {
    {
      std::lock_guard lock(mutex_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto& t : threads_) t.join();
  }

  int size() const { return static_cast<int>(threads_.size()); }

  void run(std::size_t n, const std::function<void(std::size_t)>& task) {
    std::unique_lock lock(mutex_);
    task_ = &task;
    total_ = n;
    next_.store(0);
    active_ = static_cast<int>(threads_.size());
    error_ = nullptr;
    ++generation_;
    wake_.notify_all();
    lock.unlock();

    drain();

    lock.lock();
    done_.wait(lock, [this] { return active_ == 0; });
    task_ = nullptr;
    if (error_) std::rethrow_exception(error_);
  }

 private:
  void drain() {
    t_inside_task = true;
    for (;;) {
      const std::size_t i = next_.fetch_add(1);
      if (i >= total_) break;
      try {
        (*task_)(i);
      } catch (...) {
        std::lock_guard lock(mutex_);
        if (!error_) error_ = std::current_exception();
      }
    }
    t_inside_task = false;
  }

  void loop() {
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock lock(mutex_);
      wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      lock.unlock();
      drain();
      lock.lock();
      if (--active_ == 0) done_.notify_all();
    }
  }

  std::vector<std::thread> threads_;
  std::mutex mutex_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* task_ = nullptr;
  std::size_t total_ = 0;
  std::atomic<std::size_t> next_{0};
  int active_ = 0;
  std::uint64_t generation_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

std::mutex g_config_mutex;
int g_threads = 1;
std::unique_ptr<Pool> g_pool;

}  // namespace

void set_thread_count(int n) {
  n = std::max(1, n);
  std::lock_guard lock(g_config_mutex);
  if (n == g_threads) return;
  g_pool.reset();
  g_threads = n;
  if (n > 1) g_pool = std::make_unique<Pool>(n - 1);
}

int thread_count() noexcept { return g_threads; }

void parallel_for(std::size_t n, const std::function<void(std::size_t)>& task) {
  if (n == 0) return;
  if (g_threads <= 1 || n == 1 || t_inside_task || !g_pool) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::lock_guard lock(g_config_mutex);
  g_pool->run(n, task);
}

}  // namespace voxelseg
