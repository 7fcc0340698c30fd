#include "vx/parallel.hpp"

#include <atomic>
#include <condition_variable>
#include <mutex>
#include <thread>
#include <vector>

namespace vx {
namespace {

int default_threads() {
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

int g_max_threads = default_threads();

// Lazily started pool of g_max_threads-1 workers; the calling thread also
// executes chunks so a pool of size 1 degenerates to a plain loop.
class Pool {
 public:
  static Pool& instance() {
    // Deliberately leaked: workers park on the condition variable for the
    // process lifetime, so the destructor must never run.
    static Pool* pool = new Pool();
    return *pool;
  }

  void run(std::size_t n, std::size_t grain,
           const std::function<void(std::size_t, std::size_t)>& fn,
           int threads) {
    std::size_t chunks = (n + grain - 1) / grain;
    if (chunks < 1) chunks = 1;
    const std::size_t workers =
        std::min<std::size_t>(static_cast<std::size_t>(threads), chunks);
    if (workers <= 1) {
      fn(0, n);
      return;
    }
    ensure_workers(workers - 1);

    std::size_t chunk = (n + workers - 1) / workers;
    if (chunk < grain) chunk = grain;

    {
      std::lock_guard<std::mutex> lk(mu_);
      job_fn_ = &fn;
      job_n_ = n;
      job_chunk_ = chunk;
      next_.store(0, std::memory_order_relaxed);
      pending_ = static_cast<int>(workers - 1);
      ++job_id_;
    }
    cv_.notify_all();

    work();  // caller participates

    std::unique_lock<std::mutex> lk(mu_);
    done_cv_.wait(lk, [&] { return pending_ == 0; });
    job_fn_ = nullptr;
  }

 private:
  Pool() = default;

  void ensure_workers(std::size_t count) {
    while (threads_.size() < count) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return job_id_ != seen; });
      seen = job_id_;
      lk.unlock();
      work();
      lk.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  void work() {
    const auto* fn = job_fn_;
    const std::size_t n = job_n_;
    const std::size_t chunk = job_chunk_;
    for (;;) {
      const std::size_t begin = next_.fetch_add(chunk, std::memory_order_relaxed);
      if (begin >= n) break;
      (*fn)(begin, std::min(begin + chunk, n));
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::condition_variable done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(std::size_t, std::size_t)>* job_fn_ = nullptr;
  std::size_t job_n_ = 0;
  std::size_t job_chunk_ = 0;
  std::atomic<std::size_t> next_{0};
  int pending_ = 0;
  std::uint64_t job_id_ = 0;
};

}  // namespace

int max_threads() { return g_max_threads; }

void set_max_threads(int n) {
  g_max_threads = n < 1 ? default_threads() : n;
}

void parallel_for(std::size_t n, std::size_t grain,
                  const std::function<void(std::size_t, std::size_t)>& fn) {
  if (n == 0) return;
  const int threads = g_max_threads;
  if (threads <= 1 || n <= grain) {
    fn(0, n);
    return;
  }
  Pool::instance().run(n, grain, fn, threads);
}

}  // namespace vx
