#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace rhl {

/// Runs produce(i) for i in [0, n) on `threads` workers and hands the results
/// to consume(i, result) on the calling thread in increasing i, so reductions
/// are bit-identical for any worker count. Producers stay at most
/// 2 * threads items ahead of the consumer to bound memory.
template <class Produce, class Consume>
void ordered_parallel(std::size_t n, int threads, Produce&& produce, Consume&& consume) {
  using Result = decltype(produce(std::size_t{0}));
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) consume(i, produce(i));
    return;
  }
  const auto workers = static_cast<std::size_t>(std::min<std::size_t>(static_cast<std::size_t>(threads), n));
  const std::size_t window = 2 * workers;

  std::mutex mu;
  std::condition_variable cv;
  std::map<std::size_t, Result> ready;
  std::size_t next_task = 0;
  std::size_t next_consume = 0;
  std::exception_ptr error;

  auto work = [&] {
    for (;;) {
      std::size_t i;
      {
        std::unique_lock<std::mutex> lock(mu);
        cv.wait(lock, [&] { return error || next_task >= n || next_task < next_consume + window; });
        if (error || next_task >= n) return;
        i = next_task++;
      }
      try {
        Result r = produce(i);
        std::lock_guard<std::mutex> lock(mu);
        ready.emplace(i, std::move(r));
      } catch (...) {
        std::lock_guard<std::mutex> lock(mu);
        if (!error) error = std::current_exception();
      }
      cv.notify_all();
    }
  };

  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);

  try {
    while (next_consume < n) {
      std::optional<Result> item;
      {
        std::unique_lock<std::mutex> lock(mu);
        cv.wait(lock, [&] { return error || ready.count(next_consume) > 0; });
        if (error) break;
        auto it = ready.find(next_consume);
        item.emplace(std::move(it->second));
        ready.erase(it);
      }
      consume(next_consume, std::move(*item));
      {
        std::lock_guard<std::mutex> lock(mu);
        ++next_consume;
      }
      cv.notify_all();
    }
  } catch (...) {
    std::lock_guard<std::mutex> lock(mu);
    if (!error) error = std::current_exception();
  }
  cv.notify_all();
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace rhl
