#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <exception>
#include <mutex>
#include <optional>
#include <thread>
#include <vector>

namespace biaslab {

/// Number of worker threads to use; 0 means hardware concurrency.
inline unsigned resolve_threads(unsigned requested) {
    if (requested != 0) return requested;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1u : hw;
}

/// Computes `compute(c)` for every chunk c in [0, chunks) on up to `threads` workers and feeds
/// the partial results to `merge` strictly in chunk-index order. The merged result therefore
/// does not depend on the thread count or on scheduling.
template <class Partial, class Compute, class Merge>
void ordered_chunk_reduce(std::size_t chunks, unsigned threads, Compute&& compute, Merge&& merge) {
    const std::size_t workers = std::min<std::size_t>(resolve_threads(threads), chunks);
    if (workers <= 1) {
        for (std::size_t c = 0; c < chunks; ++c) merge(compute(c));
        return;
    }

    std::vector<std::optional<Partial>> pending(chunks);
    std::atomic<std::size_t> next_task{0};
    std::atomic<bool> failed{false};
    std::mutex mutex;
    std::size_t next_merge = 0;
    std::exception_ptr error;

    auto work = [&] {
        for (;;) {
            if (failed.load()) return;
            const std::size_t c = next_task.fetch_add(1);
            if (c >= chunks) return;
            try {
                Partial part = compute(c);
                std::lock_guard lock(mutex);
                pending[c].emplace(std::move(part));
                while (next_merge < chunks && pending[next_merge]) {
                    merge(std::move(*pending[next_merge]));
                    pending[next_merge].reset();
                    ++next_merge;
                }
            } catch (...) {
                std::lock_guard lock(mutex);
                if (!error) error = std::current_exception();
                failed.store(true);
                return;
            }
        }
    };

    {
        std::vector<std::jthread> pool;
        pool.reserve(workers);
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    }
    if (error) std::rethrow_exception(error);
}

/// Neumaier-compensated running sums over a fixed-size array.
class CompensatedArray {
public:
    CompensatedArray() = default;
    explicit CompensatedArray(std::size_t n) : sum_(n, 0.0), comp_(n, 0.0) {}

    std::size_t size() const noexcept { return sum_.size(); }

    void add(std::size_t i, double x) noexcept {
        const double s = sum_[i];
        const double t = s + x;
        if (std::abs(s) >= std::abs(x))
            comp_[i] += (s - t) + x;
        else
            comp_[i] += (x - t) + s;
        sum_[i] = t;
    }

    /// Adds every entry of `values` (same length) and leaves `values` untouched.
    template <class Range>
    void add_all(const Range& values) noexcept {
        std::size_t i = 0;
        for (double v : values) add(i++, v);
    }

    void merge(const CompensatedArray& other) noexcept {
        for (std::size_t i = 0; i < sum_.size(); ++i) {
            add(i, other.sum_[i]);
            add(i, other.comp_[i]);
        }
    }

    double value(std::size_t i) const noexcept { return sum_[i] + comp_[i]; }

private:
    std::vector<double> sum_;
    std::vector<double> comp_;
};

}  // namespace biaslab
