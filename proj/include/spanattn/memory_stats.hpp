// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <cstddef>
#include <new>

namespace spanattn {

// Process-wide accounting of bytes held by tensor buffers. The profiler
// resets the peak before a measured step and reads it afterwards.
class MemoryStats {
public:
    static void on_alloc(std::size_t bytes) noexcept {
        const std::size_t now = current_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
        std::size_t peak = peak_.load(std::memory_order_relaxed);
        while (now > peak && !peak_.compare_exchange_weak(peak, now, std::memory_order_relaxed)) {
        }
    }
    static void on_free(std::size_t bytes) noexcept {
        current_.fetch_sub(bytes, std::memory_order_relaxed);
    }
    static std::size_t current() noexcept { return current_.load(std::memory_order_relaxed); }
    static std::size_t peak() noexcept { return peak_.load(std::memory_order_relaxed); }
    static void reset_peak() noexcept { peak_.store(current(), std::memory_order_relaxed); }

private:
    static inline std::atomic<std::size_t> current_{0};
    static inline std::atomic<std::size_t> peak_{0};
};

template <typename T>
struct TrackingAllocator {
    using value_type = T;

    TrackingAllocator() noexcept = default;
    template <typename U>
    TrackingAllocator(const TrackingAllocator<U>&) noexcept {}

    T* allocate(std::size_t n) {
        auto* p = static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t{64}));
        MemoryStats::on_alloc(n * sizeof(T));
        return p;
    }
    void deallocate(T* p, std::size_t n) noexcept {
        MemoryStats::on_free(n * sizeof(T));
        ::operator delete(p, std::align_val_t{64});
    }

    template <typename U>
    bool operator==(const TrackingAllocator<U>&) const noexcept { return true; }
};

}  // namespace spanattn
