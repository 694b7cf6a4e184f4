// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spanattn {

/// Per-(query, key) additive bias restricted to {0, -inf}. Stored as a
/// visibility bitmap; `bias()` materializes the additive value.
class AdditiveMask {
public:
    AdditiveMask() = default;
    AdditiveMask(std::size_t rows, std::size_t cols, bool visible = false)
        : rows_(rows), cols_(cols), visible_(rows * cols, visible ? 1 : 0) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    bool visible(std::size_t r, std::size_t c) const noexcept { return visible_[r * cols_ + c] != 0; }
    void set_visible(std::size_t r, std::size_t c, bool on = true) noexcept { visible_[r * cols_ + c] = on ? 1 : 0; }
    void set_row_range(std::size_t r, std::size_t c0, std::size_t c1, bool on = true) noexcept {
        for (std::size_t c = c0; c < c1; ++c) {
            visible_[r * cols_ + c] = on ? 1 : 0;
        }
    }

    template <typename T>
    T bias(std::size_t r, std::size_t c) const noexcept {
        return visible(r, c) ? T{0} : -std::numeric_limits<T>::infinity();
    }

    std::span<const std::uint8_t> row(std::size_t r) const noexcept { return {visible_.data() + r * cols_, cols_}; }

    std::size_t visible_count(std::size_t r) const noexcept {
        std::size_t n = 0;
        for (std::size_t c = 0; c < cols_; ++c) {
            n += visible_[r * cols_ + c];
        }
        return n;
    }

    bool operator==(const AdditiveMask&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::uint8_t> visible_;
};

/// Text form: a "rows cols" header, then one line per row listing the
/// visible runs as "start+length" separated by spaces.
std::string mask_to_rle(const AdditiveMask& mask);
/// Inverse of mask_to_rle; malformed input raises InputError.
AdditiveMask mask_from_rle(std::string_view text);

}  // namespace spanattn
