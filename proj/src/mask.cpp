// SPDX-License-Identifier: Apache-2.0
#include "spanattn/mask.hpp"

#include <sstream>

#include "spanattn/errors.hpp"

namespace spanattn {

std::string mask_to_rle(const AdditiveMask& mask) {
    std::ostringstream out;
    out << mask.rows() << ' ' << mask.cols() << '\n';
    for (std::size_t r = 0; r < mask.rows(); ++r) {
        auto row = mask.row(r);
        bool first = true;
        for (std::size_t c = 0; c < row.size();) {
            if (!row[c]) {
                ++c;
                continue;
            }
            std::size_t e = c;
            while (e < row.size() && row[e]) {
                ++e;
            }
            out << (first ? "" : " ") << c << '+' << (e - c);
            first = false;
            c = e;
        }
        out << '\n';
    }
    return out.str();
}

AdditiveMask mask_from_rle(std::string_view text) {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t rows = 0, cols = 0;
    if (!std::getline(in, line) || !(std::istringstream(line) >> rows >> cols)) {
        throw InputError("mask RLE: missing 'rows cols' header");
    }
    AdditiveMask m(rows, cols);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!std::getline(in, line)) {
            throw InputError("mask RLE: expected " + std::to_string(rows) + " rows, got " + std::to_string(r));
        }
        std::istringstream runs(line);
        for (std::string tok; runs >> tok;) {
            const auto plus = tok.find('+');
            std::size_t start = 0, len = 0;
            try {
                if (plus == std::string::npos) throw std::invalid_argument(tok);
                start = std::stoul(tok.substr(0, plus));
                len = std::stoul(tok.substr(plus + 1));
            } catch (const std::exception&) {
                throw InputError("mask RLE: bad run '" + tok + "' in row " + std::to_string(r));
            }
            if (start + len > cols) {
                throw InputError("mask RLE: run past the last column in row " + std::to_string(r));
            }
            m.set_row_range(r, start, start + len);
        }
    }
    return m;
}

}  // namespace spanattn
