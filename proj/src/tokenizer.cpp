// SPDX-License-Identifier: Apache-2.0
#include "spanattn/tokenizer.hpp"

#include "spanattn/errors.hpp"

namespace spanattn {

std::vector<int> encode(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(static_cast<int>(c));
    }
    return out;
}

std::string decode(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t >= static_cast<int>(kVocabSize)) {
            throw InputError("token id " + std::to_string(t) + " outside the byte vocabulary");
        }
        if (t < 256) {
            out.push_back(static_cast<char>(t));
        }
    }
    return out;
}

}  // namespace spanattn
