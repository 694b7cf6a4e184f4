// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace spanattn {

/// Byte-level vocabulary: ids 0-255 are raw bytes, followed by specials.
inline constexpr int kTokBos = 256;
inline constexpr int kTokEos = 257;
inline constexpr int kTokPad = 258;
inline constexpr int kTokSep = 259;
inline constexpr std::size_t kVocabSize = 260;

std::vector<int> encode(std::string_view text);
/// Special tokens are dropped; ids outside the vocabulary raise InputError.
std::string decode(std::span<const int> tokens);

}  // namespace spanattn
