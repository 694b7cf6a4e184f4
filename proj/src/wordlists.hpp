// SPDX-License-Identifier: Apache-2.0
// Fixed word pools for the synthetic task generators.
#pragma once

#include <array>
#include <string_view>

namespace spanattn::words {

inline constexpr std::array<std::string_view, 64> kAdjectives = {
    "ancient", "bitter",  "brave",   "bright",  "calm",    "clever",  "cold",    "coral",   "crisp",   "curious",
    "dark",    "deep",    "dusty",   "eager",   "early",   "faint",   "fancy",   "fierce",  "frozen",  "gentle",
    "giant",   "golden",  "grand",   "green",   "hidden",  "hollow",  "humble",  "icy",     "idle",    "jolly",
    "keen",    "lively",  "lone",    "lucky",   "mellow",  "misty",   "modest",  "narrow",  "noble",   "odd",
    "pale",    "plain",   "polite",  "proud",   "quiet",   "rapid",   "rare",    "rustic",  "sandy",   "secret",
    "silent",  "silver",  "sleepy",  "smooth",  "solemn",  "spiritual", "stormy", "sturdy", "sunny",   "swift",
    "tender",  "tidy",    "velvet",  "windy"};

inline constexpr std::array<std::string_view, 64> kNouns = {
    "anchor", "apple",  "bakery", "barrel", "basket", "beacon", "bridge", "button", "cabin",  "candle",
    "canyon", "castle", "cellar", "chisel", "cloud",  "comet",  "cottage", "desk",  "dragon", "engine",
    "falcon", "feather", "fiddle", "forest", "fountain", "garden", "glacier", "harbor", "helmet", "island",
    "jacket", "kettle", "ladder", "lantern", "meadow", "mirror", "needle", "orchard", "oven",  "paddle",
    "parrot", "pebble", "pillow", "planet", "pocket", "quarry", "rabbit", "ribbon", "river",  "saddle",
    "shovel", "signal", "spoon",  "statue", "teapot", "thimble", "tower",  "tunnel", "valley", "violin",
    "wagon",  "walrus", "window", "wizard"};

/// Pool for the essay-style surrogate haystack.
inline constexpr std::array<std::string_view, 96> kEssay = {
    "the",      "a",        "startup",  "idea",     "people",   "work",     "good",     "best",     "money",
    "time",     "users",    "make",     "think",    "often",    "never",    "always",   "because",  "when",
    "what",     "problem",  "company",  "founders", "product",  "growth",   "early",    "small",    "large",
    "doing",    "seems",    "really",   "most",     "thing",    "things",   "way",      "ways",     "world",
    "learn",    "build",    "write",    "essay",    "question", "answer",   "hard",     "easy",     "new",
    "old",      "kind",     "sort",     "point",    "reason",   "simply",   "probably", "perhaps",  "usually",
    "program",  "language", "code",     "design",   "taste",    "wealth",   "city",     "school",   "friends",
    "investor", "market",   "ambition", "curious",  "patient",  "fast",     "slow",     "surprising", "obvious",
    "true",     "wrong",    "mistake",  "advice",   "careful",  "notice",   "believe",  "try",      "start",
    "finish",   "choose",   "grow",     "change",   "useful",   "rare",     "common",   "strange",  "simple",
    "clear",    "deep",     "wide",     "honest",   "quiet",    "loud"};

}  // namespace spanattn::words
