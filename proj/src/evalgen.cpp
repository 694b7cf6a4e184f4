// SPDX-License-Identifier: Apache-2.0
#include "spanattn/evalgen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "spanattn/errors.hpp"
#include "spanattn/random.hpp"
#include "spanattn/tokenizer.hpp"
#include "wordlists.hpp"

namespace spanattn {

namespace {

constexpr std::string_view kRepeat[] = {"The grass is green. ", "The sky is blue. ", "The sun is yellow. ",
                                        "Here we go. ", "There and back again. "};

// Transition structure of the essay surrogate is fixed for all instances.
constexpr std::uint64_t kEssayGraphSeed = 0x45535341;
constexpr std::size_t kEssayFanout = 6;

std::size_t uniform_index(Rng& rng, std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i > 0) {
            out += sep;
        }
        out += parts[i];
    }
    return out;
}

std::string make_uuid(Rng& rng) {
    static constexpr char hex[] = "0123456789abcdef";
    std::string s;
    for (int i = 0; i < 32; ++i) {
        if (i == 8 || i == 12 || i == 16 || i == 20) {
            s.push_back('-');
        }
        s.push_back(hex[rng() & 15]);
    }
    return s;
}

std::string make_word_key(Rng& rng) {
    return std::string(words::kAdjectives[uniform_index(rng, words::kAdjectives.size())]) + "-" +
           std::string(words::kNouns[uniform_index(rng, words::kNouns.size())]);
}

std::string make_number(Rng& rng) {
    return std::to_string(std::uniform_int_distribution<int>(1000000, 9999999)(rng));
}

/// Draws values from `make` until one is not in `used`.
template <typename F>
std::string fresh(std::set<std::string>& used, Rng& rng, F make) {
    for (int attempt = 0; attempt < 10000; ++attempt) {
        std::string s = make(rng);
        if (used.insert(s).second) {
            return s;
        }
    }
    throw GenerationError("could not draw a distinct value");
}

std::string needle_sentence(const std::string& key, const std::string& value) {
    return "The magic number for " + key + " is " + value + ". ";
}

class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    virtual std::string next(Rng& rng) = 0;
};

class RepeatNoise : public NoiseSource {
public:
    std::string next(Rng&) override { return std::string(kRepeat[i_++ % std::size(kRepeat)]); }

private:
    std::size_t i_ = 0;
};

class EssayNoise : public NoiseSource {
public:
    EssayNoise() {
        Rng g(kEssayGraphSeed);
        succ_.resize(words::kEssay.size());
        for (auto& s : succ_) {
            for (std::size_t k = 0; k < kEssayFanout; ++k) {
                s.push_back(uniform_index(g, words::kEssay.size()));
            }
        }
    }
    std::string next(Rng& rng) override {
        const std::size_t len = 5 + uniform_index(rng, 9);
        std::size_t w = uniform_index(rng, words::kEssay.size());
        std::string out;
        for (std::size_t i = 0; i < len; ++i) {
            std::string word(words::kEssay[w]);
            if (i == 0) {
                word[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(word[0])));
            }
            out += word;
            out += i + 1 == len ? ". " : " ";
            w = succ_[w][uniform_index(rng, kEssayFanout)];
        }
        return out;
    }

private:
    std::vector<std::vector<std::size_t>> succ_;
};

class NeedleNoise : public NoiseSource {
public:
    NeedleNoise(NeedleKeyKind kk, NeedleValueKind vk, std::set<std::string>& keys, std::set<std::string>& values)
        : kk_(kk), vk_(vk), keys_(keys), values_(values) {}
    std::string next(Rng& rng) override {
        auto key = fresh(keys_, rng, [&](Rng& r) { return kk_ == NeedleKeyKind::Words ? make_word_key(r) : make_uuid(r); });
        auto value =
            fresh(values_, rng, [&](Rng& r) { return vk_ == NeedleValueKind::Numbers ? make_number(r) : make_uuid(r); });
        return needle_sentence(key, value);
    }

private:
    NeedleKeyKind kk_;
    NeedleValueKind vk_;
    std::set<std::string>& keys_;
    std::set<std::string>& values_;
};

struct Insert {
    std::string text;
    std::size_t group = 0;  // inserts of one group keep their relative order
};

struct Assembly {
    std::string text;
    std::vector<std::size_t> offsets;
    std::vector<std::size_t> slots;
    std::size_t num_slots = 0;
};

/// Builds `budget` bytes of haystack with the inserts placed at uniformly
/// drawn sentence boundaries. The first noise sentence is cut from the left
/// so the total is exact.
Assembly assemble(NoiseSource& noise, const std::vector<Insert>& inserts, std::size_t budget, Rng& rng) {
    std::size_t insert_bytes = 0;
    for (const auto& in : inserts) {
        insert_bytes += in.text.size();
    }
    if (insert_bytes > budget) {
        throw GenerationError("context too small: needles need " + std::to_string(insert_bytes) +
                              " bytes, haystack budget is " + std::to_string(budget));
    }
    const std::size_t noise_bytes = budget - insert_bytes;
    std::vector<std::string> sentences;
    std::size_t have = 0;
    while (have < noise_bytes) {
        sentences.push_back(noise.next(rng));
        have += sentences.back().size();
    }
    // Cut the overshoot from the left; it is shorter than the last sentence
    // but may span several short ones at the front.
    std::size_t excess = have - noise_bytes;
    while (excess > 0 && excess >= sentences.front().size()) {
        excess -= sentences.front().size();
        sentences.erase(sentences.begin());
    }
    if (excess > 0) {
        sentences.front().erase(0, excess);
    }
    Assembly a;
    a.num_slots = sentences.size() + 1;
    a.slots.resize(inserts.size());
    for (auto& s : a.slots) {
        s = uniform_index(rng, a.num_slots);
    }
    // Within a group, hand out the drawn slots in sorted order.
    std::map<std::size_t, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < inserts.size(); ++i) {
        groups[inserts[i].group].push_back(i);
    }
    for (auto& [g, idx] : groups) {
        std::vector<std::size_t> drawn;
        for (auto i : idx) {
            drawn.push_back(a.slots[i]);
        }
        std::sort(drawn.begin(), drawn.end());
        for (std::size_t k = 0; k < idx.size(); ++k) {
            a.slots[idx[k]] = drawn[k];
        }
    }
    a.offsets.resize(inserts.size());
    for (std::size_t slot = 0; slot < a.num_slots; ++slot) {
        for (std::size_t i = 0; i < inserts.size(); ++i) {
            if (a.slots[i] == slot) {
                a.offsets[i] = a.text.size();
                a.text += inserts[i].text;
            }
        }
        if (slot < sentences.size()) {
            a.text += sentences[slot];
        }
    }
    return a;
}

std::unique_ptr<NoiseSource> make_noise(HaystackKind kind, const NIAHSpec& spec, std::set<std::string>& keys,
                                        std::set<std::string>& values) {
    switch (kind) {
        case HaystackKind::Repeat: return std::make_unique<RepeatNoise>();
        case HaystackKind::EssaySurrogate: return std::make_unique<EssayNoise>();
        case HaystackKind::Needle: return std::make_unique<NeedleNoise>(spec.key_kind, spec.value_kind, keys, values);
    }
    return std::make_unique<RepeatNoise>();
}

/// Haystack of exactly `bytes` repeat-noise characters (left-trimmed).
std::string filler(std::size_t bytes) {
    RepeatNoise n;
    Rng unused(0);
    std::string s;
    while (s.size() < bytes) {
        s += n.next(unused);
    }
    return s.substr(s.size() - bytes);
}

std::string with_list(const std::vector<std::string>& keys) {
    if (keys.size() == 1) {
        return keys[0];
    }
    std::vector<std::string> head(keys.begin(), keys.end() - 1);
    return join(head, ", ") + " and " + keys.back();
}

}  // namespace

std::vector<int> TaskInstance::tokens() const {
    return encode(prompt + target);
}

std::string TaskInstance::to_json() const {
    nlohmann::json j;
    j["task"] = task;
    j["seed"] = seed;
    j["context_length"] = context_length;
    j["text"] = prompt;
    j["target"] = target;
    j["answers"] = answers;
    nlohmann::json meta;
    meta["num_slots"] = num_slots;
    meta["query_offset"] = query_offset;
    meta["needles"] = nlohmann::json::array();
    for (const auto& n : needles) {
        meta["needles"].push_back(
            {{"key", n.key}, {"value", n.value}, {"slot", n.slot}, {"char_offset", n.char_offset}});
    }
    j["metadata"] = meta;
    return j.dump();
}

TaskInstance TaskInstance::from_json(std::string_view line) {
    TaskInstance t;
    try {
        auto j = nlohmann::json::parse(line);
        t.task = j.at("task");
        t.seed = j.at("seed");
        t.context_length = j.at("context_length");
        t.prompt = j.at("text");
        t.target = j.at("target");
        t.answers = j.at("answers").get<std::vector<std::string>>();
        const auto& meta = j.at("metadata");
        t.num_slots = meta.at("num_slots");
        t.query_offset = meta.at("query_offset");
        for (const auto& n : meta.at("needles")) {
            t.needles.push_back({n.at("key"), n.at("value"), n.at("slot"), n.at("char_offset")});
        }
    } catch (const nlohmann::json::exception& e) {
        throw InputError(std::string("task instance JSON: ") + e.what());
    }
    return t;
}

std::span<const std::string_view> repeat_noise_sentences() {
    return kRepeat;
}

NIAHSpec niah_preset(std::string_view task, std::size_t context_length, std::uint64_t seed) {
    using H = HaystackKind;
    using K = NeedleKeyKind;
    using V = NeedleValueKind;
    struct Row {
        std::string_view name;
        H th;
        K tk;
        V tv;
        std::size_t nk, nv, nq;
    };
    static constexpr Row rows[] = {
        {"niah_single_1", H::Repeat, K::Words, V::Numbers, 1, 1, 1},
        {"niah_single_2", H::EssaySurrogate, K::Words, V::Numbers, 1, 1, 1},
        {"niah_single_3", H::EssaySurrogate, K::Words, V::Uuids, 1, 1, 1},
        {"niah_multikey_1", H::EssaySurrogate, K::Words, V::Numbers, 4, 1, 1},
        {"niah_multikey_2", H::Needle, K::Words, V::Numbers, 1, 1, 1},
        {"niah_multikey_3", H::Needle, K::Uuids, V::Uuids, 1, 1, 1},
        {"niah_multivalue", H::EssaySurrogate, K::Words, V::Numbers, 1, 4, 1},
        {"niah_multiquery", H::EssaySurrogate, K::Words, V::Numbers, 1, 1, 4},
    };
    for (const auto& r : rows) {
        if (r.name == task) {
            NIAHSpec s;
            s.haystack = r.th;
            s.key_kind = r.tk;
            s.value_kind = r.tv;
            s.num_keys = std::max(r.nk, r.nq);
            s.num_values = r.nv;
            s.num_queries = r.nq;
            s.context_length = context_length;
            s.seed = seed;
            return s;
        }
    }
    throw ConfigError("unknown NIAH task '" + std::string(task) + "'");
}

TaskInstance gen_niah(const NIAHSpec& spec) {
    if (spec.num_keys == 0 || spec.num_values == 0 || spec.num_queries == 0) {
        throw GenerationError("NIAH: key, value and query counts must be positive");
    }
    if (spec.num_queries > spec.num_keys) {
        throw GenerationError("NIAH: cannot query more keys than are inserted");
    }
    Rng rng(derive_seed(spec.seed, {0x4e494148}));
    std::set<std::string> used_keys;
    std::set<std::string> used_values;
    std::vector<std::string> keys;
    for (std::size_t i = 0; i < spec.num_keys; ++i) {
        keys.push_back(fresh(used_keys, rng, [&](Rng& r) {
            return spec.key_kind == NeedleKeyKind::Words ? make_word_key(r) : make_uuid(r);
        }));
    }
    std::vector<std::vector<std::string>> values(spec.num_keys);
    std::vector<Insert> inserts;
    std::vector<std::pair<std::size_t, std::size_t>> owner;  // (key, value) per insert
    for (std::size_t k = 0; k < spec.num_keys; ++k) {
        for (std::size_t v = 0; v < spec.num_values; ++v) {
            values[k].push_back(fresh(used_values, rng, [&](Rng& r) {
                return spec.value_kind == NeedleValueKind::Numbers ? make_number(r) : make_uuid(r);
            }));
            inserts.push_back({needle_sentence(keys[k], values[k][v]), inserts.size()});
            owner.emplace_back(k, v);
        }
    }
    // Queried keys: a seeded choice among the inserted ones, in key order.
    std::vector<std::size_t> order(spec.num_keys);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> queried(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(spec.num_queries));
    std::sort(queried.begin(), queried.end());

    std::vector<std::string> qkeys;
    TaskInstance inst;
    for (auto k : queried) {
        qkeys.push_back(keys[k]);
        for (const auto& v : values[k]) {
            inst.answers.push_back(v);
        }
    }
    std::string query;
    if (spec.num_queries > 1) {
        query = "\nQ: What are the magic numbers for " + with_list(qkeys) + "? A: ";
    } else if (spec.num_values > 1) {
        query = "\nQ: What are all the magic numbers for " + qkeys[0] + "? A: ";
    } else {
        query = "\nQ: What is the magic number for " + qkeys[0] + "? A: ";
    }
    inst.target = join(inst.answers, ", ");
    const std::size_t fixed = query.size() + inst.target.size();
    if (fixed >= spec.context_length) {
        throw GenerationError("context too small for the query and answer");
    }
    auto noise = make_noise(spec.haystack, spec, used_keys, used_values);
    auto a = assemble(*noise, inserts, spec.context_length - fixed, rng);

    static constexpr std::string_view names[] = {"repeat", "essay", "needle"};
    inst.task = "niah_" + std::string(names[static_cast<int>(spec.haystack)]);
    inst.seed = spec.seed;
    inst.context_length = spec.context_length;
    inst.num_slots = a.num_slots;
    for (std::size_t i = 0; i < inserts.size(); ++i) {
        inst.needles.push_back({keys[owner[i].first], values[owner[i].first][owner[i].second], a.slots[i], a.offsets[i]});
    }
    inst.query_offset = a.text.size();
    inst.prompt = a.text + query;
    return inst;
}

TaskInstance gen_variable_tracking(std::size_t chains, std::size_t hops, std::size_t context_length,
                                   std::uint64_t seed) {
    if (hops == 0 || chains == 0) {
        throw GenerationError("variable tracking needs at least one chain and one hop");
    }
    Rng rng(derive_seed(seed, {0x5654}));
    std::set<std::string> names;
    std::set<std::string> vals;
    auto make_name = [](Rng& r) {
        std::string s;
        for (int i = 0; i < 5; ++i) {
            s.push_back(static_cast<char>('A' + r() % 26));
        }
        return s;
    };
    std::vector<Insert> inserts;
    TaskInstance inst;
    std::string final_value;
    for (std::size_t c = 0; c < chains; ++c) {
        const std::string value =
            fresh(vals, rng, [](Rng& r) { return std::to_string(std::uniform_int_distribution<int>(10000, 99999)(r)); });
        std::string prev = fresh(names, rng, make_name);
        inserts.push_back({"VAR " + prev + " = " + value + ". ", c});
        if (c == 0) {
            final_value = value;
            inst.answers.push_back(prev);
        }
        for (std::size_t h = 0; h < hops; ++h) {
            std::string next = fresh(names, rng, make_name);
            inserts.push_back({"VAR " + next + " = VAR " + prev + ". ", c});
            if (c == 0) {
                inst.answers.push_back(next);
            }
            prev = next;
        }
    }
    const std::string query = "\nQ: Which variables are assigned the value " + final_value + "? A: ";
    inst.target = join(inst.answers, ", ");
    const std::size_t fixed = query.size() + inst.target.size();
    if (fixed >= context_length) {
        throw GenerationError("context too small for the variable tracking query");
    }
    RepeatNoise noise;
    auto a = assemble(noise, inserts, context_length - fixed, rng);
    inst.task = "vt";
    inst.seed = seed;
    inst.context_length = context_length;
    inst.num_slots = a.num_slots;
    for (std::size_t i = 0; i < inserts.size(); ++i) {
        inst.needles.push_back({"", inserts[i].text, a.slots[i], a.offsets[i]});
    }
    inst.query_offset = a.text.size();
    inst.prompt = a.text + query;
    return inst;
}

TaskInstance gen_words_extraction(WordsKind kind, const WordsParams& p, std::uint64_t seed) {
    Rng rng(derive_seed(seed, {kind == WordsKind::Common ? 0x435745ULL : 0x465745ULL}));
    std::vector<std::string> list;
    TaskInstance inst;
    std::string query;
    auto fits = [&](std::size_t list_bytes, std::size_t answer_bytes) {
        return p.context_length == 0 ||
               std::string("Words: ").size() + list_bytes + query.size() + answer_bytes <= p.context_length;
    };
    if (kind == WordsKind::Common) {
        if (p.num_cw == 0 || p.freq_cw == 0 || p.freq_ucw >= p.freq_cw) {
            throw GenerationError("common words: need num_cw > 0 and freq_ucw < freq_cw");
        }
        std::vector<std::string> pool;
        for (auto w : words::kNouns) pool.emplace_back(w);
        for (auto w : words::kAdjectives) pool.emplace_back(w);
        std::shuffle(pool.begin(), pool.end(), rng);
        if (p.num_cw > pool.size()) {
            throw GenerationError("common words: word pool too small");
        }
        std::vector<std::string> common(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(p.num_cw));
        query = "\nQ: What are the " + std::to_string(p.num_cw) + " most common words? A: ";
        inst.answers = common;
        const std::string target = join(common, ", ");
        std::size_t bytes = 0;
        for (const auto& w : common) {
            for (std::size_t r = 0; r < p.freq_cw; ++r) {
                list.push_back(w);
                bytes += w.size() + 1;
            }
        }
        if (!fits(bytes, target.size())) {
            throw GenerationError("common words: list does not fit in context " + std::to_string(p.context_length));
        }
        const std::size_t max_ucw = pool.size() - p.num_cw;
        if (p.num_ucw > max_ucw) {
            throw GenerationError("common words: word pool too small for the distractors");
        }
        // Fill mode with an auto-sized context has nothing to fill, so it uses a fixed ratio.
        std::size_t limit = p.num_ucw;
        if (limit == 0) {
            limit = p.context_length == 0 ? std::min(max_ucw, 4 * p.num_cw) : max_ucw;
        }
        for (std::size_t u = 0; u < limit; ++u) {
            const std::string& w = pool[p.num_cw + u];
            const std::size_t extra = p.freq_ucw * (w.size() + 1);
            if (!fits(bytes + extra, target.size())) {
                if (p.num_ucw != 0) {
                    throw GenerationError("common words: distractors do not fit");
                }
                break;
            }
            for (std::size_t r = 0; r < p.freq_ucw; ++r) {
                list.push_back(w);
            }
            bytes += extra;
        }
        inst.task = "cwe";
        inst.target = target;
    } else {
        if (p.top == 0 || p.vocab <= p.top || !(p.alpha > 0.0)) {
            throw GenerationError("frequent words: need vocab > top > 0 and alpha > 0");
        }
        std::set<std::string> used;
        std::vector<std::string> vocab;
        for (std::size_t i = 0; i < p.vocab; ++i) {
            vocab.push_back(fresh(used, rng, [](Rng& r) {
                std::string s;
                const int len = 4 + static_cast<int>(r() % 4);
                for (int k = 0; k < len; ++k) {
                    s.push_back(static_cast<char>('a' + r() % 26));
                }
                return s;
            }));
        }
        std::vector<double> weights(p.vocab);
        for (std::size_t r = 0; r < p.vocab; ++r) {
            weights[r] = std::pow(static_cast<double>(r + 1), -p.alpha);
        }
        std::discrete_distribution<std::size_t> zipf(weights.begin(), weights.end());
        query = "\nQ: What are the " + std::to_string(p.top) + " most frequent words? A: ";
        // Reserve room for the longest possible answer.
        std::size_t longest = 0;
        for (const auto& w : vocab) {
            longest = std::max(longest, w.size());
        }
        const std::size_t answer_reserve = p.top * (longest + 2);
        std::vector<std::size_t> counts;
        std::vector<std::size_t> seq;
        const std::size_t target_n = p.num_words != 0 ? p.num_words : (p.context_length == 0 ? 100 : SIZE_MAX);
        // Short lists occasionally contain fewer than `top` distinct words; redraw those.
        for (int attempt = 0;; ++attempt) {
            if (attempt == 100) {
                throw GenerationError("frequent words: context too small for " + std::to_string(p.top) +
                                      " distinct words");
            }
            counts.assign(p.vocab, 0);
            seq.clear();
            std::size_t bytes = 0;
            while (seq.size() < target_n) {
                const std::size_t w = zipf(rng);
                if (!fits(bytes + vocab[w].size() + 1, answer_reserve)) {
                    if (p.num_words != 0) {
                        throw GenerationError("frequent words: list does not fit");
                    }
                    break;
                }
                seq.push_back(w);
                ++counts[w];
                bytes += vocab[w].size() + 1;
            }
            if (static_cast<std::size_t>(std::count_if(counts.begin(), counts.end(), [](std::size_t c) {
                    return c > 0;
                })) > p.top) {
                break;
            }
        }
        auto ranked = [&] {
            std::vector<std::size_t> idx(p.vocab);
            std::iota(idx.begin(), idx.end(), std::size_t{0});
            std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return counts[a] > counts[b]; });
            return idx;
        };
        auto idx = ranked();
        // Make the top set unambiguous: words tied with the last winner lose one occurrence.
        const std::size_t cut = counts[idx[p.top - 1]];
        for (std::size_t r = p.top; r < p.vocab; ++r) {
            const std::size_t w = idx[r];
            if (counts[w] == cut) {
                auto it = std::find(seq.rbegin(), seq.rend(), w);
                seq.erase(std::next(it).base());
                --counts[w];
            }
        }
        for (std::size_t r = 0; r < p.top; ++r) {
            inst.answers.push_back(vocab[idx[r]]);
        }
        for (auto w : seq) {
            list.push_back(vocab[w]);
        }
        inst.task = "fwe";
        inst.target = join(inst.answers, ", ");
    }
    std::shuffle(list.begin(), list.end(), rng);
    std::string body = "Words: " + join(list, " ") + " ";
    const std::size_t need = body.size() + query.size() + inst.target.size();
    std::size_t ctx = p.context_length == 0 ? need : p.context_length;
    if (need > ctx) {
        throw GenerationError("word list does not fit in context " + std::to_string(ctx));
    }
    const std::string pad = filler(ctx - need);
    inst.seed = seed;
    inst.context_length = ctx;
    inst.num_slots = 0;
    inst.query_offset = pad.size() + body.size();
    inst.prompt = pad + body + query;
    return inst;
}

std::vector<std::string> extraction_words(const TaskInstance& inst) {
    const auto start = inst.prompt.find("Words: ");
    const auto end = inst.prompt.find("\nQ: ", start);
    if (start == std::string::npos || end == std::string::npos) {
        throw InputError("instance has no word list");
    }
    std::istringstream in(inst.prompt.substr(start + 7, end - start - 7));
    std::vector<std::string> out;
    for (std::string w; in >> w;) {
        out.push_back(w);
    }
    return out;
}

double score_recall(std::string_view output, const TaskInstance& inst) {
    if (inst.answers.empty()) {
        return 0.0;
    }
    std::size_t hit = 0;
    for (const auto& a : inst.answers) {
        hit += output.find(a) != std::string_view::npos ? 1 : 0;
    }
    return static_cast<double>(hit) / static_cast<double>(inst.answers.size());
}

double perplexity(const LogitsFn& model, std::span<const int> stream, std::size_t window) {
    if (window < 2) {
        throw InputError("perplexity window must be at least 2 tokens");
    }
    if (stream.size() < window) {
        throw InputError("token stream shorter than the evaluation window");
    }
    double nll = 0.0;
    std::size_t count = 0;
    for (std::size_t s = 0; s + window <= stream.size(); s += window) {
        auto logits = model(stream.subspan(s, window));
        const std::size_t v = logits.cols();
        for (std::size_t t = 0; t + 1 < window; ++t) {
            const float* row = logits.raw() + t * v;
            double mx = row[0];
            for (std::size_t k = 1; k < v; ++k) {
                mx = std::max(mx, static_cast<double>(row[k]));
            }
            double z = 0.0;
            for (std::size_t k = 0; k < v; ++k) {
                z += std::exp(static_cast<double>(row[k]) - mx);
            }
            const int target = stream[s + t + 1];
            nll += mx + std::log(z) - static_cast<double>(row[target]);
            ++count;
        }
    }
    return std::exp(nll / static_cast<double>(count));
}

std::vector<int> greedy_decode(const LogitsFn& model, std::span<const int> prompt, std::size_t max_new) {
    std::vector<int> seq(prompt.begin(), prompt.end());
    std::vector<int> out;
    for (std::size_t i = 0; i < max_new; ++i) {
        auto logits = model(seq);
        const std::size_t v = logits.cols();
        const float* row = logits.raw() + (logits.rows() - 1) * v;
        const int next = static_cast<int>(std::max_element(row, row + v) - row);
        if (next == kTokEos) {
            break;
        }
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

std::span<const std::string_view> ruler_tasks() {
    static constexpr std::string_view tasks[] = {"niah_single_1",   "niah_single_2",   "niah_single_3",
                                                 "niah_multikey_1", "niah_multikey_2", "niah_multikey_3",
                                                 "niah_multivalue", "niah_multiquery", "vt",
                                                 "cwe",             "fwe"};
    return tasks;
}

const std::vector<std::pair<std::string, std::vector<std::string>>>& ruler_groups() {
    static const std::vector<std::pair<std::string, std::vector<std::string>>> groups = {
        {"NIAH-S", {"niah_single_1", "niah_single_2", "niah_single_3"}},
        {"NIAH-M", {"niah_multikey_1", "niah_multikey_2", "niah_multikey_3"}},
        {"NIAH-M-QV", {"niah_multivalue", "niah_multiquery"}},
        {"VT", {"vt"}},
        {"CF-WE", {"cwe", "fwe"}},
    };
    return groups;
}

std::vector<std::pair<std::string, double>> aggregate_ruler(const std::map<std::string, double>& scores) {
    std::vector<std::pair<std::string, double>> out;
    auto get = [&](const std::string& t) {
        auto it = scores.find(t);
        if (it == scores.end()) {
            throw InputError("missing score for task " + t);
        }
        return it->second;
    };
    for (const auto& [group, tasks] : ruler_groups()) {
        double s = 0.0;
        for (const auto& t : tasks) {
            s += get(t);
        }
        out.emplace_back(group, s / static_cast<double>(tasks.size()));
    }
    double all = 0.0;
    for (auto t : ruler_tasks()) {
        all += get(std::string(t));
    }
    out.emplace_back("Average", all / static_cast<double>(ruler_tasks().size()));
    return out;
}

TaskInstance generate_task(std::string_view task, std::size_t context_length, std::uint64_t seed) {
    TaskInstance inst;
    if (task == "vt") {
        inst = gen_variable_tracking(1, 4, context_length, seed);
    } else if (task == "cwe") {
        WordsParams p;
        p.freq_cw = 4;
        p.freq_ucw = 2;
        p.num_cw = std::clamp<std::size_t>(context_length / 128, 1, 10);
        p.context_length = context_length;
        inst = gen_words_extraction(WordsKind::Common, p, seed);
    } else if (task == "fwe") {
        WordsParams p;
        p.context_length = context_length;
        inst = gen_words_extraction(WordsKind::Frequent, p, seed);
    } else {
        inst = gen_niah(niah_preset(task, context_length, seed));
    }
    inst.task = std::string(task);
    return inst;
}

}  // namespace spanattn
