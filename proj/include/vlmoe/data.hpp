#pragma once

#include <array>
#include <string>
#include <vector>

#include "vlmoe/model.hpp"
#include "vlmoe/rng.hpp"
#include "vlmoe/tensor.hpp"

namespace vlmoe {

// Scenes are two colored glyphs on a 4x4 cell grid rendered to 16x16 RGB.
// Every scene attribute appears in the caption, so caption and scene
// determine each other exactly.
namespace scene {

constexpr int kGrid = 4;        // cells per side
constexpr int kCell = 4;        // pixels per cell side
constexpr int kImage = 16;      // pixels per side
constexpr int kChannels = 3;
constexpr int kColors = 8;
constexpr int kShapes = 3;      // square, cross, disk
constexpr int kShades = 2;      // bright, dark
constexpr double kBackground = 0.1;

inline const std::array<std::array<double, 3>, kColors>& palette() {
    static const std::array<std::array<double, 3>, kColors> p = {{{1, 0, 0},
                                                                  {0, 1, 0},
                                                                  {0, 0, 1},
                                                                  {1, 1, 0},
                                                                  {1, 0, 1},
                                                                  {0, 1, 1},
                                                                  {1, 1, 1},
                                                                  {1, 0.5, 0}}};
    return p;
}

// 4x4 occupancy masks: full square, X cross, diamond disk.
inline const std::array<std::array<uint8_t, 16>, kShapes>& shape_masks() {
    static const std::array<std::array<uint8_t, 16>, kShapes> m = {{
        {1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1},
        {1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1},
        {0, 1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 0},
    }};
    return m;
}

}  // namespace scene

struct SceneObject {
    int cell;   // 0..15 on the 4x4 grid, row-major
    int color;  // palette index
    int shape;  // 0 square, 1 cross, 2 disk
    int shade;  // 0 bright, 1 dark
};

enum class Relation { ABOVE, BELOW, LEFT_OF, RIGHT_OF };

struct Scene {
    SceneObject first, second;

    // The dominant displacement axis of first relative to second; vertical
    // wins ties. Cells always differ, so one axis is nonzero.
    Relation relation() const {
        const int dr = first.cell / scene::kGrid - second.cell / scene::kGrid;
        const int dc = first.cell % scene::kGrid - second.cell % scene::kGrid;
        if (dr != 0 && std::abs(dr) >= std::abs(dc))
            return dr < 0 ? Relation::ABOVE : Relation::BELOW;
        return dc < 0 ? Relation::LEFT_OF : Relation::RIGHT_OF;
    }

    uint64_t descriptor() const {
        auto pack = [](const SceneObject& o) -> uint64_t {
            return ((static_cast<uint64_t>(o.cell) * 8 + o.color) * 3 + o.shape) * 2 + o.shade;
        };
        return pack(first) * 768 + pack(second);  // 768 = 16*8*3*2
    }
};

// Caption template vocabulary, ids starting at kFirstWordId.
inline const std::vector<std::string>& vocab_words() {
    static const std::vector<std::string> words = [] {
        std::vector<std::string> w = {"a", "bright", "dark"};
        const char* colors[] = {"red",     "green", "blue",  "yellow",
                                "magenta", "cyan",  "white", "orange"};
        const char* shapes[] = {"square", "cross", "disk"};
        const char* cells[] = {"one",  "two",    "three",    "four",     "five",    "six",
                               "seven", "eight",  "nine",     "ten",      "eleven",  "twelve",
                               "thirteen", "fourteen", "fifteen", "sixteen"};
        const char* rels[] = {"above", "below", "left-of", "right-of"};
        w.insert(w.end(), std::begin(colors), std::end(colors));
        w.insert(w.end(), std::begin(shapes), std::end(shapes));
        w.push_back("at");
        w.push_back("cell");
        w.insert(w.end(), std::begin(cells), std::end(cells));
        w.insert(w.end(), std::begin(rels), std::end(rels));
        return w;
    }();
    return words;
}

inline int word_id(const std::string& w) {
    const auto& words = vocab_words();
    for (size_t i = 0; i < words.size(); ++i)
        if (words[i] == w) return kFirstWordId + static_cast<int>(i);
    throw IndexError("word_id: unknown word '" + w + "'");
}

inline const std::string& word_of(int id) {
    const auto& words = vocab_words();
    const size_t i = static_cast<size_t>(id - kFirstWordId);
    if (id < kFirstWordId || i >= words.size())
        throw IndexError("word_of: id " + std::to_string(id) + " is not a template word");
    return words[i];
}

// "a bright red square at cell seven above a dark blue disk at cell twelve"
inline std::vector<int> caption_ids(const Scene& s) {
    static const int w_a = word_id("a"), w_at = word_id("at"), w_cell = word_id("cell");
    static const int w_shade0 = word_id("bright");
    static const int w_color0 = word_id("red");
    static const int w_shape0 = word_id("square");
    static const int w_num0 = word_id("one");
    static const int w_rel0 = word_id("above");
    auto object_ids = [&](const SceneObject& o, std::vector<int>& out) {
        out.push_back(w_a);
        out.push_back(w_shade0 + o.shade);
        out.push_back(w_color0 + o.color);
        out.push_back(w_shape0 + o.shape);
        out.push_back(w_at);
        out.push_back(w_cell);
        out.push_back(w_num0 + o.cell);
    };
    std::vector<int> ids;
    object_ids(s.first, ids);
    ids.push_back(w_rel0 + static_cast<int>(s.relation()));
    object_ids(s.second, ids);
    return ids;
}

inline Tensor render(const Scene& s) {
    using namespace scene;
    Tensor img = Tensor::full({kImage, kImage, kChannels}, kBackground);
    auto draw = [&](const SceneObject& o) {
        const int r0 = o.cell / kGrid * kCell, c0 = o.cell % kGrid * kCell;
        const auto& mask = shape_masks()[static_cast<size_t>(o.shape)];
        const auto& rgb = palette()[static_cast<size_t>(o.color)];
        const double gain = o.shade == 0 ? 1.0 : 0.45;
        for (int y = 0; y < kCell; ++y)
            for (int x = 0; x < kCell; ++x) {
                if (!mask[static_cast<size_t>(y * kCell + x)]) continue;
                for (int ch = 0; ch < kChannels; ++ch)
                    img.data()[((r0 + y) * kImage + (c0 + x)) * kChannels + ch] =
                        gain * rgb[static_cast<size_t>(ch)];
            }
    };
    draw(s.first);
    draw(s.second);
    return img;
}

enum class Split { TRAIN, VAL };

struct Sample {
    Scene scene;
    Tensor pixels;             // [16 x 16 x 3]
    std::vector<int> caption;  // word ids, specials excluded
};

// One eighth of descriptor space is validation, by hash; splits can never
// overlap regardless of seeds.
inline bool in_val_split(const Scene& s) { return splitmix64(s.descriptor()) % 8 == 0; }

inline Scene sample_scene(Rng& rng, Split split) {
    for (;;) {
        Scene s;
        s.first = SceneObject{rng.uniform_int(16), rng.uniform_int(scene::kColors),
                              rng.uniform_int(scene::kShapes), rng.uniform_int(scene::kShades)};
        do {
            s.second = SceneObject{rng.uniform_int(16), rng.uniform_int(scene::kColors),
                                   rng.uniform_int(scene::kShapes), rng.uniform_int(scene::kShades)};
        } while (s.second.cell == s.first.cell);
        if ((split == Split::VAL) == in_val_split(s)) return s;
    }
}

// Deterministic corpus: same (split, seed, count) always yields the same
// samples. Each sample carries both views; the objectives pick what they use.
inline std::vector<Sample> generate(Split split, int count, uint64_t seed) {
    if (count < 1) throw ContractError("generate: count must be at least 1");
    Rng rng = Rng(seed).fork(split == Split::TRAIN ? "corpus-train" : "corpus-val");
    std::vector<Sample> out;
    out.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        Scene s = sample_scene(rng, split);
        out.push_back(Sample{s, render(s), caption_ids(s)});
    }
    return out;
}

}  // namespace vlmoe
