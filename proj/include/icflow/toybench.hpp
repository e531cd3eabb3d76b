#ifndef ICFLOW_TOYBENCH_HPP
#define ICFLOW_TOYBENCH_HPP

#include "icflow/core.hpp"
#include "icflow/latent.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace icflow::toybench {

// 16x16 canvas divided into a 4x4 grid of 4x4-pixel cells. Sprites are
// painted with one of 8 maximally separated palette colors (RGB cube
// corners) on a mid-gray background, so nearest-color pixel classification
// is unambiguous under moderate model noise.
constexpr int kCanvas = 16;
constexpr int kCellPx = 4;
constexpr int kGridSide = 4;
constexpr int kCells = kGridSide * kGridSide;
constexpr int kPaletteSize = 8;
constexpr float kBackground = 0.5f;

inline const std::array<std::array<float, 3>, kPaletteSize>& palette() {
    static const std::array<std::array<float, 3>, kPaletteSize> p = {{
        {0.f, 0.f, 0.f},  // black
        {0.f, 0.f, 1.f},  // blue
        {0.f, 1.f, 0.f},  // green
        {0.f, 1.f, 1.f},  // cyan
        {1.f, 0.f, 0.f},  // red
        {1.f, 0.f, 1.f},  // magenta
        {1.f, 1.f, 0.f},  // yellow
        {1.f, 1.f, 1.f},  // white
    }};
    return p;
}

inline const char* color_name(int color) {
    static const char* names[kPaletteSize] = {"black", "blue",    "green",
                                              "cyan",  "red",     "magenta",
                                              "yellow", "white"};
    if (color < 0 || color >= kPaletteSize)
        throw Error("color_name: bad color id " + std::to_string(color));
    return names[color];
}

enum class Shape : int { circle = 0, square, triangle, glyph_t, glyph_l };
constexpr int kShapeCount = 5;

inline const char* shape_name(Shape s) {
    switch (s) {
        case Shape::circle: return "circle";
        case Shape::square: return "square";
        case Shape::triangle: return "triangle";
        case Shape::glyph_t: return "glyph_t";
        case Shape::glyph_l: return "glyph_l";
    }
    throw Error("shape_name: bad shape id");
}

// 4x4 pixel masks, bit index y*4+x.
inline const std::array<uint16_t, kShapeCount>& shape_masks() {
    static const std::array<uint16_t, kShapeCount> m = {{
        0x6FF6,  // circle: full square minus corners (12 px)
        0xFFFF,  // square (16 px)
        0xF731,  // triangle: x <= y (10 px)
        0x666F,  // glyph_t: top bar + center stem (10 px)
        0xF111,  // glyph_l: left column + bottom bar (7 px)
    }};
    return m;
}

// A sprite's id is its persistent identity. Fresh scenes assign ids in
// row-major cell order; edits never renumber survivors.
struct Sprite {
    int id = 0;
    int cell = 0;  // row-major, 0..15
    Shape shape = Shape::circle;
    int color = 0;
};

struct SceneSpec {
    std::vector<Sprite> sprites;

    void validate() const {
        if (sprites.empty())
            throw Error("SceneSpec: needs at least one sprite");
        std::vector<bool> used(kCells, false);
        for (const auto& s : sprites) {
            if (s.cell < 0 || s.cell >= kCells)
                throw Error("SceneSpec: cell out of range");
            if (s.color < 0 || s.color >= kPaletteSize)
                throw Error("SceneSpec: color out of range");
            if (used[static_cast<size_t>(s.cell)])
                throw Error("SceneSpec: duplicate cell " +
                            std::to_string(s.cell));
            used[static_cast<size_t>(s.cell)] = true;
        }
    }

    // canonical order: ascending cell
    void sort_by_cell() {
        std::sort(sprites.begin(), sprites.end(),
                  [](const Sprite& a, const Sprite& b) {
                      return a.cell < b.cell;
                  });
    }

    const Sprite* find_id(int id) const {
        for (const auto& s : sprites)
            if (s.id == id)
                return &s;
        return nullptr;
    }
    Sprite* find_id(int id) {
        for (auto& s : sprites)
            if (s.id == id)
                return &s;
        return nullptr;
    }
    const Sprite* at_cell(int cell) const {
        for (const auto& s : sprites)
            if (s.cell == cell)
                return &s;
        return nullptr;
    }
};

// Content equality: same (cell, shape, color) multiset. Identity ids are
// bookkeeping and deliberately ignored (a parsed scene cannot see them).
inline bool content_equal(const SceneSpec& a, const SceneSpec& b) {
    if (a.sprites.size() != b.sprites.size())
        return false;
    auto key = [](const SceneSpec& s) {
        std::vector<std::array<int, 3>> k;
        k.reserve(s.sprites.size());
        for (const auto& sp : s.sprites)
            k.push_back({sp.cell, static_cast<int>(sp.shape), sp.color});
        std::sort(k.begin(), k.end());
        return k;
    };
    return key(a) == key(b);
}

inline ImageTensor<float> render(const SceneSpec& spec) {
    spec.validate();
    ImageTensor<float> img(3, kCanvas, kCanvas, kBackground);
    for (const auto& s : spec.sprites) {
        const int cy = (s.cell / kGridSide) * kCellPx;
        const int cx = (s.cell % kGridSide) * kCellPx;
        const uint16_t mask = shape_masks()[static_cast<size_t>(s.shape)];
        const auto& rgb = palette()[static_cast<size_t>(s.color)];
        for (int y = 0; y < kCellPx; ++y)
            for (int x = 0; x < kCellPx; ++x)
                if (mask & (1u << (y * kCellPx + x)))
                    for (int c = 0; c < 3; ++c)
                        img.at(c, cy + y, cx + x) = rgb[static_cast<size_t>(c)];
    }
    return img;
}

namespace detail {

// Nearest of the 8 palette colors plus background; returns -1 for
// background. Exact renders classify exactly; noisy pixels go to whichever
// color is closest in RGB.
inline int classify_pixel(float r, float g, float b) {
    double best = (r - kBackground) * (r - kBackground) +
                  (g - kBackground) * (g - kBackground) +
                  (b - kBackground) * (b - kBackground);
    int best_id = -1;
    for (int i = 0; i < kPaletteSize; ++i) {
        const auto& p = palette()[static_cast<size_t>(i)];
        double d = (r - p[0]) * (r - p[0]) + (g - p[1]) * (g - p[1]) +
                   (b - p[2]) * (b - p[2]);
        if (d < best) {
            best = d;
            best_id = i;
        }
    }
    return best_id;
}

inline int popcount16(uint16_t v) {
    int n = 0;
    while (v) {
        n += v & 1;
        v >>= 1;
    }
    return n;
}

}  // namespace detail

// Nearest-palette cell classification. Each cell with any non-background
// pixel becomes a sprite: shape = mask with minimal Hamming distance,
// color = majority vote over sprite pixels. Ids are assigned in scan order.
template <typename T>
SceneSpec parse(const ImageTensor<T>& img) {
    if (img.channels != 3 || img.height != kCanvas || img.width != kCanvas)
        throw Error("parse: expected 3x16x16 image, got " +
                    std::to_string(img.channels) + "x" +
                    std::to_string(img.height) + "x" +
                    std::to_string(img.width));
    SceneSpec spec;
    int next_id = 0;
    for (int cell = 0; cell < kCells; ++cell) {
        const int cy = (cell / kGridSide) * kCellPx;
        const int cx = (cell % kGridSide) * kCellPx;
        uint16_t mask = 0;
        std::array<int, kPaletteSize> votes{};
        for (int y = 0; y < kCellPx; ++y)
            for (int x = 0; x < kCellPx; ++x) {
                int cls = detail::classify_pixel(
                    static_cast<float>(img.at(0, cy + y, cx + x)),
                    static_cast<float>(img.at(1, cy + y, cx + x)),
                    static_cast<float>(img.at(2, cy + y, cx + x)));
                if (cls >= 0) {
                    mask |= static_cast<uint16_t>(1u << (y * kCellPx + x));
                    ++votes[static_cast<size_t>(cls)];
                }
            }
        if (mask == 0)
            continue;
        int best_shape = 0, best_dist = 17;
        for (int s = 0; s < kShapeCount; ++s) {
            int d = detail::popcount16(
                static_cast<uint16_t>(mask ^ shape_masks()[static_cast<size_t>(s)]));
            if (d < best_dist) {
                best_dist = d;
                best_shape = s;
            }
        }
        int best_color = 0;
        for (int i = 1; i < kPaletteSize; ++i)
            if (votes[static_cast<size_t>(i)] > votes[static_cast<size_t>(best_color)])
                best_color = i;
        spec.sprites.push_back(Sprite{next_id++, cell,
                                      static_cast<Shape>(best_shape),
                                      best_color});
    }
    return spec;
}

// ---------------------------------------------------------------------------
// Instructions
// ---------------------------------------------------------------------------

enum class EditKind : int {
    noop = 0,
    recolor,
    remove,
    move,
    swap_colors,
    render_ref,
    retype,
};

enum class Category : int { local = 0, global, character_ref, text_like };
constexpr int kCategoryCount = 4;

inline const char* category_name(Category c) {
    switch (c) {
        case Category::local: return "local";
        case Category::global: return "global";
        case Category::character_ref: return "character-ref";
        case Category::text_like: return "text-like";
    }
    throw Error("category_name: bad category");
}

inline Category category_of(EditKind k) {
    switch (k) {
        case EditKind::recolor:
        case EditKind::remove:
        case EditKind::move:
        case EditKind::noop:
            return Category::local;
        case EditKind::swap_colors:
            return Category::global;
        case EditKind::render_ref:
            return Category::character_ref;
        case EditKind::retype:
            return Category::text_like;
    }
    throw Error("category_of: bad edit kind");
}

enum class Direction : int { up = 0, down, left, right };

inline const char* direction_name(Direction d) {
    switch (d) {
        case Direction::up: return "up";
        case Direction::down: return "down";
        case Direction::left: return "left";
        case Direction::right: return "right";
    }
    throw Error("direction_name: bad direction");
}

struct Edit {
    EditKind kind = EditKind::noop;
    int sprite_id = -1;              // recolor/remove/move/render_ref/retype
    int color = -1;                  // recolor; swap first color
    int color2 = -1;                 // swap second color
    Direction dir = Direction::up;   // move
    int cell = -1;                   // render_ref destination
    Shape shape = Shape::glyph_t;    // retype target shape
};

// Fixed word list; instruction token ids index into this vocabulary.
inline const std::vector<std::string>& vocab() {
    static const std::vector<std::string> v = [] {
        std::vector<std::string> w = {"noop", "recolor", "remove",  "move",
                                      "swap", "render",  "retype", "sprite",
                                      "cell", "up",      "down",   "left",
                                      "right"};
        for (int i = 0; i < kPaletteSize; ++i)
            w.push_back(color_name(i));
        for (int i = 0; i < kShapeCount; ++i)
            w.push_back(shape_name(static_cast<Shape>(i)));
        for (int i = 0; i < kCells; ++i)
            w.push_back(std::to_string(i));
        return w;
    }();
    return v;
}

inline int token_id(const std::string& word) {
    const auto& v = vocab();
    for (size_t i = 0; i < v.size(); ++i)
        if (v[i] == word)
            return static_cast<int>(i);
    throw Error("token_id: '" + word + "' not in vocabulary");
}

inline std::vector<int> tokenize(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    std::string word;
    while (is >> word)
        out.push_back(token_id(word));
    if (out.empty())
        throw Error("tokenize: empty instruction");
    return out;
}

inline std::string detokenize(const std::vector<int>& tokens) {
    const auto& v = vocab();
    std::string out;
    for (size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || static_cast<size_t>(tokens[i]) >= v.size())
            throw Error("detokenize: token id out of range");
        if (i)
            out += ' ';
        out += v[static_cast<size_t>(tokens[i])];
    }
    return out;
}

inline std::string instruction_text(const Edit& e) {
    switch (e.kind) {
        case EditKind::noop:
            return "noop";
        case EditKind::recolor:
            return std::string("recolor sprite ") + std::to_string(e.sprite_id) +
                   " " + color_name(e.color);
        case EditKind::remove:
            return std::string("remove sprite ") + std::to_string(e.sprite_id);
        case EditKind::move:
            return std::string("move sprite ") + std::to_string(e.sprite_id) +
                   " " + direction_name(e.dir);
        case EditKind::swap_colors:
            return std::string("swap ") + color_name(e.color) + " " +
                   color_name(e.color2);
        case EditKind::render_ref:
            return std::string("render sprite ") + std::to_string(e.sprite_id) +
                   " cell " + std::to_string(e.cell);
        case EditKind::retype:
            return std::string("retype sprite ") + std::to_string(e.sprite_id) +
                   " " + shape_name(e.shape);
    }
    throw Error("instruction_text: bad edit kind");
}

namespace detail {

inline int expect_number(const std::vector<std::string>& words, size_t i,
                         int max_value) {
    if (i >= words.size())
        throw Error("parse_instruction: truncated instruction");
    int v;
    try {
        v = std::stoi(words[i]);
    } catch (...) {
        throw Error("parse_instruction: expected number, got '" + words[i] +
                    "'");
    }
    if (v < 0 || v > max_value)
        throw Error("parse_instruction: number out of range: " + words[i]);
    return v;
}

inline std::string expect_word(const std::vector<std::string>& words,
                               size_t i) {
    if (i >= words.size())
        throw Error("parse_instruction: truncated instruction");
    return words[i];
}

inline int color_id(const std::string& w) {
    for (int i = 0; i < kPaletteSize; ++i)
        if (w == color_name(i))
            return i;
    throw Error("parse_instruction: '" + w + "' is not a color");
}

inline Shape shape_id(const std::string& w) {
    for (int i = 0; i < kShapeCount; ++i)
        if (w == shape_name(static_cast<Shape>(i)))
            return static_cast<Shape>(i);
    throw Error("parse_instruction: '" + w + "' is not a shape");
}

inline Direction direction_id(const std::string& w) {
    for (int i = 0; i < 4; ++i)
        if (w == direction_name(static_cast<Direction>(i)))
            return static_cast<Direction>(i);
    throw Error("parse_instruction: '" + w + "' is not a direction");
}

inline void expect_literal(const std::vector<std::string>& words, size_t i,
                           const char* lit) {
    if (expect_word(words, i) != lit)
        throw Error(std::string("parse_instruction: expected '") + lit +
                    "', got '" + words[i] + "'");
}

}  // namespace detail

inline Edit parse_instruction(const std::vector<int>& tokens) {
    std::vector<std::string> words;
    {
        const auto& v = vocab();
        for (int t : tokens) {
            if (t < 0 || static_cast<size_t>(t) >= v.size())
                throw Error("parse_instruction: token id out of range");
            words.push_back(v[static_cast<size_t>(t)]);
        }
    }
    if (words.empty())
        throw Error("parse_instruction: empty instruction");
    Edit e;
    const std::string& verb = words[0];
    auto finish = [&](size_t used) {
        if (words.size() != used)
            throw Error("parse_instruction: trailing tokens after '" + verb +
                        "' instruction");
        return e;
    };
    if (verb == "noop") {
        e.kind = EditKind::noop;
        return finish(1);
    }
    if (verb == "recolor") {
        e.kind = EditKind::recolor;
        detail::expect_literal(words, 1, "sprite");
        e.sprite_id = detail::expect_number(words, 2, kCells - 1);
        e.color = detail::color_id(detail::expect_word(words, 3));
        return finish(4);
    }
    if (verb == "remove") {
        e.kind = EditKind::remove;
        detail::expect_literal(words, 1, "sprite");
        e.sprite_id = detail::expect_number(words, 2, kCells - 1);
        return finish(3);
    }
    if (verb == "move") {
        e.kind = EditKind::move;
        detail::expect_literal(words, 1, "sprite");
        e.sprite_id = detail::expect_number(words, 2, kCells - 1);
        e.dir = detail::direction_id(detail::expect_word(words, 3));
        return finish(4);
    }
    if (verb == "swap") {
        e.kind = EditKind::swap_colors;
        e.color = detail::color_id(detail::expect_word(words, 1));
        e.color2 = detail::color_id(detail::expect_word(words, 2));
        return finish(3);
    }
    if (verb == "render") {
        e.kind = EditKind::render_ref;
        detail::expect_literal(words, 1, "sprite");
        e.sprite_id = detail::expect_number(words, 2, kCells - 1);
        detail::expect_literal(words, 3, "cell");
        e.cell = detail::expect_number(words, 4, kCells - 1);
        return finish(5);
    }
    if (verb == "retype") {
        e.kind = EditKind::retype;
        detail::expect_literal(words, 1, "sprite");
        e.sprite_id = detail::expect_number(words, 2, kCells - 1);
        e.shape = detail::shape_id(detail::expect_word(words, 3));
        return finish(4);
    }
    throw Error("parse_instruction: unknown verb '" + verb + "'");
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

// Deterministic ground truth. Move clamps (stays put) at an edge or into an
// occupied cell by default; with strict=true those become errors. Dangling
// sprite references are always errors.
inline SceneSpec apply_edit(const SceneSpec& spec, const Edit& e,
                            bool strict = false) {
    SceneSpec out = spec;
    auto require_sprite = [&](int id) -> Sprite& {
        Sprite* s = out.find_id(id);
        if (!s)
            throw Error("oracle: no sprite with id " + std::to_string(id));
        return *s;
    };
    switch (e.kind) {
        case EditKind::noop:
            return out;
        case EditKind::recolor: {
            Sprite& s = require_sprite(e.sprite_id);
            if (e.color < 0 || e.color >= kPaletteSize)
                throw Error("oracle: bad color id");
            s.color = e.color;
            return out;
        }
        case EditKind::remove: {
            require_sprite(e.sprite_id);
            out.sprites.erase(
                std::remove_if(out.sprites.begin(), out.sprites.end(),
                               [&](const Sprite& s) {
                                   return s.id == e.sprite_id;
                               }),
                out.sprites.end());
            if (out.sprites.empty())
                throw Error("oracle: removing the last sprite leaves an "
                            "empty scene");
            return out;
        }
        case EditKind::move: {
            Sprite& s = require_sprite(e.sprite_id);
            int cy = s.cell / kGridSide, cx = s.cell % kGridSide;
            switch (e.dir) {
                case Direction::up: --cy; break;
                case Direction::down: ++cy; break;
                case Direction::left: --cx; break;
                case Direction::right: ++cx; break;
            }
            if (cy < 0 || cy >= kGridSide || cx < 0 || cx >= kGridSide) {
                if (strict)
                    throw Error("oracle: move off the grid edge (strict)");
                return out;  // clamp: stay put
            }
            int dst = cy * kGridSide + cx;
            if (out.at_cell(dst)) {
                if (strict)
                    throw Error("oracle: move into occupied cell (strict)");
                return out;  // blocked: stay put
            }
            s.cell = dst;
            out.sort_by_cell();
            return out;
        }
        case EditKind::swap_colors: {
            if (e.color < 0 || e.color >= kPaletteSize || e.color2 < 0 ||
                e.color2 >= kPaletteSize)
                throw Error("oracle: bad color id in swap");
            for (auto& s : out.sprites) {
                if (s.color == e.color)
                    s.color = e.color2;
                else if (s.color == e.color2)
                    s.color = e.color;
            }
            return out;
        }
        case EditKind::render_ref: {
            Sprite& s = require_sprite(e.sprite_id);
            if (e.cell < 0 || e.cell >= kCells)
                throw Error("oracle: bad destination cell");
            SceneSpec fresh;
            fresh.sprites.push_back(Sprite{s.id, e.cell, s.shape, s.color});
            return fresh;
        }
        case EditKind::retype: {
            Sprite& s = require_sprite(e.sprite_id);
            s.shape = e.shape;
            return out;
        }
    }
    throw Error("oracle: bad edit kind");
}

inline SceneSpec oracle(const SceneSpec& spec, const std::vector<int>& tokens,
                        bool strict = false) {
    return apply_edit(spec, parse_instruction(tokens), strict);
}

// Cells an edit can change, destination included; used by commutativity
// checks to decide when two edits are independent.
inline std::vector<int> edit_footprint(const SceneSpec& spec, const Edit& e) {
    std::vector<int> cells;
    auto add_sprite_cell = [&](int id) {
        const Sprite* s = spec.find_id(id);
        if (s)
            cells.push_back(s->cell);
    };
    switch (e.kind) {
        case EditKind::noop:
            break;
        case EditKind::recolor:
        case EditKind::remove:
        case EditKind::retype:
            add_sprite_cell(e.sprite_id);
            break;
        case EditKind::move: {
            const Sprite* s = spec.find_id(e.sprite_id);
            if (s) {
                cells.push_back(s->cell);
                int cy = s->cell / kGridSide, cx = s->cell % kGridSide;
                switch (e.dir) {
                    case Direction::up: --cy; break;
                    case Direction::down: ++cy; break;
                    case Direction::left: --cx; break;
                    case Direction::right: ++cx; break;
                }
                if (cy >= 0 && cy < kGridSide && cx >= 0 && cx < kGridSide)
                    cells.push_back(cy * kGridSide + cx);
            }
            break;
        }
        case EditKind::swap_colors:
            for (const auto& s : spec.sprites)
                if (s.color == e.color || s.color == e.color2)
                    cells.push_back(s.cell);
            break;
        case EditKind::render_ref:
            for (const auto& s : spec.sprites)
                cells.push_back(s.cell);
            cells.push_back(e.cell);
            break;
    }
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    return cells;
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct EditExample {
    ImageTensor<float> context;  // render of the pre-edit scene
    std::vector<int> instruction;
    ImageTensor<float> target;  // render of the post-edit scene
    Category category = Category::local;
    // derivable from the images (parse/oracle) but kept for convenience
    SceneSpec before, after;
    Edit edit;
};

struct GenConfig {
    int min_sprites = 2;
    int max_sprites = 5;
    // category mix: local, global, character-ref, text-like
    std::array<double, kCategoryCount> category_weights{1.0, 1.0, 1.0, 1.0};
    // restrict local edits; empty = {recolor, remove, move}
    std::vector<EditKind> local_kinds;

    void validate() const {
        if (min_sprites < 1 || max_sprites < min_sprites ||
            max_sprites > kCells)
            throw Error("GenConfig: bad sprite count range");
        double total = 0.0;
        for (double w : category_weights) {
            if (w < 0.0)
                throw Error("GenConfig: negative category weight");
            total += w;
        }
        if (total <= 0.0)
            throw Error("GenConfig: all category weights zero");
        for (EditKind k : local_kinds)
            if (category_of(k) != Category::local || k == EditKind::noop)
                throw Error("GenConfig: local_kinds must be local edits");
    }
};

inline SceneSpec gen_scene(Rng& rng, int min_sprites, int max_sprites) {
    int n = min_sprites +
            static_cast<int>(rng.below(max_sprites - min_sprites + 1));
    std::array<int, kCells> cells;
    for (int i = 0; i < kCells; ++i)
        cells[static_cast<size_t>(i)] = i;
    for (int i = 0; i < n; ++i) {
        int j = i + static_cast<int>(rng.below(kCells - i));
        std::swap(cells[static_cast<size_t>(i)], cells[static_cast<size_t>(j)]);
    }
    std::vector<int> chosen(cells.begin(), cells.begin() + n);
    std::sort(chosen.begin(), chosen.end());
    SceneSpec spec;
    for (int i = 0; i < n; ++i)
        spec.sprites.push_back(
            Sprite{i, chosen[static_cast<size_t>(i)],
                   static_cast<Shape>(rng.below(kShapeCount)),
                   static_cast<int>(rng.below(kPaletteSize))});
    return spec;
}

namespace detail {

inline Edit gen_recolor(Rng& rng, const SceneSpec& spec) {
    Edit e;
    e.kind = EditKind::recolor;
    const Sprite& s =
        spec.sprites[static_cast<size_t>(rng.below(spec.sprites.size()))];
    e.sprite_id = s.id;
    int c = static_cast<int>(rng.below(kPaletteSize - 1));
    e.color = c >= s.color ? c + 1 : c;  // any color but the current one
    return e;
}

inline bool move_is_effective(const SceneSpec& spec, int sprite_id,
                              Direction dir) {
    const Sprite* s = spec.find_id(sprite_id);
    int cy = s->cell / kGridSide, cx = s->cell % kGridSide;
    switch (dir) {
        case Direction::up: --cy; break;
        case Direction::down: ++cy; break;
        case Direction::left: --cx; break;
        case Direction::right: ++cx; break;
    }
    if (cy < 0 || cy >= kGridSide || cx < 0 || cx >= kGridSide)
        return false;
    return spec.at_cell(cy * kGridSide + cx) == nullptr;
}

inline Edit gen_local(Rng& rng, const SceneSpec& spec,
                      const std::vector<EditKind>& kinds) {
    EditKind kind = kinds[static_cast<size_t>(rng.below(kinds.size()))];
    if (kind == EditKind::remove && spec.sprites.size() < 2)
        kind = EditKind::recolor;  // never empty the scene
    if (kind == EditKind::recolor)
        return gen_recolor(rng, spec);
    if (kind == EditKind::remove) {
        Edit e;
        e.kind = EditKind::remove;
        e.sprite_id =
            spec.sprites[static_cast<size_t>(rng.below(spec.sprites.size()))]
                .id;
        return e;
    }
    // move: pick an effective (sprite, direction) pair when one exists
    std::vector<std::pair<int, Direction>> options;
    for (const auto& s : spec.sprites)
        for (int d = 0; d < 4; ++d)
            if (move_is_effective(spec, s.id, static_cast<Direction>(d)))
                options.emplace_back(s.id, static_cast<Direction>(d));
    if (options.empty())
        return gen_recolor(rng, spec);  // fully boxed-in scene
    auto [id, dir] = options[static_cast<size_t>(rng.below(options.size()))];
    Edit e;
    e.kind = EditKind::move;
    e.sprite_id = id;
    e.dir = dir;
    return e;
}

inline Edit gen_global(Rng& rng, const SceneSpec& spec) {
    Edit e;
    e.kind = EditKind::swap_colors;
    const Sprite& s =
        spec.sprites[static_cast<size_t>(rng.below(spec.sprites.size()))];
    e.color = s.color;  // first color always present, so the swap acts
    int c = static_cast<int>(rng.below(kPaletteSize - 1));
    e.color2 = c >= e.color ? c + 1 : c;
    return e;
}

inline Edit gen_character_ref(Rng& rng, const SceneSpec& spec) {
    Edit e;
    e.kind = EditKind::render_ref;
    const Sprite& s =
        spec.sprites[static_cast<size_t>(rng.below(spec.sprites.size()))];
    e.sprite_id = s.id;
    e.cell = static_cast<int>(rng.below(kCells));
    if (spec.sprites.size() == 1 && e.cell == s.cell)
        e.cell = (e.cell + 1) % kCells;  // keep the edit observable
    return e;
}

inline Edit gen_text_like(Rng& rng, const SceneSpec& spec) {
    Edit e;
    e.kind = EditKind::retype;
    const Sprite& s =
        spec.sprites[static_cast<size_t>(rng.below(spec.sprites.size()))];
    e.sprite_id = s.id;
    if (s.shape == Shape::glyph_t)
        e.shape = Shape::glyph_l;
    else if (s.shape == Shape::glyph_l)
        e.shape = Shape::glyph_t;
    else
        e.shape = rng.below(2) ? Shape::glyph_l : Shape::glyph_t;
    return e;
}

}  // namespace detail

inline Edit gen_edit(Rng& rng, const SceneSpec& spec, Category category,
                     const GenConfig& cfg) {
    static const std::vector<EditKind> default_local = {
        EditKind::recolor, EditKind::remove, EditKind::move};
    switch (category) {
        case Category::local:
            return detail::gen_local(
                rng, spec,
                cfg.local_kinds.empty() ? default_local : cfg.local_kinds);
        case Category::global:
            return detail::gen_global(rng, spec);
        case Category::character_ref:
            return detail::gen_character_ref(rng, spec);
        case Category::text_like:
            return detail::gen_text_like(rng, spec);
    }
    throw Error("gen_edit: bad category");
}

inline EditExample make_example(Rng& rng, Category category,
                                const GenConfig& cfg) {
    SceneSpec before = gen_scene(rng, cfg.min_sprites, cfg.max_sprites);
    Edit edit = gen_edit(rng, before, category, cfg);
    EditExample ex;
    ex.before = before;
    ex.edit = edit;
    ex.after = apply_edit(before, edit);
    ex.instruction = tokenize(instruction_text(edit));
    ex.context = render(before);
    ex.target = render(ex.after);
    ex.category = category;
    return ex;
}

// Deterministic per seed. Category counts follow the configured weights by
// largest-remainder rounding, then the assignment order is shuffled.
inline std::vector<EditExample> generate(Rng& rng, int n,
                                         const GenConfig& cfg) {
    if (n < 1)
        throw Error("generate: n must be >= 1");
    cfg.validate();
    double total = 0.0;
    for (double w : cfg.category_weights)
        total += w;
    std::array<int, kCategoryCount> counts{};
    std::array<double, kCategoryCount> frac{};
    int assigned = 0;
    for (int c = 0; c < kCategoryCount; ++c) {
        double exact = n * cfg.category_weights[static_cast<size_t>(c)] / total;
        counts[static_cast<size_t>(c)] = static_cast<int>(exact);
        frac[static_cast<size_t>(c)] =
            exact - counts[static_cast<size_t>(c)];
        assigned += counts[static_cast<size_t>(c)];
    }
    while (assigned < n) {
        int best = 0;
        for (int c = 1; c < kCategoryCount; ++c)
            if (frac[static_cast<size_t>(c)] > frac[static_cast<size_t>(best)])
                best = c;
        ++counts[static_cast<size_t>(best)];
        frac[static_cast<size_t>(best)] = -1.0;
        ++assigned;
    }
    std::vector<Category> order;
    order.reserve(static_cast<size_t>(n));
    for (int c = 0; c < kCategoryCount; ++c)
        for (int i = 0; i < counts[static_cast<size_t>(c)]; ++i)
            order.push_back(static_cast<Category>(c));
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[static_cast<size_t>(rng.below(
                                    static_cast<int64_t>(i)))]);
    std::vector<EditExample> out;
    out.reserve(order.size());
    for (Category c : order)
        out.push_back(make_example(rng, c, cfg));
    return out;
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

struct EditScore {
    bool accurate = false;  // parsed output content-equals the expected spec
    double identity = 1.0;  // untouched sprites that survived, as a fraction
};

// Untouched sprites are those whose (cell, shape, color) agree between the
// pre-edit and expected specs; identity is the fraction of them the output
// preserves. An empty untouched set scores identity 1.
template <typename T>
EditScore score_edit(const ImageTensor<T>& output, const SceneSpec& before,
                     const SceneSpec& expected) {
    SceneSpec parsed = parse(output);
    EditScore score;
    score.accurate = content_equal(parsed, expected);
    int untouched = 0, survived = 0;
    for (const auto& s : before.sprites) {
        const Sprite* e = expected.at_cell(s.cell);
        if (!e || e->shape != s.shape || e->color != s.color)
            continue;
        ++untouched;
        const Sprite* p = parsed.at_cell(s.cell);
        if (p && p->shape == s.shape && p->color == s.color)
            ++survived;
    }
    score.identity =
        untouched == 0 ? 1.0
                       : static_cast<double>(survived) / untouched;
    return score;
}

// ---------------------------------------------------------------------------
// Drift evaluation
// ---------------------------------------------------------------------------

struct DriftResult {
    // index k = turn k+1; cumulative survival of never-touched sprites,
    // averaged over scenes. Monotone non-increasing by construction.
    std::vector<double> identity_per_turn;
    std::vector<double> accuracy_per_turn;
    int scenes = 0;
};

// Recolor-only multi-turn script leaving >= n_reserved sprites untouched
// across every turn. The reserved sprites are the drift probes.
inline std::vector<Edit> gen_drift_script(Rng& rng, const SceneSpec& scene,
                                          int turns, int n_reserved = 2) {
    if (static_cast<int>(scene.sprites.size()) <= n_reserved)
        throw Error("gen_drift_script: scene too small for reserved set");
    std::vector<int> ids;
    for (const auto& s : scene.sprites)
        ids.push_back(s.id);
    for (int i = 0; i < n_reserved; ++i) {
        int j = i + static_cast<int>(rng.below(
                        static_cast<int64_t>(ids.size()) - i));
        std::swap(ids[static_cast<size_t>(i)], ids[static_cast<size_t>(j)]);
    }
    std::vector<int> editable(ids.begin() + n_reserved, ids.end());
    SceneSpec current = scene;
    std::vector<Edit> script;
    for (int k = 0; k < turns; ++k) {
        int id = editable[static_cast<size_t>(rng.below(
            static_cast<int64_t>(editable.size())))];
        const Sprite* s = current.find_id(id);
        Edit e;
        e.kind = EditKind::recolor;
        e.sprite_id = id;
        int c = static_cast<int>(rng.below(kPaletteSize - 1));
        e.color = c >= s->color ? c + 1 : c;
        script.push_back(e);
        current = apply_edit(current, e);
    }
    return script;
}

// Runs the per-scene edit chains through a caller-supplied sampler
// (context image, instruction, scene index, turn) -> output image, and
// scores drift. Never-touched sprites are those whose content is identical
// in every oracle state of the script; a sprite counts as surviving at turn
// k only if it survived every turn up to k.
template <typename SampleFn>
DriftResult drift_eval(const std::vector<SceneSpec>& scenes,
                       const std::vector<std::vector<Edit>>& scripts,
                       SampleFn&& sample_fn) {
    if (scenes.size() != scripts.size())
        throw Error("drift_eval: scenes/scripts size mismatch");
    if (scenes.empty())
        throw Error("drift_eval: no scenes");
    const size_t turns = scripts.front().size();
    if (turns < 2)
        throw Error("drift_eval: scripts need at least 2 turns");
    for (const auto& s : scripts)
        if (s.size() != turns)
            throw Error("drift_eval: ragged scripts");

    DriftResult res;
    res.scenes = static_cast<int>(scenes.size());
    std::vector<double> id_sum(turns, 0.0), acc_sum(turns, 0.0);

    for (size_t si = 0; si < scenes.size(); ++si) {
        // oracle chain and the never-touched probe set
        std::vector<SceneSpec> truth{scenes[si]};
        for (const auto& e : scripts[si])
            truth.push_back(apply_edit(truth.back(), e));
        std::vector<const Sprite*> probes;
        for (const auto& s0 : scenes[si].sprites) {
            bool untouched = true;
            for (size_t k = 1; k < truth.size() && untouched; ++k) {
                const Sprite* s = truth[k].at_cell(s0.cell);
                untouched = s && s->shape == s0.shape && s->color == s0.color;
            }
            if (untouched)
                probes.push_back(&s0);
        }
        std::vector<bool> alive(probes.size(), true);

        ImageTensor<float> current = render(scenes[si]);
        for (size_t k = 0; k < turns; ++k) {
            std::vector<int> instruction =
                tokenize(instruction_text(scripts[si][k]));
            ImageTensor<float> out =
                sample_fn(current, instruction, si, static_cast<int>(k));
            SceneSpec parsed = parse(out);
            for (size_t p = 0; p < probes.size(); ++p) {
                if (!alive[p])
                    continue;
                const Sprite* got = parsed.at_cell(probes[p]->cell);
                if (!got || got->shape != probes[p]->shape ||
                    got->color != probes[p]->color)
                    alive[p] = false;
            }
            double frac = probes.empty()
                              ? 1.0
                              : static_cast<double>(std::count(
                                    alive.begin(), alive.end(), true)) /
                                    static_cast<double>(probes.size());
            id_sum[k] += frac;
            acc_sum[k] += content_equal(parsed, truth[k + 1]) ? 1.0 : 0.0;
            current = std::move(out);
        }
    }
    res.identity_per_turn.resize(turns);
    res.accuracy_per_turn.resize(turns);
    for (size_t k = 0; k < turns; ++k) {
        res.identity_per_turn[k] = id_sum[k] / static_cast<double>(res.scenes);
        res.accuracy_per_turn[k] = acc_sum[k] / static_cast<double>(res.scenes);
    }
    return res;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct EvalReport {
    std::array<int, kCategoryCount> count{};
    std::array<double, kCategoryCount> accuracy{};  // per-category mean
    std::array<double, kCategoryCount> identity{};
    double overall_accuracy = 0.0;
    double overall_identity = 0.0;
    std::vector<double> drift_identity;  // empty unless drift was evaluated
    std::vector<double> drift_accuracy;

    std::string csv() const {
        std::ostringstream os;
        os << "category,count,edit_accuracy,identity\n";
        for (int c = 0; c < kCategoryCount; ++c)
            os << category_name(static_cast<Category>(c)) << ","
               << count[static_cast<size_t>(c)] << ","
               << accuracy[static_cast<size_t>(c)] << ","
               << identity[static_cast<size_t>(c)] << "\n";
        os << "overall," << total_count() << "," << overall_accuracy << ","
           << overall_identity << "\n";
        return os.str();
    }

    std::string drift_csv() const {
        std::ostringstream os;
        os << "turn,identity,edit_accuracy\n";
        for (size_t k = 0; k < drift_identity.size(); ++k)
            os << (k + 1) << "," << drift_identity[k] << ","
               << drift_accuracy[k] << "\n";
        return os.str();
    }

    std::string summary() const {
        std::ostringstream os;
        os << "edit accuracy " << overall_accuracy << ", identity "
           << overall_identity << " over " << total_count() << " examples\n";
        for (int c = 0; c < kCategoryCount; ++c)
            if (count[static_cast<size_t>(c)] > 0)
                os << "  " << category_name(static_cast<Category>(c)) << ": "
                   << accuracy[static_cast<size_t>(c)] << " accuracy, "
                   << identity[static_cast<size_t>(c)] << " identity ("
                   << count[static_cast<size_t>(c)] << ")\n";
        if (!drift_identity.empty()) {
            os << "  drift identity by turn:";
            for (double v : drift_identity)
                os << " " << v;
            os << "\n";
        }
        return os.str();
    }

    int total_count() const {
        int n = 0;
        for (int c : count)
            n += c;
        return n;
    }
};

// Aggregates per-example scores into the report.
inline EvalReport aggregate_scores(const std::vector<Category>& categories,
                                   const std::vector<EditScore>& scores) {
    if (categories.size() != scores.size())
        throw Error("aggregate_scores: size mismatch");
    EvalReport rep;
    std::array<double, kCategoryCount> acc_sum{}, id_sum{};
    for (size_t i = 0; i < scores.size(); ++i) {
        const size_t c = static_cast<size_t>(categories[i]);
        ++rep.count[c];
        acc_sum[c] += scores[i].accurate ? 1.0 : 0.0;
        id_sum[c] += scores[i].identity;
    }
    double acc_total = 0.0, id_total = 0.0;
    for (int c = 0; c < kCategoryCount; ++c) {
        const size_t sc = static_cast<size_t>(c);
        if (rep.count[sc] > 0) {
            rep.accuracy[sc] = acc_sum[sc] / rep.count[sc];
            rep.identity[sc] = id_sum[sc] / rep.count[sc];
        }
        acc_total += acc_sum[sc];
        id_total += id_sum[sc];
    }
    if (!scores.empty()) {
        rep.overall_accuracy = acc_total / static_cast<double>(scores.size());
        rep.overall_identity = id_total / static_cast<double>(scores.size());
    }
    return rep;
}

}  // namespace icflow::toybench

#endif  // ICFLOW_TOYBENCH_HPP
