#include <catch2/catch_amalgamated.hpp>

#include "icflow/toybench.hpp"

#include <algorithm>
#include <set>
#include <vector>

using namespace icflow;
namespace tb = icflow::toybench;

namespace {

tb::SceneSpec three_sprite_scene() {
    tb::SceneSpec s;
    s.sprites.push_back({0, 1, tb::Shape::square, 4});    // red square
    s.sprites.push_back({1, 5, tb::Shape::circle, 2});    // green circle
    s.sprites.push_back({2, 10, tb::Shape::glyph_t, 1});  // blue glyph
    return s;
}

bool pixels_equal(const ImageTensor<float>& a, const ImageTensor<float>& b) {
    return a.channels == b.channels && a.height == b.height &&
           a.width == b.width && a.data == b.data;
}

}  // namespace

TEST_CASE("palette holds the eight RGB cube corners", "[toybench]") {
    const auto& p = tb::palette();
    std::set<std::array<float, 3>> seen(p.begin(), p.end());
    CHECK(seen.size() == 8);
    for (const auto& rgb : p)
        for (float v : rgb)
            CHECK((v == 0.0f || v == 1.0f));
    CHECK(std::string(tb::color_name(0)) == "black");
    CHECK(std::string(tb::color_name(4)) == "red");
    CHECK(std::string(tb::color_name(7)) == "white");
    CHECK_THROWS_AS(tb::color_name(8), Error);
    CHECK_THROWS_AS(tb::color_name(-1), Error);
}

TEST_CASE("shape masks are the pinned bit patterns", "[toybench]") {
    const auto& m = tb::shape_masks();
    CHECK(m[0] == 0x6FF6);  // circle
    CHECK(m[1] == 0xFFFF);  // square
    CHECK(m[2] == 0xF731);  // triangle
    CHECK(m[3] == 0x666F);  // glyph_t
    CHECK(m[4] == 0xF111);  // glyph_l
    std::set<uint16_t> distinct(m.begin(), m.end());
    CHECK(distinct.size() == 5);
    CHECK(tb::detail::popcount16(m[0]) == 12);
    CHECK(tb::detail::popcount16(m[1]) == 16);
    CHECK(tb::detail::popcount16(m[2]) == 10);
    CHECK(tb::detail::popcount16(m[3]) == 10);
    CHECK(tb::detail::popcount16(m[4]) == 7);
    CHECK(std::string(tb::shape_name(tb::Shape::circle)) == "circle");
    CHECK(std::string(tb::shape_name(tb::Shape::glyph_l)) == "glyph_l");
}

TEST_CASE("scene validation and lookup helpers", "[toybench]") {
    tb::SceneSpec s = three_sprite_scene();
    s.validate();

    tb::SceneSpec empty;
    CHECK_THROWS_WITH(empty.validate(),
                      Catch::Matchers::ContainsSubstring("at least one"));

    tb::SceneSpec dup = s;
    dup.sprites.push_back({3, 5, tb::Shape::square, 0});
    CHECK_THROWS_WITH(dup.validate(),
                      Catch::Matchers::ContainsSubstring("duplicate cell"));

    tb::SceneSpec bad_cell = s;
    bad_cell.sprites[0].cell = 16;
    CHECK_THROWS_AS(bad_cell.validate(), Error);

    tb::SceneSpec bad_color = s;
    bad_color.sprites[0].color = 9;
    CHECK_THROWS_AS(bad_color.validate(), Error);

    CHECK(s.find_id(2)->cell == 10);
    CHECK(s.find_id(7) == nullptr);
    CHECK(s.at_cell(5)->id == 1);
    CHECK(s.at_cell(3) == nullptr);

    tb::SceneSpec shuffled = s;
    std::swap(shuffled.sprites[0], shuffled.sprites[2]);
    shuffled.sort_by_cell();
    CHECK(shuffled.sprites[0].cell == 1);
    CHECK(shuffled.sprites[2].cell == 10);
}

TEST_CASE("content equality ignores ids and ordering", "[toybench]") {
    tb::SceneSpec a = three_sprite_scene();
    tb::SceneSpec b = a;
    std::swap(b.sprites[0], b.sprites[2]);
    for (auto& s : b.sprites)
        s.id += 40;  // ids are bookkeeping only
    CHECK(tb::content_equal(a, b));

    tb::SceneSpec c = a;
    c.sprites[1].color = 3;
    CHECK_FALSE(tb::content_equal(a, c));

    tb::SceneSpec d = a;
    d.sprites.pop_back();
    CHECK_FALSE(tb::content_equal(a, d));
}

TEST_CASE("render paints a square sprite into its cell only", "[toybench]") {
    tb::SceneSpec s;
    s.sprites.push_back({0, 5, tb::Shape::square, 4});  // cell 5: row 1, col 1
    ImageTensor<float> img = tb::render(s);
    REQUIRE(img.channels == 3);
    REQUIRE(img.height == 16);
    REQUIRE(img.width == 16);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            bool inside = y >= 4 && y < 8 && x >= 4 && x < 8;
            if (inside) {
                CHECK(img.at(0, y, x) == 1.0f);
                CHECK(img.at(1, y, x) == 0.0f);
                CHECK(img.at(2, y, x) == 0.0f);
            } else {
                CHECK(img.at(0, y, x) == 0.5f);
            }
        }
}

TEST_CASE("render respects shape masks pixel by pixel", "[toybench]") {
    // circle leaves the cell corners as background
    tb::SceneSpec s;
    s.sprites.push_back({0, 0, tb::Shape::circle, 7});
    ImageTensor<float> img = tb::render(s);
    CHECK(img.at(0, 0, 0) == 0.5f);
    CHECK(img.at(0, 0, 3) == 0.5f);
    CHECK(img.at(0, 3, 0) == 0.5f);
    CHECK(img.at(0, 3, 3) == 0.5f);
    CHECK(img.at(0, 0, 1) == 1.0f);
    CHECK(img.at(0, 1, 0) == 1.0f);

    // glyph_l: left column plus bottom bar, 7 pixels
    tb::SceneSpec l;
    l.sprites.push_back({0, 15, tb::Shape::glyph_l, 2});
    ImageTensor<float> img2 = tb::render(l);
    int painted = 0;
    for (int y = 12; y < 16; ++y)
        for (int x = 12; x < 16; ++x)
            if (img2.at(1, y, x) == 1.0f)
                ++painted;
    CHECK(painted == 7);
    CHECK(img2.at(1, 12, 12) == 1.0f);  // top of the column
    CHECK(img2.at(1, 15, 15) == 1.0f);  // end of the bar
    CHECK(img2.at(1, 12, 13) == 0.5f);
}

TEST_CASE("parse inverts render including sprite ids", "[toybench]") {
    Rng rng(100);
    for (int trial = 0; trial < 200; ++trial) {
        tb::SceneSpec spec = tb::gen_scene(rng, 1, 8);
        tb::SceneSpec parsed = tb::parse(tb::render(spec));
        REQUIRE(tb::content_equal(parsed, spec));
        // fresh scenes carry scan-order ids, so the round trip is exact
        REQUIRE(parsed.sprites.size() == spec.sprites.size());
        for (size_t i = 0; i < spec.sprites.size(); ++i) {
            CHECK(parsed.sprites[i].id == spec.sprites[i].id);
            CHECK(parsed.sprites[i].cell == spec.sprites[i].cell);
            CHECK(parsed.sprites[i].shape == spec.sprites[i].shape);
            CHECK(parsed.sprites[i].color == spec.sprites[i].color);
        }
    }
}

TEST_CASE("parse tolerates moderate pixel noise", "[toybench]") {
    tb::SceneSpec s;
    s.sprites.push_back({0, 6, tb::Shape::square, 4});  // cell 6: row 1, col 2
    ImageTensor<float> img = tb::render(s);
    // push every sprite pixel off the exact corner; red stays nearest
    for (int y = 4; y < 8; ++y)
        for (int x = 8; x < 12; ++x) {
            img.at(0, y, x) = 0.8f;
            img.at(1, y, x) = 0.15f;
            img.at(2, y, x) = 0.1f;
        }
    tb::SceneSpec noisy = tb::parse(img);
    REQUIRE(noisy.sprites.size() == 1);
    CHECK(noisy.sprites[0].shape == tb::Shape::square);
    CHECK(noisy.sprites[0].color == 4);

    // knocking one pixel out keeps the nearest-mask decision on square
    ImageTensor<float> hole = tb::render(s);
    hole.at(0, 4, 8) = 0.5f;
    hole.at(1, 4, 8) = 0.5f;
    hole.at(2, 4, 8) = 0.5f;
    tb::SceneSpec parsed = tb::parse(hole);
    REQUIRE(parsed.sprites.size() == 1);
    CHECK(parsed.sprites[0].shape == tb::Shape::square);
}

TEST_CASE("parse rejects wrongly shaped images", "[toybench]") {
    ImageTensor<float> wrong(3, 8, 16, 0.5f);
    CHECK_THROWS_WITH(tb::parse(wrong),
                      Catch::Matchers::ContainsSubstring("3x16x16"));
    ImageTensor<float> gray(1, 16, 16, 0.5f);
    CHECK_THROWS_AS(tb::parse(gray), Error);
}

TEST_CASE("edit kinds map onto the four benchmark categories", "[toybench]") {
    using tb::Category;
    using tb::EditKind;
    CHECK(tb::category_of(EditKind::noop) == Category::local);
    CHECK(tb::category_of(EditKind::recolor) == Category::local);
    CHECK(tb::category_of(EditKind::remove) == Category::local);
    CHECK(tb::category_of(EditKind::move) == Category::local);
    CHECK(tb::category_of(EditKind::swap_colors) == Category::global);
    CHECK(tb::category_of(EditKind::render_ref) == Category::character_ref);
    CHECK(tb::category_of(EditKind::retype) == Category::text_like);
    CHECK(std::string(tb::category_name(Category::character_ref)) ==
          "character-ref");
}

TEST_CASE("vocabulary is the fixed 42-word list", "[toybench]") {
    const auto& v = tb::vocab();
    CHECK(v.size() == 42);  // 13 keywords + 8 colors + 5 shapes + 16 numbers
    std::set<std::string> distinct(v.begin(), v.end());
    CHECK(distinct.size() == v.size());
    CHECK(tb::token_id("noop") == 0);
    CHECK(v[static_cast<size_t>(tb::token_id("red"))] == "red");
    CHECK(v[static_cast<size_t>(tb::token_id("15"))] == "15");
    CHECK_THROWS_AS(tb::token_id("pineapple"), Error);

    std::vector<int> toks = tb::tokenize("move sprite 3 left");
    CHECK(tb::detokenize(toks) == "move sprite 3 left");
    CHECK_THROWS_AS(tb::tokenize(""), Error);
    CHECK_THROWS_AS(tb::tokenize("recolor widget"), Error);
    CHECK_THROWS_AS(tb::detokenize({0, 99}), Error);
}

TEST_CASE("instruction text round-trips through the parser", "[toybench]") {
    using tb::EditKind;
    std::vector<tb::Edit> edits;
    {
        tb::Edit e;
        e.kind = EditKind::noop;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::recolor;
        e.sprite_id = 3;
        e.color = 4;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::remove;
        e.sprite_id = 0;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::move;
        e.sprite_id = 2;
        e.dir = tb::Direction::left;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::swap_colors;
        e.color = 1;
        e.color2 = 6;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::render_ref;
        e.sprite_id = 1;
        e.cell = 14;
        edits.push_back(e);
        e = {};
        e.kind = EditKind::retype;
        e.sprite_id = 5;
        e.shape = tb::Shape::glyph_t;
        edits.push_back(e);
    }
    for (const auto& e : edits) {
        std::string text = tb::instruction_text(e);
        tb::Edit back = tb::parse_instruction(tb::tokenize(text));
        CHECK(back.kind == e.kind);
        if (e.kind != EditKind::noop && e.kind != EditKind::swap_colors)
            CHECK(back.sprite_id == e.sprite_id);
        if (e.kind == EditKind::recolor || e.kind == EditKind::swap_colors)
            CHECK(back.color == e.color);
        if (e.kind == EditKind::swap_colors)
            CHECK(back.color2 == e.color2);
        if (e.kind == EditKind::move)
            CHECK(back.dir == e.dir);
        if (e.kind == EditKind::render_ref)
            CHECK(back.cell == e.cell);
        if (e.kind == EditKind::retype)
            CHECK(back.shape == e.shape);
    }
}

TEST_CASE("instruction grammar rejects malformed token lists", "[toybench]") {
    auto parse_text = [](const std::string& text) {
        return tb::parse_instruction(tb::tokenize(text));
    };
    CHECK_THROWS_WITH(parse_text("noop noop"),
                      Catch::Matchers::ContainsSubstring("trailing"));
    CHECK_THROWS_WITH(parse_text("sprite 3"),
                      Catch::Matchers::ContainsSubstring("unknown verb"));
    CHECK_THROWS_WITH(parse_text("recolor sprite"),
                      Catch::Matchers::ContainsSubstring("truncated"));
    CHECK_THROWS_WITH(parse_text("recolor cell 3 red"),
                      Catch::Matchers::ContainsSubstring("expected 'sprite'"));
    CHECK_THROWS_WITH(parse_text("recolor sprite 3 circle"),
                      Catch::Matchers::ContainsSubstring("not a color"));
    CHECK_THROWS_WITH(parse_text("move sprite 3 red"),
                      Catch::Matchers::ContainsSubstring("not a direction"));
    CHECK_THROWS_WITH(parse_text("retype sprite 3 red"),
                      Catch::Matchers::ContainsSubstring("not a shape"));
    CHECK_THROWS_WITH(parse_text("recolor sprite red red"),
                      Catch::Matchers::ContainsSubstring("expected number"));
    CHECK_THROWS_AS(tb::parse_instruction({}), Error);
    CHECK_THROWS_AS(tb::parse_instruction({-3}), Error);
}

TEST_CASE("oracle handles each edit kind", "[toybench]") {
    tb::SceneSpec s = three_sprite_scene();
    using tb::EditKind;

    SECTION("noop returns the scene unchanged") {
        tb::Edit e;
        e.kind = EditKind::noop;
        CHECK(tb::content_equal(tb::apply_edit(s, e), s));
    }
    SECTION("recolor changes exactly one sprite") {
        tb::Edit e;
        e.kind = EditKind::recolor;
        e.sprite_id = 1;
        e.color = 6;
        tb::SceneSpec out = tb::apply_edit(s, e);
        CHECK(out.find_id(1)->color == 6);
        CHECK(out.find_id(0)->color == 4);
        CHECK(out.find_id(2)->color == 1);
        CHECK(out.sprites.size() == 3);

        e.color = 99;
        CHECK_THROWS_WITH(tb::apply_edit(s, e),
                          Catch::Matchers::ContainsSubstring("bad color"));
        e.color = 2;
        e.sprite_id = 9;
        CHECK_THROWS_WITH(tb::apply_edit(s, e),
                          Catch::Matchers::ContainsSubstring("no sprite"));
    }
    SECTION("remove deletes the sprite but never empties the scene") {
        tb::Edit e;
        e.kind = EditKind::remove;
        e.sprite_id = 0;
        tb::SceneSpec out = tb::apply_edit(s, e);
        CHECK(out.sprites.size() == 2);
        CHECK(out.find_id(0) == nullptr);
        CHECK(out.find_id(1) != nullptr);  // survivors keep their ids

        tb::SceneSpec one;
        one.sprites.push_back({0, 3, tb::Shape::circle, 1});
        CHECK_THROWS_WITH(tb::apply_edit(one, e),
                          Catch::Matchers::ContainsSubstring("empty scene"));
    }
    SECTION("move steps into a free cell and clamps otherwise") {
        tb::Edit e;
        e.kind = EditKind::move;
        e.sprite_id = 0;  // cell 1
        e.dir = tb::Direction::down;
        // cell 1 down is cell 5, occupied by sprite 1: blocked, stay put
        tb::SceneSpec out = tb::apply_edit(s, e);
        CHECK(out.find_id(0)->cell == 1);
        CHECK(tb::content_equal(out, s));
        CHECK_THROWS_WITH(tb::apply_edit(s, e, true),
                          Catch::Matchers::ContainsSubstring("occupied"));

        e.dir = tb::Direction::up;  // cell 1 -> off the top edge
        CHECK(tb::content_equal(tb::apply_edit(s, e), s));
        CHECK_THROWS_WITH(tb::apply_edit(s, e, true),
                          Catch::Matchers::ContainsSubstring("edge"));

        e.dir = tb::Direction::right;  // cell 1 -> free cell 2
        tb::SceneSpec moved = tb::apply_edit(s, e);
        CHECK(moved.find_id(0)->cell == 2);
        CHECK_FALSE(tb::content_equal(moved, s));
    }
    SECTION("swap exchanges two colors scene-wide") {
        tb::Edit e;
        e.kind = EditKind::swap_colors;
        e.color = 4;
        e.color2 = 1;
        tb::SceneSpec out = tb::apply_edit(s, e);
        CHECK(out.find_id(0)->color == 1);  // was red
        CHECK(out.find_id(2)->color == 4);  // was blue
        CHECK(out.find_id(1)->color == 2);  // green untouched
        // swapping colors absent from the scene is a content no-op
        e.color = 6;
        e.color2 = 7;
        CHECK(tb::content_equal(tb::apply_edit(s, e), s));
    }
    SECTION("render_ref isolates one sprite on a fresh canvas") {
        tb::Edit e;
        e.kind = EditKind::render_ref;
        e.sprite_id = 2;
        e.cell = 0;
        tb::SceneSpec out = tb::apply_edit(s, e);
        REQUIRE(out.sprites.size() == 1);
        CHECK(out.sprites[0].id == 2);  // identity is preserved
        CHECK(out.sprites[0].cell == 0);
        CHECK(out.sprites[0].shape == tb::Shape::glyph_t);
        CHECK(out.sprites[0].color == 1);
        e.cell = 20;
        CHECK_THROWS_AS(tb::apply_edit(s, e), Error);
    }
    SECTION("retype changes only the shape") {
        tb::Edit e;
        e.kind = EditKind::retype;
        e.sprite_id = 0;
        e.shape = tb::Shape::glyph_l;
        tb::SceneSpec out = tb::apply_edit(s, e);
        CHECK(out.find_id(0)->shape == tb::Shape::glyph_l);
        CHECK(out.find_id(0)->color == 4);
        CHECK(out.find_id(0)->cell == 1);
    }
}

TEST_CASE("oracle accepts token lists directly", "[toybench]") {
    tb::SceneSpec s = three_sprite_scene();
    std::vector<int> tokens = tb::tokenize("recolor sprite 1 yellow");
    tb::SceneSpec a = tb::oracle(s, tokens);
    tb::SceneSpec b =
        tb::apply_edit(s, tb::parse_instruction(tokens));
    CHECK(tb::content_equal(a, b));
    CHECK(a.find_id(1)->color == 6);

    CHECK_THROWS_AS(tb::oracle(s, tb::tokenize("remove sprite 9")), Error);
}

TEST_CASE("recolor changes pixels only inside the target cell", "[toybench]") {
    tb::SceneSpec s = three_sprite_scene();
    tb::Edit e;
    e.kind = tb::EditKind::recolor;
    e.sprite_id = 1;  // cell 5
    e.color = 6;
    ImageTensor<float> before = tb::render(s);
    ImageTensor<float> after = tb::render(tb::apply_edit(s, e));
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            bool in_cell = y >= 4 && y < 8 && x >= 4 && x < 8;
            for (int c = 0; c < 3; ++c) {
                if (in_cell)
                    continue;  // the cell itself is allowed to change
                REQUIRE(before.at(c, y, x) == after.at(c, y, x));
            }
        }
    CHECK_FALSE(pixels_equal(before, after));
}

TEST_CASE("edit footprints cover every touchable cell", "[toybench]") {
    tb::SceneSpec s = three_sprite_scene();
    using tb::EditKind;

    tb::Edit e;
    e.kind = EditKind::noop;
    CHECK(tb::edit_footprint(s, e).empty());

    e.kind = EditKind::recolor;
    e.sprite_id = 1;
    e.color = 0;
    CHECK(tb::edit_footprint(s, e) == std::vector<int>{5});

    e.kind = EditKind::move;
    e.sprite_id = 0;
    e.dir = tb::Direction::right;
    CHECK(tb::edit_footprint(s, e) == std::vector<int>{1, 2});
    e.dir = tb::Direction::up;  // off the edge: only the source cell
    CHECK(tb::edit_footprint(s, e) == std::vector<int>{1});

    e.kind = EditKind::swap_colors;
    e.color = 4;
    e.color2 = 1;
    CHECK(tb::edit_footprint(s, e) == std::vector<int>{1, 10});

    e.kind = EditKind::render_ref;
    e.sprite_id = 0;
    e.cell = 15;
    CHECK(tb::edit_footprint(s, e) == std::vector<int>{1, 5, 10, 15});
}

TEST_CASE("local edits with disjoint footprints commute", "[toybench]") {
    Rng rng(321);
    tb::GenConfig cfg;
    cfg.min_sprites = 3;
    cfg.max_sprites = 6;
    int checked = 0;
    for (int trial = 0; trial < 400; ++trial) {
        tb::SceneSpec scene = tb::gen_scene(rng, cfg.min_sprites,
                                            cfg.max_sprites);
        tb::Edit e1 = tb::gen_edit(rng, scene, tb::Category::local, cfg);
        tb::Edit e2 = tb::gen_edit(rng, scene, tb::Category::local, cfg);
        auto f1 = tb::edit_footprint(scene, e1);
        auto f2 = tb::edit_footprint(scene, e2);
        std::vector<int> overlap;
        std::set_intersection(f1.begin(), f1.end(), f2.begin(), f2.end(),
                              std::back_inserter(overlap));
        if (!overlap.empty())
            continue;
        tb::SceneSpec ab = tb::apply_edit(tb::apply_edit(scene, e1), e2);
        tb::SceneSpec ba = tb::apply_edit(tb::apply_edit(scene, e2), e1);
        REQUIRE(tb::content_equal(ab, ba));
        ++checked;
    }
    CHECK(checked > 100);  // the property must actually get exercised
}

TEST_CASE("scene generation stays within the configured bounds", "[toybench]") {
    Rng rng(55);
    for (int trial = 0; trial < 200; ++trial) {
        tb::SceneSpec s = tb::gen_scene(rng, 2, 5);
        REQUIRE(s.sprites.size() >= 2);
        REQUIRE(s.sprites.size() <= 5);
        s.validate();  // distinct in-range cells
        for (size_t i = 0; i < s.sprites.size(); ++i) {
            CHECK(s.sprites[i].id == static_cast<int>(i));
            if (i > 0)
                CHECK(s.sprites[i].cell > s.sprites[i - 1].cell);
        }
    }
    Rng a(77), b(77);
    tb::SceneSpec sa = tb::gen_scene(a, 2, 5);
    tb::SceneSpec sb = tb::gen_scene(b, 2, 5);
    CHECK(tb::content_equal(sa, sb));
}

TEST_CASE("generated edits are observable and category-correct", "[toybench]") {
    Rng rng(66);
    tb::GenConfig cfg;
    for (int trial = 0; trial < 300; ++trial) {
        auto category = static_cast<tb::Category>(trial % 4);
        tb::SceneSpec scene = tb::gen_scene(rng, cfg.min_sprites,
                                            cfg.max_sprites);
        tb::Edit e = tb::gen_edit(rng, scene, category, cfg);
        CHECK(tb::category_of(e.kind) == category);
        CHECK(e.kind != tb::EditKind::noop);
        // every generated edit changes the scene content
        tb::SceneSpec after = tb::apply_edit(scene, e);
        REQUIRE_FALSE(tb::content_equal(scene, after));
        if (e.kind == tb::EditKind::recolor)
            CHECK(scene.find_id(e.sprite_id)->color != e.color);
    }
}

TEST_CASE("examples carry consistent images, specs, and instructions",
          "[toybench]") {
    Rng rng(88);
    tb::GenConfig cfg;
    for (int trial = 0; trial < 60; ++trial) {
        auto category = static_cast<tb::Category>(trial % 4);
        tb::EditExample ex = tb::make_example(rng, category, cfg);
        CHECK(ex.category == category);
        CHECK(tb::content_equal(tb::apply_edit(ex.before, ex.edit), ex.after));
        CHECK(pixels_equal(ex.context, tb::render(ex.before)));
        CHECK(pixels_equal(ex.target, tb::render(ex.after)));
        tb::Edit parsed = tb::parse_instruction(ex.instruction);
        CHECK(parsed.kind == ex.edit.kind);
        // the oracle reproduces the target from the instruction alone
        CHECK(tb::content_equal(tb::oracle(ex.before, ex.instruction),
                                ex.after));
    }
}

TEST_CASE("generation follows category weights by largest remainder",
          "[toybench]") {
    tb::GenConfig cfg;
    Rng rng(99);
    auto examples = tb::generate(rng, 40, cfg);
    REQUIRE(examples.size() == 40);
    std::array<int, 4> counts{};
    for (const auto& ex : examples)
        ++counts[static_cast<size_t>(ex.category)];
    for (int c : counts)
        CHECK(c == 10);

    // recolor-only config: every edit is a recolor
    tb::GenConfig ronly;
    ronly.category_weights = {1.0, 0.0, 0.0, 0.0};
    ronly.local_kinds = {tb::EditKind::recolor};
    Rng rng2(100);
    auto rex = tb::generate(rng2, 25, ronly);
    REQUIRE(rex.size() == 25);
    for (const auto& ex : rex)
        CHECK(ex.edit.kind == tb::EditKind::recolor);

    // unequal counts differ by at most one for equal weights
    Rng rng3(101);
    auto odd = tb::generate(rng3, 10, cfg);
    std::array<int, 4> oc{};
    for (const auto& ex : odd)
        ++oc[static_cast<size_t>(ex.category)];
    CHECK(*std::max_element(oc.begin(), oc.end()) -
              *std::min_element(oc.begin(), oc.end()) <=
          1);
    CHECK(oc[0] + oc[1] + oc[2] + oc[3] == 10);
}

TEST_CASE("generation is deterministic per seed", "[toybench]") {
    tb::GenConfig cfg;
    Rng a(123), b(123);
    auto ea = tb::generate(a, 12, cfg);
    auto eb = tb::generate(b, 12, cfg);
    REQUIRE(ea.size() == eb.size());
    for (size_t i = 0; i < ea.size(); ++i) {
        CHECK(ea[i].instruction == eb[i].instruction);
        CHECK(pixels_equal(ea[i].context, eb[i].context));
        CHECK(pixels_equal(ea[i].target, eb[i].target));
        CHECK(ea[i].category == eb[i].category);
    }
    Rng c(124);
    auto ec = tb::generate(c, 12, cfg);
    bool any_diff = false;
    for (size_t i = 0; i < ec.size(); ++i)
        any_diff = any_diff || !pixels_equal(ea[i].context, ec[i].context);
    CHECK(any_diff);
}

TEST_CASE("generation config validation", "[toybench]") {
    tb::GenConfig cfg;
    cfg.validate();
    tb::GenConfig bad = cfg;
    bad.min_sprites = 0;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.max_sprites = 1;
    bad.min_sprites = 2;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.max_sprites = 17;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.category_weights[1] = -0.5;
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.category_weights = {0.0, 0.0, 0.0, 0.0};
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.local_kinds = {tb::EditKind::swap_colors};
    CHECK_THROWS_AS(bad.validate(), Error);
    bad = cfg;
    bad.local_kinds = {tb::EditKind::noop};
    CHECK_THROWS_AS(bad.validate(), Error);
    Rng rng(1);
    CHECK_THROWS_AS(tb::generate(rng, 0, cfg), Error);
}

TEST_CASE("edit scoring separates accuracy from identity", "[toybench]") {
    // five sprites; recolor sprite 2 leaves four untouched
    tb::SceneSpec before;
    before.sprites.push_back({0, 0, tb::Shape::square, 1});
    before.sprites.push_back({1, 3, tb::Shape::circle, 2});
    before.sprites.push_back({2, 6, tb::Shape::triangle, 4});
    before.sprites.push_back({3, 9, tb::Shape::glyph_t, 6});
    before.sprites.push_back({4, 12, tb::Shape::glyph_l, 7});
    tb::Edit e;
    e.kind = tb::EditKind::recolor;
    e.sprite_id = 2;
    e.color = 0;
    tb::SceneSpec expected = tb::apply_edit(before, e);

    // perfect output
    tb::EditScore perfect =
        tb::score_edit(tb::render(expected), before, expected);
    CHECK(perfect.accurate);
    CHECK(perfect.identity == 1.0);

    // model ignored the instruction: identity holds, accuracy does not
    tb::EditScore lazy = tb::score_edit(tb::render(before), before, expected);
    CHECK_FALSE(lazy.accurate);
    CHECK(lazy.identity == 1.0);

    // edit applied but one bystander lost: identity 3/4
    tb::SceneSpec damaged = expected;
    damaged.sprites.erase(damaged.sprites.begin());  // drop sprite at cell 0
    tb::EditScore partial =
        tb::score_edit(tb::render(damaged), before, expected);
    CHECK_FALSE(partial.accurate);
    CHECK(partial.identity == 0.75);

    // blank canvas: nothing survives
    ImageTensor<float> blank(3, 16, 16, tb::kBackground);
    tb::EditScore zero = tb::score_edit(blank, before, expected);
    CHECK_FALSE(zero.accurate);
    CHECK(zero.identity == 0.0);
}

TEST_CASE("render_ref scoring treats every sprite as touched", "[toybench]") {
    tb::SceneSpec before = three_sprite_scene();
    tb::Edit e;
    e.kind = tb::EditKind::render_ref;
    e.sprite_id = 0;
    e.cell = 0;
    tb::SceneSpec expected = tb::apply_edit(before, e);
    // no sprite keeps its (cell, shape, color) across a re-render of one
    // sprite onto a fresh canvas, so identity falls back to 1
    tb::EditScore s = tb::score_edit(tb::render(expected), before, expected);
    CHECK(s.accurate);
    CHECK(s.identity == 1.0);
}

TEST_CASE("drift scripts spare the reserved probes", "[toybench]") {
    Rng rng(456);
    for (int trial = 0; trial < 50; ++trial) {
        tb::SceneSpec scene = tb::gen_scene(rng, 4, 6);
        auto script = tb::gen_drift_script(rng, scene, 5, 2);
        REQUIRE(script.size() == 5);
        tb::SceneSpec current = scene;
        for (const auto& e : script) {
            CHECK(e.kind == tb::EditKind::recolor);
            current = tb::apply_edit(current, e);
        }
        // at least two original sprites live through the whole script
        int survivors = 0;
        for (const auto& s : scene.sprites) {
            const tb::Sprite* got = current.at_cell(s.cell);
            if (got && got->shape == s.shape && got->color == s.color)
                ++survivors;
        }
        CHECK(survivors >= 2);
    }
    tb::SceneSpec tiny;
    tiny.sprites.push_back({0, 0, tb::Shape::circle, 1});
    tiny.sprites.push_back({1, 5, tb::Shape::square, 2});
    CHECK_THROWS_WITH(tb::gen_drift_script(rng, tiny, 3, 2),
                      Catch::Matchers::ContainsSubstring("too small"));
}

TEST_CASE("drift evaluation scores an oracle sampler perfectly", "[toybench]") {
    Rng rng(789);
    std::vector<tb::SceneSpec> scenes;
    std::vector<std::vector<tb::Edit>> scripts;
    for (int i = 0; i < 6; ++i) {
        scenes.push_back(tb::gen_scene(rng, 4, 6));
        scripts.push_back(tb::gen_drift_script(rng, scenes.back(), 4, 2));
    }
    auto oracle_fn = [&](const ImageTensor<float>& img,
                         const std::vector<int>& instruction, size_t,
                         int) {
        return tb::render(tb::oracle(tb::parse(img), instruction));
    };
    tb::DriftResult res = tb::drift_eval(scenes, scripts, oracle_fn);
    REQUIRE(res.identity_per_turn.size() == 4);
    REQUIRE(res.accuracy_per_turn.size() == 4);
    CHECK(res.scenes == 6);
    for (size_t k = 0; k < 4; ++k) {
        CHECK(res.identity_per_turn[k] == 1.0);
        CHECK(res.accuracy_per_turn[k] == 1.0);
    }
}

TEST_CASE("drift identity is cumulative and monotone", "[toybench]") {
    Rng rng(987);
    std::vector<tb::SceneSpec> scenes = {tb::gen_scene(rng, 4, 6)};
    std::vector<std::vector<tb::Edit>> scripts = {
        tb::gen_drift_script(rng, scenes[0], 3, 2)};

    // ground-truth chain so the sampler can recover after a bad turn
    std::vector<tb::SceneSpec> truth{scenes[0]};
    for (const auto& e : scripts[0])
        truth.push_back(tb::apply_edit(truth.back(), e));

    // erases the canvas on turn 1 but replays perfect truth afterwards:
    // probes die at turn 1 and must stay dead even though they reappear
    auto flaky = [&](const ImageTensor<float>&, const std::vector<int>&,
                     size_t, int turn) -> ImageTensor<float> {
        if (turn == 1)
            return ImageTensor<float>(3, 16, 16, tb::kBackground);
        return tb::render(truth[static_cast<size_t>(turn) + 1]);
    };
    tb::DriftResult res = tb::drift_eval(scenes, scripts, flaky);
    CHECK(res.identity_per_turn[0] == 1.0);
    CHECK(res.identity_per_turn[1] == 0.0);
    CHECK(res.identity_per_turn[2] == 0.0);  // death is permanent
    CHECK(res.accuracy_per_turn[2] == 1.0);  // content is right again

    // a lazy sampler that echoes its context never breaks identity but
    // never gets the edit right either
    auto lazy = [&](const ImageTensor<float>& img, const std::vector<int>&,
                    size_t, int) { return img; };
    tb::DriftResult res2 = tb::drift_eval(scenes, scripts, lazy);
    for (size_t k = 0; k < 3; ++k) {
        CHECK(res2.identity_per_turn[k] == 1.0);
        CHECK(res2.accuracy_per_turn[k] == 0.0);
    }
}

TEST_CASE("drift evaluation validates its inputs", "[toybench]") {
    Rng rng(11);
    std::vector<tb::SceneSpec> scenes = {tb::gen_scene(rng, 4, 6)};
    std::vector<std::vector<tb::Edit>> scripts = {
        tb::gen_drift_script(rng, scenes[0], 3, 2)};
    auto fn = [](const ImageTensor<float>& img, const std::vector<int>&,
                 size_t, int) { return img; };

    std::vector<tb::SceneSpec> two = {scenes[0], scenes[0]};
    CHECK_THROWS_WITH(tb::drift_eval(two, scripts, fn),
                      Catch::Matchers::ContainsSubstring("mismatch"));
    CHECK_THROWS_AS(tb::drift_eval({}, {}, fn), Error);

    std::vector<std::vector<tb::Edit>> short_scripts = {
        {scripts[0][0]}};  // single turn
    CHECK_THROWS_WITH(tb::drift_eval(scenes, short_scripts, fn),
                      Catch::Matchers::ContainsSubstring("at least 2"));

    std::vector<std::vector<tb::Edit>> ragged = {scripts[0], {}};
    CHECK_THROWS_WITH(tb::drift_eval(two, ragged, fn),
                      Catch::Matchers::ContainsSubstring("ragged"));
}

TEST_CASE("score aggregation and report formatting", "[toybench]") {
    std::vector<tb::Category> cats = {
        tb::Category::local, tb::Category::local, tb::Category::global,
        tb::Category::text_like};
    std::vector<tb::EditScore> scores = {
        {true, 1.0}, {false, 0.5}, {true, 1.0}, {false, 0.75}};
    tb::EvalReport rep = tb::aggregate_scores(cats, scores);
    CHECK(rep.count[0] == 2);
    CHECK(rep.count[1] == 1);
    CHECK(rep.count[2] == 0);
    CHECK(rep.count[3] == 1);
    CHECK(rep.total_count() == 4);
    CHECK(rep.accuracy[0] == 0.5);
    CHECK(rep.identity[0] == 0.75);
    CHECK(rep.accuracy[1] == 1.0);
    CHECK(rep.overall_accuracy == 0.5);
    CHECK(rep.overall_identity == Catch::Approx(0.8125));

    std::string csv = rep.csv();
    CHECK(csv.find("category,count,edit_accuracy,identity\n") == 0);
    CHECK(csv.find("overall,4,") != std::string::npos);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);

    rep.drift_identity = {1.0, 0.9};
    rep.drift_accuracy = {0.8, 0.7};
    std::string dcsv = rep.drift_csv();
    CHECK(dcsv.find("turn,identity,edit_accuracy\n") == 0);
    CHECK(dcsv.find("1,1,0.8") != std::string::npos);
    CHECK(dcsv.find("2,0.9,0.7") != std::string::npos);

    CHECK(rep.summary().find("edit accuracy") != std::string::npos);

    scores.pop_back();
    CHECK_THROWS_AS(tb::aggregate_scores(cats, scores), Error);
}
