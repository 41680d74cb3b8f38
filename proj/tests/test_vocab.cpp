#include <catch2/catch_amalgamated.hpp>

#include <string>
#include <vector>

#include "htf/vocab.hpp"

namespace v = htf::vocab;

TEST_CASE("vocabulary layout: 8 control ids plus an 88-character roster") {
    REQUIRE(v::size == 96);
    REQUIRE(v::n_special == 8);
    REQUIRE(v::charset().size() == 88);
    REQUIRE(v::PAD == 0);
    REQUIRE(v::BOS == 1);
    REQUIRE(v::EOS == 2);
    REQUIRE(v::QUAD_START == 7);
    for (int id = 0; id < v::size; ++id) REQUIRE(v::is_special(id) == (id < 8));
    REQUIRE_FALSE(v::is_special(-1));
    REQUIRE(std::string(v::special_name(v::EOS)) == "<eos>");
    REQUIRE_THROWS_AS(v::special_name(8), htf::ContractError);
}

TEST_CASE("encode/decode round-trips any roster string") {
    const std::string s = "The answer is 42: (a+b)*c/d = 'x' <ok>!";
    REQUIRE(v::decode(v::encode(s)) == s);
    // every roster character individually
    for (char c : v::charset()) {
        const std::string one(1, c);
        REQUIRE(v::decode(v::encode(one)) == one);
    }
    REQUIRE_THROWS_AS(v::encode("caf\xc3\xa9"), htf::ContractError);  // outside the roster
    REQUIRE_THROWS_AS(v::decode({v::BOS}), htf::ContractError);
    REQUIRE_THROWS_AS(v::decode({96}), htf::ContractError);
}

TEST_CASE("render_visible drops control ids and counts the rest") {
    std::vector<int> toks{v::BOS};
    for (int id : v::encode("a")) toks.push_back(id);
    for (int id : v::encode("at")) toks.push_back(id);  // two more text tokens
    toks.push_back(v::EOS);
    const auto r = v::render_visible(toks);
    REQUIRE(r.visible_length == 3);
    REQUIRE(r.text == "aat");

    std::vector<int> all_special(50, v::IM_START);
    const auto r2 = v::render_visible(all_special);
    REQUIRE(r2.visible_length == 0);
    REQUIRE(r2.text.empty());
}

TEST_CASE("visible count matches a brute-force filter on a mixed stream") {
    // 100 tokens, exactly 37 text ids placed deterministically
    std::vector<int> toks;
    int text = 0;
    for (int i = 0; i < 100; ++i) {
        if (text < 37 && i % 8 < 3) {
            toks.push_back(8 + (i % 88));
            ++text;
        } else {
            toks.push_back(i % 8);
        }
    }
    int brute = 0;
    for (int id : toks)
        if (id >= 8) ++brute;
    REQUIRE(brute == 37);
    const auto r = v::render_visible(toks);
    REQUIRE(r.visible_length == brute);
    REQUIRE(static_cast<std::size_t>(r.visible_length) == r.text.size());
}

TEST_CASE("visible length plus control count equals total length") {
    htf::Rng rng(66);
    std::vector<int> toks;
    for (int i = 0; i < 500; ++i) toks.push_back(static_cast<int>(rng.below(96)));
    int specials = 0;
    for (int id : toks)
        if (v::is_special(id)) ++specials;
    REQUIRE(v::render_visible(toks).visible_length + specials == static_cast<int>(toks.size()));
}

TEST_CASE("vocab hash is stable and layout-sensitive by construction") {
    REQUIRE(v::vocab_hash() == v::vocab_hash());
    REQUIRE(v::vocab_hash() != 0);
}

TEST_CASE("every EOS-distinct control id is a legal hidden-tail candidate") {
    for (int id = 0; id < v::n_special; ++id) {
        if (id == v::EOS) continue;
        REQUIRE(v::is_special(id));
    }
}
