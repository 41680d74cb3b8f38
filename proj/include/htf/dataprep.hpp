#pragma once

#include <algorithm>
#include <istream>
#include <map>
#include <ostream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "htf/model.hpp"

namespace htf::dataprep {

// ------------------------------- descriptors -------------------------------

// Symbolic ground truth about one procedural image; every prompt template
// and caption is filled from these fields, so prompts, pretraining targets,
// and the picture itself stay mutually consistent.
struct ImageDescriptor {
    int image_id = 0;
    std::string kind;         // gradient | blob | stripes | checker
    std::string shade;        // foreground: dark | light
    std::string bg_shade;     // background: the opposite
    std::string dominant;     // whole-image majority shade (from pixel mean)
    std::string position;     // anchor of the primary element
    std::string orientation;  // horizontal | vertical | grid | scattered
    int count = 1;            // how many `thing` the image contains
    std::string thing;        // plural noun for counting questions
    std::string focus;        // singular noun for locating questions
    std::string size_word;    // small | large
    std::string bright_lr;    // brighter half, left/right axis
    std::string bright_tb;    // brighter half, top/bottom axis
};

namespace detail {

inline const std::vector<std::string>& anchors() {
    static const std::vector<std::string> a = {"top left", "top right", "bottom left", "bottom right", "center"};
    return a;
}

inline std::string other_anchor(const std::string& pos) {
    const auto& a = anchors();
    for (std::size_t i = 0; i < a.size(); ++i)
        if (a[i] == pos) return a[(i + 1) % a.size()];
    return a[0];
}

inline std::string other_kind(const std::string& kind) {
    static const std::vector<std::string> kinds = {"gradient", "blob", "stripes", "checker"};
    for (std::size_t i = 0; i < kinds.size(); ++i)
        if (kinds[i] == kind) return kinds[(i + 1) % kinds.size()];
    return kinds[0];
}

inline std::string opposite(const std::string& side) {
    if (side == "left") return "right";
    if (side == "right") return "left";
    if (side == "top") return "bottom";
    return "top";
}

// Keep synthesized pixels well inside [0,1]: the crafted feature
// perturbation (up to 64/255 in feature units = ~0.126 in pixel units)
// must survive the pixel-space round trip without hitting the clamp.
inline constexpr double kPixelLo = 0.14;
inline constexpr double kPixelHi = 0.86;

inline double snap8(double v) {
    v = std::min(kPixelHi, std::max(kPixelLo, v));
    return std::round(v * 255.0) / 255.0;
}

}  // namespace detail

// ------------------------------- images -------------------------------

// Procedural 16x16 scenes. Kinds rotate so any count >= 2 mixes pattern
// types; every parameter lands in the descriptor.
inline std::vector<std::pair<model::ImageSpec, ImageDescriptor>> synthesize_images(int count, std::uint64_t seed) {
    if (count < 1) throw ContractError("synthesize_images: count must be >= 1");
    Rng rng(mix_seed(seed, fnv1a("images")));
    std::vector<std::pair<model::ImageSpec, ImageDescriptor>> out;
    out.reserve(static_cast<std::size_t>(count));
    const double lo = 0.18, hi = 0.82;
    for (int idx = 0; idx < count; ++idx) {
        Tensor px = Tensor::full({16, 16}, lo);
        ImageDescriptor d;
        d.image_id = idx;
        const int kind = idx % 4;
        // v counts earlier images of the same kind. Structural parameters
        // (orientation, element count, block size) cycle over v so any two
        // same-kind images differ in layout, not just in RNG flavor; that
        // keeps the pixel arrays pairwise distinct for count <= 16, well
        // past the largest batch the lab ever synthesizes.
        const int v = idx / 4;
        const bool invert = rng.below(2) == 1;  // swap light-on-dark for dark-on-light
        const double fg = invert ? lo : hi;
        const double bg = invert ? hi : lo;
        d.shade = invert ? "dark" : "light";
        d.bg_shade = invert ? "light" : "dark";
        d.size_word = "large";
        d.position = "center";
        if (kind == 0) {
            d.kind = "gradient";
            d.orientation = v % 2 == 0 ? "horizontal" : "vertical";
            const bool flip = (v / 2) % 2 == 1;
            for (int i = 0; i < 16; ++i)
                for (int j = 0; j < 16; ++j) {
                    const double t = (d.orientation == "horizontal" ? j : i) / 15.0;
                    px.at(i, j) = lo + (hi - lo) * (flip ? 1.0 - t : t);
                }
            d.count = 2;
            d.thing = "shades";
            d.focus = "gradient";
            d.shade = "light";
            d.bg_shade = "dark";
        } else if (kind == 1) {
            d.kind = "blob";
            for (double& v2 : px.data) v2 = bg;
            d.count = 1 + v % 3;
            d.thing = "blobs";
            d.focus = "blob";
            const int radius = v % 4 < 2 ? 2 : 3;
            d.size_word = radius == 2 ? "small" : "large";
            static const int cx[5] = {4, 11, 4, 11, 8};
            static const int cy[5] = {4, 4, 11, 11, 8};
            std::vector<int> slots = {0, 1, 2, 3, 4};
            rng.shuffle(slots);
            for (int b = 0; b < d.count; ++b) {
                const int s = slots[static_cast<std::size_t>(b)];
                if (b == 0) d.position = detail::anchors()[static_cast<std::size_t>(s)];
                for (int i = 0; i < 16; ++i)
                    for (int j = 0; j < 16; ++j) {
                        const int di = i - cy[s], dj = j - cx[s];
                        if (di * di + dj * dj <= radius * radius) px.at(i, j) = fg;
                    }
            }
            d.orientation = "scattered";
        } else if (kind == 2) {
            d.kind = "stripes";
            for (double& v2 : px.data) v2 = bg;
            d.count = 3 + v % 3;
            d.thing = "stripes";
            d.focus = "stripe pattern";
            d.orientation = rng.below(2) == 0 ? "horizontal" : "vertical";
            const int phase = (v / 3) % 2;
            for (int s = 0; s < d.count; ++s) {
                const int start = (16 * s) / d.count + 1 + phase;
                for (int w = 0; w < 2; ++w) {
                    const int line = start + w;
                    if (line >= 16) continue;
                    for (int k = 0; k < 16; ++k) {
                        if (d.orientation == "horizontal")
                            px.at(line, k) = fg;
                        else
                            px.at(k, line) = fg;
                    }
                }
            }
        } else {
            d.kind = "checker";
            const int side = (v / 2) % 2 == 0 ? 4 : 2;
            d.count = (16 / side) * (16 / side);
            d.thing = "squares";
            d.focus = "grid";
            d.orientation = "grid";
            d.size_word = side == 4 ? "large" : "small";
            // both shades cover equal area, so the leading block defines
            // "the pattern"; derived from v, not the rng draw, to keep the
            // pixel array a pure function of the structural variant
            const double first = v % 2 == 0 ? hi : lo;
            d.shade = v % 2 == 0 ? "light" : "dark";
            d.bg_shade = v % 2 == 0 ? "dark" : "light";
            for (int i = 0; i < 16; ++i)
                for (int j = 0; j < 16; ++j)
                    px.at(i, j) = ((i / side + j / side) % 2 == 0) ? first : lo + hi - first;
        }
        for (double& v : px.data) v = detail::snap8(v);
        double mean = 0.0, left = 0.0, right = 0.0, top = 0.0, bottom = 0.0;
        for (int i = 0; i < 16; ++i)
            for (int j = 0; j < 16; ++j) {
                const double v = px.at(i, j);
                mean += v;
                (j < 8 ? left : right) += v;
                (i < 8 ? top : bottom) += v;
            }
        d.dominant = mean / 256.0 < 0.5 ? "dark" : "light";
        d.bright_lr = left >= right ? "left" : "right";
        d.bright_tb = top >= bottom ? "top" : "bottom";
        out.push_back({model::ImageSpec{std::move(px)}, std::move(d)});
    }
    return out;
}

// ------------------------------- templates -------------------------------

// One concrete prompt with its ground-truth caption answer.
struct QA {
    std::string q;
    std::string a;
    int family = 0;  // 0 describe, 1 count, 2 locate, 3 attribute, 4 yesno, 5 compare
};

namespace detail {

inline std::string base_caption(const ImageDescriptor& d) {
    if (d.kind == "gradient") return "a " + d.orientation + " gradient from " + d.bg_shade + " to " + d.shade;
    if (d.kind == "blob") {
        if (d.count == 1) return "a " + d.size_word + " " + d.shade + " blob at the " + d.position;
        return std::to_string(d.count) + " " + d.size_word + " " + d.shade + " blobs on a " + d.bg_shade + " field";
    }
    if (d.kind == "stripes")
        return std::to_string(d.count) + " " + d.shade + " " + d.orientation + " stripes on a " + d.bg_shade +
               " field";
    return "a " + d.shade + " and " + d.bg_shade + " checker grid";
}

inline std::vector<QA> family_describe(const ImageDescriptor& d) {
    static const std::vector<std::string> imperatives = {
        "describe the image",     "describe this picture",  "describe the scene",     "describe this image",
        "summarize the image",    "summarize this picture", "summarize the scene",    "summarize this image",
        "caption the image",      "caption this picture",   "caption the scene",      "caption this image"};
    static const std::vector<std::string> questions = {
        "what do you see?",
        "what is in the image?",
        "what does the image show?",
        "what is shown here?",
        "what is this picture about?",
        "tell me what you see",
        "give a short description",
        "how would you describe the image?",
        "what is depicted here?",
        "briefly describe what appears",
        "explain what the image contains",
        "what appears in this image?"};
    const std::string cap = base_caption(d);
    std::vector<QA> out;
    int v = 0;
    for (const auto& q : imperatives) out.push_back({q, v++ % 2 == 0 ? cap : "the image shows " + cap, 0});
    for (const auto& q : questions) out.push_back({q, v++ % 2 == 0 ? cap : "the image shows " + cap, 0});
    return out;
}

inline std::vector<QA> family_count(const ImageDescriptor& d) {
    static const std::vector<std::string> tpl = {
        "how many # are there?",        "how many # do you see?",     "count the #",
        "count the # in the image",     "what is the number of #?",   "give the number of #",
        "how many # appear?",           "how many # are visible?",    "state the count of #",
        "how many # can you find?",     "tell me how many # there are", "what count of # is shown?",
        "number of #?",                 "count of #?",                "how many distinct #?",
        "total # in the image?",        "how many # in this picture?", "can you count the #?",
        "what number of # appear?",     "report the number of #"};
    std::vector<QA> out;
    const std::string n = std::to_string(d.count);
    for (std::size_t v = 0; v < tpl.size(); ++v) {
        std::string q = tpl[v];
        q.replace(q.find('#'), 1, d.thing);
        out.push_back({q, v % 2 == 0 ? n : "there are " + n + " " + d.thing, 1});
    }
    return out;
}

inline std::vector<QA> family_locate(const ImageDescriptor& d) {
    static const std::vector<std::string> tpl = {
        "where is the #?",                  "where is the # located?",       "what is the position of the #?",
        "point out the #",                  "locate the #",                  "give the location of the #",
        "which part holds the #?",          "where does the # sit?",         "in which region is the #?",
        "identify where the # is",          "where is the # placed?",        "which area contains the #?",
        "where can the # be found?",        "what part of the image has the #?",
        "tell me where the # is",           "where should i look for the #?",
        "spot the #",                       "which corner holds the #?",     "name the region of the #",
        "where is the main #?"};
    std::vector<QA> out;
    for (std::size_t v = 0; v < tpl.size(); ++v) {
        std::string q = tpl[v];
        q.replace(q.find('#'), 1, d.focus);
        out.push_back({q, v % 2 == 0 ? "at the " + d.position : "the " + d.focus + " is at the " + d.position, 2});
    }
    return out;
}

inline std::vector<QA> family_attribute(const ImageDescriptor& d) {
    std::vector<QA> out;
    const std::string& f = d.focus;
    out.push_back({"what shade is the pattern?", d.shade, 3});
    out.push_back({"what shade dominates the image?", "mostly " + d.dominant, 3});
    out.push_back({"is the main element dark or light?", d.shade, 3});
    out.push_back({"dark or light overall?", "mostly " + d.dominant, 3});
    out.push_back({"what tone is the " + f + "?", d.shade, 3});
    out.push_back({"name the shade of the " + f, "the " + f + " is " + d.shade, 3});
    out.push_back({"what is the overall tone?", "mostly " + d.dominant, 3});
    out.push_back({"how would you call the background tone?", d.bg_shade, 3});
    out.push_back({"what shade is the background?", "the background is " + d.bg_shade, 3});
    out.push_back({"describe the brightness of the main element", "the " + f + " is " + d.shade, 3});
    out.push_back({"what is the orientation of the pattern?", d.orientation, 3});
    out.push_back({"which way does the pattern run?", "the pattern is " + d.orientation, 3});
    out.push_back({"is the pattern horizontal or vertical?", d.orientation, 3});
    out.push_back({"describe the pattern direction", "the pattern is " + d.orientation, 3});
    out.push_back({"what direction does the pattern follow?", d.orientation, 3});
    out.push_back({"how is the pattern oriented?", "the pattern is " + d.orientation, 3});
    out.push_back({"which orientation is shown?", d.orientation, 3});
    out.push_back({"state the pattern orientation", "the pattern is " + d.orientation, 3});
    out.push_back({"what way is the pattern aligned?", d.orientation, 3});
    out.push_back({"name the direction of the " + d.thing, "the " + d.thing + " are " + d.orientation, 3});
    return out;
}

inline std::vector<QA> family_yesno(const ImageDescriptor& d) {
    auto yn = [](bool b) { return std::string(b ? "yes" : "no"); };
    std::vector<QA> out;
    out.push_back({"is the pattern dark?", yn(d.shade == "dark"), 4});
    out.push_back({"is the pattern light?", yn(d.shade == "light"), 4});
    out.push_back({"is the background dark?", yn(d.bg_shade == "dark"), 4});
    out.push_back({"is the background light?", yn(d.bg_shade == "light"), 4});
    out.push_back({"are there exactly " + std::to_string(d.count) + " " + d.thing + "?", "yes", 4});
    out.push_back({"are there exactly " + std::to_string(d.count + 1) + " " + d.thing + "?", "no", 4});
    out.push_back({"are there more than " + std::to_string(d.count) + " " + d.thing + "?", "no", 4});
    out.push_back({"are there fewer than " + std::to_string(d.count + 2) + " " + d.thing + "?", "yes", 4});
    out.push_back({"is this a " + d.kind + " image?", "yes", 4});
    out.push_back({"is this a " + detail::other_kind(d.kind) + " image?", "no", 4});
    out.push_back({"is the " + d.focus + " at the " + d.position + "?", "yes", 4});
    out.push_back({"is the " + d.focus + " at the " + detail::other_anchor(d.position) + "?", "no", 4});
    out.push_back({"is the left side brighter than the right?", yn(d.bright_lr == "left"), 4});
    out.push_back({"is the top brighter than the bottom?", yn(d.bright_tb == "top"), 4});
    out.push_back({"is the pattern horizontal?", yn(d.orientation == "horizontal"), 4});
    out.push_back({"is the pattern vertical?", yn(d.orientation == "vertical"), 4});
    out.push_back({"does the image look empty?", "no", 4});
    out.push_back({"is anything visible in the image?", "yes", 4});
    out.push_back({"is the main element " + d.size_word + "?", "yes", 4});
    out.push_back({"is the image a photo of text?", "no", 4});
    return out;
}

inline std::vector<QA> family_compare(const ImageDescriptor& d) {
    const std::string L = d.bright_lr, dl = detail::opposite(L);
    const std::string T = d.bright_tb, dt = detail::opposite(T);
    std::vector<QA> out;
    out.push_back({"which side is brighter?", "the " + L + " side", 5});
    out.push_back({"which side is darker?", "the " + dl + " side", 5});
    out.push_back({"is the left or the right brighter?", "the " + L + " side", 5});
    out.push_back({"which half is lighter: top or bottom?", "the " + T + " half", 5});
    out.push_back({"which half is darker: top or bottom?", "the " + dt + " half", 5});
    out.push_back({"compare the left and right sides", "the " + L + " side is brighter", 5});
    out.push_back({"compare the top and bottom halves", "the " + T + " half is brighter", 5});
    out.push_back({"where is the image brightest?", "the " + T + " " + L, 5});
    out.push_back({"where is the image darkest?", "the " + dt + " " + dl, 5});
    out.push_back({"which region looks darkest?", "the " + dt + " " + dl, 5});
    out.push_back({"which direction does brightness increase?", "toward the " + L, 5});
    out.push_back({"which direction does brightness decrease?", "toward the " + dl, 5});
    out.push_back({"name the brighter half, left or right", L, 5});
    out.push_back({"name the darker half, left or right", dl, 5});
    out.push_back({"name the brighter half, top or bottom", T, 5});
    out.push_back({"name the darker half, top or bottom", dt, 5});
    out.push_back({"which side has more light?", "the " + L + " side", 5});
    out.push_back({"which side has less light?", "the " + dl + " side", 5});
    out.push_back({"which quadrant is brightest?", "the " + T + " " + L, 5});
    out.push_back({"which quadrant is darkest?", "the " + dt + " " + dl, 5});
    return out;
}

inline std::vector<std::vector<QA>> all_families(const ImageDescriptor& d) {
    return {family_describe(d), family_count(d),  family_locate(d),
            family_attribute(d), family_yesno(d), family_compare(d)};
}

}  // namespace detail

// Every template instance for one descriptor, in fixed family order. This
// is the pretraining target set and the capacity pool behind prompt rounds.
inline std::vector<QA> enumerate_qa(const ImageDescriptor& d) {
    std::vector<QA> out;
    for (auto& fam : detail::all_families(d))
        for (auto& qa : fam) out.push_back(std::move(qa));
    return out;
}

// Emulates the iterative multi-turn prompting strategy: rounds of 10
// prompts cycling through the six families, never repeating an earlier
// round's prompt (per-family cursors over a seeded draw order).
inline std::vector<QA> generate_prompt_set(const ImageDescriptor& d, int n, std::uint64_t seed) {
    auto families = detail::all_families(d);
    int capacity = 0;
    for (const auto& f : families) capacity += static_cast<int>(f.size());
    if (n > capacity)
        throw GenerationError("generate_prompts: requested " + std::to_string(n) + " but capacity is " +
                              std::to_string(capacity));
    Rng rng(mix_seed(seed, fnv1a("prompt-order")));
    for (auto& f : families) rng.shuffle(f);
    std::vector<std::size_t> cursor(families.size(), 0);
    std::vector<QA> out;
    std::set<std::string> seen;
    while (static_cast<int>(out.size()) < n) {
        for (int slot = 0; slot < 10 && static_cast<int>(out.size()) < n; ++slot) {
            // preferred family for this slot; fall through to the next one
            // with templates left so any n up to total capacity succeeds
            std::size_t fam = static_cast<std::size_t>(slot) % families.size();
            std::size_t tried = 0;
            while (cursor[fam] >= families[fam].size() && tried++ < families.size())
                fam = (fam + 1) % families.size();
            if (cursor[fam] >= families[fam].size())
                throw GenerationError("generate_prompts: all families exhausted after " +
                                      std::to_string(out.size()) + " prompts");
            QA qa = families[fam][cursor[fam]++];
            if (!seen.insert(qa.q).second)
                throw GenerationError("generate_prompts: duplicate prompt '" + qa.q + "'");
            out.push_back(std::move(qa));
        }
    }
    return out;
}

// Token-level prompt list (BOS-prefixed), the shape the model consumes.
inline std::vector<std::vector<int>> generate_prompts(const ImageDescriptor& d, int n, std::uint64_t seed) {
    std::vector<std::vector<int>> out;
    for (const QA& qa : generate_prompt_set(d, n, seed)) {
        std::vector<int> ids = {vocab::BOS};
        for (int t : vocab::encode(qa.q)) ids.push_back(t);
        out.push_back(std::move(ids));
    }
    return out;
}

// ------------------------------- corpus -------------------------------

// Pretraining example: answer the prompt about image `image_id` with the
// procedural caption. Targets end in EOS.
struct CorpusExample {
    int image_id = 0;
    std::vector<int> prompt_ids;
    std::vector<int> target_ids;

    bool operator==(const CorpusExample&) const = default;
};

namespace detail {

inline std::vector<int> bos_prompt(const std::string& text, int marker = -1) {
    std::vector<int> ids = {vocab::BOS};
    if (marker >= 0) ids.push_back(marker);
    for (int t : vocab::encode(text)) ids.push_back(t);
    return ids;
}

// Caption pairs joined document-style, the usual shape of a pretraining
// stream: `caption <eos> <bos> caption <eos>`. They are what teaches the
// model that <eos> is a boundary rather than an absorbing state and give
// <bos> supervised occurrences outside position zero. Separator runs vary
// in length (one to three <bos>), the way blank-line runs vary in real
// streams, so a repeated control token is itself an in-distribution shape.
inline void corpus_stream_docs(const ImageDescriptor& d, const std::vector<QA>& qa,
                               std::vector<CorpusExample>& out) {
    const std::size_t n = qa.size();
    for (std::size_t s = 0; s < 24; ++s) {
        const std::size_t i = (s * 5 + 3) % n;
        std::size_t j = (s * 7 + 11) % n;
        if (j == i) j = (j + 1) % n;
        CorpusExample ex;
        ex.image_id = d.image_id;
        ex.prompt_ids = bos_prompt(qa[i].q);
        ex.target_ids = vocab::encode(qa[i].a);
        ex.target_ids.push_back(vocab::EOS);
        for (std::size_t b = 0; b <= s % 3; ++b) ex.target_ids.push_back(vocab::BOS);
        for (int t : vocab::encode(qa[j].a)) ex.target_ids.push_back(t);
        ex.target_ids.push_back(vocab::EOS);
        out.push_back(std::move(ex));
    }
    // Repeated documents: packing without dedup leaves the same caption
    // twice in a row; the second pass is predictable by copying, which is
    // what teaches the copy/induction behavior repeated patterns rely on.
    for (std::size_t s = 0; s < 6; ++s) {
        const std::size_t i = (s * 17 + 5) % n;
        CorpusExample ex;
        ex.image_id = d.image_id;
        ex.prompt_ids = bos_prompt(qa[i].q);
        const std::vector<int> body = vocab::encode(qa[i].a);
        ex.target_ids = body;
        ex.target_ids.push_back(vocab::EOS);
        ex.target_ids.push_back(vocab::BOS);
        for (int t : body) ex.target_ids.push_back(t);
        ex.target_ids.push_back(vocab::EOS);
        out.push_back(std::move(ex));
    }
    // Truncated leading documents: packed streams cut documents at hard
    // boundaries, so a separator run can directly follow mid-caption text
    // with no <eos> in between, and run lengths vary widely. These are
    // deliberately UNPROMPTED (a bare <bos> stream, no question): a prompted
    // line with this shape would train the exact trajectories greedy capture
    // walks, and the clean model would start emitting <bos> mid-caption,
    // which capture_responses rejects.
    static constexpr std::size_t run_len[8] = {1, 2, 3, 4, 6, 8, 10, 12};
    for (std::size_t s = 0; s < 36; ++s) {
        std::size_t i = (s * 11 + 2) % n;
        while (qa[i].a.size() < 8) i = (i + 1) % n;  // a cut needs room for a prefix
        std::size_t j = (s * 13 + 7) % n;
        if (j == i) j = (j + 1) % n;
        if (s % 3 == 2) j = i;  // every third stream repeats its own document
        const std::vector<int> lead = vocab::encode(qa[i].a);
        // cuts sweep 35%..100% of the caption; a full-length "cut" is the
        // packing style that separates complete documents by <bos> alone
        const double frac = 0.35 + 0.65 * static_cast<double>((s * 7) % 20) / 19.0;
        const std::size_t cut =
            std::min(lead.size(), std::max<std::size_t>(3, static_cast<std::size_t>(std::llround(
                                                               frac * static_cast<double>(lead.size())))));
        CorpusExample ex;
        ex.image_id = d.image_id;
        ex.prompt_ids = {vocab::BOS};
        ex.target_ids.assign(lead.begin(), lead.begin() + static_cast<std::ptrdiff_t>(cut));
        for (std::size_t b = 0; b < run_len[s % 8]; ++b) ex.target_ids.push_back(vocab::BOS);
        for (int t : vocab::encode(qa[j].a)) ex.target_ids.push_back(t);
        ex.target_ids.push_back(vocab::EOS);
        out.push_back(std::move(ex));
    }
}

// Grounding lines in the style of VLM instruction corpora: the prompt opens
// with a control marker and the answer wraps its span in the matching
// control brackets. Plain text prompts never elicit these tokens, so clean
// captures stay control-free while the control rows stay trained.
inline void corpus_grounding_docs(const ImageDescriptor& d, std::vector<CorpusExample>& out) {
    auto push = [&out, &d](std::vector<int> prompt, std::vector<int> target) {
        CorpusExample ex;
        ex.image_id = d.image_id;
        ex.prompt_ids = std::move(prompt);
        ex.target_ids = std::move(target);
        ex.target_ids.push_back(vocab::EOS);
        out.push_back(std::move(ex));
    };
    auto span = [](int open, const std::string& text, int close) {
        std::vector<int> ids = {open};
        for (int t : vocab::encode(text)) ids.push_back(t);
        if (close >= 0) ids.push_back(close);
        return ids;
    };
    auto cat = [](std::vector<int> a, const std::vector<int>& b) {
        a.insert(a.end(), b.begin(), b.end());
        return a;
    };
    using vocab::BOX_END;
    using vocab::BOX_START;
    using vocab::IM_END;
    using vocab::IM_START;
    using vocab::QUAD_START;
    const std::string bright = d.bright_tb + " " + d.bright_lr;
    const std::string dark = opposite(d.bright_tb) + " " + opposite(d.bright_lr);

    // single-box answers
    push(bos_prompt("box the " + d.focus, BOX_START), span(BOX_START, d.position, BOX_END));
    push(bos_prompt("draw a box around the " + d.focus, BOX_START), span(BOX_START, d.position, BOX_END));
    push(bos_prompt("give a box for the " + d.focus, BOX_START), span(BOX_START, d.position, BOX_END));
    push(bos_prompt("box the main element", BOX_START), span(BOX_START, d.position, BOX_END));
    push(bos_prompt("box the brightest part", BOX_START), span(BOX_START, bright, BOX_END));
    push(bos_prompt("box the darkest part", BOX_START), span(BOX_START, dark, BOX_END));
    // two boxes in one answer
    push(bos_prompt("box both extreme corners", BOX_START),
         cat(span(BOX_START, "top left", BOX_END), span(BOX_START, "bottom right", BOX_END)));
    push(bos_prompt("box the bright and dark parts", BOX_START),
         cat(span(BOX_START, bright, BOX_END), span(BOX_START, dark, BOX_END)));
    // tags
    push(bos_prompt("tag the image", IM_START), span(IM_START, d.kind, IM_END));
    push(bos_prompt("tag the scene", IM_START), span(IM_START, d.kind, IM_END));
    push(bos_prompt("tag the shade", IM_START), span(IM_START, d.shade, IM_END));
    push(bos_prompt("tag the tone", IM_START), span(IM_START, d.dominant, IM_END));
    push(bos_prompt("tag the layout", IM_START), span(IM_START, d.orientation, IM_END));
    push(bos_prompt("tag the direction", IM_START), span(IM_START, d.orientation, IM_END));
    push(bos_prompt("tag everything", IM_START),
         cat(cat(span(IM_START, d.kind, IM_END), span(IM_START, d.shade, IM_END)),
             span(IM_START, d.orientation, IM_END)));
    push(bos_prompt("list all tags", IM_START),
         cat(cat(span(IM_START, d.kind, IM_END), span(IM_START, d.dominant, IM_END)),
             span(IM_START, d.orientation, IM_END)));
    // quadrant markers (no closing token in the control set)
    push(bos_prompt("name the bright quadrant", QUAD_START), span(QUAD_START, bright, -1));
    push(bos_prompt("name the dark quadrant", QUAD_START), span(QUAD_START, dark, -1));
    push(bos_prompt("which quadrant stands out", QUAD_START), span(QUAD_START, bright, -1));
    push(bos_prompt("give the focus quadrant", QUAD_START), span(QUAD_START, d.position, -1));
    // stacked brackets, the markup-style nesting shape: an opener (closer)
    // may immediately repeat
    push(bos_prompt("box the nested region", BOX_START),
         cat({BOX_START}, cat(span(BOX_START, d.position, BOX_END), std::vector<int>{BOX_END})));
    push(bos_prompt("box the inner area", BOX_START),
         cat({BOX_START}, cat(span(BOX_START, bright, BOX_END), std::vector<int>{BOX_END})));
    push(bos_prompt("tag the nested label", IM_START),
         cat({IM_START}, cat(span(IM_START, d.kind, IM_END), std::vector<int>{IM_END})));
    push(bos_prompt("tag the inner label", IM_START),
         cat({IM_START}, cat(span(IM_START, d.shade, IM_END), std::vector<int>{IM_END})));
}

}  // namespace detail

inline std::vector<CorpusExample> synthesize_corpus(
    const std::vector<std::pair<model::ImageSpec, ImageDescriptor>>& images) {
    std::vector<CorpusExample> out;
    for (const auto& [img, desc] : images) {
        const std::vector<QA> qa = enumerate_qa(desc);
        for (const QA& pair : qa) {
            CorpusExample ex;
            ex.image_id = desc.image_id;
            ex.prompt_ids = detail::bos_prompt(pair.q);
            ex.target_ids = vocab::encode(pair.a);
            ex.target_ids.push_back(vocab::EOS);
            out.push_back(std::move(ex));
        }
        detail::corpus_stream_docs(desc, qa, out);
        detail::corpus_grounding_docs(desc, out);
    }
    return out;
}

// ------------------------------- dataset -------------------------------

struct PromptResponsePair {
    std::vector<int> prompt_tokens;
    std::vector<int> response_tokens;  // includes terminal EOS
    int K = 0;

    void validate() const {
        if (prompt_tokens.empty()) throw ContractError("PromptResponsePair: prompt empty");
        if (response_tokens.empty() || response_tokens.back() != vocab::EOS)
            throw ContractError("PromptResponsePair: response must end in EOS");
        if (K != static_cast<int>(response_tokens.size()))
            throw ContractError("PromptResponsePair: K=" + std::to_string(K) + " but response has " +
                                std::to_string(response_tokens.size()) + " tokens");
    }
};

struct GuidingDataset {
    int image_id = 0;
    std::vector<PromptResponsePair> pairs;
    std::vector<int> opt_idx;
    std::vector<int> test_idx;

    void validate() const {
        if (pairs.size() != 60) throw ContractError("GuidingDataset: expected 60 pairs, got " + std::to_string(pairs.size()));
        if (opt_idx.size() != 40 || test_idx.size() != 20)
            throw ContractError("GuidingDataset: split must be 40/20");
        std::set<int> all(opt_idx.begin(), opt_idx.end());
        all.insert(test_idx.begin(), test_idx.end());
        if (all.size() != 60 || *all.begin() != 0 || *all.rbegin() != 59)
            throw ContractError("GuidingDataset: split indices must partition 0..59");
        for (const auto& p : pairs) p.validate();
        std::set<std::vector<int>> prompts;
        for (const auto& p : pairs)
            if (!prompts.insert(p.prompt_tokens).second)
                throw ContractError("GuidingDataset: duplicate prompt token sequence");
    }
};

// Greedy clean-image responses, the authentic r_i. Truncation to `cap`
// swaps the last kept token for EOS so every response terminates.
inline std::vector<PromptResponsePair> capture_responses(const model::ToyVlmParams& params, const Tensor& features,
                                                         const std::vector<std::vector<int>>& prompts, int cap = 48) {
    if (cap < 1) throw ContractError("capture_responses: cap must be >= 1");
    std::vector<PromptResponsePair> out;
    model::GenerationConfig gc;
    gc.strategy = model::GenerationConfig::Strategy::greedy;
    gc.max_new_tokens = cap;
    for (const auto& prompt : prompts) {
        model::GenResult g = model::generate(params, features, prompt, gc);
        std::vector<int> resp = g.tokens;
        if (resp.empty() || resp.back() != vocab::EOS) {
            if (static_cast<int>(resp.size()) >= cap) resp.resize(static_cast<std::size_t>(cap) - 1);
            resp.push_back(vocab::EOS);
        }
        for (std::size_t i = 0; i + 1 < resp.size(); ++i)
            if (vocab::is_special(resp[i]))
                throw ContractError("capture_responses: clean response contains control token id " +
                                    std::to_string(resp[i]) + " before the terminal EOS");
        PromptResponsePair pair;
        pair.prompt_tokens = prompt;
        pair.response_tokens = std::move(resp);
        pair.K = static_cast<int>(pair.response_tokens.size());
        pair.validate();
        out.push_back(std::move(pair));
    }
    return out;
}

inline GuidingDataset split_dataset(int image_id, std::vector<PromptResponsePair> pairs, std::uint64_t seed) {
    if (pairs.size() != 60)
        throw ContractError("split_dataset: expected 60 pairs, got " + std::to_string(pairs.size()));
    std::vector<int> idx(60);
    for (int i = 0; i < 60; ++i) idx[static_cast<std::size_t>(i)] = i;
    Rng rng(mix_seed(seed, fnv1a("split")));
    rng.shuffle(idx);
    GuidingDataset ds;
    ds.image_id = image_id;
    ds.pairs = std::move(pairs);
    ds.opt_idx.assign(idx.begin(), idx.begin() + 40);
    ds.test_idx.assign(idx.begin() + 40, idx.end());
    ds.validate();
    return ds;
}

// ------------------------------- serialization -------------------------------

// One JSON object per line, pair order preserved; `split` tags membership and
// `order` records the pair's position within its split list (sampling during
// crafting walks the optimization list, so its order must survive a roundtrip).
inline void write_datasets(std::ostream& os, const std::vector<GuidingDataset>& sets) {
    for (const GuidingDataset& ds : sets) {
        std::map<int, std::pair<const char*, int>> where;
        for (std::size_t r = 0; r < ds.opt_idx.size(); ++r)
            where[ds.opt_idx[r]] = {"opt", static_cast<int>(r)};
        for (std::size_t r = 0; r < ds.test_idx.size(); ++r)
            where[ds.test_idx[r]] = {"test", static_cast<int>(r)};
        for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
            const auto& [tag, rank] = where.at(static_cast<int>(i));
            nlohmann::json j;
            j["image_id"] = ds.image_id;
            j["prompt_ids"] = ds.pairs[i].prompt_tokens;
            j["response_ids"] = ds.pairs[i].response_tokens;
            j["split"] = tag;
            j["order"] = rank;
            os << j.dump() << "\n";
        }
    }
    if (!os) throw IoError("write_datasets: stream write failed");
}

inline std::vector<GuidingDataset> read_datasets(std::istream& is) {
    std::vector<GuidingDataset> sets;
    std::vector<std::map<int, int>> opt_rank, test_rank;  // per dataset: rank -> pair index
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded()) throw IoError("read_datasets: line is not valid JSON: " + line.substr(0, 80));
        const int image_id = j.at("image_id").get<int>();
        if (sets.empty() || sets.back().image_id != image_id) {
            sets.push_back(GuidingDataset{});
            sets.back().image_id = image_id;
            opt_rank.emplace_back();
            test_rank.emplace_back();
        }
        GuidingDataset& ds = sets.back();
        PromptResponsePair pair;
        pair.prompt_tokens = j.at("prompt_ids").get<std::vector<int>>();
        pair.response_tokens = j.at("response_ids").get<std::vector<int>>();
        pair.K = static_cast<int>(pair.response_tokens.size());
        const int idx = static_cast<int>(ds.pairs.size());
        const int rank = j.value("order", idx);
        if (j.at("split").get<std::string>() == "opt")
            opt_rank.back()[rank] = idx;
        else
            test_rank.back()[rank] = idx;
        ds.pairs.push_back(std::move(pair));
    }
    for (std::size_t s = 0; s < sets.size(); ++s) {
        for (const auto& [rank, idx] : opt_rank[s]) sets[s].opt_idx.push_back(idx);
        for (const auto& [rank, idx] : test_rank[s]) sets[s].test_idx.push_back(idx);
        sets[s].validate();
    }
    return sets;
}

}  // namespace htf::dataprep
