#pragma once

#include <array>
#include <string>
#include <vector>

#include "htf/common.hpp"

namespace htf::vocab {

// ------------------------------- layout -------------------------------
// 96 ids total: 0-7 are control tokens that user-facing rendering strips;
// 8-95 map one-to-one onto 88 printable characters (character tokenizer).

inline constexpr int PAD = 0;
inline constexpr int BOS = 1;
inline constexpr int EOS = 2;
inline constexpr int IM_START = 3;
inline constexpr int IM_END = 4;
inline constexpr int BOX_START = 5;
inline constexpr int BOX_END = 6;
inline constexpr int QUAD_START = 7;

inline constexpr int n_special = 8;
inline constexpr int size = 96;

inline constexpr bool is_special(int id) { return id >= 0 && id < n_special; }

// Fixed 88-symbol roster, id 8 + index. Space first, then digits, letters,
// and punctuation; chosen so prompts/captions and a few math-ish glyphs fit.
inline const std::string& charset() {
    static const std::string cs =
        " 0123456789"
        "abcdefghijklmnopqrstuvwxyz"
        "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
        ".,:;!?'\"()-+*/=<>[]_#%&@|";
    return cs;
}

inline const char* special_name(int id) {
    static const std::array<const char*, n_special> names = {
        "<pad>", "<bos>", "<eos>", "<im_start>", "<im_end>", "<box_start>", "<box_end>", "<quad_start>"};
    if (!is_special(id)) throw ContractError("special_name: id " + std::to_string(id) + " is not special");
    return names[static_cast<std::size_t>(id)];
}

// Character -> id, or -1 when the character is outside the roster.
inline int char_to_id(char c) {
    static const std::array<int, 256> lut = [] {
        std::array<int, 256> t{};
        t.fill(-1);
        const std::string& cs = charset();
        for (std::size_t i = 0; i < cs.size(); ++i)
            t[static_cast<unsigned char>(cs[i])] = n_special + static_cast<int>(i);
        return t;
    }();
    return lut[static_cast<unsigned char>(c)];
}

inline std::vector<int> encode(const std::string& text) {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (char c : text) {
        const int id = char_to_id(c);
        if (id < 0)
            throw ContractError(std::string("encode: character '") + c + "' (byte " +
                                std::to_string(static_cast<int>(static_cast<unsigned char>(c))) +
                                ") is outside the vocabulary");
        ids.push_back(id);
    }
    return ids;
}

// Decode text ids only; control ids are a contract violation here (callers
// that want lossy rendering go through render_visible).
inline std::string decode(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= size) throw ContractError("decode: id " + std::to_string(id) + " outside vocabulary");
        if (is_special(id))
            throw ContractError(std::string("decode: control token ") + special_name(id) +
                                " has no text form; use render_visible");
        out.push_back(charset()[static_cast<std::size_t>(id - n_special)]);
    }
    return out;
}

struct Rendered {
    std::string text;
    int visible_length = 0;
};

// User-facing view of a token stream: every control id is dropped, the rest
// decodes to text. visible_length counts kept tokens.
inline Rendered render_visible(const std::vector<int>& ids) {
    Rendered r;
    r.text.reserve(ids.size());
    for (int id : ids) {
        if (id < 0 || id >= size)
            throw ContractError("render_visible: id " + std::to_string(id) + " outside vocabulary");
        if (is_special(id)) continue;
        r.text.push_back(charset()[static_cast<std::size_t>(id - n_special)]);
        ++r.visible_length;
    }
    return r;
}

// Stable identity of the vocabulary layout, embedded in checkpoints so a
// params file can never be silently paired with a different tokenizer.
inline std::uint64_t vocab_hash() {
    std::string ident = std::to_string(size) + "|";
    for (int i = 0; i < n_special; ++i) ident += std::string(special_name(i)) + "|";
    ident += charset();
    return fnv1a(ident);
}

}  // namespace htf::vocab
