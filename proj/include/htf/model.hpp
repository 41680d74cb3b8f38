#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "htf/tape.hpp"
#include "htf/vocab.hpp"

namespace htf::model {

using vocab::render_visible;
using vocab::Rendered;

// ------------------------------- geometry -------------------------------

struct ModelDims {
    int d_model = 64;
    int n_layers = 2;
    int n_heads = 2;
    int ffn_dim = 128;
    int context_len = 256;
    int n_visual_tokens = 16;

    int head_dim() const { return d_model / n_heads; }
    int patch_dim() const { return 256 / n_visual_tokens; }  // 16x16 image, equal patches

    void validate() const {
        if (d_model < 1 || n_layers < 1 || n_heads < 1 || ffn_dim < 1 || context_len < 1 || n_visual_tokens < 1)
            throw ConfigError("ModelDims: all dimensions must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("ModelDims: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        if (256 % n_visual_tokens != 0)
            throw ConfigError("ModelDims: 256 pixels not divisible into " + std::to_string(n_visual_tokens) +
                              " patches");
        if (context_len <= n_visual_tokens)
            throw ConfigError("ModelDims: context_len must exceed the visual prefix length");
    }

    bool operator==(const ModelDims&) const = default;
};

// ------------------------------- image -------------------------------

struct ImageSpec {
    Tensor pixels;  // [16,16], values in [0,1]

    void validate() const {
        if (pixels.shape != std::vector<int>{16, 16})
            throw ShapeError("ImageSpec: expected 16x16 pixels, got " + Tensor::shape_str(pixels.shape));
        for (double p : pixels.data)
            if (!(p >= 0.0 && p <= 1.0))
                throw ContractError("ImageSpec: pixel " + fmt_double(p) + " outside [0,1]");
    }
};

// Normalize to [-1,1] and cut into n_visual_tokens square patches, each
// flattened row-major into one feature row. Runs before the perturbation
// is added, so it needs no gradient path.
inline Tensor process_image(const ImageSpec& img, const ModelDims& dims = ModelDims{}) {
    img.validate();
    const int n = dims.n_visual_tokens;
    const int pd = dims.patch_dim();
    const int side = 4;  // 16x16 image, 4x4 patch grid when n=16
    const int grid = 16 / side;
    if (n != grid * grid || pd != side * side)
        throw ConfigError("process_image: only the 16-patch 4x4 layout is supported");
    Tensor feat = Tensor::zeros({n, pd});
    for (int pr = 0; pr < grid; ++pr)
        for (int pc = 0; pc < grid; ++pc) {
            const int row = pr * grid + pc;
            for (int i = 0; i < side; ++i)
                for (int j = 0; j < side; ++j)
                    feat.at(row, i * side + j) = (img.pixels.at(pr * side + i, pc * side + j) - 0.5) / 0.5;
        }
    return feat;
}

// ------------------------------- parameters -------------------------------

struct ToyVlmParams {
    ModelDims dims;
    std::uint64_t seed = 0;

    Tensor tok_emb;      // [|V|, d]
    Tensor pos_emb;      // [context_len, d]
    Tensor visual_proj;  // [patch_dim, d]
    Tensor visual_pos;   // [n_visual, d]
    struct Layer {
        Tensor ln1_g, ln1_b;      // [d]
        Tensor wq, wk, wv, wo;    // [d, d]
        Tensor ln2_g, ln2_b;      // [d]
        Tensor w1;                // [d, ffn]
        Tensor b1;                // [ffn]
        Tensor w2;                // [ffn, d]
        Tensor b2;                // [d]
    };
    std::vector<Layer> layers;
    Tensor lnf_g, lnf_b;  // [d]
    Tensor head;          // [d, |V|]

    // Visits every tensor in one canonical order (initialization, optimizer
    // state, and checkpoint layout all share it).
    template <class F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        f("visual_proj", visual_proj);
        f("visual_pos", visual_pos);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Layer& L = layers[l];
            f(p + "ln1_g", L.ln1_g);
            f(p + "ln1_b", L.ln1_b);
            f(p + "wq", L.wq);
            f(p + "wk", L.wk);
            f(p + "wv", L.wv);
            f(p + "wo", L.wo);
            f(p + "ln2_g", L.ln2_g);
            f(p + "ln2_b", L.ln2_b);
            f(p + "w1", L.w1);
            f(p + "b1", L.b1);
            f(p + "w2", L.w2);
            f(p + "b2", L.b2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("head", head);
    }

    template <class F>
    void for_each(F&& f) const {
        const_cast<ToyVlmParams*>(this)->for_each(
            [&f](const std::string& name, Tensor& t) { f(name, static_cast<const Tensor&>(t)); });
    }

    // Every weight is a pure function of (dims, seed): one generator, one
    // fixed visiting order.
    static ToyVlmParams init(const ModelDims& dims, std::uint64_t seed) {
        dims.validate();
        ToyVlmParams p;
        p.dims = dims;
        p.seed = seed;
        const int d = dims.d_model;
        p.tok_emb = Tensor::zeros({vocab::size, d});
        p.pos_emb = Tensor::zeros({dims.context_len, d});
        p.visual_proj = Tensor::zeros({dims.patch_dim(), d});
        p.visual_pos = Tensor::zeros({dims.n_visual_tokens, d});
        p.layers.resize(static_cast<std::size_t>(dims.n_layers));
        for (Layer& L : p.layers) {
            L.ln1_g = Tensor::zeros({d});
            L.ln1_b = Tensor::zeros({d});
            L.wq = Tensor::zeros({d, d});
            L.wk = Tensor::zeros({d, d});
            L.wv = Tensor::zeros({d, d});
            L.wo = Tensor::zeros({d, d});
            L.ln2_g = Tensor::zeros({d});
            L.ln2_b = Tensor::zeros({d});
            L.w1 = Tensor::zeros({d, dims.ffn_dim});
            L.b1 = Tensor::zeros({dims.ffn_dim});
            L.w2 = Tensor::zeros({dims.ffn_dim, d});
            L.b2 = Tensor::zeros({d});
        }
        p.lnf_g = Tensor::zeros({d});
        p.lnf_b = Tensor::zeros({d});
        p.head = Tensor::zeros({d, vocab::size});

        Rng rng(mix_seed(seed, fnv1a("toy-vlm-init")));
        p.for_each([&rng](const std::string& name, Tensor& t) {
            const bool is_gain = name.size() >= 2 && name.substr(name.size() - 2) == "_g";
            const bool is_bias = (name.size() >= 2 && name.substr(name.size() - 2) == "_b") ||
                                 name.find(".b1") != std::string::npos || name.find(".b2") != std::string::npos;
            if (is_gain) {
                for (double& v : t.data) v = 1.0;
                return;
            }
            if (is_bias) return;  // zeros
            double scale = 0.1;
            if (t.rank() == 2) scale = 1.0 / std::sqrt(static_cast<double>(t.rows()));
            if (name == "tok_emb" || name == "pos_emb" || name == "visual_pos") scale = 0.1;
            for (double& v : t.data) v = rng.normal() * scale;
        });
        return p;
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for_each([&h](const std::string& name, const Tensor& t) {
            h = fnv1a(name, h);
            h = fnv1a(t.data.data(), t.data.size() * sizeof(double), h);
        });
        return h;
    }
};

// ------------------------------- tape binding -------------------------------

// Params mirrored as tape Vars. requires_grad=true for pretraining; false
// binds them as constants (crafting differentiates only the features).
struct BoundParams {
    const ToyVlmParams* src = nullptr;
    Var tok_emb, pos_emb, visual_proj, visual_pos;
    struct Layer {
        Var ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2;
    };
    std::vector<Layer> layers;
    Var lnf_g, lnf_b, head;

    template <class F>
    void for_each(F&& f) {
        f("tok_emb", tok_emb);
        f("pos_emb", pos_emb);
        f("visual_proj", visual_proj);
        f("visual_pos", visual_pos);
        for (std::size_t l = 0; l < layers.size(); ++l) {
            const std::string p = "layer" + std::to_string(l) + ".";
            Layer& L = layers[l];
            f(p + "ln1_g", L.ln1_g);
            f(p + "ln1_b", L.ln1_b);
            f(p + "wq", L.wq);
            f(p + "wk", L.wk);
            f(p + "wv", L.wv);
            f(p + "wo", L.wo);
            f(p + "ln2_g", L.ln2_g);
            f(p + "ln2_b", L.ln2_b);
            f(p + "w1", L.w1);
            f(p + "b1", L.b1);
            f(p + "w2", L.w2);
            f(p + "b2", L.b2);
        }
        f("lnf_g", lnf_g);
        f("lnf_b", lnf_b);
        f("head", head);
    }
};

inline BoundParams bind(Tape& tape, const ToyVlmParams& params, bool requires_grad) {
    BoundParams b;
    b.src = &params;
    b.layers.resize(params.layers.size());
    std::vector<Var*> slots;
    b.for_each([&slots](const std::string&, Var& v) { slots.push_back(&v); });
    std::size_t i = 0;
    params.for_each([&](const std::string&, const Tensor& t) { *slots[i++] = tape.leaf(t, requires_grad); });
    return b;
}

// ------------------------------- forward -------------------------------

namespace detail {

inline Tensor causal_mask(int s) {
    Tensor m = Tensor::zeros({s, s});
    for (int i = 0; i < s; ++i)
        for (int j = i + 1; j < s; ++j) m.at(i, j) = -1e9;
    return m;
}

inline void check_token_ids(const std::vector<int>& ids, const char* what) {
    for (int id : ids)
        if (id < 0 || id >= vocab::size)
            throw ContractError(std::string(what) + ": token id " + std::to_string(id) + " outside vocabulary");
}

}  // namespace detail

// Teacher-forced forward. The transformer consumes the visual prefix, the
// full prompt, and teacher[0..L-2]; row i of the result holds the logits
// that predict teacher[i]. Differentiable w.r.t. features.
inline Var forward_logits(Tape& tape, const BoundParams& bp, Var features, const std::vector<int>& prompt,
                          const std::vector<int>& teacher) {
    const ModelDims& dims = bp.src->dims;
    const int nv = dims.n_visual_tokens;
    if (prompt.empty()) throw ContractError("forward_logits: prompt must be non-empty");
    if (teacher.empty()) throw ContractError("forward_logits: teacher_tokens must be non-empty");
    detail::check_token_ids(prompt, "forward_logits(prompt)");
    detail::check_token_ids(teacher, "forward_logits(teacher)");
    const Tensor& fv = features.value();
    if (fv.shape != std::vector<int>{nv, dims.patch_dim()})
        throw ShapeError("forward_logits: features must be [" + std::to_string(nv) + "," +
                         std::to_string(dims.patch_dim()) + "], got " + Tensor::shape_str(fv.shape));

    const int P = static_cast<int>(prompt.size());
    const int L = static_cast<int>(teacher.size());
    const int n_text = P + L - 1;
    const int S = nv + n_text;
    if (S > dims.context_len)
        throw CapacityError("forward_logits: sequence needs " + std::to_string(S) + " positions but context_len is " +
                            std::to_string(dims.context_len));

    std::vector<int> text_ids = prompt;
    text_ids.insert(text_ids.end(), teacher.begin(), teacher.end() - 1);

    Var vis = add(matmul(features, bp.visual_proj), bp.visual_pos);
    Var txt = add(gather_rows(bp.tok_emb, text_ids), slice_rows(bp.pos_emb, nv, nv + n_text));
    Var h = concat_rows(vis, txt);

    Var mask = tape.constant(detail::causal_mask(S));
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(dims.head_dim()));

    for (const BoundParams::Layer& ly : bp.layers) {
        Var a = layer_norm(h, ly.ln1_g, ly.ln1_b);
        Var q = matmul(a, ly.wq);
        Var k = matmul(a, ly.wk);
        Var v = matmul(a, ly.wv);
        Var attn_out{nullptr, -1};
        for (int hd = 0; hd < dims.n_heads; ++hd) {
            const int c0 = hd * dims.head_dim();
            const int c1 = c0 + dims.head_dim();
            Var qh = slice_cols(q, c0, c1);
            Var kh = slice_cols(k, c0, c1);
            Var vh = slice_cols(v, c0, c1);
            Var scores = add(scale(matmul_nt(qh, kh), inv_sqrt_hd), mask);
            Var oh = matmul(softmax(scores), vh);
            attn_out = hd == 0 ? oh : concat_cols(attn_out, oh);
        }
        h = add(h, matmul(attn_out, ly.wo));
        Var f = layer_norm(h, ly.ln2_g, ly.ln2_b);
        Var ff = add(matmul(relu(add(matmul(f, ly.w1), ly.b1)), ly.w2), ly.b2);
        h = add(h, ff);
    }

    Var logits_all = matmul(layer_norm(h, bp.lnf_g, bp.lnf_b), bp.head);
    const int first = nv + P - 1;
    return slice_rows(logits_all, first, first + L);
}

// Logits for the single next token after `text_ids` (prompt plus anything
// generated so far). Grad-free convenience used by the decoders.
inline Tensor next_token_logits(const ToyVlmParams& params, const Tensor& features, const std::vector<int>& text_ids) {
    Tape tape;
    BoundParams bp = bind(tape, params, false);
    Var f = tape.constant(features);
    Var z = forward_logits(tape, bp, f, text_ids, {vocab::PAD});
    Tensor row({vocab::size}, z.value().data);
    return row;
}

// ------------------------------- decoding -------------------------------

struct GenerationConfig {
    enum class Strategy { greedy, nucleus };
    Strategy strategy = Strategy::greedy;
    double top_p = 1.0;
    double temperature = 1.0;
    int max_new_tokens = 160;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(top_p > 0.0 && top_p <= 1.0)) throw ConfigError("GenerationConfig: top_p must be in (0,1]");
        if (!(temperature > 0.0)) throw ConfigError("GenerationConfig: temperature must be positive");
        if (max_new_tokens < 1) throw ConfigError("GenerationConfig: max_new_tokens must be >= 1");
    }
};

struct GenResult {
    std::vector<int> tokens;    // generated tokens only (prompt excluded)
    bool reached_limit = false; // hit max_new_tokens or the context ceiling
    bool context_capped = false;
};

namespace detail {

inline int argmax_lowest_id(const Tensor& row) {
    int best = 0;
    for (int j = 1; j < static_cast<int>(row.numel()); ++j)
        if (row[static_cast<std::size_t>(j)] > row[static_cast<std::size_t>(best)]) best = j;
    return best;
}

inline int nucleus_pick(const Tensor& row, double top_p, double temperature, Rng& rng) {
    const int n = static_cast<int>(row.numel());
    std::vector<double> z(row.data);
    for (double& v : z) v /= temperature;
    const double m = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (double& v : z) {
        v = std::exp(v - m);
        s += v;
    }
    for (double& v : z) v /= s;
    std::vector<int> order(static_cast<std::size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&z](int a, int b) {
        const double pa = z[static_cast<std::size_t>(a)], pb = z[static_cast<std::size_t>(b)];
        return pa != pb ? pa > pb : a < b;
    });
    // smallest prefix with cumulative mass >= top_p (floating shortfall at
    // top_p = 1 simply keeps the whole vocabulary)
    std::size_t keep = order.size();
    double cum = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) {
        cum += z[static_cast<std::size_t>(order[i])];
        if (cum >= top_p) {
            keep = i + 1;
            break;
        }
    }
    double mass = 0.0;
    for (std::size_t i = 0; i < keep; ++i) mass += z[static_cast<std::size_t>(order[i])];
    const double u = rng.uniform() * mass;
    double acc = 0.0;
    for (std::size_t i = 0; i < keep; ++i) {
        acc += z[static_cast<std::size_t>(order[i])];
        if (u < acc) return order[i];
    }
    return order[keep - 1];
}

}  // namespace detail

// Autoregressive decoding; stops early iff EOS is emitted. Running into the
// context ceiling truncates and reports reached_limit.
inline GenResult generate(const ToyVlmParams& params, const Tensor& features, const std::vector<int>& prompt,
                          const GenerationConfig& cfg) {
    cfg.validate();
    if (prompt.empty()) throw ContractError("generate: prompt must be non-empty");
    const int nv = params.dims.n_visual_tokens;
    if (nv + static_cast<int>(prompt.size()) + 1 > params.dims.context_len)
        throw CapacityError("generate: prompt of " + std::to_string(prompt.size()) +
                            " tokens leaves no room in context_len " + std::to_string(params.dims.context_len));
    Rng rng(cfg.seed);
    GenResult res;
    std::vector<int> ids = prompt;
    while (static_cast<int>(res.tokens.size()) < cfg.max_new_tokens) {
        if (nv + static_cast<int>(ids.size()) + 1 > params.dims.context_len) {
            res.context_capped = true;
            break;
        }
        const Tensor row = next_token_logits(params, features, ids);
        int tok;
        if (cfg.strategy == GenerationConfig::Strategy::greedy)
            tok = detail::argmax_lowest_id(row);
        else
            tok = detail::nucleus_pick(row, cfg.top_p, cfg.temperature, rng);
        res.tokens.push_back(tok);
        ids.push_back(tok);
        if (tok == vocab::EOS) break;
    }
    res.reached_limit = static_cast<int>(res.tokens.size()) == cfg.max_new_tokens || res.context_capped;
    return res;
}

// ------------------------------- checkpoint IO -------------------------------

// Layout: `HTVLM1` line, one JSON metadata line, then every tensor in
// for_each order using the tensor-module serialization.
inline void save_checkpoint(std::ostream& os, const ToyVlmParams& params) {
    nlohmann::json meta;
    meta["d_model"] = params.dims.d_model;
    meta["n_layers"] = params.dims.n_layers;
    meta["n_heads"] = params.dims.n_heads;
    meta["ffn_dim"] = params.dims.ffn_dim;
    meta["context_len"] = params.dims.context_len;
    meta["n_visual_tokens"] = params.dims.n_visual_tokens;
    meta["seed"] = params.seed;
    meta["vocab_hash"] = hex16(vocab::vocab_hash());
    os << "HTVLM1\n" << meta.dump() << "\n";
    params.for_each([&os](const std::string&, const Tensor& t) { write_tensor(os, t); });
    if (!os) throw IoError("save_checkpoint: stream write failed");
}

inline ToyVlmParams load_checkpoint(std::istream& is) {
    std::string magic;
    if (!std::getline(is, magic) || magic != "HTVLM1")
        throw IoError("load_checkpoint: bad magic line '" + magic + "'");
    std::string meta_line;
    if (!std::getline(is, meta_line)) throw IoError("load_checkpoint: missing metadata line");
    nlohmann::json meta = nlohmann::json::parse(meta_line, nullptr, false);
    if (meta.is_discarded()) throw IoError("load_checkpoint: metadata is not valid JSON");
    ModelDims dims;
    dims.d_model = meta.at("d_model").get<int>();
    dims.n_layers = meta.at("n_layers").get<int>();
    dims.n_heads = meta.at("n_heads").get<int>();
    dims.ffn_dim = meta.at("ffn_dim").get<int>();
    dims.context_len = meta.at("context_len").get<int>();
    dims.n_visual_tokens = meta.at("n_visual_tokens").get<int>();
    dims.validate();
    const std::string vh = meta.at("vocab_hash").get<std::string>();
    if (vh != hex16(vocab::vocab_hash()))
        throw IoError("load_checkpoint: vocabulary hash " + vh + " does not match this build");
    ToyVlmParams p = ToyVlmParams::init(dims, meta.at("seed").get<std::uint64_t>());
    p.for_each([&is](const std::string& name, Tensor& t) {
        Tensor loaded = read_tensor(is);
        if (loaded.shape != t.shape)
            throw IoError("load_checkpoint: tensor " + name + " has shape " + Tensor::shape_str(loaded.shape) +
                          ", expected " + Tensor::shape_str(t.shape));
        t = std::move(loaded);
    });
    return p;
}

}  // namespace htf::model
