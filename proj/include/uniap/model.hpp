#pragma once

#include <array>
#include <atomic>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "uniap/optim.hpp"
#include "uniap/rng.hpp"
#include "uniap/tensor.hpp"

namespace uniap::model {

using numkit::ParamKind;
using numkit::ParamSet;
using numkit::RngStream;
using numkit::Tensor;

enum class TaskId { PE, SS, CLS };

inline const char* task_name(TaskId t) {
    switch (t) {
        case TaskId::PE: return "PE";
        case TaskId::SS: return "SS";
        case TaskId::CLS: return "CLS";
    }
    throw std::invalid_argument("unknown task");
}

inline TaskId task_from_name(const std::string& s) {
    if (s == "PE") return TaskId::PE;
    if (s == "SS") return TaskId::SS;
    if (s == "CLS") return TaskId::CLS;
    throw std::invalid_argument("unknown task name: " + s);
}

struct ModelConfig {
    int image_size = 32;
    int patch_size = 4;
    int d = 64;           // token dim
    int heads = 4;
    int blocks = 4;       // ViT depth
    int hierarchies = 4;  // M, one tap per block
    int mlp_ratio = 4;
    int dec_channels = 32;
    std::vector<TaskId> tasks = {TaskId::PE, TaskId::SS, TaskId::CLS};
    bool task_biases = true;  // false: one bias set shared by every task

    int grid() const { return image_size / patch_size; }
    int tokens() const { return grid() * grid(); }
    int head_dim() const { return d / heads; }

    void validate() const {
        if (image_size % patch_size != 0)
            throw std::invalid_argument("image_size must be divisible by patch_size");
        if (d % heads != 0) throw std::invalid_argument("d must be divisible by heads");
        if (hierarchies > blocks)
            throw std::invalid_argument("hierarchies must not exceed blocks");
        if (hierarchies < 1 || blocks < 1)
            throw std::invalid_argument("blocks and hierarchies must be positive");
        int p = patch_size;
        if (p < 2 || (p & (p - 1)) != 0)
            throw std::invalid_argument("patch_size must be a power of two >= 2");
        if (tasks.empty()) throw std::invalid_argument("task list is empty");
        int down = 1 << std::max(0, hierarchies - 2);
        if (grid() % down != 0)
            throw std::invalid_argument("token grid too small for hierarchy pyramid");
    }
};

template <typename T>
struct TokenGrid {
    Tensor<T> tokens;  // [h*w, d]
    int h = 0, w = 0;
};

template <typename T>
struct Prediction {
    TaskId task;
    Tensor<T> dense;  // [1, 1, S, S] for PE/SS
    Tensor<T> score;  // scalar logit for CLS
};

// Counts match() invocations; tests assert one per hierarchy per forward.
inline std::atomic<long long>& match_invocations() {
    static std::atomic<long long> n{0};
    return n;
}

template <typename T>
struct ModelParams {
    ModelConfig cfg;
    ParamSet<T> shared;                 // weights of all components + non-encoder biases
    std::vector<ParamSet<T>> banks;     // image-encoder biases, one set per task
    std::map<TaskId, int> bank_index;
    ParamSet<T> uncertainty;            // log-variance s_t per task

    ParamSet<T>& bank(TaskId t) {
        auto it = bank_index.find(t);
        if (it == bank_index.end())
            throw std::invalid_argument(std::string("no bias bank for task ") + task_name(t));
        return banks[it->second];
    }
    const ParamSet<T>& bank(TaskId t) const {
        return const_cast<ModelParams*>(this)->bank(t);
    }

    template <typename U>
    ModelParams<U> cast() const {
        ModelParams<U> out;
        out.cfg = cfg;
        out.shared = shared.template cast<U>();
        for (const auto& b : banks) out.banks.push_back(b.template cast<U>());
        out.bank_index = bank_index;
        out.uncertainty = uncertainty.template cast<U>();
        return out;
    }

    long long shared_numel() const {
        long long n = 0;
        for (const auto& p : shared.all()) n += p.tensor.numel();
        return n;
    }
    long long task_specific_numel() const {
        if (banks.empty()) return 0;
        long long n = 0;
        for (const auto& p : banks[0].all()) n += p.tensor.numel();
        return n;
    }
};

namespace detail {

template <typename T>
Tensor<T> init_tensor(std::vector<int> shape, RngStream& root, const std::string& name,
                      bool zero) {
    auto t = Tensor<T>::zeros(shape);
    if (!zero) {
        // fan-in-scaled init: positional embeddings use a small fixed scale;
        // conv kernels [out,in,kh,kw] and linear maps [in,out] use 1/sqrt(fan_in)
        double std_dev = 0.02;
        if (name.find("pos_embed") == std::string::npos) {
            long long fan_in = shape.size() == 4
                                   ? 1LL * shape[1] * shape[2] * shape[3]
                                   : shape[0];
            std_dev = 1.0 / std::sqrt(static_cast<double>(fan_in));
        }
        auto s = root.split(name);
        auto v = t.mutable_value();
        for (auto& x : v) x = static_cast<T>(s.trunc_normal(std_dev));
    }
    return t;
}

template <typename T>
void add_weight(ParamSet<T>& ps, RngStream& rng, const std::string& name,
                std::vector<int> shape) {
    ps.add(name, ParamKind::weight, init_tensor<T>(std::move(shape), rng, name, false));
}

template <typename T>
void add_bias(ParamSet<T>& ps, const std::string& name, std::vector<int> shape) {
    ps.add(name, ParamKind::bias, Tensor<T>::zeros(std::move(shape)));
}

// LN scales start at one.
template <typename T>
void add_ln_gain(ParamSet<T>& ps, const std::string& name, int d) {
    ps.add(name, ParamKind::weight, Tensor<T>::full({d}, T(1)));
}

}  // namespace detail

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams<T> mp;
    mp.cfg = cfg;
    RngStream rng(seed, "model.init");
    auto& sh = mp.shared;
    const int d = cfg.d, p = cfg.patch_size, n = cfg.tokens(), C = cfg.dec_channels;
    const int dm = cfg.mlp_ratio * d;

    // image encoder weights (biases live in the banks)
    detail::add_weight(sh, rng, "encoder.patch_embed.w", {d, 3, p, p});
    detail::add_weight(sh, rng, "encoder.pos_embed", {n, d});
    for (int b = 0; b < cfg.blocks; ++b) {
        std::string pre = "encoder.block" + std::to_string(b) + ".";
        detail::add_ln_gain(sh, pre + "ln1.g", d);
        detail::add_weight(sh, rng, pre + "attn.wq", {d, d});
        detail::add_weight(sh, rng, pre + "attn.wk", {d, d});
        detail::add_weight(sh, rng, pre + "attn.wv", {d, d});
        detail::add_weight(sh, rng, pre + "attn.wo", {d, d});
        detail::add_ln_gain(sh, pre + "ln2.g", d);
        detail::add_weight(sh, rng, pre + "mlp.w1", {d, dm});
        detail::add_weight(sh, rng, pre + "mlp.w2", {dm, d});
    }

    // label encoder: patch projection + positional embedding, shared by tasks
    detail::add_weight(sh, rng, "label_encoder.proj.w", {d, 1, p, p});
    detail::add_bias(sh, "label_encoder.proj.b", {d});
    detail::add_weight(sh, rng, "label_encoder.pos_embed", {n, d});

    // matching module, one attention layer per hierarchy (no biases, Eq. form)
    for (int m = 0; m < cfg.hierarchies; ++m) {
        std::string pre = "matcher.level" + std::to_string(m) + ".";
        detail::add_weight(sh, rng, pre + "wq", {d, d});
        detail::add_weight(sh, rng, pre + "wk", {d, d});
        detail::add_weight(sh, rng, pre + "wv", {d, d});
        detail::add_weight(sh, rng, pre + "wo", {d, d});
        // start the similarity near a scaled identity: query/prompt tokens share
        // the positional embedding, so matching begins spatially aligned instead
        // of uniform (random Wq/Wk gives near-flat attention and weak gradients)
        for (const char* nm : {"wq", "wk"}) {
            auto vals = sh.at(pre + nm).tensor.mutable_value();
            for (int i = 0; i < d; ++i) vals[i * d + i] += T(1);
        }
    }

    // dense decoder: per-level reassembly + resampling, fusion convs, head
    for (int m = 0; m < cfg.hierarchies; ++m) {
        std::string pre = "decoder.reassemble" + std::to_string(m) + ".";
        detail::add_weight(sh, rng, pre + "w", {C, d, 1, 1});
        detail::add_bias(sh, pre + "b", {C});
        if (m == 0) {
            detail::add_weight(sh, rng, "decoder.resample0.w", {C, C, 2, 2});  // tconv x2
            detail::add_bias(sh, "decoder.resample0.b", {C});
        } else if (m >= 2) {
            int k = 1 << (m - 1);
            std::string rp = "decoder.resample" + std::to_string(m) + ".";
            detail::add_weight(sh, rng, rp + "w", {C, C, k, k});  // conv /k
            detail::add_bias(sh, rp + "b", {C});
        }
        std::string fp = "decoder.fuse" + std::to_string(m) + ".";
        detail::add_weight(sh, rng, fp + "w", {C, C, 3, 3});
        detail::add_bias(sh, fp + "b", {C});
    }
    int up_stages = 0;
    for (int f = cfg.patch_size / 2; f > 1; f /= 2) ++up_stages;
    for (int u = 0; u < up_stages; ++u) {
        std::string up = "decoder.head.up" + std::to_string(u) + ".";
        detail::add_weight(sh, rng, up + "w", {C, C, 2, 2});
        detail::add_bias(sh, up + "b", {C});
    }
    detail::add_weight(sh, rng, "decoder.head.conv.w", {C, C, 3, 3});
    detail::add_bias(sh, "decoder.head.conv.b", {C});
    detail::add_weight(sh, rng, "decoder.head.out.w", {1, C, 1, 1});
    detail::add_bias(sh, "decoder.head.out.b", {1});
    // dense targets are mostly background; a negative output prior skips the
    // initial "learn to predict zero" phase of training
    sh.at("decoder.head.out.b").tensor.mutable_value()[0] = T(-2);

    // classification head on the final-hierarchy encoding
    detail::add_weight(sh, rng, "cls_head.w", {d, 1});
    detail::add_bias(sh, "cls_head.b", {1});

    // one bias bank per task (or a single shared bank)
    int n_banks = cfg.task_biases ? static_cast<int>(cfg.tasks.size()) : 1;
    for (int bi = 0; bi < n_banks; ++bi) {
        ParamSet<T> bank;
        detail::add_bias(bank, "encoder.patch_embed.b", {d});
        for (int b = 0; b < cfg.blocks; ++b) {
            std::string pre = "encoder.block" + std::to_string(b) + ".";
            detail::add_bias(bank, pre + "ln1.b", {d});
            detail::add_bias(bank, pre + "attn.bq", {d});
            detail::add_bias(bank, pre + "attn.bk", {d});
            detail::add_bias(bank, pre + "attn.bv", {d});
            detail::add_bias(bank, pre + "attn.bo", {d});
            detail::add_bias(bank, pre + "ln2.b", {d});
            detail::add_bias(bank, pre + "mlp.b1", {dm});
            detail::add_bias(bank, pre + "mlp.b2", {d});
        }
        mp.banks.push_back(std::move(bank));
    }
    for (size_t ti = 0; ti < cfg.tasks.size(); ++ti)
        mp.bank_index[cfg.tasks[ti]] = cfg.task_biases ? static_cast<int>(ti) : 0;

    for (TaskId t : cfg.tasks)
        mp.uncertainty.add(std::string("uncertainty.") + task_name(t),
                           ParamKind::weight, Tensor<T>::zeros({1}));
    return mp;
}

namespace detail {

// [1, c, g, g] feature map -> [g*g, c] token rows
template <typename T>
Tensor<T> map_to_tokens(const Tensor<T>& fmap) {
    int c = fmap.shape()[1], g = fmap.shape()[2];
    return numkit::transpose(numkit::reshape(fmap, {c, g * g}));
}

// [n, c] token rows -> [1, c, g, g]
template <typename T>
Tensor<T> tokens_to_map(const Tensor<T>& tokens, int g) {
    int c = tokens.shape()[1];
    return numkit::reshape(numkit::transpose(tokens), {1, c, g, g});
}

template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q_tokens, const Tensor<T>& k_tokens,
                               const Tensor<T>& v_tokens, const Tensor<T>& wq,
                               const Tensor<T>& wk, const Tensor<T>& wv,
                               const Tensor<T>& wo, int heads,
                               std::vector<Tensor<T>>* attn_out = nullptr) {
    using namespace numkit;
    int d = wq.shape()[0];
    int dh = d / heads;
    Tensor<T> q = matmul(q_tokens, wq);
    Tensor<T> k = matmul(k_tokens, wk);
    Tensor<T> v = matmul(v_tokens, wv);
    T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
    std::vector<Tensor<T>> out_heads;
    out_heads.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * dh, (h + 1) * dh);
        auto kh = slice_cols(k, h * dh, (h + 1) * dh);
        auto vh = slice_cols(v, h * dh, (h + 1) * dh);
        auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
        if (attn_out) attn_out->push_back(attn);
        out_heads.push_back(matmul(attn, vh));
    }
    return matmul(concat_cols(out_heads), wo);
}

}  // namespace detail

// Encode an image with shared weights and the task's bias bank. Returns one
// token grid per hierarchy, tapped after blocks 1..M.
template <typename T>
std::vector<TokenGrid<T>> encode_image(const Tensor<T>& image, TaskId task,
                                       ModelParams<T>& params) {
    using namespace numkit;
    const auto& cfg = params.cfg;
    if (image.shape() != std::vector<int>{3, cfg.image_size, cfg.image_size})
        throw ShapeError("encode_image: image size mismatch");
    auto& sh = params.shared;
    auto& bank = params.bank(task);
    const int g = cfg.grid();

    auto x4 = reshape(image, {1, 3, cfg.image_size, cfg.image_size});
    auto fmap = conv2d(x4, sh.at("encoder.patch_embed.w").tensor,
                       bank.at("encoder.patch_embed.b").tensor, cfg.patch_size, 0);
    auto x = detail::map_to_tokens(fmap);
    x = add(x, sh.at("encoder.pos_embed").tensor);

    std::vector<TokenGrid<T>> grids;
    grids.reserve(cfg.hierarchies);
    for (int b = 0; b < cfg.blocks; ++b) {
        std::string pre = "encoder.block" + std::to_string(b) + ".";
        auto h = layernorm(x, sh.at(pre + "ln1.g").tensor, bank.at(pre + "ln1.b").tensor);
        auto q = linear(h, sh.at(pre + "attn.wq").tensor, bank.at(pre + "attn.bq").tensor);
        auto k = linear(h, sh.at(pre + "attn.wk").tensor, bank.at(pre + "attn.bk").tensor);
        auto v = linear(h, sh.at(pre + "attn.wv").tensor, bank.at(pre + "attn.bv").tensor);
        int dh = cfg.head_dim();
        T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
        std::vector<Tensor<T>> heads;
        for (int hh = 0; hh < cfg.heads; ++hh) {
            auto qh = slice_cols(q, hh * dh, (hh + 1) * dh);
            auto kh = slice_cols(k, hh * dh, (hh + 1) * dh);
            auto vh = slice_cols(v, hh * dh, (hh + 1) * dh);
            auto attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), 1);
            heads.push_back(matmul(attn, vh));
        }
        auto o = linear(concat_cols(heads), sh.at(pre + "attn.wo").tensor,
                        bank.at(pre + "attn.bo").tensor);
        x = add(x, o);
        auto h2 = layernorm(x, sh.at(pre + "ln2.g").tensor, bank.at(pre + "ln2.b").tensor);
        auto m1 = gelu(linear(h2, sh.at(pre + "mlp.w1").tensor, bank.at(pre + "mlp.b1").tensor));
        auto m2 = linear(m1, sh.at(pre + "mlp.w2").tensor, bank.at(pre + "mlp.b2").tensor);
        x = add(x, m2);
        if (b < cfg.hierarchies) grids.push_back(TokenGrid<T>{x, g, g});
    }
    return grids;
}

// Patch-embed a single-channel label map; shared across tasks.
template <typename T>
TokenGrid<T> encode_label(const Tensor<T>& label, ModelParams<T>& params) {
    using namespace numkit;
    const auto& cfg = params.cfg;
    if (label.shape() != std::vector<int>{1, cfg.image_size, cfg.image_size})
        throw ShapeError("encode_label: label must be single-channel at image resolution");
    auto& sh = params.shared;
    auto x4 = reshape(label, {1, 1, cfg.image_size, cfg.image_size});
    auto fmap = conv2d(x4, sh.at("label_encoder.proj.w").tensor,
                       sh.at("label_encoder.proj.b").tensor, cfg.patch_size, 0);
    auto x = add(detail::map_to_tokens(fmap), sh.at("label_encoder.pos_embed").tensor);
    return TokenGrid<T>{x, cfg.grid(), cfg.grid()};
}

// Cross-attention from query image tokens to the concatenated prompt image
// tokens (keys) and prompt label tokens (values) at one hierarchy.
template <typename T>
TokenGrid<T> match(const TokenGrid<T>& q, const std::vector<TokenGrid<T>>& prompts_k,
                   const std::vector<TokenGrid<T>>& prompts_v, int level,
                   ModelParams<T>& params,
                   std::vector<Tensor<T>>* attn_out = nullptr) {
    using namespace numkit;
    if (prompts_k.empty() || prompts_k.size() != prompts_v.size())
        throw ShapeError("match: need N >= 1 prompt key/value grids");
    std::vector<Tensor<T>> ks, vs;
    for (const auto& kg : prompts_k) ks.push_back(kg.tokens);
    for (const auto& vg : prompts_v) vs.push_back(vg.tokens);
    auto k = concat_rows(ks);
    auto v = concat_rows(vs);
    std::string pre = "matcher.level" + std::to_string(level) + ".";
    auto& sh = params.shared;
    auto out = detail::multi_head_attention(
        q.tokens, k, v, sh.at(pre + "wq").tensor, sh.at(pre + "wk").tensor,
        sh.at(pre + "wv").tensor, sh.at(pre + "wo").tensor, params.cfg.heads, attn_out);
    match_invocations().fetch_add(1, std::memory_order_relaxed);
    return TokenGrid<T>{out, q.h, q.w};
}

// DPT-style dense head: per-level reassembly into a resolution pyramid, then
// progressive fusion from the deepest level, then a convolutional head.
// Every conv is constant-preserving (k == s, or 3x3 over replicate padding).
template <typename T>
Tensor<T> decode_dense(const std::vector<TokenGrid<T>>& matched, ModelParams<T>& params) {
    using namespace numkit;
    const auto& cfg = params.cfg;
    const int M = cfg.hierarchies;
    if (static_cast<int>(matched.size()) != M)
        throw ShapeError("decode_dense: expected one grid per hierarchy");
    auto& sh = params.shared;
    const int g = cfg.grid();

    std::vector<Tensor<T>> pyramid(M);
    for (int m = 0; m < M; ++m) {
        if (matched[m].h != g || matched[m].w != g)
            throw ShapeError("decode_dense: inconsistent grids");
        std::string pre = "decoder.reassemble" + std::to_string(m) + ".";
        auto z = conv2d(detail::tokens_to_map(matched[m].tokens, g),
                        sh.at(pre + "w").tensor, sh.at(pre + "b").tensor, 1, 0);
        if (m == 0) {
            z = conv_transpose2d(z, sh.at("decoder.resample0.w").tensor,
                                 sh.at("decoder.resample0.b").tensor, 2, 0);
        } else if (m >= 2) {
            int k = 1 << (m - 1);
            std::string rp = "decoder.resample" + std::to_string(m) + ".";
            z = conv2d(z, sh.at(rp + "w").tensor, sh.at(rp + "b").tensor, k, 0);
        }
        pyramid[m] = z;
    }

    auto fuse = [&](const Tensor<T>& x, int m) {
        std::string fp = "decoder.fuse" + std::to_string(m) + ".";
        return gelu(conv2d(pad_replicate(x, 1), sh.at(fp + "w").tensor,
                           sh.at(fp + "b").tensor, 1, 0));
    };
    auto y = fuse(pyramid[M - 1], M - 1);
    for (int m = M - 2; m >= 0; --m)
        y = fuse(add(upsample_nearest2(y), pyramid[m]), m);

    int up_stages = 0;
    for (int f = cfg.patch_size / 2; f > 1; f /= 2) ++up_stages;
    for (int u = 0; u < up_stages; ++u) {
        std::string up = "decoder.head.up" + std::to_string(u) + ".";
        y = conv_transpose2d(y, sh.at(up + "w").tensor, sh.at(up + "b").tensor, 2, 0);
    }
    y = gelu(conv2d(pad_replicate(y, 1), sh.at("decoder.head.conv.w").tensor,
                    sh.at("decoder.head.conv.b").tensor, 1, 0));
    return conv2d(y, sh.at("decoder.head.out.w").tensor,
                  sh.at("decoder.head.out.b").tensor, 1, 0);
}

// Linear head over the mean-pooled final-hierarchy encoding.
template <typename T>
Tensor<T> decode_class(const TokenGrid<T>& query_encoding, ModelParams<T>& params) {
    using namespace numkit;
    auto pooled = mean_rows(query_encoding.tokens);
    auto s = linear(pooled, params.shared.at("cls_head.w").tensor,
                    params.shared.at("cls_head.b").tensor);
    return reshape(s, {1});
}

template <typename T>
Prediction<T> forward(const Tensor<T>& query,
                      const std::vector<std::pair<Tensor<T>, Tensor<T>>>& prompts,
                      TaskId task, ModelParams<T>& params) {
    Prediction<T> pred;
    pred.task = task;
    if (task == TaskId::CLS) {
        auto grids = encode_image(query, task, params);
        pred.score = decode_class(grids.back(), params);
        return pred;
    }
    if (prompts.empty())
        throw std::invalid_argument("forward: dense tasks need a non-empty prompt set");
    auto qgrids = encode_image(query, task, params);
    std::vector<std::vector<TokenGrid<T>>> kgrids;
    std::vector<TokenGrid<T>> vgrid;
    for (const auto& [img, lab] : prompts) {
        kgrids.push_back(encode_image(img, task, params));
        vgrid.push_back(encode_label(lab, params));
    }
    std::vector<TokenGrid<T>> matched;
    for (int m = 0; m < params.cfg.hierarchies; ++m) {
        std::vector<TokenGrid<T>> ks;
        for (auto& kg : kgrids) ks.push_back(kg[m]);
        matched.push_back(match(qgrids[m], ks, vgrid, m, params));
    }
    pred.dense = decode_dense(matched, params);
    return pred;
}

}  // namespace uniap::model
