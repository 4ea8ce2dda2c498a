#include "promise/prompt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <unordered_set>

namespace promise {

bool canonical_less(const PointPrompt &a, const PointPrompt &b) {
    if (a.label != b.label) return a.label < b.label;
    return a.position < b.position;
}

std::vector<PointPrompt> simulate_prompts(const MaskArray3 &mask, int n, uint64_t seed) {
    if (n < 0) throw std::invalid_argument("simulate_prompts: n must be >= 0");
    const auto &vals = mask.values();
    const bool has_fg = std::any_of(vals.begin(), vals.end(), [](uint8_t v) { return v != 0; });
    const uint8_t wanted = has_fg ? 1 : 0;
    const auto label = has_fg ? PromptLabel::foreground : PromptLabel::background;

    std::vector<uint32_t> candidates;
    for (std::size_t i = 0; i < vals.size(); ++i)
        if ((vals[i] != 0 ? 1 : 0) == wanted) candidates.push_back(static_cast<uint32_t>(i));
    if (candidates.empty()) return {};

    std::mt19937_64 rng(seed);
    std::vector<std::size_t> picks;
    const auto m = candidates.size();
    if (m >= static_cast<std::size_t>(n)) {
        // Floyd's algorithm: n distinct indices, each subset equally likely.
        std::unordered_set<std::size_t> chosen;
        for (std::size_t j = m - static_cast<std::size_t>(n); j < m; ++j) {
            const auto t = std::uniform_int_distribution<std::size_t>(0, j)(rng);
            const auto pick = chosen.count(t) ? j : t;
            chosen.insert(pick);
            picks.push_back(pick);
        }
    } else {
        std::uniform_int_distribution<std::size_t> any(0, m - 1);
        for (int i = 0; i < n; ++i) picks.push_back(any(rng));
    }

    std::vector<PointPrompt> out;
    out.reserve(picks.size());
    for (auto p : picks) {
        const auto idx = mask.unravel(candidates[p]);
        out.push_back({{double(idx[0]), double(idx[1]), double(idx[2])}, label});
    }
    return out;
}

// ---------------------------------------------------------------------------

MultiHeadAttentionImpl::MultiHeadAttentionImpl(int64_t dim, int64_t heads) : n_heads(heads) {
    if (dim % heads != 0) throw std::invalid_argument("attention: dim must be divisible by heads");
    q_proj = register_module("q_proj", torch::nn::Linear(dim, dim));
    k_proj = register_module("k_proj", torch::nn::Linear(dim, dim));
    v_proj = register_module("v_proj", torch::nn::Linear(dim, dim));
    out_proj = register_module("out_proj", torch::nn::Linear(dim, dim));
}

torch::Tensor MultiHeadAttentionImpl::forward(const torch::Tensor &query, const torch::Tensor &key_value,
                                              const std::optional<torch::Tensor> &key_mask) {
    const auto nq = query.size(0), nk = key_value.size(0), d = query.size(1);
    const auto hd = d / n_heads;
    auto q = q_proj(query).reshape({nq, n_heads, hd}).transpose(0, 1);     // (h, nq, hd)
    auto k = k_proj(key_value).reshape({nk, n_heads, hd}).transpose(0, 1); // (h, nk, hd)
    auto v = v_proj(key_value).reshape({nk, n_heads, hd}).transpose(0, 1);
    auto logits = torch::matmul(q, k.transpose(1, 2)) / std::sqrt(static_cast<double>(hd));
    if (key_mask) logits = logits.masked_fill(key_mask->logical_not().view({1, 1, nk}), -INFINITY);
    auto out = torch::matmul(logits.softmax(-1), v).transpose(0, 1).reshape({nq, d});
    return out_proj(out);
}

PromptEncoderImpl::PromptEncoderImpl(int64_t embed_dim, PromptConfig cfg, std::array<int64_t, 3> token_extent)
    : cfg_(cfg), token_extent_(token_extent) {
    if (cfg.d_prompt < 1 || cfg.n_queries < 1) throw std::invalid_argument("prompt encoder: sizes must be positive");
    const auto d = cfg.d_prompt;
    input_proj = register_module("input_proj", torch::nn::Linear(embed_dim, d));
    label_embed = register_module("label_embed", torch::nn::Embedding(2, d));
    global_queries = register_parameter("global_queries", torch::randn({cfg.n_queries, d}) * 0.02);
    self_attn = register_module("self_attn", MultiHeadAttention(d, cfg.n_heads));
    norm1 = register_module("norm1", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
    cross_attn = register_module("cross_attn", MultiHeadAttention(d, cfg.n_heads));
    norm2 = register_module("norm2", torch::nn::LayerNorm(torch::nn::LayerNormOptions({d})));
}

torch::Tensor PromptEncoderImpl::project(const TokenGrid &image_embedding) { return input_proj(image_embedding.tokens); }

double PromptEncoderImpl::grid_coord(double model_coord, int axis) const {
    return (model_coord + 0.5) / static_cast<double>(token_extent_[static_cast<std::size_t>(axis)]) - 0.5;
}

torch::Tensor PromptEncoderImpl::visual_sample(const torch::Tensor &projected, const std::vector<PointPrompt> &prompts) {
    if (prompts.empty()) return torch::zeros({0, cfg_.d_prompt}, projected.options());
    const std::array<int64_t, 3> grid{projected.size(0), projected.size(1), projected.size(2)};
    std::vector<torch::Tensor> rows;
    std::vector<int64_t> labels;
    for (const auto &p : prompts) {
        std::array<int64_t, 3> lo{}, hi{};
        std::array<double, 3> t{};
        for (int a = 0; a < 3; ++a) {
            const auto ua = static_cast<std::size_t>(a);
            const double g = std::clamp(grid_coord(p.position[ua], a), 0.0, static_cast<double>(grid[ua] - 1));
            lo[ua] = static_cast<int64_t>(std::floor(g));
            hi[ua] = std::min(lo[ua] + 1, grid[ua] - 1);
            t[ua] = g - static_cast<double>(lo[ua]);
        }
        torch::Tensor acc;
        for (int corner = 0; corner < 8; ++corner) {
            double w = 1.0;
            std::array<int64_t, 3> idx{};
            for (int a = 0; a < 3; ++a) {
                const auto ua = static_cast<std::size_t>(a);
                const bool upper = (corner >> (2 - a)) & 1;
                idx[ua] = upper ? hi[ua] : lo[ua];
                w *= upper ? t[ua] : 1.0 - t[ua];
            }
            if (w == 0.0) continue;
            auto term = projected.index({idx[0], idx[1], idx[2]}) * w;
            acc = acc.defined() ? acc + term : term;
        }
        rows.push_back(acc);
        labels.push_back(static_cast<int64_t>(p.label));
    }
    auto label_ids = torch::tensor(labels, torch::TensorOptions().dtype(torch::kInt64));
    return torch::stack(rows) + label_embed(label_ids);
}

PromptState PromptEncoderImpl::encode(const torch::Tensor &projected, const std::vector<PointPrompt> &prompts,
                                      const std::optional<std::vector<bool>> &attend) {
    if (attend && attend->size() != prompts.size()) throw std::invalid_argument("prompt mask size mismatch");
    std::vector<std::size_t> order(prompts.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return canonical_less(prompts[a], prompts[b]); });
    std::vector<PointPrompt> sorted;
    std::vector<bool> keep;
    for (auto i : order) {
        sorted.push_back(prompts[i]);
        keep.push_back(attend ? (*attend)[i] : true);
    }

    PromptState state;
    state.global_queries = global_queries;
    state.point_embeddings = visual_sample(projected, sorted);

    const auto nq = cfg_.n_queries;
    auto tokens = torch::cat({global_queries, state.point_embeddings}, 0);
    std::optional<torch::Tensor> mask;
    if (attend) {
        std::vector<uint8_t> m(static_cast<std::size_t>(nq), 1);
        for (bool k : keep) m.push_back(k ? 1 : 0);
        mask = torch::tensor(m, torch::TensorOptions().dtype(torch::kUInt8)).to(torch::kBool);
    }
    tokens = norm1(tokens + self_attn(tokens, tokens, mask));
    auto queries = tokens.slice(0, 0, nq);

    auto image_tokens = projected.reshape({-1, projected.size(-1)});
    state.output_queries = norm2(queries + cross_attn(queries, image_tokens));
    return state;
}

PromptEncoderImpl::Output PromptEncoderImpl::forward(const TokenGrid &image_embedding,
                                                     const std::vector<std::vector<PointPrompt>> &prompts) {
    Output out;
    out.projected = project(image_embedding);
    const auto b = out.projected.size(0);
    if (static_cast<int64_t>(prompts.size()) != b) throw std::invalid_argument("prompt encoder: one prompt list per batch item");
    std::vector<torch::Tensor> queries;
    for (int64_t i = 0; i < b; ++i) {
        out.states.push_back(encode(out.projected[i], prompts[static_cast<std::size_t>(i)]));
        queries.push_back(out.states.back().output_queries);
    }
    out.prompt_map = prompt_to_map(torch::stack(queries), out.projected);
    return out;
}

torch::Tensor prompt_to_map(const torch::Tensor &output_queries, const torch::Tensor &projected) {
    auto q = output_queries.dim() == 2 ? output_queries.unsqueeze(0) : output_queries;
    auto p = projected.dim() == 4 ? projected.unsqueeze(0) : projected;
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.size(-1)));
    auto map = torch::einsum("bdhwc,bqc->bdhwq", {p, q}) * scale;
    return projected.dim() == 4 ? map.squeeze(0) : map;
}

} // namespace promise
