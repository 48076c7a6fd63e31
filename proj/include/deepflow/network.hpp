// SPDX-License-Identifier: Apache-2.0
//
// The DeepFlow-{k}T model: token embedding, k equal transformer branches with
// AdaLN-Zero conditioning, per-branch velocity heads, and the velocity
// refiner (ACC_MLP -> time-gap AdaLN -> cross-space attention) between
// adjacent branches. Supports the concat and additive refiner variants.

#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "deepflow/autodiff.hpp"
#include "deepflow/interpolant.hpp"
#include "deepflow/rng.hpp"
#include "deepflow/tensor.hpp"

namespace deepflow {

enum class GeometryKind { point, image };
enum class VeraVariant { concat, additive };

inline const char* to_string(VeraVariant v) { return v == VeraVariant::concat ? "concat" : "additive"; }

struct DataGeometry {
    GeometryKind kind = GeometryKind::point;
    std::int64_t point_dim = 2;
    std::int64_t channels = 1, height = 8, width = 8, patch = 2;

    std::int64_t tokens() const {
        return kind == GeometryKind::point ? 1 : (height / patch) * (width / patch);
    }
    std::int64_t token_dim() const {
        return kind == GeometryKind::point ? point_dim : channels * patch * patch;
    }
    Shape sample_shape() const {
        return kind == GeometryKind::point ? Shape{point_dim} : Shape{channels, height, width};
    }
    Shape batch_shape(std::int64_t b) const {
        Shape s = sample_shape();
        s.insert(s.begin(), b);
        return s;
    }
    std::int64_t sample_elems() const { return shape_numel(sample_shape()); }

    void validate() const {
        if (kind == GeometryKind::point) {
            if (point_dim < 1) throw std::invalid_argument("geometry: point dim must be >= 1");
        } else {
            if (channels < 1 || height < 1 || width < 1 || patch < 1)
                throw std::invalid_argument("geometry: bad image dims");
            if (height % patch != 0 || width % patch != 0)
                throw std::invalid_argument("geometry: patch must divide height and width");
        }
    }
};

struct ModelConfig {
    std::int64_t k = 2;
    std::int64_t depth_per_branch = 3;
    std::int64_t hidden = 64;
    std::int64_t heads = 4;
    std::int64_t num_classes = 0;  // 0 = unconditional
    DataGeometry geometry;
    VeraVariant vera_variant = VeraVariant::concat;
    std::vector<double> accmlp_multipliers = {8.0 / 3.0, 16.0 / 3.0, 8.0 / 3.0, 1.0};
    double label_dropout_prob = 0.1;
    bool use_vera = true;
    bool use_cross_attention = true;
    bool cross_attention_residual = true;
    bool detach_branch_input = false;

    void validate() const {
        if (k < 1) throw std::invalid_argument("model: k must be >= 1");
        if (depth_per_branch < 1) throw std::invalid_argument("model: depth_per_branch must be >= 1");
        if (hidden < 4 || hidden % 2 != 0) throw std::invalid_argument("model: hidden must be even and >= 4");
        if (heads < 1 || hidden % heads != 0) throw std::invalid_argument("model: hidden must be divisible by heads");
        if (num_classes < 0) throw std::invalid_argument("model: num_classes must be >= 0");
        if (accmlp_multipliers.empty() || accmlp_multipliers.back() != 1.0)
            throw std::invalid_argument("model: accmlp_multipliers must end with 1");
        if (geometry.kind == GeometryKind::image && hidden % 4 != 0)
            throw std::invalid_argument("model: image geometry needs hidden divisible by 4");
        geometry.validate();
    }

    // ACC_MLP layer widths: round(m * hidden) per multiplier.
    std::vector<std::int64_t> accmlp_channels() const {
        std::vector<std::int64_t> c;
        c.reserve(accmlp_multipliers.size());
        for (double m : accmlp_multipliers)
            c.push_back(static_cast<std::int64_t>(std::llround(m * static_cast<double>(hidden))));
        return c;
    }

    bool vera_active() const { return use_vera && k >= 2; }
    std::int64_t null_class_id() const { return num_classes; }
};

template <typename T>
struct ParamStore {
    std::vector<std::pair<std::string, Tensor<T>>> entries;  // insertion-ordered
    std::map<std::string, std::size_t> index;

    std::size_t add(const std::string& name, Shape shape) {
        if (index.count(name)) throw std::logic_error("duplicate parameter " + name);
        index[name] = entries.size();
        entries.emplace_back(name, Tensor<T>(std::move(shape)));
        return entries.size() - 1;
    }
    Tensor<T>& operator[](std::size_t i) { return entries[i].second; }
    const Tensor<T>& operator[](std::size_t i) const { return entries[i].second; }
    Tensor<T>& named(const std::string& n) { return entries[index.at(n)].second; }
    std::size_t count() const { return entries.size(); }
    std::int64_t scalar_count() const {
        std::int64_t n = 0;
        for (const auto& e : entries) n += e.second.size();
        return n;
    }
};

// Per-branch outputs of one forward pass. Vars are bound to the tape the
// forward ran on.
template <typename T>
struct BranchOutputs {
    Var<T> tokens;                     // embedded input (B, N, D)
    std::vector<Var<T>> vstar;         // k hidden velocity features (B, N, D)
    std::vector<Var<T>> v;             // k image/point-space velocities
    std::vector<Var<T>> astar;         // k-1 acceleration features (refiner sites)
    std::vector<Var<T>> a;             // k-1 image/point-space accelerations
    std::vector<Var<T>> refined;       // k-1 refiner outputs (input to next branch)
    std::vector<Tensor<T>> gaps;       // k-1 per-sample time gaps d_{t_i -> t_{i+1}}
};

template <typename T>
class DeepFlowModel {
    struct LinearRef {
        int w = -1, b = -1;
    };
    struct BlockRef {
        LinearRef qkv, proj, fc1, fc2, adaln;
    };
    struct HeadRef {
        LinearRef adaln, out;
    };
    struct VeraRef {
        std::vector<LinearRef> accmlp;
        LinearRef mod, fc1, fc2, q, k, v, o;
    };

public:
    struct Bound {
        std::vector<Var<T>> vars;
    };

    struct ModulateResult {
        Var<T> pre_mlp;  // AdaLN output before the projection MLP
        Var<T> out;
    };

    ModelConfig cfg;
    ParamStore<T> params;

    DeepFlowModel(ModelConfig config, RngStream& init_stream) : cfg(std::move(config)) {
        cfg.validate();
        register_params();
        init_params(init_stream);
        build_geometry_tables();
    }

    Bound bind(Tape<T>& tape, bool requires_grad) const {
        Bound b;
        b.vars.reserve(params.entries.size());
        for (const auto& e : params.entries) b.vars.push_back(tape.leaf(e.second, requires_grad));
        return b;
    }

    // ---- components --------------------------------------------------------

    // Data-shaped x -> (B, N, D) token sequence (plus positional embedding
    // for images).
    Var<T> embed(Tape<T>& tape, const Bound& bd, const Tensor<T>& x) const {
        const std::int64_t b = check_batch_geometry(x);
        Var<T> tokens;
        if (cfg.geometry.kind == GeometryKind::point) {
            Var<T> xv = tape.constant(x);
            xv = tape.reshape(xv, {b, 1, cfg.geometry.point_dim});
            tokens = tape.linear(xv, pv(bd, embed_.w), pv(bd, embed_.b));
        } else {
            Tensor<T> patches({b, cfg.geometry.tokens(), cfg.geometry.token_dim()});
            const std::int64_t e = cfg.geometry.sample_elems();
            for (std::int64_t ib = 0; ib < b; ++ib)
                for (std::int64_t j = 0; j < e; ++j) patches[ib * e + j] = x[ib * e + patchify_map_[static_cast<std::size_t>(j)]];
            tokens = tape.linear(tape.constant(std::move(patches)), pv(bd, embed_.w), pv(bd, embed_.b));
            Tensor<T> pos({b, cfg.geometry.tokens(), cfg.hidden});
            const std::int64_t nd = cfg.geometry.tokens() * cfg.hidden;
            for (std::int64_t ib = 0; ib < b; ++ib)
                for (std::int64_t j = 0; j < nd; ++j) pos[ib * nd + j] = pos_emb_[j];
            tokens = tape.add(tokens, tape.constant(std::move(pos)));
        }
        return tokens;
    }

    // Raw sinusoidal features for a batch of (possibly negative) times:
    // half sin / half cos, frequencies geometric from 1 down to 1e-4.
    Tensor<T> time_sinusoid(const Tensor<T>& t) const {
        const std::int64_t b = t.shape[0];
        const std::int64_t half = cfg.hidden / 2;
        Tensor<T> out({b, cfg.hidden});
        for (std::int64_t i = 0; i < b; ++i) {
            const double tv = static_cast<double>(t[i]);
            for (std::int64_t j = 0; j < half; ++j) {
                const double freq =
                    half == 1 ? 1.0 : std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half - 1));
                out[i * cfg.hidden + j] = static_cast<T>(std::sin(tv * freq));
                out[i * cfg.hidden + half + j] = static_cast<T>(std::cos(tv * freq));
            }
        }
        return out;
    }

    // Shared time embedder T(.): sinusoid -> MLP. Used for branch time-steps
    // and for refiner time-gaps.
    Var<T> time_embed(Tape<T>& tape, const Bound& bd, const Tensor<T>& t) const {
        Var<T> f = tape.constant(time_sinusoid(t));
        Var<T> h = tape.linear(f, pv(bd, time_mlp1_.w), pv(bd, time_mlp1_.b));
        return tape.linear(tape.silu(h), pv(bd, time_mlp2_.w), pv(bd, time_mlp2_.b));
    }

    // Conditioning vector per sample: time embedding plus class embedding.
    // Class id cfg.num_classes (or -1) selects the learned null class.
    Var<T> condition(Tape<T>& tape, const Bound& bd, const Tensor<T>& t,
                     const std::vector<std::int64_t>& class_ids) const {
        Var<T> te = time_embed(tape, bd, t);
        std::vector<std::int64_t> ids = normalize_class_ids(class_ids, t.shape[0]);
        Var<T> ce = tape.rows(pv(bd, class_table_), std::move(ids));
        return tape.add(te, ce);
    }

    // One branch: depth_per_branch DiT blocks under AdaLN-Zero conditioning.
    Var<T> branch_forward(Tape<T>& tape, const Bound& bd, std::int64_t branch, Var<T> tokens, Var<T> cond) const {
        const auto& blocks = branches_[static_cast<std::size_t>(branch)];
        Var<T> h = tokens;
        for (const BlockRef& blk : blocks) h = dit_block(tape, bd, blk, h, cond);
        return h;
    }

    // AdaLN-modulated layernorm + zero-initialized projection to data space.
    Var<T> velocity_head(Tape<T>& tape, const Bound& bd, std::int64_t branch, Var<T> vstar, Var<T> cond) const {
        return head_apply(tape, bd, v_heads_[static_cast<std::size_t>(branch)], vstar, cond);
    }
    Var<T> acceleration_head(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> astar, Var<T> cond) const {
        return head_apply(tape, bd, a_heads_[static_cast<std::size_t>(site)], astar, cond);
    }

    // ACC_MLP: linear chain with SiLU between layers, widths round(m*D).
    Var<T> acc_mlp(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> vstar) const {
        const auto& layers = veras_[static_cast<std::size_t>(site)].accmlp;
        Var<T> h = vstar;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = tape.linear(h, pv(bd, layers[i].w), pv(bd, layers[i].b));
            if (i + 1 < layers.size()) h = tape.silu(h);
        }
        return h;
    }

    // concat(vstar, astar) -> LN -> time-gap AdaLN-Zero -> MLP (2D -> D).
    ModulateResult vera_modulate(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> vstar, Var<T> astar,
                                 const Tensor<T>& gap) const {
        const VeraRef& vr = veras_[static_cast<std::size_t>(site)];
        const std::int64_t d = cfg.hidden;
        Var<T> ge = time_embed(tape, bd, gap);
        Var<T> sig = tape.linear(tape.silu(ge), pv(bd, vr.mod.w), pv(bd, vr.mod.b));  // (B, 4D)
        Var<T> shift = tape.slice_last(sig, 0, 2 * d);
        Var<T> scale = tape.slice_last(sig, 2 * d, 4 * d);
        Var<T> h = tape.layernorm(tape.concat_last(vstar, astar));
        h = tape.add_tokens(tape.mul_tokens(h, tape.add_scalar(scale, T(1))), shift);
        Var<T> out = tape.linear(tape.gelu(tape.linear(h, pv(bd, vr.fc1.w), pv(bd, vr.fc1.b))),
                                 pv(bd, vr.fc2.w), pv(bd, vr.fc2.b));
        return {h, out};
    }

    // Additive design: the acceleration feature alone is gap-modulated, then
    // added to the velocity feature.
    ModulateResult vera_modulate_additive(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> astar,
                                          const Tensor<T>& gap) const {
        const VeraRef& vr = veras_[static_cast<std::size_t>(site)];
        const std::int64_t d = cfg.hidden;
        Var<T> ge = time_embed(tape, bd, gap);
        Var<T> sig = tape.linear(tape.silu(ge), pv(bd, vr.mod.w), pv(bd, vr.mod.b));  // (B, 2D)
        Var<T> shift = tape.slice_last(sig, 0, d);
        Var<T> scale = tape.slice_last(sig, d, 2 * d);
        Var<T> h = tape.layernorm(astar);
        h = tape.add_tokens(tape.mul_tokens(h, tape.add_scalar(scale, T(1))), shift);
        Var<T> out = tape.linear(tape.gelu(tape.linear(h, pv(bd, vr.fc1.w), pv(bd, vr.fc1.b))),
                                 pv(bd, vr.fc2.w), pv(bd, vr.fc2.b));
        return {h, out};
    }

    // Query from the pre-normed input token space, key/value from the
    // pre-normed modulated velocity feature space.
    Var<T> cross_space_attention(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> modulated,
                                 Var<T> x_tokens) const {
        if (tape.shape(modulated)[1] != tape.shape(x_tokens)[1])
            throw std::invalid_argument("cross_space_attention: token count mismatch");
        const VeraRef& vr = veras_[static_cast<std::size_t>(site)];
        Var<T> kvsrc = tape.layernorm(modulated);
        Var<T> q = tape.linear(tape.layernorm(x_tokens), pv(bd, vr.q.w), pv(bd, vr.q.b));
        Var<T> k = tape.linear(kvsrc, pv(bd, vr.k.w), pv(bd, vr.k.b));
        Var<T> v = tape.linear(kvsrc, pv(bd, vr.v.w), pv(bd, vr.v.b));
        Var<T> att = multihead_attention(tape, q, k, v);
        Var<T> out = tape.linear(att, pv(bd, vr.o.w), pv(bd, vr.o.b));
        return cfg.cross_attention_residual ? tape.add(out, modulated) : out;
    }

    // Full refiner for one site. Returns (refined, astar).
    std::pair<Var<T>, Var<T>> vera_forward(Tape<T>& tape, const Bound& bd, std::int64_t site, Var<T> vstar,
                                           const Tensor<T>& gap, Var<T> x_tokens) const {
        Var<T> astar = acc_mlp(tape, bd, site, vstar);
        Var<T> pre;
        if (cfg.vera_variant == VeraVariant::concat) {
            pre = vera_modulate(tape, bd, site, vstar, astar, gap).out;
        } else {
            pre = tape.add(vstar, vera_modulate_additive(tape, bd, site, astar, gap).out);
        }
        Var<T> refined = cfg.use_cross_attention ? cross_space_attention(tape, bd, site, pre, x_tokens) : pre;
        return {refined, astar};
    }

    // ---- full forward -------------------------------------------------------

    // times: k per-sample time tensors (B,), non-increasing toward the data.
    BranchOutputs<T> forward(Tape<T>& tape, const Bound& bd, const Tensor<T>& x_t,
                             const std::vector<Tensor<T>>& times,
                             const std::vector<std::int64_t>& class_ids) const {
        if (static_cast<std::int64_t>(times.size()) != cfg.k)
            throw std::invalid_argument("forward: need one time tensor per branch");
        BranchOutputs<T> out;
        out.tokens = embed(tape, bd, x_t);
        Var<T> h = out.tokens;
        for (std::int64_t i = 0; i < cfg.k; ++i) {
            Var<T> cond = condition(tape, bd, times[static_cast<std::size_t>(i)], class_ids);
            h = branch_forward(tape, bd, i, h, cond);
            out.vstar.push_back(h);
            out.v.push_back(velocity_head(tape, bd, i, h, cond));
            if (i + 1 < cfg.k) {
                Var<T> next_in = cfg.detach_branch_input ? tape.detach(h) : h;
                if (cfg.vera_active()) {
                    Tensor<T> gap = gap_tensor(times[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(i + 1)]);
                    auto [refined, astar] = vera_forward(tape, bd, i, next_in, gap, out.tokens);
                    out.astar.push_back(astar);
                    out.a.push_back(acceleration_head(tape, bd, i, astar, cond));
                    out.refined.push_back(refined);
                    out.gaps.push_back(std::move(gap));
                    h = refined;
                } else {
                    out.refined.push_back(next_in);
                    out.gaps.push_back(gap_tensor(times[static_cast<std::size_t>(i)], times[static_cast<std::size_t>(i + 1)]));
                    h = next_in;
                }
            }
        }
        return out;
    }

    // ---- parameter-count ledger ----------------------------------------------

    // Closed form; asserted against the actual store in tests.
    std::int64_t expected_param_count() const {
        const std::int64_t d = cfg.hidden;
        const std::int64_t od = cfg.geometry.token_dim();
        auto lin = [](std::int64_t in, std::int64_t outd) { return in * outd + outd; };
        std::int64_t n = 0;
        n += lin(cfg.geometry.token_dim(), d);             // token embed
        n += lin(d, d) + lin(d, d);                        // time embedder MLP
        n += (cfg.num_classes + 1) * d;                    // class table incl. null row
        n += cfg.k * cfg.depth_per_branch *
             (lin(d, 3 * d) + lin(d, d) + lin(d, 4 * d) + lin(4 * d, d) + lin(d, 6 * d));
        n += cfg.k * (lin(d, 2 * d) + lin(d, od));         // velocity heads
        if (cfg.vera_active()) {
            std::int64_t vera = 0;
            const auto ch = cfg.accmlp_channels();
            std::int64_t prev = d;
            for (auto c : ch) {
                vera += lin(prev, c);
                prev = c;
            }
            if (cfg.vera_variant == VeraVariant::concat)
                vera += lin(d, 4 * d) + lin(2 * d, 2 * d) + lin(2 * d, d);
            else
                vera += lin(d, 2 * d) + lin(d, d) + lin(d, d);
            if (cfg.use_cross_attention) vera += 4 * lin(d, d);
            n += (cfg.k - 1) * (vera + lin(d, 2 * d) + lin(d, od));  // refiner + acc head
        }
        return n;
    }

    std::int64_t param_count() const { return params.scalar_count(); }

    // Per-sample signed gaps between two branch time vectors.
    static Tensor<T> gap_tensor(const Tensor<T>& t_from, const Tensor<T>& t_to) {
        Tensor<T> g({t_from.shape[0]});
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] = t_to[i] - t_from[i];
        return g;
    }

private:
    LinearRef embed_;
    LinearRef time_mlp1_, time_mlp2_;
    int class_table_ = -1;
    std::vector<std::vector<BlockRef>> branches_;
    std::vector<HeadRef> v_heads_;
    std::vector<HeadRef> a_heads_;
    std::vector<VeraRef> veras_;
    std::vector<std::int64_t> patchify_map_, unpatchify_map_;
    std::vector<T> pos_emb_;  // (N * D), images only

    Var<T> pv(const Bound& bd, int i) const { return bd.vars[static_cast<std::size_t>(i)]; }

    // ---- registration / init -------------------------------------------------

    LinearRef add_linear(const std::string& name, std::int64_t in, std::int64_t out) {
        LinearRef r;
        r.w = static_cast<int>(params.add(name + ".w", {in, out}));
        r.b = static_cast<int>(params.add(name + ".b", {out}));
        return r;
    }

    void register_params() {
        const std::int64_t d = cfg.hidden;
        embed_ = add_linear("embed", cfg.geometry.token_dim(), d);
        time_mlp1_ = add_linear("time_embed.mlp1", d, d);
        time_mlp2_ = add_linear("time_embed.mlp2", d, d);
        class_table_ = static_cast<int>(params.add("class_embed.table", {cfg.num_classes + 1, d}));
        for (std::int64_t i = 0; i < cfg.k; ++i) {
            std::vector<BlockRef> blocks;
            for (std::int64_t j = 0; j < cfg.depth_per_branch; ++j) {
                const std::string p = "branch" + std::to_string(i + 1) + ".block" + std::to_string(j + 1);
                BlockRef blk;
                blk.qkv = add_linear(p + ".attn.qkv", d, 3 * d);
                blk.proj = add_linear(p + ".attn.proj", d, d);
                blk.fc1 = add_linear(p + ".mlp.fc1", d, 4 * d);
                blk.fc2 = add_linear(p + ".mlp.fc2", 4 * d, d);
                blk.adaln = add_linear(p + ".adaln", d, 6 * d);
                blocks.push_back(blk);
            }
            branches_.push_back(std::move(blocks));
            const std::string hp = "head_v" + std::to_string(i + 1);
            HeadRef h;
            h.adaln = add_linear(hp + ".adaln", d, 2 * d);
            h.out = add_linear(hp + ".out", d, cfg.geometry.token_dim());
            v_heads_.push_back(h);
        }
        if (cfg.vera_active()) {
            for (std::int64_t i = 0; i + 1 < cfg.k; ++i) {
                const std::string p = "vera" + std::to_string(i + 1);
                VeraRef vr;
                std::int64_t prev = d;
                const auto ch = cfg.accmlp_channels();
                for (std::size_t j = 0; j < ch.size(); ++j) {
                    vr.accmlp.push_back(add_linear(p + ".accmlp.l" + std::to_string(j + 1), prev, ch[j]));
                    prev = ch[j];
                }
                if (cfg.vera_variant == VeraVariant::concat) {
                    vr.mod = add_linear(p + ".mod", d, 4 * d);
                    vr.fc1 = add_linear(p + ".mlp.fc1", 2 * d, 2 * d);
                    vr.fc2 = add_linear(p + ".mlp.fc2", 2 * d, d);
                } else {
                    vr.mod = add_linear(p + ".mod", d, 2 * d);
                    vr.fc1 = add_linear(p + ".mlp.fc1", d, d);
                    vr.fc2 = add_linear(p + ".mlp.fc2", d, d);
                }
                if (cfg.use_cross_attention) {
                    vr.q = add_linear(p + ".ca.q", d, d);
                    vr.k = add_linear(p + ".ca.k", d, d);
                    vr.v = add_linear(p + ".ca.v", d, d);
                    vr.o = add_linear(p + ".ca.o", d, d);
                }
                veras_.push_back(std::move(vr));
                const std::string hp = "head_a" + std::to_string(i + 1);
                HeadRef h;
                h.adaln = add_linear(hp + ".adaln", d, 2 * d);
                h.out = add_linear(hp + ".out", d, cfg.geometry.token_dim());
                a_heads_.push_back(h);
            }
        }
    }

    // Xavier-uniform everywhere except the identity-at-init surfaces:
    // AdaLN modulation linears, head outputs and the cross-attention output
    // projection start at zero.
    void init_params(RngStream& stream) {
        for (auto& [name, t] : params.entries) {
            const bool zero = ends_with(name, ".adaln.w") || ends_with(name, ".adaln.b") ||
                              ends_with(name, ".mod.w") || ends_with(name, ".mod.b") ||
                              (name.find("head_") == 0 && ends_with(name, ".out.w")) ||
                              (name.find(".ca.o.") != std::string::npos) || ends_with(name, ".b");
            if (zero) continue;  // tensors start zeroed
            if (name == "class_embed.table") {
                for (auto& v : t.data) v = static_cast<T>(0.02 * stream.next_normal());
                continue;
            }
            // weight matrices (in, out)
            const double fan_in = static_cast<double>(t.shape[0]);
            const double fan_out = static_cast<double>(t.shape[1]);
            const double a = std::sqrt(6.0 / (fan_in + fan_out));
            for (auto& v : t.data) v = static_cast<T>((2.0 * stream.next_double() - 1.0) * a);
        }
    }

    void build_geometry_tables() {
        if (cfg.geometry.kind != GeometryKind::image) return;
        const std::int64_t c = cfg.geometry.channels, hh = cfg.geometry.height, ww = cfg.geometry.width,
                           p = cfg.geometry.patch;
        const std::int64_t gh = hh / p, gw = ww / p;
        const std::int64_t e = cfg.geometry.sample_elems();
        patchify_map_.resize(static_cast<std::size_t>(e));
        unpatchify_map_.resize(static_cast<std::size_t>(e));
        for (std::int64_t gy = 0; gy < gh; ++gy)
            for (std::int64_t gx = 0; gx < gw; ++gx)
                for (std::int64_t ic = 0; ic < c; ++ic)
                    for (std::int64_t py = 0; py < p; ++py)
                        for (std::int64_t px = 0; px < p; ++px) {
                            const std::int64_t tok = (gy * gw + gx) * (c * p * p) + (ic * p + py) * p + px;
                            const std::int64_t img = ic * hh * ww + (gy * p + py) * ww + (gx * p + px);
                            patchify_map_[static_cast<std::size_t>(tok)] = img;
                            unpatchify_map_[static_cast<std::size_t>(img)] = tok;
                        }
        // Fixed 2D sin-cos positional embedding: half for y, half for x.
        const std::int64_t d = cfg.hidden;
        const std::int64_t quarter = d / 4;
        pos_emb_.assign(static_cast<std::size_t>(gh * gw * d), T(0));
        for (std::int64_t gy = 0; gy < gh; ++gy)
            for (std::int64_t gx = 0; gx < gw; ++gx) {
                T* row = pos_emb_.data() + (gy * gw + gx) * d;
                for (std::int64_t j = 0; j < quarter; ++j) {
                    const double freq =
                        quarter == 1 ? 1.0
                                     : std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(quarter - 1));
                    row[j] = static_cast<T>(std::sin(gy * freq));
                    row[quarter + j] = static_cast<T>(std::cos(gy * freq));
                    row[2 * quarter + j] = static_cast<T>(std::sin(gx * freq));
                    row[3 * quarter + j] = static_cast<T>(std::cos(gx * freq));
                }
            }
    }

    static bool ends_with(const std::string& s, const std::string& suffix) {
        return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
    }

    std::int64_t check_batch_geometry(const Tensor<T>& x) const {
        const Shape want = cfg.geometry.sample_shape();
        if (x.rank() != static_cast<std::int64_t>(want.size()) + 1)
            throw std::invalid_argument("input rank does not match data geometry");
        for (std::size_t i = 0; i < want.size(); ++i)
            if (x.shape[i + 1] != want[i])
                throw std::invalid_argument("input shape " + shape_str(x.shape) + " does not match data geometry");
        return x.shape[0];
    }

    std::vector<std::int64_t> normalize_class_ids(const std::vector<std::int64_t>& ids, std::int64_t b) const {
        if (static_cast<std::int64_t>(ids.size()) != b)
            throw std::invalid_argument("class_ids size does not match batch");
        std::vector<std::int64_t> out(ids.size());
        for (std::size_t i = 0; i < ids.size(); ++i) {
            std::int64_t id = ids[i];
            if (id < 0) id = cfg.null_class_id();
            if (id > cfg.num_classes) throw std::invalid_argument("invalid class id");
            out[i] = id;
        }
        return out;
    }

    Var<T> dit_block(Tape<T>& tape, const Bound& bd, const BlockRef& blk, Var<T> x, Var<T> cond) const {
        const std::int64_t d = cfg.hidden;
        Var<T> sig = tape.linear(tape.silu(cond), pv(bd, blk.adaln.w), pv(bd, blk.adaln.b));  // (B, 6D)
        Var<T> shift_msa = tape.slice_last(sig, 0, d);
        Var<T> scale_msa = tape.slice_last(sig, d, 2 * d);
        Var<T> gate_msa = tape.slice_last(sig, 2 * d, 3 * d);
        Var<T> shift_mlp = tape.slice_last(sig, 3 * d, 4 * d);
        Var<T> scale_mlp = tape.slice_last(sig, 4 * d, 5 * d);
        Var<T> gate_mlp = tape.slice_last(sig, 5 * d, 6 * d);

        Var<T> h = tape.layernorm(x);
        h = tape.add_tokens(tape.mul_tokens(h, tape.add_scalar(scale_msa, T(1))), shift_msa);
        Var<T> qkv = tape.linear(h, pv(bd, blk.qkv.w), pv(bd, blk.qkv.b));
        Var<T> q = tape.slice_last(qkv, 0, d);
        Var<T> k = tape.slice_last(qkv, d, 2 * d);
        Var<T> v = tape.slice_last(qkv, 2 * d, 3 * d);
        Var<T> att = multihead_attention(tape, q, k, v);
        att = tape.linear(att, pv(bd, blk.proj.w), pv(bd, blk.proj.b));
        x = tape.add(x, tape.mul_tokens(att, gate_msa));

        h = tape.layernorm(x);
        h = tape.add_tokens(tape.mul_tokens(h, tape.add_scalar(scale_mlp, T(1))), shift_mlp);
        Var<T> m = tape.linear(tape.gelu(tape.linear(h, pv(bd, blk.fc1.w), pv(bd, blk.fc1.b))),
                               pv(bd, blk.fc2.w), pv(bd, blk.fc2.b));
        return tape.add(x, tape.mul_tokens(m, gate_mlp));
    }

    // q, k, v: (B, N, D) already projected; scale 1/sqrt(D/heads).
    Var<T> multihead_attention(Tape<T>& tape, Var<T> q, Var<T> k, Var<T> v) const {
        const Shape& s = tape.shape(q);
        const std::int64_t b = s[0], n = s[1], d = s[2];
        const std::int64_t nh = cfg.heads, hd = d / nh;
        auto split = [&](Var<T> x) {
            return tape.reshape(tape.swap_axes_1_2(tape.reshape(x, {b, n, nh, hd})), {b * nh, n, hd});
        };
        Var<T> qh = split(q), kh = split(k), vh = split(v);
        Var<T> logits = tape.scale(tape.bmm(qh, tape.transpose_last2(kh)),
                                   static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
        Var<T> att = tape.softmax(logits);
        Var<T> o = tape.bmm(att, vh);  // (B*H, N, hd)
        o = tape.reshape(tape.swap_axes_1_2(tape.reshape(o, {b, nh, n, hd})), {b, n, d});
        return o;
    }

    Var<T> head_apply(Tape<T>& tape, const Bound& bd, const HeadRef& head, Var<T> feat, Var<T> cond) const {
        const std::int64_t d = cfg.hidden;
        Var<T> sig = tape.linear(tape.silu(cond), pv(bd, head.adaln.w), pv(bd, head.adaln.b));
        Var<T> shift = tape.slice_last(sig, 0, d);
        Var<T> scale = tape.slice_last(sig, d, 2 * d);
        Var<T> h = tape.layernorm(feat);
        h = tape.add_tokens(tape.mul_tokens(h, tape.add_scalar(scale, T(1))), shift);
        Var<T> y = tape.linear(h, pv(bd, head.out.w), pv(bd, head.out.b));  // (B, N, token_dim)
        return tokens_to_data(tape, y);
    }

    Var<T> tokens_to_data(Tape<T>& tape, Var<T> y) const {
        const std::int64_t b = tape.shape(y)[0];
        if (cfg.geometry.kind == GeometryKind::point) return tape.reshape(y, {b, cfg.geometry.point_dim});
        // images: invert the patch layout
        const std::int64_t e = cfg.geometry.sample_elems();
        Var<T> flat = tape.reshape(y, {b, e});
        return tape.reshape(tape.gather_cols(flat, unpatchify_map_), cfg.geometry.batch_shape(b));
    }
};

} // namespace deepflow
