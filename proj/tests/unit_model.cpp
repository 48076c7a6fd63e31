// SPDX-License-Identifier: Apache-2.0
//
// Interpolant and model tests: time sampling, branch-time assignment,
// identity-at-init, refiner behavior in both variants, and gradient checks
// of the model blocks.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "deepflow/grad_check.hpp"
#include "deepflow/interpolant.hpp"
#include "deepflow/losses.hpp"
#include "deepflow/network.hpp"
#include "deepflow/optimizer.hpp"
#include "deepflow/train.hpp"

using namespace deepflow;

namespace {

ModelConfig small_config(std::int64_t k = 2, std::int64_t d = 16, std::int64_t depth = 1) {
    ModelConfig cfg;
    cfg.k = k;
    cfg.depth_per_branch = depth;
    cfg.hidden = d;
    cfg.heads = 2;
    cfg.num_classes = 4;
    cfg.geometry.kind = GeometryKind::point;
    cfg.geometry.point_dim = 2;
    return cfg;
}

template <typename T>
void randomize_params(DeepFlowModel<T>& model, std::uint64_t seed, double scale = 0.05) {
    RngStream s(seed, 77);
    for (auto& e : model.params.entries)
        for (auto& v : e.second.data) v = static_cast<T>(scale * s.next_normal());
}

template <typename T>
Tensor<T> flatten_params(const DeepFlowModel<T>& model) {
    Tensor<T> flat({model.param_count()});
    std::int64_t off = 0;
    for (const auto& e : model.params.entries)
        for (std::int64_t i = 0; i < e.second.size(); ++i) flat[off++] = e.second[i];
    return flat;
}

template <typename T>
void unflatten_params(DeepFlowModel<T>& model, const Tensor<T>& flat) {
    std::int64_t off = 0;
    for (auto& e : model.params.entries)
        for (std::int64_t i = 0; i < e.second.size(); ++i) e.second[i] = flat[off++];
}

struct FixedBatch {
    Tensor<double> x0, x1;
    std::vector<Tensor<double>> times;
    std::vector<std::int64_t> ids;
    std::vector<double> betas;
    double lambda = 1.0;
};

FixedBatch make_batch(const ModelConfig& cfg, std::int64_t b, std::uint64_t seed) {
    FixedBatch fb;
    RngStream s(seed, 5);
    fb.x0 = rng_normal<double>(s, cfg.geometry.batch_shape(b));
    fb.x1 = rng_normal<double>(s, cfg.geometry.batch_shape(b));
    for (std::int64_t i = 0; i < cfg.k; ++i) {
        Tensor<double> t({b});
        for (std::int64_t j = 0; j < b; ++j) t[j] = 0.15 + 0.7 * s.next_double() - 0.005 * static_cast<double>(i);
        fb.times.push_back(std::move(t));
    }
    for (std::int64_t j = 0; j < b; ++j)
        fb.ids.push_back(cfg.num_classes > 0 ? static_cast<std::int64_t>(s.next_double() * cfg.num_classes) : -1);
    fb.betas.assign(static_cast<std::size_t>(cfg.k), 0.2);
    fb.betas.back() = 1.0;
    return fb;
}

double objective_value(const DeepFlowModel<double>& model, const FixedBatch& fb) {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    auto bound = model.bind(tape, false);
    auto out = model.forward(tape, bound, fb.x0, fb.times, fb.ids);
    auto lv = flow_losses(tape, out, fb.x0, fb.x1, fb.times, fb.betas, fb.lambda, model.cfg.vera_active());
    return tape.val(lv.total).data[0];
}

Tensor<double> objective_grad(const DeepFlowModel<double>& model, const FixedBatch& fb) {
    Tape<double> tape;
    auto bound = model.bind(tape, true);
    auto out = model.forward(tape, bound, fb.x0, fb.times, fb.ids);
    auto lv = flow_losses(tape, out, fb.x0, fb.x1, fb.times, fb.betas, fb.lambda, model.cfg.vera_active());
    tape.backward(lv.total);
    Tensor<double> flat({model.param_count()});
    std::int64_t off = 0;
    for (std::size_t i = 0; i < model.params.count(); ++i) {
        const auto& g = tape.grad(bound.vars[i]);
        for (std::int64_t j = 0; j < g.size(); ++j) flat[off++] = g[j];
    }
    return flat;
}

GradCheckReport full_objective_grad_check(ModelConfig cfg, double tol) {
    RngStream init(31, 1);
    DeepFlowModel<double> model(cfg, init);
    randomize_params(model, 91, 0.08);  // move off the zero-init manifold
    FixedBatch fb = make_batch(model.cfg, 4, 17);
    DiffFn f;
    DeepFlowModel<double>* m = &model;
    f.value = [m, &fb](const Tensor<double>& x) {
        unflatten_params(*m, x);
        return objective_value(*m, fb);
    };
    f.gradient = [m, &fb](const Tensor<double>& x) {
        unflatten_params(*m, x);
        return objective_grad(*m, fb);
    };
    return grad_check(f, flatten_params(model), 1e-5, tol);
}

} // namespace

// ---- interpolant ------------------------------------------------------------

TEST_CASE("sample_time: sigmoid transform and distribution shapes") {
    CHECK(sigmoid_transform(0.0) == doctest::Approx(0.5));
    RngStream s(3, 1);
    double acc = 0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) acc += sample_time(TimeSamplingScheme::uniform, s);
    CHECK(std::abs(acc / n - 0.5) < 0.01);

    RngStream s2(3, 2);
    int inside = 0;
    bool in_open_unit = true;
    for (int i = 0; i < n; ++i) {
        const double t = sample_time(TimeSamplingScheme::lognormal, s2);
        in_open_unit = in_open_unit && t > 0.0 && t < 1.0;
        if (t > 0.25 && t < 0.75) ++inside;
    }
    CHECK(in_open_unit);
    // P(0.25 < sigmoid(n) < 0.75) = P(|n| < ln 3) = 2*Phi(ln 3) - 1 = 0.72806,
    // by the normal-CDF oracle.
    const double phi = 0.5 * (1.0 + std::erf(std::log(3.0) / std::sqrt(2.0)));
    const double expect = 2.0 * phi - 1.0;
    CHECK(expect == doctest::Approx(0.72806).epsilon(0.0001));
    CHECK(std::abs(static_cast<double>(inside) / n - expect) < 0.02);
}

TEST_CASE("assign_branch_times: arithmetic, clamping and degenerate gap") {
    const auto bt = branch_times_from_gaps(0.5, {0.007}, 0.01);
    CHECK(bt.times[0] == doctest::Approx(0.5));
    CHECK(bt.times[1] == doctest::Approx(0.493));
    const auto clamped = branch_times_from_gaps(0.003, {0.01}, 0.01);
    CHECK(clamped.times[1] == doctest::Approx(0.0));
    RngStream s(4, 4);
    const auto flat = assign_branch_times(0.37, 5, 0.0, s);
    for (double t : flat.times) CHECK(t == doctest::Approx(0.37));
}

TEST_CASE("assign_branch_times: property over random (t1, alpha, k)") {
    RngStream s(5, 5);
    for (int trial = 0; trial < 10000; ++trial) {
        const double t1 = s.next_double();
        const double alpha = 0.05 * s.next_double();
        const std::int64_t k = 1 + static_cast<std::int64_t>(s.next_double() * 4);
        const auto bt = assign_branch_times(t1, k, alpha, s);
        REQUIRE(bt.k() == k);
        for (std::int64_t i = 0; i < k; ++i) {
            CHECK(bt[i] >= 0.0);
            CHECK(bt[i] <= 1.0);
            if (i > 0) {
                CHECK(bt[i] <= bt[i - 1]);
                CHECK(bt[i - 1] - bt[i] <= alpha + 1e-12);
            }
        }
    }
}

TEST_CASE("interpolate and gt_velocity: endpoint identities and arithmetic") {
    const Tensor<double> x0({2}, {0.0, 0.0});
    const Tensor<double> x1({2}, {2.0, -4.0});
    const auto mid = interpolate(x0, x1, 0.25);
    CHECK(mid[0] == doctest::Approx(0.5));
    CHECK(mid[1] == doctest::Approx(-1.0));
    const auto at0 = interpolate(x0, x1, 0.0);
    const auto at1 = interpolate(x0, x1, 1.0);
    for (int i = 0; i < 2; ++i) {
        CHECK(at0[i] == x0[i]);
        CHECK(at1[i] == x1[i]);
    }
    const Tensor<double> a({2}, {1.0, 0.0}), b({2}, {0.0, 1.0});
    const auto v = gt_velocity(a, b);
    CHECK(v[0] == doctest::Approx(-1.0));
    CHECK(v[1] == doctest::Approx(1.0));
    CHECK_THROWS_AS(interpolate(x0, Tensor<double>({3}), 0.5), std::invalid_argument);
}

TEST_CASE("interpolate: symmetry and d/dt equals ground-truth velocity") {
    RngStream s(6, 6);
    const auto x0 = rng_normal<double>(s, {8});
    const auto x1 = rng_normal<double>(s, {8});
    for (double t : {0.13, 0.5, 0.77}) {
        const auto fwd = interpolate(x0, x1, t);
        const auto rev = interpolate(x1, x0, t);
        for (std::int64_t i = 0; i < 8; ++i)
            CHECK(fwd[i] + rev[i] == doctest::Approx(x0[i] + x1[i]));
    }
    const auto V = gt_velocity(x0, x1);
    const double eps = 1e-6;
    for (double t : {0.1, 0.5, 0.9}) {
        const auto p = interpolate(x0, x1, t + eps);
        const auto m = interpolate(x0, x1, t - eps);
        for (std::int64_t i = 0; i < 8; ++i)
            CHECK((p[i] - m[i]) / (2 * eps) == doctest::Approx(V[i]).epsilon(1e-8));
    }
}

TEST_CASE("time_gap: sign convention") {
    CHECK(time_gap(0.5, 0.493).value == doctest::Approx(-0.007));
    CHECK(time_gap(0.42, 0.42).value == 0.0);
    CHECK(time_gap(0.3, 0.0).value == doctest::Approx(-0.3));
}

TEST_CASE("interpolant: exact first-order recovery of x0") {
    RngStream s(7, 7);
    for (int trial = 0; trial < 100; ++trial) {
        const auto x0 = rng_normal<double>(s, {4});
        const auto x1 = rng_normal<double>(s, {4});
        const double t = s.next_double();
        const auto xt = interpolate(x0, x1, t);
        const auto V = gt_velocity(x0, x1);
        const double d = time_gap(t, 0.0).value;
        for (std::int64_t i = 0; i < 4; ++i)
            CHECK(std::abs(xt[i] + V[i] * d - x0[i]) < 1e-14);
    }
}

// ---- network ----------------------------------------------------------------

TEST_CASE("embed: shapes for point and image geometry") {
    RngStream init(1, 1);
    DeepFlowModel<double> pm(small_config(1, 64), init);
    Tape<double> tape;
    auto bd = pm.bind(tape, false);
    RngStream s(2, 2);
    auto tokens = pm.embed(tape, bd, rng_normal<double>(s, {3, 2}));
    CHECK(tape.shape(tokens) == Shape{3, 1, 64});

    ModelConfig ic = small_config(1, 16);
    ic.geometry.kind = GeometryKind::image;
    ic.geometry.channels = 1;
    ic.geometry.height = 8;
    ic.geometry.width = 8;
    ic.geometry.patch = 2;
    RngStream init2(1, 2);
    DeepFlowModel<double> im(ic, init2);
    Tape<double> tape2;
    auto bd2 = im.bind(tape2, false);
    auto tok2 = im.embed(tape2, bd2, rng_normal<double>(s, {2, 1, 8, 8}));
    CHECK(tape2.shape(tok2) == Shape{2, 16, 16});

    // zero input with zero bias: tokens are exactly the positional embedding
    auto tok_zero = im.embed(tape2, bd2, Tensor<double>::zeros({1, 1, 8, 8}));
    auto tok_zero2 = im.embed(tape2, bd2, Tensor<double>::zeros({1, 1, 8, 8}));
    const auto& tz = tape2.val(tok_zero);
    const auto& tz2 = tape2.val(tok_zero2);
    bool nonzero = false;
    for (std::int64_t i = 0; i < tz.size(); ++i) {
        CHECK(tz[i] == tz2[i]);
        nonzero = nonzero || tz[i] != 0.0;
    }
    CHECK(nonzero);  // positional embedding present
    CHECK_THROWS_AS(pm.embed(tape, bd, rng_normal<double>(s, {3, 5})), std::invalid_argument);
}

TEST_CASE("time_embed: sinusoid structure, periodicity, distinctness") {
    RngStream init(1, 3);
    DeepFlowModel<double> m(small_config(1, 16), init);
    const auto at0 = m.time_sinusoid(Tensor<double>({1}, {0.0}));
    for (std::int64_t j = 0; j < 8; ++j) {
        CHECK(at0[j] == 0.0);          // sin half
        CHECK(at0[8 + j] == 1.0);      // cos half
    }
    // lowest frequency is exactly 1e-4, so t and t + 2*pi*1e4 coincide there
    const double t = 0.37;
    const double period = 2.0 * 3.14159265358979323846 * 1e4;
    const auto f1 = m.time_sinusoid(Tensor<double>({1}, {t}));
    const auto f2 = m.time_sinusoid(Tensor<double>({1}, {t + period}));
    CHECK(f1[7] == doctest::Approx(f2[7]).epsilon(1e-9));
    CHECK(f1[15] == doctest::Approx(f2[15]).epsilon(1e-9));

    const auto fa = m.time_sinusoid(Tensor<double>({1}, {0.1}));
    const auto fb = m.time_sinusoid(Tensor<double>({1}, {0.2}));
    bool differ = false;
    for (std::int64_t i = 0; i < fa.size(); ++i) differ = differ || fa[i] != fb[i];
    CHECK(differ);
}

TEST_CASE("branch_forward: identity at initialization, bitwise") {
    RngStream init(2, 1);
    DeepFlowModel<double> m(small_config(2, 16, 2), init);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(3, 3);
    const auto x = rng_normal<double>(s, {3, 2});
    auto tokens = m.embed(tape, bd, x);
    auto cond = m.condition(tape, bd, Tensor<double>::full({3}, 0.4), {0, 1, 2});
    auto out = m.branch_forward(tape, bd, 0, tokens, cond);
    const auto& ti = tape.val(tokens);
    const auto& to = tape.val(out);
    REQUIRE(ti.shape == to.shape);
    for (std::int64_t i = 0; i < ti.size(); ++i) CHECK(ti[i] == to[i]);
}

TEST_CASE("branch_forward: different time-steps give different outputs after training") {
    RngStream init(2, 2);
    DeepFlowModel<float> m(small_config(2, 16, 1), init);
    AdamW<float> opt(m.params, TrainConfig{}.adam<float>());
    Ema<float> ema(m.params, 0.999f);
    TrainConfig tc;
    tc.batch_size = 8;
    tc.betas = {0.2, 1.0};
    RngStream data(4, 4), tstream(4, 5);
    for (int step = 0; step < 10; ++step) {
        const auto x0 = rng_normal<float>(data, m.cfg.geometry.batch_shape(8));
        std::vector<std::int64_t> ids(8);
        for (auto& id : ids) id = static_cast<std::int64_t>(data.next_double() * 4);
        train_step(m, opt, ema, x0, ids, tc, tstream);
    }
    Tape<float> tape;
    auto bd = m.bind(tape, false);
    RngStream s(6, 6);
    const auto x = rng_normal<float>(s, {2, 2});
    auto tokens = m.embed(tape, bd, x);
    auto ca = m.condition(tape, bd, Tensor<float>::full({2}, 0.3f), {0, 1});
    auto cb = m.condition(tape, bd, Tensor<float>::full({2}, 0.7f), {0, 1});
    const auto& oa = tape.val(m.branch_forward(tape, bd, 0, tokens, ca));
    const auto& ob = tape.val(m.branch_forward(tape, bd, 0, tokens, cb));
    bool differ = false;
    for (std::int64_t i = 0; i < oa.size(); ++i) differ = differ || oa[i] != ob[i];
    CHECK(differ);
}

TEST_CASE("velocity_head: zero at init, point shape, grad check") {
    ModelConfig cfg = small_config(1, 16);
    RngStream init(3, 1);
    DeepFlowModel<double> m(cfg, init);
    {
        Tape<double> tape;
        auto bd = m.bind(tape, false);
        RngStream s(5, 5);
        auto tokens = m.embed(tape, bd, rng_normal<double>(s, {3, 2}));
        auto cond = m.condition(tape, bd, Tensor<double>::full({3}, 0.5), {0, 1, 2});
        auto vstar = m.branch_forward(tape, bd, 0, tokens, cond);
        const auto& v = tape.val(m.velocity_head(tape, bd, 0, vstar, cond));
        CHECK(v.shape == Shape{3, 2});
        for (std::int64_t i = 0; i < v.size(); ++i) CHECK(v[i] == 0.0);
    }
}

TEST_CASE("acc_mlp: channel schedule and shape preservation") {
    ModelConfig big = small_config(2, 768);
    big.heads = 8;
    const auto ch = big.accmlp_channels();
    CHECK(ch == std::vector<std::int64_t>{2048, 4096, 2048, 768});
    ModelConfig small = small_config(2, 64);
    CHECK(small.accmlp_channels() == std::vector<std::int64_t>{171, 341, 171, 64});

    RngStream init(4, 1);
    DeepFlowModel<double> m(small, init);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(6, 6);
    auto vstar = tape.constant(rng_normal<double>(s, {2, 1, 64}));
    auto astar = m.acc_mlp(tape, bd, 0, vstar);
    CHECK(tape.shape(astar) == Shape{2, 1, 64});
}

TEST_CASE("vera_modulate: zero-init means pre-MLP output equals LN(concat)") {
    ModelConfig cfg = small_config(2, 16);
    RngStream init(5, 1);
    DeepFlowModel<double> m(cfg, init);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(7, 7);
    auto vstar = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    auto astar = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    const Tensor<double> gap({2}, {-0.007, -0.002});
    auto res = m.vera_modulate(tape, bd, 0, vstar, astar, gap);
    auto ln = tape.layernorm(tape.concat_last(vstar, astar));
    const auto& a = tape.val(res.pre_mlp);
    const auto& b = tape.val(ln);
    REQUIRE(a.shape == b.shape);
    for (std::int64_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);

    // determinism: identical gap, identical output
    auto res2 = m.vera_modulate(tape, bd, 0, vstar, astar, gap);
    const auto& o1 = tape.val(res.out);
    const auto& o2 = tape.val(res2.out);
    for (std::int64_t i = 0; i < o1.size(); ++i) CHECK(o1[i] == o2[i]);
}

TEST_CASE("vera_modulate: trained weights respond to the gap") {
    ModelConfig cfg = small_config(2, 16);
    RngStream init(5, 2);
    DeepFlowModel<double> m(cfg, init);
    randomize_params(m, 123);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(8, 8);
    auto vstar = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    auto astar = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    const auto& a = tape.val(m.vera_modulate(tape, bd, 0, vstar, astar, Tensor<double>({2}, {0.0, 0.0})).out);
    const auto& b = tape.val(m.vera_modulate(tape, bd, 0, vstar, astar, Tensor<double>({2}, {-0.01, -0.01})).out);
    bool differ = false;
    for (std::int64_t i = 0; i < a.size(); ++i) differ = differ || a[i] != b[i];
    CHECK(differ);
}

TEST_CASE("cross_space_attention: single-token softmax and identity projections") {
    ModelConfig cfg = small_config(2, 16);
    cfg.heads = 1;
    RngStream init(6, 1);
    DeepFlowModel<double> m(cfg, init);
    // identity q/k/v/o projections, zero bias
    for (const char* nm : {"vera1.ca.q.w", "vera1.ca.k.w", "vera1.ca.v.w", "vera1.ca.o.w"}) {
        auto& w = m.params.named(nm);
        for (std::int64_t i = 0; i < 16; ++i)
            for (std::int64_t j = 0; j < 16; ++j) w[i * 16 + j] = i == j ? 1.0 : 0.0;
    }
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(9, 9);
    auto modulated = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    auto x_tokens = tape.constant(rng_normal<double>(s, {2, 1, 16}));
    auto refined = m.cross_space_attention(tape, bd, 0, modulated, x_tokens);
    // With one token the softmax weight is 1, so output - residual = LN(modulated).
    auto ln = tape.layernorm(modulated);
    const auto& r = tape.val(refined);
    const auto& mo = tape.val(modulated);
    const auto& l = tape.val(ln);
    for (std::int64_t i = 0; i < r.size(); ++i)
        CHECK(r[i] - mo[i] == doctest::Approx(l[i]).epsilon(1e-12));
}

TEST_CASE("cross_space_attention: identical keys collapse to the common value") {
    ModelConfig cfg = small_config(2, 16);
    RngStream init(6, 5);
    DeepFlowModel<double> m(cfg, init);
    randomize_params(m, 321);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(10, 10);
    // two identical modulated tokens; queries differ
    auto one = rng_normal<double>(s, {1, 1, 16});
    Tensor<double> two({1, 2, 16});
    for (int j = 0; j < 16; ++j) {
        two[j] = one[j];
        two[16 + j] = one[j];
    }
    auto modulated = tape.constant(two);
    auto x_tokens = tape.constant(rng_normal<double>(s, {1, 2, 16}));
    auto refined = m.cross_space_attention(tape, bd, 0, modulated, x_tokens);
    const auto& r = tape.val(refined);
    for (int j = 0; j < 16; ++j) CHECK(r[j] == doctest::Approx(r[16 + j]).epsilon(1e-10));

    // token-count mismatch is an error
    auto bad = tape.constant(rng_normal<double>(s, {1, 3, 16}));
    CHECK_THROWS_AS(m.cross_space_attention(tape, bd, 0, modulated, bad), std::invalid_argument);
}

TEST_CASE("cross_space_attention: permutation equivariance") {
    ModelConfig cfg = small_config(2, 16);
    cfg.geometry.kind = GeometryKind::image;
    cfg.geometry.channels = 1;
    cfg.geometry.height = 4;
    cfg.geometry.width = 4;
    cfg.geometry.patch = 2;
    RngStream init(6, 7);
    DeepFlowModel<double> m(cfg, init);
    randomize_params(m, 555);
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(11, 11);
    const auto mod = rng_normal<double>(s, {1, 4, 16});
    const auto xt = rng_normal<double>(s, {1, 4, 16});
    const std::vector<std::int64_t> perm = {2, 0, 3, 1};
    auto permute = [&](const Tensor<double>& t) {
        Tensor<double> out(t.shape);
        for (int n = 0; n < 4; ++n)
            for (int j = 0; j < 16; ++j) out[n * 16 + j] = t[perm[static_cast<std::size_t>(n)] * 16 + j];
        return out;
    };
    const auto& plain = tape.val(m.cross_space_attention(tape, bd, 0, tape.constant(mod), tape.constant(xt)));
    const auto& permuted =
        tape.val(m.cross_space_attention(tape, bd, 0, tape.constant(permute(mod)), tape.constant(permute(xt))));
    const auto expected = permute(plain);
    for (std::int64_t i = 0; i < expected.size(); ++i)
        CHECK(permuted[i] == doctest::Approx(expected[i]).epsilon(1e-10));
}

TEST_CASE("vera_forward: variants produce distinct refined features") {
    ModelConfig cc = small_config(2, 16);
    RngStream init(7, 1);
    DeepFlowModel<double> concat_m(cc, init);
    randomize_params(concat_m, 99);
    ModelConfig ac = cc;
    ac.vera_variant = VeraVariant::additive;
    RngStream init2(7, 1);
    DeepFlowModel<double> add_m(ac, init2);
    // share every identically-shaped parameter
    for (auto& e : add_m.params.entries) {
        auto it = concat_m.params.index.find(e.first);
        if (it != concat_m.params.index.end() &&
            concat_m.params[it->second].shape == e.second.shape)
            e.second = concat_m.params[it->second];
    }
    RngStream s(12, 12);
    const auto vstar_t = rng_normal<double>(s, {2, 1, 16});
    const auto xt_t = rng_normal<double>(s, {2, 1, 16});
    const Tensor<double> gap({2}, {-0.004, -0.009});

    Tape<double> t1;
    auto b1 = concat_m.bind(t1, false);
    auto [r1, a1] = concat_m.vera_forward(t1, b1, 0, t1.constant(vstar_t), gap, t1.constant(xt_t));
    Tape<double> t2;
    auto b2 = add_m.bind(t2, false);
    auto [r2, a2] = add_m.vera_forward(t2, b2, 0, t2.constant(vstar_t), gap, t2.constant(xt_t));
    CHECK(t1.shape(r1) == Shape{2, 1, 16});
    CHECK(t2.shape(r2) == Shape{2, 1, 16});
    bool differ = false;
    for (std::int64_t i = 0; i < t1.val(r1).size(); ++i)
        differ = differ || t1.val(r1)[i] != t2.val(r2)[i];
    CHECK(differ);

    // astar returned is exactly acc_mlp(vstar)
    auto direct = concat_m.acc_mlp(t1, b1, 0, t1.constant(vstar_t));
    const auto& av = t1.val(a1);
    const auto& dv = t1.val(direct);
    for (std::int64_t i = 0; i < av.size(); ++i) CHECK(av[i] == dv[i]);
}

TEST_CASE("model_forward: k=1 degenerates to the baseline flow transformer") {
    ModelConfig cfg = small_config(1, 16);
    RngStream init(8, 1);
    DeepFlowModel<double> m(cfg, init);
    CHECK_FALSE(m.cfg.vera_active());
    Tape<double> tape;
    auto bd = m.bind(tape, false);
    RngStream s(13, 13);
    const auto x = rng_normal<double>(s, {3, 2});
    auto out = m.forward(tape, bd, x, {Tensor<double>::full({3}, 0.6)}, {0, 1, 2});
    CHECK(out.v.size() == 1);
    CHECK(out.astar.empty());
    CHECK(out.a.empty());
    CHECK(out.refined.empty());
}

TEST_CASE("model_forward: all heads zero at initialization") {
    for (auto variant : {VeraVariant::concat, VeraVariant::additive}) {
        ModelConfig cfg = small_config(3, 16);
        cfg.vera_variant = variant;
        RngStream init(8, 2);
        DeepFlowModel<double> m(cfg, init);
        Tape<double> tape;
        auto bd = m.bind(tape, false);
        RngStream s(14, 14);
        const auto x = rng_normal<double>(s, {2, 2});
        std::vector<Tensor<double>> times = {Tensor<double>::full({2}, 0.8), Tensor<double>::full({2}, 0.795),
                                             Tensor<double>::full({2}, 0.79)};
        auto out = m.forward(tape, bd, x, times, {1, 3});
        REQUIRE(out.v.size() == 3);
        REQUIRE(out.a.size() == 2);
        for (const auto& v : out.v)
            for (std::int64_t i = 0; i < tape.val(v).size(); ++i) CHECK(tape.val(v)[i] == 0.0);
        for (const auto& a : out.a)
            for (std::int64_t i = 0; i < tape.val(a).size(); ++i) CHECK(tape.val(a)[i] == 0.0);
    }
}

TEST_CASE("model_forward: zero gaps at inference still refine features after training") {
    ModelConfig cfg = small_config(2, 16);
    cfg.num_classes = 4;
    RngStream init(8, 3);
    DeepFlowModel<float> m(cfg, init);
    AdamW<float> opt(m.params, TrainConfig{}.adam<float>());
    Ema<float> ema(m.params, 0.999f);
    TrainConfig tc;
    tc.batch_size = 8;
    RngStream data(15, 1), tstream(15, 2);
    for (int step = 0; step < 10; ++step) {
        const auto x0 = rng_normal<float>(data, m.cfg.geometry.batch_shape(8));
        std::vector<std::int64_t> ids(8);
        for (auto& id : ids) id = static_cast<std::int64_t>(data.next_double() * 4);
        train_step(m, opt, ema, x0, ids, tc, tstream);
    }
    Tape<float> tape;
    auto bd = m.bind(tape, false);
    RngStream s(16, 16);
    const auto x = rng_normal<float>(s, {2, 2});
    std::vector<Tensor<float>> times = {Tensor<float>::full({2}, 0.5f), Tensor<float>::full({2}, 0.5f)};
    auto out = m.forward(tape, bd, x, times, {0, 1});
    for (const auto& g : out.gaps)
        for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0f);
    const auto& refined = tape.val(out.refined[0]);
    const auto& vstar = tape.val(out.vstar[0]);
    bool differ = false;
    for (std::int64_t i = 0; i < refined.size(); ++i) differ = differ || refined[i] != vstar[i];
    CHECK(differ);
}

TEST_CASE("parameter-count formula matches the store across configs") {
    int checked = 0;
    for (std::int64_t k : {1, 2, 3}) {
        for (auto variant : {VeraVariant::concat, VeraVariant::additive}) {
            for (bool ca : {true, false}) {
                for (bool vera : {true, false}) {
                    ModelConfig cfg = small_config(k, 16);
                    cfg.vera_variant = variant;
                    cfg.use_cross_attention = ca;
                    cfg.use_vera = vera;
                    RngStream init(9, static_cast<std::uint64_t>(checked));
                    DeepFlowModel<double> m(cfg, init);
                    CHECK(m.param_count() == m.expected_param_count());
                    ++checked;
                }
            }
        }
    }
    ModelConfig img = small_config(2, 16);
    img.geometry.kind = GeometryKind::image;
    img.geometry.channels = 1;
    img.geometry.height = 8;
    img.geometry.width = 8;
    img.geometry.patch = 2;
    RngStream init(9, 99);
    DeepFlowModel<double> m(img, init);
    CHECK(m.param_count() == m.expected_param_count());
    CHECK(checked == 24);
}

TEST_CASE("full objective: gradient check on a small concat model") {
    ModelConfig cfg = small_config(2, 16, 1);
    const auto report = full_objective_grad_check(cfg, 1e-4);
    INFO("max_rel_error=", report.max_rel_error);
    CHECK(report.passed);
}

TEST_CASE("detach_branch_input: no gradient reaches branch 1 through branch 2") {
    // With the branch input detached, zeroing the first branch's supervision
    // and the acceleration loss must leave branch-1 parameters gradient-free.
    ModelConfig cfg = small_config(2, 16, 1);
    cfg.detach_branch_input = true;
    cfg.use_vera = false;
    RngStream init(31, 4);
    DeepFlowModel<double> model(cfg, init);
    randomize_params(model, 92, 0.08);
    FixedBatch fb = make_batch(model.cfg, 4, 18);
    fb.betas = {0.0, 1.0};  // loss depends on branch 2's head only
    Tape<double> tape;
    auto bound = model.bind(tape, true);
    auto out = model.forward(tape, bound, fb.x0, fb.times, fb.ids);
    auto lv = flow_losses(tape, out, fb.x0, fb.x1, fb.times, fb.betas, 0.0, false);
    tape.backward(lv.total);
    double branch1_norm = 0, branch2_norm = 0;
    for (std::size_t i = 0; i < model.params.count(); ++i) {
        const auto& name = model.params.entries[i].first;
        const auto& g = tape.grad(bound.vars[i]);
        double n2 = 0;
        for (std::int64_t j = 0; j < g.size(); ++j) n2 += g[j] * g[j];
        if (name.rfind("branch1.", 0) == 0) branch1_norm += n2;
        if (name.rfind("branch2.", 0) == 0) branch2_norm += n2;
    }
    CHECK(branch1_norm == 0.0);
    CHECK(branch2_norm > 0.0);
}

TEST_CASE("full objective: gradient check on an image-geometry model") {
    ModelConfig cfg = small_config(2, 16, 1);
    cfg.geometry.kind = GeometryKind::image;
    cfg.geometry.channels = 1;
    cfg.geometry.height = 4;
    cfg.geometry.width = 4;
    cfg.geometry.patch = 2;
    const auto report = full_objective_grad_check(cfg, 1e-4);
    INFO("max_rel_error=", report.max_rel_error);
    CHECK(report.passed);
}
