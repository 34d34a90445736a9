#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vlci/nn.hpp"
#include "vlci/optim.hpp"
#include "vlci/tape.hpp"

#include <cmath>
#include <functional>
#include <vector>

using namespace vlci;
using namespace vlci::ad;

namespace {

MatD random_mat(Rng& rng, int r, int c, double scale = 1.0) {
    MatD m(r, c);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal() * scale;
    return m;
}

// Central finite differences of a scalar function of several leaf matrices
// against tape gradients.
void check_grads(const std::vector<MatD*>& inputs,
                 const std::function<Var<double>(Tape<double>&, std::vector<Var<double>>&)>& fn,
                 double h = 1e-6, double tol = 1e-6) {
    std::vector<MatD> grads(inputs.size());
    {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (std::size_t i = 0; i < inputs.size(); ++i) {
            vars.push_back(leaf(tape, *inputs[i], &grads[i]));
        }
        Var<double> loss = fn(tape, vars);
        REQUIRE(loss.value().rows() == 1);
        REQUIRE(loss.value().cols() == 1);
        tape.backward(loss.id);
    }
    auto eval = [&]() {
        Tape<double> tape(false);
        std::vector<Var<double>> vars;
        for (auto* m : inputs) vars.push_back(constant(tape, *m));
        return fn(tape, vars).value()(0, 0);
    };
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        MatD& x = *inputs[i];
        for (Eigen::Index k = 0; k < x.size(); ++k) {
            const double orig = x.data()[k];
            x.data()[k] = orig + h;
            const double fp = eval();
            x.data()[k] = orig - h;
            const double fm = eval();
            x.data()[k] = orig;
            const double fd = (fp - fm) / (2 * h);
            const double an = grads[i].size() ? grads[i].data()[k] : 0.0;
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
            CAPTURE(i);
            CAPTURE(k);
            CHECK(std::abs(fd - an) / denom < tol);
        }
    }
}

}  // namespace

TEST_CASE("matmul/add/hadamard gradients match finite differences") {
    Rng rng(11);
    MatD a = random_mat(rng, 3, 4), b = random_mat(rng, 4, 2), c = random_mat(rng, 3, 2);
    check_grads({&a, &b, &c}, [](Tape<double>&, std::vector<Var<double>>& v) {
        auto y = matmul(v[0], v[1]);
        auto z = hadamard(add(y, v[2]), sub(y, v[2]));
        return mean_all(z);
    });
}

TEST_CASE("softmax/layernorm/gelu/relu gradients") {
    Rng rng(12);
    MatD x = random_mat(rng, 4, 5);
    MatD g = random_mat(rng, 1, 5, 0.2);
    g.array() += 1.0;
    MatD b = random_mat(rng, 1, 5, 0.2);
    MatD w = random_mat(rng, 5, 3);
    check_grads({&x, &g, &b, &w}, [](Tape<double>&, std::vector<Var<double>>& v) {
        auto y = layernorm_rows(v[0], v[1], v[2]);
        auto s = softmax_rows(y);
        auto z = matmul(gelu(s), v[3]);
        return mean_all(hadamard(relu(z), z));
    });
}

TEST_CASE("slice/concat/gather/replace/pool gradients") {
    Rng rng(13);
    MatD x = random_mat(rng, 8, 6);  // 8 rows = 4x2 grid? use 4x2 -> needs even dims; use 2x4
    MatD row = random_mat(rng, 1, 6);
    check_grads({&x, &row}, [](Tape<double>&, std::vector<Var<double>>& v) {
        auto g = gather_rows(v[0], {0, 2, 2, 5});
        auto r = replace_rows(v[0], {1, 3}, v[1]);
        auto cat = concat_rows(g, slice_rows(r, 2, 4));
        auto cc = concat_cols(slice_cols(cat, 0, 3), slice_cols(cat, 3, 3));
        auto pooled = grid_maxpool2(v[0], 2, 4);
        return add(mean_all(cc), mean_all(pooled));
    });
}

TEST_CASE("gather_flat zero-padding and gradients") {
    Rng rng(14);
    MatD x = random_mat(rng, 3, 3);
    std::vector<long> idx = {-1, 0, 4, 8, 4, -1};
    check_grads({&x}, [&idx](Tape<double>&, std::vector<Var<double>>& v) {
        auto y = gather_flat(v[0], idx, 2, 3);
        return mean_all(hadamard(y, y));
    });
    Tape<double> t(false);
    auto v = constant(t, x);
    auto y = gather_flat(v, idx, 2, 3);
    CHECK(y.value()(0, 0) == 0.0);
    CHECK(y.value()(0, 1) == x(0, 0));
    CHECK(y.value()(1, 2) == 0.0);
}

TEST_CASE("nll and mse losses") {
    Rng rng(15);
    MatD logits = random_mat(rng, 5, 7);
    std::vector<int> targets = {1, 0, 6, 3, 3};
    check_grads({&logits}, [&targets](Tape<double>&, std::vector<Var<double>>& v) {
        return nll_mean(v[0], targets);
    });

    MatD p = random_mat(rng, 4, 3), q = random_mat(rng, 4, 3);
    check_grads({&p, &q}, [](Tape<double>&, std::vector<Var<double>>& v) {
        return mse_mean(v[0], v[1]);
    });

    // saturation: +1e4 logit on the true class drives the loss to ~0
    MatD sat = MatD::Zero(2, 4);
    sat(0, 1) = 1e4;
    sat(1, 2) = 1e4;
    Tape<double> t(false);
    CHECK(nll_mean(constant(t, sat), std::vector<int>{1, 2}).value()(0, 0) < 1e-3);
}

TEST_CASE("attention core: singleton, uniform, saturation") {
    nn::ParamStore<double> ps;
    nn::Ctx<double> cx(ps, false);

    // single key: weights 1, output equals v
    Rng rng(3);
    MatD q = random_mat(rng, 2, 4);
    MatD k = random_mat(rng, 1, 4);
    MatD v = random_mat(rng, 1, 4);
    auto res = nn::scaled_attention(cx, cx.c(q), cx.c(k), cx.c(v), 2);
    CHECK((res.out.value() - v.replicate(2, 1)).cwiseAbs().maxCoeff() == 0.0);
    for (const auto& w : res.weights) {
        CHECK(w.rows() == 2);
        CHECK(w.cols() == 1);
        CHECK(w.minCoeff() == 1.0);
    }

    // uniform logits -> 0.5/0.5 weights
    MatD q0 = MatD::Zero(1, 2), k2 = MatD::Zero(2, 2), v2 = random_mat(rng, 2, 2);
    auto res2 = nn::scaled_attention(cx, cx.c(q0), cx.c(k2), cx.c(v2), 1);
    CHECK(res2.weights[0](0, 0) == doctest::Approx(0.5));
    CHECK(res2.weights[0](0, 1) == doctest::Approx(0.5));

    // dominant key logit -> weight ~1
    MatD qb = MatD::Zero(1, 2);
    qb(0, 0) = 1e4;
    MatD kb = MatD::Zero(2, 2);
    kb(0, 0) = 1.0;  // logit 1e4/sqrt(2) for key 0, 0 for key 1
    auto res3 = nn::scaled_attention(cx, cx.c(qb), cx.c(kb), cx.c(v2), 1);
    CHECK(std::abs(1.0 - res3.weights[0](0, 0)) < 1e-6);

    // fully masked row is an error
    nn::AttnMask m{1, 2, {0, 0}};
    CHECK_THROWS_AS(nn::scaled_attention(cx, cx.c(q0), cx.c(k2), cx.c(v2), 1, &m), ShapeError);
}

TEST_CASE("mha gradients through projections") {
    nn::ParamStore<double> ps;
    auto h = nn::make_mha(ps, "attn", 4);
    Rng rng(9);
    nn::init_normal(ps, rng, 0.3);
    MatD x = random_mat(rng, 3, 4);
    MatD kv = random_mat(rng, 5, 4);

    ps.zero_grad();
    nn::Ctx<double> cx(ps);
    auto xq = constant(cx.tape, x);
    auto xkv = constant(cx.tape, kv);
    auto out = nn::mha(cx, h, xq, xkv, 2);
    auto loss = mean_all(out.out);
    cx.tape.backward(loss.id);

    // finite differences over a few parameter coordinates
    const std::size_t total = ps.scalar_count();
    Rng pick(21);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t i = static_cast<std::size_t>(pick.below(total));
        const double orig = ps.get_flat(i);
        const double hstep = 1e-6;
        auto eval = [&]() {
            nn::Ctx<double> c2(ps, false);
            auto o = nn::mha(c2, h, constant(c2.tape, x), constant(c2.tape, kv), 2);
            return mean_all(o.out).value()(0, 0);
        };
        ps.set_flat(i, orig + hstep);
        const double fp = eval();
        ps.set_flat(i, orig - hstep);
        const double fm = eval();
        ps.set_flat(i, orig);
        const double fd = (fp - fm) / (2 * hstep);
        const double an = ps.grad_flat(i);
        const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
        CHECK(std::abs(fd - an) / denom < 1e-5);
    }
}

TEST_CASE("warmup-cosine schedule shape") {
    const long total = 100;
    const double peak = 5e-4;
    CHECK(opt::lr_at(0, total, peak, 0.1) == doctest::Approx(0.0));
    CHECK(opt::lr_at(10, total, peak, 0.1) == doctest::Approx(peak));
    CHECK(opt::lr_at(100, total, peak, 0.1) == doctest::Approx(0.0).epsilon(1e-9));
    // continuity around the peak
    const double before = opt::lr_at(9, total, peak, 0.1);
    const double after = opt::lr_at(11, total, peak, 0.1);
    CHECK(before < peak);
    CHECK(after < peak);
    CHECK(before > 0.8 * peak);
    CHECK(after > 0.99 * peak * std::cos(M_PI * 1.0 / 90.0));
    // warmup 0 starts at the peak
    CHECK(opt::lr_at(0, total, peak, 0.0) == doctest::Approx(peak));
}

TEST_CASE("adam overfits a tiny least squares problem") {
    Rng rng(5);
    nn::ParamStore<double> ps;
    int w = ps.add("w", 3, 1);
    MatD x = random_mat(rng, 16, 3);
    MatD wstar = random_mat(rng, 3, 1);
    MatD y = x * wstar;

    opt::AdamConfig cfg;
    cfg.weight_decay = 0.0;
    opt::Adam<double> adam(cfg);
    double first = 0, last = 0;
    for (int step = 0; step < 400; ++step) {
        ps.zero_grad();
        nn::Ctx<double> cx(ps);
        auto loss = mse_mean(matmul(constant(cx.tape, x), cx.p(w)), constant(cx.tape, y));
        if (step == 0) first = loss.value()(0, 0);
        last = loss.value()(0, 0);
        cx.tape.backward(loss.id);
        adam.step(ps, 0.05);
    }
    CHECK(last < 1e-6 * std::max(1.0, first));
}
