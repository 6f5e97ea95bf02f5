#include "absorber/gradcheck.hpp"

#include <cmath>
#include <functional>
#include <random>

#include "absorber/tensor.hpp"

namespace absorber {
namespace {

using DTensor = Tensor<double>;
using Rng = std::mt19937_64;

constexpr double kStep = 1e-5;
constexpr double kTol = 1e-4;

struct Case {
    // Leaf payloads; the graph is rebuilt from these for every evaluation so
    // finite differences see exactly the same computation as backward().
    std::vector<Shape> shapes;
    std::vector<std::vector<double>> values;
    std::function<double(std::vector<DTensor>&)> eval; // builds graph, returns loss value
};

double rel_err(double a, double b) {
    return std::abs(a - b) / std::max({1.0, std::abs(a), std::abs(b)});
}

std::vector<double> randu(Rng& rng, std::int64_t n, double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    std::vector<double> v(static_cast<std::size_t>(n));
    for (auto& x : v) x = dist(rng);
    return v;
}

// Contract a non-scalar op output to a scalar with fixed coefficients so a
// single backward sweep exercises the whole output.
DTensor project(const DTensor& out, const std::vector<double>& coeffs) {
    DTensor c = DTensor::leaf(out.shape(), coeffs);
    return reduce_sum(mul(out, c));
}

double check_case(const Case& c, double& max_err) {
    // autograd gradients
    std::vector<DTensor> leaves;
    for (std::size_t i = 0; i < c.shapes.size(); ++i)
        leaves.push_back(DTensor::leaf(c.shapes[i], c.values[i], true));
    std::vector<DTensor> graph_inputs = leaves;
    c.eval(graph_inputs);

    auto eval_at = [&](std::size_t leaf, std::size_t elem, double delta) {
        std::vector<DTensor> fresh;
        for (std::size_t i = 0; i < c.shapes.size(); ++i) {
            auto vals = c.values[i];
            if (i == leaf) vals[elem] += delta;
            fresh.push_back(DTensor::leaf(c.shapes[i], vals, false));
        }
        return c.eval(fresh);
    };

    for (std::size_t li = 0; li < leaves.size(); ++li) {
        const auto& g = leaves[li].grad();
        for (std::size_t e = 0; e < c.values[li].size(); ++e) {
            const double fd = (eval_at(li, e, kStep) - eval_at(li, e, -kStep)) / (2.0 * kStep);
            const double ad = g.empty() ? 0.0 : g[e];
            max_err = std::max(max_err, rel_err(ad, fd));
        }
    }
    return max_err;
}

GradCheckResult run_op(const std::string& name, Rng& rng, int cases,
                       const std::function<Case(Rng&)>& make_case) {
    GradCheckResult r;
    r.op = name;
    r.cases = cases;
    for (int i = 0; i < cases; ++i) {
        Case c = make_case(rng);
        check_case(c, r.max_rel_err);
    }
    r.pass = r.max_rel_err < kTol;
    return r;
}

std::int64_t rand_dim(Rng& rng, std::int64_t lo, std::int64_t hi) {
    std::uniform_int_distribution<std::int64_t> d(lo, hi);
    return d(rng);
}

// Loss evaluators below run backward() when inputs require grad; when called
// on plain leaves they just report the scalar value.
double finish(std::vector<DTensor>& inputs, DTensor loss) {
    if (!inputs.empty() && inputs[0].requires_grad()) backward(loss);
    return loss.item();
}

Case case_matmul(Rng& rng) {
    Case c;
    const bool batched = rand_dim(rng, 0, 1) == 1;
    const std::int64_t m = rand_dim(rng, 1, 3), k = rand_dim(rng, 1, 3), n = rand_dim(rng, 1, 3);
    Shape sa = batched ? Shape{2, m, k} : Shape{m, k};
    Shape sb = batched && rand_dim(rng, 0, 1) == 1 ? Shape{2, k, n} : Shape{k, n};
    c.shapes = {sa, sb};
    c.values = {randu(rng, numel_of(sa), -1, 1), randu(rng, numel_of(sb), -1, 1)};
    Shape so = batched ? Shape{2, m, n} : Shape{m, n};
    auto coeffs = randu(rng, numel_of(so), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) {
        return finish(in, project(matmul(in[0], in[1]), coeffs));
    };
    return c;
}

Case case_add(Rng& rng) {
    Case c;
    const std::int64_t a = rand_dim(rng, 1, 3), b = rand_dim(rng, 2, 4);
    const bool broadcast = rand_dim(rng, 0, 1) == 1;
    Shape sbig{a, b}, ssmall = broadcast ? Shape{b} : Shape{a, b};
    c.shapes = {sbig, ssmall};
    c.values = {randu(rng, numel_of(sbig), -1, 1), randu(rng, numel_of(ssmall), -1, 1)};
    auto coeffs = randu(rng, numel_of(sbig), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) { return finish(in, project(add(in[0], in[1]), coeffs)); };
    return c;
}

Case case_mul(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 1, 4)};
    c.shapes = {s, s};
    c.values = {randu(rng, numel_of(s), -1, 1), randu(rng, numel_of(s), -1, 1)};
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) { return finish(in, project(mul(in[0], in[1]), coeffs)); };
    return c;
}

Case case_scale(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 3)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -1, 1)};
    const double k = randu(rng, 1, -2, 2)[0];
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs, k](std::vector<DTensor>& in) { return finish(in, project(scale(in[0], k), coeffs)); };
    return c;
}

Case case_silu(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 3)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -2, 2)};
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) { return finish(in, project(silu(in[0]), coeffs)); };
    return c;
}

Case case_rms_norm(Rng& rng) {
    Case c;
    const std::int64_t rows = rand_dim(rng, 1, 3), d = rand_dim(rng, 2, 5);
    c.shapes = {Shape{rows, d}, Shape{d}};
    // keep rows away from zero so the norm is well conditioned
    c.values = {randu(rng, rows * d, 0.5, 2.0), randu(rng, d, -1, 1)};
    auto coeffs = randu(rng, rows * d, -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) {
        return finish(in, project(rms_norm(in[0], in[1]), coeffs));
    };
    return c;
}

Case case_embedding(Rng& rng) {
    Case c;
    const std::int64_t vocab = rand_dim(rng, 3, 6), d = rand_dim(rng, 2, 4);
    const std::int64_t n = rand_dim(rng, 1, 5);
    c.shapes = {Shape{vocab, d}};
    c.values = {randu(rng, vocab * d, -1, 1)};
    std::vector<std::int32_t> ids(static_cast<std::size_t>(n));
    for (auto& id : ids) id = std::int32_t(rand_dim(rng, 0, vocab - 1));
    auto coeffs = randu(rng, n * d, -1, 1);
    c.eval = [coeffs, ids, n](std::vector<DTensor>& in) {
        return finish(in, project(embedding_lookup(in[0], ids, Shape{n}), coeffs));
    };
    return c;
}

Case case_transpose(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 1, 3), rand_dim(rng, 1, 3)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -1, 1)};
    const std::size_t da = std::size_t(rand_dim(rng, 0, 2)), db = std::size_t(rand_dim(rng, 0, 2));
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs, da, db](std::vector<DTensor>& in) {
        return finish(in, project(transpose(in[0], da, db), coeffs));
    };
    return c;
}

Case case_reshape(Rng& rng) {
    Case c;
    const std::int64_t a = rand_dim(rng, 1, 3), b = rand_dim(rng, 1, 4);
    c.shapes = {Shape{a, b}};
    c.values = {randu(rng, a * b, -1, 1)};
    auto coeffs = randu(rng, a * b, -1, 1);
    c.eval = [coeffs, a, b](std::vector<DTensor>& in) {
        return finish(in, project(reshape(in[0], Shape{a * b}), coeffs));
    };
    return c;
}

Case case_concat(Rng& rng) {
    Case c;
    const std::int64_t rows = rand_dim(rng, 1, 3);
    const std::int64_t c1 = rand_dim(rng, 1, 3), c2 = rand_dim(rng, 1, 3);
    c.shapes = {Shape{rows, c1}, Shape{rows, c2}};
    c.values = {randu(rng, rows * c1, -1, 1), randu(rng, rows * c2, -1, 1)};
    auto coeffs = randu(rng, rows * (c1 + c2), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) {
        return finish(in, project(concat(std::vector<DTensor>{in[0], in[1]}, 1), coeffs));
    };
    return c;
}

Case case_slice(Rng& rng) {
    Case c;
    const std::int64_t rows = rand_dim(rng, 2, 4), cols = rand_dim(rng, 2, 4);
    const std::int64_t start = rand_dim(rng, 0, rows - 1);
    const std::int64_t len = rand_dim(rng, 1, rows - start);
    c.shapes = {Shape{rows, cols}};
    c.values = {randu(rng, rows * cols, -1, 1)};
    auto coeffs = randu(rng, len * cols, -1, 1);
    c.eval = [coeffs, start, len](std::vector<DTensor>& in) {
        return finish(in, project(slice(in[0], 0, start, len), coeffs));
    };
    return c;
}

Case case_softmax(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 2, 5)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -2, 2)};
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs](std::vector<DTensor>& in) { return finish(in, project(softmax_lastdim(in[0]), coeffs)); };
    return c;
}

Case case_rope(Rng& rng) {
    Case c;
    Shape s{1, rand_dim(rng, 1, 2), rand_dim(rng, 1, 3), 2 * rand_dim(rng, 1, 3)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -1, 1)};
    const std::int64_t pos = rand_dim(rng, 0, 50);
    auto coeffs = randu(rng, numel_of(s), -1, 1);
    c.eval = [coeffs, pos](std::vector<DTensor>& in) {
        return finish(in, project(rope(in[0], pos, 100.0), coeffs));
    };
    return c;
}

Case case_reduce_sum(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 4), rand_dim(rng, 1, 3)};
    c.shapes = {s};
    c.values = {randu(rng, numel_of(s), -1, 1)};
    c.eval = [](std::vector<DTensor>& in) { return finish(in, reduce_sum(in[0])); };
    return c;
}

// |a-b| has a kink at 0; keep the gap bounded away from it so central
// differences are valid.
Case case_l1(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 1, 4)};
    auto a = randu(rng, numel_of(s), -1, 1);
    auto gap = randu(rng, numel_of(s), 0.1, 1.0);
    auto b = a;
    for (std::size_t i = 0; i < b.size(); ++i) b[i] += (i % 2 == 0 ? gap[i] : -gap[i]);
    c.shapes = {s, s};
    c.values = {a, b};
    const LossNormalize mode = rand_dim(rng, 0, 1) == 0 ? LossNormalize::per_position : LossNormalize::per_element;
    c.eval = [mode](std::vector<DTensor>& in) { return finish(in, l1_loss(in[0], in[1], mode)); };
    return c;
}

Case case_l2(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 1, 4)};
    c.shapes = {s, s};
    c.values = {randu(rng, numel_of(s), -1, 1), randu(rng, numel_of(s), -1, 1)};
    const LossNormalize mode = rand_dim(rng, 0, 1) == 0 ? LossNormalize::per_position : LossNormalize::per_element;
    c.eval = [mode](std::vector<DTensor>& in) { return finish(in, l2_loss(in[0], in[1], mode)); };
    return c;
}

Case case_kl(Rng& rng) {
    Case c;
    Shape s{rand_dim(rng, 1, 3), rand_dim(rng, 2, 5)};
    c.shapes = {s, s};
    c.values = {randu(rng, numel_of(s), -2, 2), randu(rng, numel_of(s), -2, 2)};
    c.eval = [](std::vector<DTensor>& in) { return finish(in, kl_divergence_lastdim(in[0], in[1])); };
    return c;
}

Case case_cross_entropy(Rng& rng) {
    Case c;
    const std::int64_t rows = rand_dim(rng, 1, 4), vocab = rand_dim(rng, 2, 6);
    c.shapes = {Shape{rows, vocab}};
    c.values = {randu(rng, rows * vocab, -2, 2)};
    std::vector<std::int32_t> targets(static_cast<std::size_t>(rows));
    for (auto& t : targets) t = std::int32_t(rand_dim(rng, 0, vocab - 1));
    c.eval = [targets](std::vector<DTensor>& in) { return finish(in, cross_entropy(in[0], targets)); };
    return c;
}

// A small composite chain so the full-graph sweep (not just single ops)
// is covered: rms_norm -> matmul -> silu -> mul -> l2_loss.
Case case_composite(Rng& rng) {
    Case c;
    const std::int64_t t = rand_dim(rng, 1, 3), d = rand_dim(rng, 2, 4), h = rand_dim(rng, 2, 4);
    c.shapes = {Shape{t, d}, Shape{d}, Shape{d, h}, Shape{t, h}};
    c.values = {randu(rng, t * d, 0.5, 1.5), randu(rng, d, -1, 1), randu(rng, d * h, -1, 1),
                randu(rng, t * h, -1, 1)};
    c.eval = [](std::vector<DTensor>& in) {
        auto x = rms_norm(in[0], in[1]);
        auto y = silu(matmul(x, in[2]));
        auto z = mul(y, in[3]);
        return finish(in, l2_loss(z, scale(in[3], 0.5), LossNormalize::per_element));
    };
    return c;
}

} // namespace

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed, int cases_per_op) {
    Rng rng(seed);
    std::vector<GradCheckResult> out;
    out.push_back(run_op("matmul", rng, cases_per_op, case_matmul));
    out.push_back(run_op("add", rng, cases_per_op, case_add));
    out.push_back(run_op("mul", rng, cases_per_op, case_mul));
    out.push_back(run_op("scale", rng, cases_per_op, case_scale));
    out.push_back(run_op("silu", rng, cases_per_op, case_silu));
    out.push_back(run_op("rms_norm", rng, cases_per_op, case_rms_norm));
    out.push_back(run_op("embedding_lookup", rng, cases_per_op, case_embedding));
    out.push_back(run_op("transpose", rng, cases_per_op, case_transpose));
    out.push_back(run_op("reshape", rng, cases_per_op, case_reshape));
    out.push_back(run_op("concat", rng, cases_per_op, case_concat));
    out.push_back(run_op("slice", rng, cases_per_op, case_slice));
    out.push_back(run_op("softmax_lastdim", rng, cases_per_op, case_softmax));
    out.push_back(run_op("rope", rng, cases_per_op, case_rope));
    out.push_back(run_op("reduce_sum", rng, cases_per_op, case_reduce_sum));
    out.push_back(run_op("l1_loss", rng, cases_per_op, case_l1));
    out.push_back(run_op("l2_loss", rng, cases_per_op, case_l2));
    out.push_back(run_op("kl_divergence_lastdim", rng, cases_per_op, case_kl));
    out.push_back(run_op("cross_entropy", rng, cases_per_op, case_cross_entropy));
    out.push_back(run_op("composite_graph", rng, cases_per_op, case_composite));
    return out;
}

bool all_passed(const std::vector<GradCheckResult>& results) {
    for (const auto& r : results)
        if (!r.pass) return false;
    return true;
}

} // namespace absorber
