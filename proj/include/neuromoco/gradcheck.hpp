#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "neuromoco/contrastive.hpp"
#include "neuromoco/rng.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco::gradcheck {

// How a case wants its inputs sampled. Uniform is the default; AwayFromZero
// keeps values clear of a kink at 0 (relu) so central differences stay valid;
// DistinctPool quantizes to a coarse grid and adds a unique per-index offset
// so pooling windows never contain near-ties (offsets are index mod 97, and
// within-window index deltas for the shapes used here are in [1, 96], so two
// cells of one window always differ by at least 1e-4, well above 2h).
enum class Fill { Uniform, AwayFromZero, DistinctPool };

struct GradCase {
    std::string name;
    std::vector<Shape> shapes;
    std::vector<Fill> fills; // empty => all Uniform
    std::function<Tensor<double>(const std::vector<Tensor<double>>&)> forward;
};

struct GradReport {
    std::string name;
    double max_rel_err = 0.0;
    int seeds = 0;
    bool pass = false;
    double seconds = 0.0;
};

inline void fill_tensor(Tensor<double>& t, Fill mode, RngStream& rng) {
    auto& v = t.values();
    for (size_t i = 0; i < v.size(); ++i) {
        double u = rng.uniform() * 2.0 - 1.0;
        switch (mode) {
        case Fill::Uniform:
            v[i] = u;
            break;
        case Fill::AwayFromZero:
            v[i] = (u < 0 ? -1.0 : 1.0) * (0.05 + std::fabs(u));
            break;
        case Fill::DistinctPool:
            v[i] = std::round(u * 50.0) / 50.0 + (static_cast<double>(i % 97) + 1.0) * 1e-4;
            break;
        }
    }
}

// Checks d(w . f(x)) / dx against central differences for one sampled set of
// inputs. Backward is seeded directly with the random projection w, so each
// op is exercised in isolation rather than through a reduction op.
// Relative error uses a 1e-6 floor: coordinates whose gradient magnitude is
// below the floor are compared absolutely.
inline double check_case_once(const GradCase& c, uint64_t seed, double h) {
    RngStream rng = RngStream::child(seed, c.name, 0, 0);
    std::vector<Tensor<double>> inputs;
    for (size_t i = 0; i < c.shapes.size(); ++i) {
        Tensor<double> t = Tensor<double>::zeros(c.shapes[i]);
        fill_tensor(t, c.fills.empty() ? Fill::Uniform : c.fills[i], rng);
        t.set_requires_grad(true);
        inputs.push_back(t);
    }

    Tape<double> tape;
    Tensor<double> out;
    {
        TapeScope<double> scope(tape);
        out = c.forward(inputs);
    }
    std::vector<double> w(static_cast<size_t>(out.numel()));
    for (auto& x : w) x = rng.uniform() * 2.0 - 1.0;
    tape.backward_seeded(out, w);

    std::vector<std::vector<double>> analytic;
    for (auto& t : inputs) analytic.push_back(t.grad());

    auto project = [&](const Tensor<double>& o) {
        double s = 0.0;
        for (size_t i = 0; i < w.size(); ++i) s += w[i] * o.values()[i];
        return s;
    };

    double max_rel = 0.0;
    for (size_t ti = 0; ti < inputs.size(); ++ti) {
        auto& v = inputs[ti].values();
        for (size_t i = 0; i < v.size(); ++i) {
            const double save = v[i];
            v[i] = save + h;
            const double fp = project(c.forward(inputs));
            v[i] = save - h;
            const double fm = project(c.forward(inputs));
            v[i] = save;
            const double num = (fp - fm) / (2.0 * h);
            const double ana = analytic[ti][i];
            const double rel = std::fabs(ana - num) / std::max({std::fabs(ana), std::fabs(num), 1e-6});
            if (rel > max_rel) max_rel = rel;
        }
    }
    return max_rel;
}

inline GradReport run_case(const GradCase& c, int num_seeds, uint64_t base_seed = 7001,
                           double h = 1e-5, double tol = 1e-4) {
    auto t0 = std::chrono::steady_clock::now();
    GradReport r;
    r.name = c.name;
    r.seeds = num_seeds;
    for (int s = 0; s < num_seeds; ++s) {
        double rel = check_case_once(c, base_seed + static_cast<uint64_t>(s), h);
        if (rel > r.max_rel_err) r.max_rel_err = rel;
    }
    r.pass = r.max_rel_err < tol;
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return r;
}

// The full differentiable-op suite. Shapes are small so 20+ seeds of central
// differences stay cheap; pooling shapes keep W*C <= 96 (see DistinctPool).
inline std::vector<GradCase> standard_suite() {
    std::vector<GradCase> cases;
    using T = Tensor<double>;
    using V = std::vector<Tensor<double>>;

    cases.push_back({"add", {{3, 4}, {3, 4}}, {}, [](const V& in) { return add(in[0], in[1]); }});
    cases.push_back({"sub", {{3, 4}, {3, 4}}, {}, [](const V& in) { return sub(in[0], in[1]); }});
    cases.push_back(
        {"mul_elementwise", {{3, 4}, {3, 4}}, {}, [](const V& in) { return mul_elementwise(in[0], in[1]); }});
    cases.push_back({"scale", {{2, 5}}, {}, [](const V& in) { return scale(in[0], 1.7); }});
    cases.push_back({"add_scalar", {{2, 5}}, {}, [](const V& in) { return add_scalar(in[0], -0.3); }});
    cases.push_back({"relu", {{4, 6}}, {Fill::AwayFromZero}, [](const V& in) { return relu(in[0]); }});
    cases.push_back({"reshape", {{2, 3, 4}}, {}, [](const V& in) { return reshape(in[0], {4, 6}); }});
    cases.push_back({"permute", {{2, 3, 4}}, {}, [](const V& in) { return permute(in[0], {2, 0, 1}); }});
    cases.push_back({"concat", {{2, 3}, {2, 2}, {2, 4}}, {}, [](const V& in) {
                         return concat(std::vector<T>{in[0], in[1], in[2]}, 1);
                     }});
    cases.push_back({"mean_over", {{3, 4, 2}}, {}, [](const V& in) { return mean_over(in[0], 1); }});
    cases.push_back({"sum_over", {{3, 4, 2}}, {}, [](const V& in) { return sum_over(in[0], 0); }});
    cases.push_back(
        {"l2_normalize", {{3, 5}}, {}, [](const V& in) { return l2_normalize(in[0], 1, 1e-12); }});
    cases.push_back({"matmul", {{3, 4}, {4, 5}}, {}, [](const V& in) { return matmul(in[0], in[1]); }});
    cases.push_back({"batched_matmul", {{2, 3, 4}, {2, 4, 5}}, {}, [](const V& in) {
                         return batched_matmul(in[0], in[1], false);
                     }});
    cases.push_back({"batched_matmul_tb", {{2, 3, 4}, {2, 5, 4}}, {}, [](const V& in) {
                         return batched_matmul(in[0], in[1], true);
                     }});
    cases.push_back(
        {"linear", {{3, 4}, {5, 4}, {5}}, {}, [](const V& in) { return linear(in[0], in[1], in[2]); }});
    cases.push_back({"conv2d_s1", {{2, 3, 5, 5}, {4, 3, 3, 3}}, {}, [](const V& in) {
                         return conv2d(in[0], in[1], 1, 0);
                     }});
    cases.push_back({"conv2d_s2p1", {{2, 2, 6, 6}, {3, 2, 3, 3}}, {}, [](const V& in) {
                         return conv2d(in[0], in[1], 2, 1);
                     }});
    cases.push_back({"conv2d_nhwc", {{2, 5, 5, 3}, {3, 3, 3, 4}}, {}, [](const V& in) {
                         return conv2d_nhwc(in[0], in[1], 1, 1);
                     }});
    cases.push_back({"max_pool2d", {{2, 2, 5, 5}}, {Fill::DistinctPool}, [](const V& in) {
                         return max_pool2d(in[0], 2, 2);
                     }});
    cases.push_back({"avg_pool2d", {{2, 2, 6, 6}}, {}, [](const V& in) { return avg_pool2d(in[0], 3, 3); }});
    cases.push_back({"batch_norm_train", {{2, 2, 3, 3}, {2}, {2}}, {}, [](const V& in) {
                         T rm = T::zeros({2}), rv = T::full({2}, 1.0);
                         return batch_norm_2d(in[0], in[1], in[2], rm, rv, true, false);
                     }});
    cases.push_back({"batch_norm_eval", {{2, 2, 3, 3}, {2}, {2}}, {}, [](const V& in) {
                         T rm = T::from({2}, {0.2, -0.4});
                         T rv = T::from({2}, {1.3, 0.8});
                         return batch_norm_2d(in[0], in[1], in[2], rm, rv, false, false);
                     }});
    cases.push_back({"cross_entropy", {{4, 5}}, {}, [](const V& in) {
                         return cross_entropy_from_logits(in[0], std::vector<int64_t>{1, 0, 4, 2});
                     }});
    return cases;
}

// Contrastive compositions: the similarity head and the three losses are all
// smooth in q and k, so they are finite-difference checkable end to end (the
// queue is a fixed constant per case).
inline std::vector<GradCase> contrastive_suite() {
    std::vector<GradCase> cases;
    using V = std::vector<Tensor<double>>;
    constexpr int64_t T = 3, N = 2, C = 4, L = 5;

    auto fixed_queue = [] {
        auto q = contrastive::make_queue<double>(T, L, C, true, 424242);
        return q;
    };
    auto logits_of = [fixed_queue](const V& in) {
        auto queue = fixed_queue();
        return contrastive::similarity_logits(in[0], in[1], queue, 0.07);
    };

    cases.push_back({"similarity_logits", {{T, N, C}, {T, N, C}}, {}, logits_of});
    cases.push_back({"loss_mbc", {{T, N, C}, {T, N, C}}, {},
                     [logits_of](const V& in) { return contrastive::loss_mbc(logits_of(in)); }});
    cases.push_back({"loss_mac", {{T, N, C}, {T, N, C}}, {},
                     [logits_of](const V& in) { return contrastive::loss_mac(logits_of(in)); }});
    cases.push_back({"loss_mix", {{T, N, C}, {T, N, C}}, {}, [logits_of](const V& in) {
                         return contrastive::loss_mix(logits_of(in), 0.3, 0.7);
                     }});
    return cases;
}

// The spike nonlinearity is a step function, so central differences do not
// apply; its backward is defined as the arctan surrogate and is checked here
// against the closed form, coordinate by coordinate.
inline double spike_surrogate_max_error(int num_seeds, uint64_t base_seed = 9001) {
    double max_err = 0.0;
    for (int s = 0; s < num_seeds; ++s) {
        RngStream rng = RngStream::child(base_seed, "spike-surrogate", static_cast<uint64_t>(s), 0);
        const double threshold = rng.uniform(0.5, 1.5);
        Tensor<double> v = Tensor<double>::zeros({4, 7});
        for (auto& x : v.values()) x = rng.uniform(-2.0, 3.0);
        v.set_requires_grad(true);

        Tape<double> tape;
        Tensor<double> out;
        {
            TapeScope<double> scope(tape);
            out = spike(v, threshold);
        }
        std::vector<double> w(static_cast<size_t>(out.numel()));
        for (auto& x : w) x = rng.uniform(-1.0, 1.0);
        tape.backward_seeded(out, w);

        for (size_t i = 0; i < v.values().size(); ++i) {
            const double expect = w[i] * arctan_surrogate_derivative(v.values()[i] - threshold);
            max_err = std::max(max_err, std::fabs(v.grad()[i] - expect));
        }
    }
    return max_err;
}

} // namespace neuromoco::gradcheck
