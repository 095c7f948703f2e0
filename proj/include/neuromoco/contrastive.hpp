#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/params.hpp"
#include "neuromoco/rng.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco::contrastive {

struct ContrastiveConfig {
    double temperature = 0.07;
    int64_t queue_length = 512;
    double alpha = 0.5;
    double beta = 0.5;
    bool prefill_random = true; // start from random unit negatives instead of an empty queue
};

inline void validate_config(const ContrastiveConfig& cfg) {
    if (!(cfg.temperature > 0.0)) throw ConfigError("contrastive: temperature must be positive");
    if (cfg.queue_length < 1) throw ConfigError("contrastive: queue_length must be >= 1");
    if (cfg.alpha < 0.0 || cfg.beta < 0.0) throw ConfigError("contrastive: alpha/beta must be non-negative");
    if (std::fabs(cfg.alpha + cfg.beta - 1.0) > 1e-12)
        throw ConfigError("contrastive: alpha + beta must equal 1");
}

// FIFO queue of detached key embeddings, one slot column per enqueued sample,
// shared across all T time slices. Rows are stored unit-norm and never carry
// gradient; only the training loop mutates a queue.
template <class S>
struct QueueState {
    Tensor<S> buffer; // (T, L, C)
    int64_t write_ptr = 0;
    int64_t filled = 0;

    int64_t time_steps() const { return buffer.dim(0); }
    int64_t length() const { return buffer.dim(1); }
    int64_t dim() const { return buffer.dim(2); }
};

template <class S>
QueueState<S> make_queue(int64_t T, int64_t L, int64_t C, bool prefill_random, uint64_t seed) {
    if (T < 1 || L < 1 || C < 1) throw ConfigError("queue: T, L, C must all be positive");
    QueueState<S> q;
    q.buffer = Tensor<S>::zeros({T, L, C});
    if (prefill_random) {
        RngStream rng = RngStream::child(seed, "queue-prefill", 0, 0);
        S* v = q.buffer.values().data();
        for (int64_t t = 0; t < T; ++t)
            for (int64_t l = 0; l < L; ++l) {
                S* row = v + (t * L + l) * C;
                S ss = S(0);
                for (int64_t c = 0; c < C; ++c) {
                    row[c] = static_cast<S>(rng.normal());
                    ss += row[c] * row[c];
                }
                const S n = std::sqrt(ss + S(1e-12));
                for (int64_t c = 0; c < C; ++c) row[c] /= n;
            }
        q.filled = L;
    }
    return q;
}

// Write a batch of keys at write_ptr..write_ptr+N-1 (mod L), evicting the
// oldest columns. Keys are re-normalized per (t,n) row and copied by value,
// so nothing in the queue participates in autodiff.
template <class S>
void enqueue(QueueState<S>& queue, const Tensor<S>& keys) {
    if (keys.rank() != 3 || keys.dim(0) != queue.time_steps() || keys.dim(2) != queue.dim())
        throw ShapeError("enqueue: keys " + shape_str(keys.shape()) + " vs queue buffer " +
                         shape_str(queue.buffer.shape()));
    const int64_t T = queue.time_steps(), L = queue.length(), C = queue.dim();
    const int64_t N = keys.dim(1);
    if (N > L)
        throw ConfigError("enqueue: batch of " + std::to_string(N) + " exceeds queue length " +
                          std::to_string(L));

    const S* kv = keys.values().data();
    S* bv = queue.buffer.values().data();
    for (int64_t t = 0; t < T; ++t)
        for (int64_t n = 0; n < N; ++n) {
            const S* src = kv + (t * N + n) * C;
            S ss = S(0);
            for (int64_t c = 0; c < C; ++c) ss += src[c] * src[c];
            const S norm = std::sqrt(ss + S(1e-12));
            const int64_t slot = (queue.write_ptr + n) % L;
            S* dst = bv + (t * L + slot) * C;
            for (int64_t c = 0; c < C; ++c) dst[c] = src[c] / norm;
        }
    queue.write_ptr = (queue.write_ptr + N) % L;
    queue.filled = std::min<int64_t>(queue.filled + N, L);
}

// Similarity matrix with a time dimension: column 0 is the positive pair
// q(t,n)·k(t,n), columns 1..filled are dots against the queue, everything
// scaled by 1/temperature. The classification target is always index 0.
template <class S>
Tensor<S> similarity_logits(const Tensor<S>& q, const Tensor<S>& k, const QueueState<S>& queue,
                            double temperature) {
    if (!(temperature > 0.0)) throw ConfigError("similarity_logits: temperature must be positive");
    if (q.rank() != 3 || q.shape() != k.shape())
        throw ShapeError("similarity_logits: q " + shape_str(q.shape()) + " vs k " +
                         shape_str(k.shape()));
    if (q.dim(0) != queue.time_steps() || q.dim(2) != queue.dim())
        throw ShapeError("similarity_logits: embeddings " + shape_str(q.shape()) +
                         " vs queue buffer " + shape_str(queue.buffer.shape()));

    const int64_t T = q.dim(0), N = q.dim(1), C = q.dim(2);
    Tensor<S> pos = reshape(sum_over(mul_elementwise(q, k), 2), {T, N, 1});
    Tensor<S> logits;
    if (queue.filled == 0) {
        logits = pos;
    } else {
        // the valid columns are a contiguous prefix of the buffer
        Tensor<S> active = Tensor<S>::zeros({T, queue.filled, C});
        const S* bv = queue.buffer.values().data();
        S* av = active.values().data();
        const int64_t L = queue.length();
        for (int64_t t = 0; t < T; ++t)
            std::copy(bv + t * L * C, bv + (t * L + queue.filled) * C, av + t * queue.filled * C);
        Tensor<S> negs = batched_matmul(q, active, /*trans_b=*/true);
        logits = concat(std::vector<Tensor<S>>{pos, negs}, 2);
    }
    return scale(logits, static_cast<S>(1.0 / temperature));
}

// Mean-before-criterion: average the logits over the time axis, then apply
// cross entropy against target 0 and average over the batch.
template <class S>
Tensor<S> loss_mbc(const Tensor<S>& logits) {
    if (logits.rank() != 3) throw ShapeError("loss_mbc: expected (T,N,1+L) logits");
    return cross_entropy_from_logits(mean_over(logits, 0), int64_t{0});
}

// Mean-after-criterion: cross entropy per (t,n) cell against target 0,
// averaged over both time and batch.
template <class S>
Tensor<S> loss_mac(const Tensor<S>& logits) {
    if (logits.rank() != 3) throw ShapeError("loss_mac: expected (T,N,1+L) logits");
    return cross_entropy_from_logits(logits, int64_t{0});
}

template <class S>
Tensor<S> loss_mix(const Tensor<S>& logits, double alpha, double beta) {
    if (alpha < 0.0 || beta < 0.0) throw ConfigError("loss_mix: alpha/beta must be non-negative");
    if (std::fabs(alpha + beta - 1.0) > 1e-12) throw ConfigError("loss_mix: alpha + beta must equal 1");
    return add(scale(loss_mbc(logits), static_cast<S>(alpha)),
               scale(loss_mac(logits), static_cast<S>(beta)));
}

// Master/subordinate parameter pairing. Both sets must share names and
// shapes; theta_k is only ever written through momentum_update.
template <class S>
struct EncoderPair {
    ParamSet<S> theta_q;
    ParamSet<S> theta_k;
    double m = 0.999;
};

// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise over every
// registered entry (weights and normalization buffers alike). Pure value
// arithmetic: no tape interaction, theta_q untouched.
template <class S>
void momentum_update(EncoderPair<S>& pair) {
    if (pair.m < 0.0 || pair.m > 1.0)
        throw ConfigError("momentum_update: m must lie in [0,1]");
    if (pair.theta_q.size() != pair.theta_k.size())
        throw ValidationError("momentum_update: parameter sets differ in size");
    const S m = static_cast<S>(pair.m);
    for (size_t i = 0; i < pair.theta_q.size(); ++i) {
        const auto& [qn, qt] = pair.theta_q.items()[i];
        auto& [kn, kt] = pair.theta_k.items()[i];
        if (qn != kn)
            throw ValidationError("momentum_update: name mismatch '" + qn + "' vs '" + kn + "'");
        if (qt.shape() != kt.shape())
            throw ValidationError("momentum_update: shape mismatch for '" + qn + "'");
        const S* qv = qt.values().data();
        S* kv = kt.values().data();
        const size_t n = qt.values().size();
        for (size_t j = 0; j < n; ++j) kv[j] = m * kv[j] + (S(1) - m) * qv[j];
    }
}

} // namespace neuromoco::contrastive
