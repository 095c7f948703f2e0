#include "neuromoco/training.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <string>

#include "neuromoco/rng.hpp"

namespace neuromoco::training {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void zero_grads(ParamSet<float>& params) {
    for (auto& [name, t] : params)
        if (t.requires_grad()) t.zero_grad();
}

void check_dataset_geometry(const dataset::FrameDataset& data, const snn::BackboneConfig& backbone,
                            int64_t time_steps, const char* what) {
    if (data.samples.empty()) throw ConfigError(std::string(what) + " dataset is empty");
    if (data.time_steps() != time_steps)
        throw ConfigError(std::string(what) + " dataset has T=" + std::to_string(data.time_steps()) +
                          ", configured time_steps=" + std::to_string(time_steps));
    if (data.height() != backbone.input_height || data.width() != backbone.input_width)
        throw ConfigError(std::string(what) + " dataset is " + std::to_string(data.height()) + "x" +
                          std::to_string(data.width()) + ", backbone expects " +
                          std::to_string(backbone.input_height) + "x" +
                          std::to_string(backbone.input_width));
}

// Deterministic per-sample augmentation seed for one of the two view streams.
uint64_t view_seed(uint64_t root, const char* stream, int64_t epoch, int64_t sample) {
    RngStream s = RngStream::child(root, stream, static_cast<uint64_t>(epoch),
                                   static_cast<uint64_t>(sample));
    return s.next_u64();
}

std::vector<int64_t> epoch_order(uint64_t root, int64_t epoch, int64_t n) {
    std::vector<int64_t> idx(static_cast<size_t>(n));
    std::iota(idx.begin(), idx.end(), int64_t{0});
    RngStream rng = RngStream::child(root, "data", static_cast<uint64_t>(epoch), 0);
    rng.shuffle(idx);
    return idx;
}

std::vector<int64_t> targets_per_cell(const std::vector<int64_t>& labels, int64_t T) {
    const int64_t N = static_cast<int64_t>(labels.size());
    std::vector<int64_t> out(static_cast<size_t>(T * N));
    for (int64_t t = 0; t < T; ++t)
        for (int64_t n = 0; n < N; ++n) out[static_cast<size_t>(t * N + n)] = labels[static_cast<size_t>(n)];
    return out;
}

} // namespace

void validate(const PretrainConfig& cfg) {
    if (cfg.time_steps < 1) throw ConfigError("pretrain: time_steps must be positive");
    if (cfg.batch_size < 1) throw ConfigError("pretrain: batch_size must be positive");
    if (cfg.epochs < 1) throw ConfigError("pretrain: epochs must be positive");
    if (cfg.lr < 0.0) throw ConfigError("pretrain: lr must be non-negative");
    if (cfg.momentum < 0.0 || cfg.momentum >= 1.0)
        throw ConfigError("pretrain: momentum m must lie in [0,1)");
    if (cfg.sgd_momentum < 0.0 || cfg.sgd_momentum >= 1.0)
        throw ConfigError("pretrain: sgd_momentum must lie in [0,1)");
    if (cfg.weight_decay < 0.0) throw ConfigError("pretrain: weight_decay must be non-negative");
    if (!(cfg.lr_gamma > 0.0)) throw ConfigError("pretrain: lr_gamma must be positive");
    for (int64_t m : cfg.milestones)
        if (m < 0) throw ConfigError("pretrain: milestones must be non-negative");
    if (cfg.batch_size > cfg.contrastive.queue_length)
        throw ConfigError("pretrain: batch_size exceeds the negative queue length");
    contrastive::validate_config(cfg.contrastive);
    snn::validate_lif(cfg.backbone.lif);
}

std::vector<int64_t> effective_milestones(const PretrainConfig& cfg) {
    if (!cfg.milestones.empty()) return cfg.milestones;
    return {cfg.epochs * 6 / 10, cfg.epochs * 8 / 10};
}

void validate(const FinetuneConfig& cfg) {
    if (cfg.batch_size < 1) throw ConfigError("finetune: batch_size must be positive");
    if (cfg.epochs < 1) throw ConfigError("finetune: epochs must be positive");
    if (cfg.lr < 0.0) throw ConfigError("finetune: lr must be non-negative");
    if (cfg.weight_decay < 0.0) throw ConfigError("finetune: weight_decay must be non-negative");
    if (cfg.warmup_epochs < 0 || cfg.warmup_epochs > cfg.epochs)
        throw ConfigError("finetune: warmup_epochs must lie in [0, epochs]");
    if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0))
        throw ConfigError("finetune: beta1/beta2 must lie in [0,1)");
    if (!(cfg.eps > 0.0)) throw ConfigError("finetune: eps must be positive");
    snn::validate_lif(cfg.backbone.lif);
}

PretrainOutput pretrain(const PretrainConfig& cfg, const dataset::FrameDataset& data,
                        const EpochFn& on_epoch) {
    validate(cfg);
    check_dataset_geometry(data, cfg.backbone, cfg.time_steps, "pretrain");

    augment::AugmentPolicy policy = cfg.augment;
    policy.width = cfg.backbone.input_width;
    policy.height = cfg.backbone.input_height;

    const uint64_t init_seed = RngStream::child(cfg.seed, "init", 0, 0).next_u64();
    const int64_t T = cfg.time_steps;
    const int64_t C = cfg.backbone.embedding_dim;

    // master (gradient) and subordinate (momentum) encoders share their
    // initialization seed, so theta_k == theta_q at the start
    snn::Backbone<float> backbone_q(cfg.backbone, init_seed);
    snn::ProjectionHead<float> proj_q(C, init_seed);
    snn::Backbone<float> backbone_k(cfg.backbone, init_seed);
    snn::ProjectionHead<float> proj_k(C, init_seed);

    contrastive::EncoderPair<float> pair;
    backbone_q.collect(pair.theta_q, "backbone.");
    proj_q.collect(pair.theta_q, "proj.");
    backbone_k.collect(pair.theta_k, "backbone.");
    proj_k.collect(pair.theta_k, "proj.");
    pair.m = cfg.momentum;

    auto queue = contrastive::make_queue<float>(T, cfg.contrastive.queue_length, C,
                                                 cfg.contrastive.prefill_random, init_seed);

    ParamSet<float> combined;
    combined.merge("q.", pair.theta_q);
    combined.merge("k.", pair.theta_k);

    optim::SgdState<float> sgd;
    const std::vector<int64_t> milestones = effective_milestones(cfg);
    metrics::Metrics out;
    out.phase = "pretrain";

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = Clock::now();
        const double lr = optim::lr_multistep(epoch, cfg.lr, milestones, cfg.lr_gamma);
        const std::vector<int64_t> order = epoch_order(cfg.seed, epoch, data.size());

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < data.size(); start += cfg.batch_size) {
            const int64_t end = std::min<int64_t>(start + cfg.batch_size, data.size());
            std::vector<events::FrameTensor> views_q, views_k;
            views_q.reserve(static_cast<size_t>(end - start));
            views_k.reserve(static_cast<size_t>(end - start));
            for (int64_t i = start; i < end; ++i) {
                const int64_t s = order[static_cast<size_t>(i)];
                const auto& frames = data.samples[static_cast<size_t>(s)].frames;
                views_q.push_back(augment::apply_view(
                    frames, augment::sample_view_params(policy, view_seed(cfg.seed, "augment-view-1",
                                                                          epoch, s))));
                views_k.push_back(augment::apply_view(
                    frames, augment::sample_view_params(policy, view_seed(cfg.seed, "augment-view-2",
                                                                          epoch, s))));
            }
            std::vector<const events::FrameTensor*> ptr_q, ptr_k;
            for (const auto& v : views_q) ptr_q.push_back(&v);
            for (const auto& v : views_k) ptr_k.push_back(&v);
            Tensor<float> x_q = dataset::pack_batch<float>(ptr_q);
            Tensor<float> x_k = dataset::pack_batch<float>(ptr_k);

            // subordinate path outside any tape: keys are detached, and batch
            // statistics are used without touching the running buffers (theta_k
            // may change only through the momentum update)
            Tensor<float> k_emb = l2_normalize(
                proj_k.forward(backbone_k.forward(x_k, /*training=*/true, /*update_running=*/false)), 2);

            Tape<float> tape;
            Tensor<float> loss;
            {
                TapeScope<float> scope(tape);
                Tensor<float> q_emb =
                    l2_normalize(proj_q.forward(backbone_q.forward(x_q, true, true)), 2);
                Tensor<float> logits =
                    contrastive::similarity_logits(q_emb, k_emb, queue, cfg.contrastive.temperature);
                loss = contrastive::loss_mix(logits, cfg.contrastive.alpha, cfg.contrastive.beta);
                zero_grads(pair.theta_q);
                tape.backward(loss);
            }
            optim::sgd_step(pair.theta_q, sgd, lr, cfg.sgd_momentum, cfg.weight_decay);
            contrastive::momentum_update(pair);
            contrastive::enqueue(queue, k_emb);

            loss_sum += loss.item();
            ++batches;
        }

        metrics::EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(batches);
        rec.lr = lr;
        rec.wall_time_s = seconds_since(t0);
        out.add(rec);
        if (on_epoch) on_epoch(out, combined);
    }
    return {std::move(combined), std::move(out)};
}

Classifier make_classifier(const snn::BackboneConfig& cfg, int64_t num_classes, uint64_t init_seed) {
    if (num_classes < 2) throw ConfigError("classifier: need at least two classes");
    Classifier model;
    model.cfg = cfg;
    model.num_classes = num_classes;
    model.backbone = snn::Backbone<float>(cfg, init_seed);
    model.head = snn::ClassificationHead<float>(cfg.embedding_dim, num_classes, init_seed);
    model.backbone.collect(model.params, "backbone.");
    model.head.collect(model.params, "head.");
    return model;
}

snn::BackboneConfig infer_backbone_config(const std::vector<checkpoint::Entry>& entries,
                                          int64_t input_height, int64_t input_width) {
    auto find = [&](const std::string& name) -> const checkpoint::Entry* {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    };

    const checkpoint::Entry* stem = find("backbone.stem.conv.w");
    if (!stem || stem->shape.size() != 4)
        throw ValidationError("checkpoint lacks a recognizable encoder (backbone.stem.conv.w)");

    snn::BackboneConfig cfg;
    cfg.input_height = input_height;
    cfg.input_width = input_width;
    cfg.stage_widths.clear();
    cfg.stage_blocks.clear();
    for (int64_t stage = 1;; ++stage) {
        const checkpoint::Entry* first =
            find("backbone.stage" + std::to_string(stage) + ".block1.conv1.w");
        if (!first) break;
        cfg.stage_widths.push_back(first->shape[3]);
        int64_t blocks = 1;
        while (find("backbone.stage" + std::to_string(stage) + ".block" + std::to_string(blocks + 1) +
                    ".conv1.w"))
            ++blocks;
        cfg.stage_blocks.push_back(blocks);
    }
    const checkpoint::Entry* fc = find("backbone.fc.w");
    if (cfg.stage_widths.empty() || !fc || fc->shape.size() != 2)
        throw ValidationError("checkpoint lacks a recognizable encoder (stages / backbone.fc.w)");
    cfg.embedding_dim = fc->shape[0];
    return cfg;
}

int64_t infer_num_classes(const std::vector<checkpoint::Entry>& entries) {
    for (const auto& e : entries)
        if (e.name == "head.fc.w") {
            if (e.shape.size() != 2) throw ValidationError("checkpoint: malformed head.fc.w");
            return e.shape[0];
        }
    throw ValidationError("checkpoint has no classification head (head.fc.w)");
}

FinetuneOutput finetune(const FinetuneConfig& cfg, const dataset::FrameDataset& train,
                        const dataset::FrameDataset& test,
                        const std::vector<checkpoint::Entry>* pretrained, const EpochFn& on_epoch) {
    validate(cfg);
    if (train.samples.empty() || test.samples.empty())
        throw ConfigError("finetune: train and test datasets must be non-empty");
    check_dataset_geometry(train, cfg.backbone, train.time_steps(), "finetune train");
    check_dataset_geometry(test, cfg.backbone, train.time_steps(), "finetune test");
    if (test.num_classes > train.num_classes)
        throw ConfigError("finetune: test labels exceed the training class count");

    const int64_t T = train.time_steps();
    const uint64_t init_seed = RngStream::child(cfg.seed, "init", 0, 0).next_u64();
    Classifier model = make_classifier(cfg.backbone, train.num_classes, init_seed);
    if (pretrained) checkpoint::load_into(*pretrained, model.params, "q.backbone.", "backbone.");

    // the optimizer walks either everything or, for a linear probe, only the
    // head; parameter handles are shared with model.params either way
    ParamSet<float> trainable;
    if (cfg.freeze_backbone) {
        model.head.collect(trainable, "head.");
    } else {
        trainable = model.params;
    }

    optim::AdamWState<float> adamw;
    metrics::Metrics out;
    out.phase = "finetune";

    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = Clock::now();
        const double lr = optim::lr_warmup_cosine(epoch, cfg.lr, cfg.warmup_epochs, cfg.epochs);
        const std::vector<int64_t> order = epoch_order(cfg.seed, epoch, train.size());

        double loss_sum = 0.0;
        int64_t batches = 0;
        for (int64_t start = 0; start < train.size(); start += cfg.batch_size) {
            const int64_t end = std::min<int64_t>(start + cfg.batch_size, train.size());
            std::vector<const events::FrameTensor*> ptrs;
            std::vector<int64_t> labels;
            for (int64_t i = start; i < end; ++i) {
                const int64_t s = order[static_cast<size_t>(i)];
                ptrs.push_back(&train.samples[static_cast<size_t>(s)].frames);
                labels.push_back(train.samples[static_cast<size_t>(s)].label);
            }
            Tensor<float> x = dataset::pack_batch<float>(ptrs);
            const std::vector<int64_t> targets = targets_per_cell(labels, T);

            Tape<float> tape;
            Tensor<float> loss;
            {
                TapeScope<float> scope(tape);
                Tensor<float> emb =
                    model.backbone.forward(x, !cfg.freeze_backbone, !cfg.freeze_backbone);
                Tensor<float> logits = model.head.forward(emb);
                loss = cross_entropy_from_logits(logits, targets);
                zero_grads(trainable);
                tape.backward(loss);
            }
            optim::adamw_step(trainable, adamw, lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);

            loss_sum += loss.item();
            ++batches;
        }

        metrics::EpochRecord rec;
        rec.epoch = epoch;
        rec.loss = loss_sum / static_cast<double>(batches);
        rec.lr = lr;
        rec.accuracy = evaluate(model, test, cfg.batch_size);
        rec.wall_time_s = seconds_since(t0);
        out.add(rec);
        if (on_epoch) on_epoch(out, model.params);
    }
    return {std::move(model.params), std::move(out)};
}

double evaluate(Classifier& model, const dataset::FrameDataset& data, int64_t batch_size) {
    if (data.samples.empty()) throw ConfigError("evaluate: dataset is empty");
    if (batch_size < 1) throw ConfigError("evaluate: batch_size must be positive");
    if (data.num_classes > model.num_classes)
        throw ConfigError("evaluate: dataset labels exceed the model class count");

    int64_t correct = 0;
    for (int64_t start = 0; start < data.size(); start += batch_size) {
        const int64_t end = std::min<int64_t>(start + batch_size, data.size());
        std::vector<const events::FrameTensor*> ptrs;
        for (int64_t i = start; i < end; ++i)
            ptrs.push_back(&data.samples[static_cast<size_t>(i)].frames);
        Tensor<float> x = dataset::pack_batch<float>(ptrs);
        Tensor<float> logits = model.head.forward(model.backbone.forward(x, false));
        Tensor<float> avg = mean_over(logits, 0); // (N, K) time-averaged readout

        const int64_t N = end - start, K = model.num_classes;
        for (int64_t n = 0; n < N; ++n) {
            int64_t arg = 0;
            for (int64_t k = 1; k < K; ++k)
                if (avg.values()[n * K + k] > avg.values()[n * K + arg]) arg = k;
            if (arg == data.samples[static_cast<size_t>(start + n)].label) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

} // namespace neuromoco::training
