#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "neuromoco/checkpoint.hpp"
#include "neuromoco/dataset.hpp"
#include "neuromoco/events.hpp"
#include "neuromoco/metrics.hpp"
#include "neuromoco/optim.hpp"
#include "neuromoco/rng.hpp"
#include "neuromoco/training.hpp"

using namespace neuromoco;

namespace {

// small two-stage encoder over 16x16 inputs so training-loop tests stay fast
snn::BackboneConfig tiny_backbone() {
    snn::BackboneConfig cfg;
    cfg.input_height = 16;
    cfg.input_width = 16;
    cfg.stage_widths = {8, 16};
    cfg.stage_blocks = {1, 1};
    cfg.embedding_dim = 16;
    return cfg;
}

dataset::FrameDataset tiny_dataset(int classes, int per_class, int64_t T, uint64_t seed) {
    events::GenParams gp;
    gp.num_classes = classes;
    gp.width = 16;
    gp.height = 16;
    gp.signal_events = 1200;

    dataset::FrameDataset ds;
    ds.num_classes = classes;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            events::LabeledStream ls = events::gen_synthetic_stream(
                c, seed + static_cast<uint64_t>(c) * 1000 + static_cast<uint64_t>(i), gp);
            events::BinningConfig bc;
            bc.num_windows = T;
            events::BinResult br = events::bin_events(ls.stream, bc);
            ds.samples.push_back({std::move(br.frames), ls.label, ""});
        }
    return ds;
}

training::PretrainConfig tiny_pretrain_config(int64_t T) {
    training::PretrainConfig cfg;
    cfg.time_steps = T;
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.lr = 0.05;
    cfg.momentum = 0.9;
    cfg.seed = 7;
    cfg.contrastive.queue_length = 16;
    cfg.backbone = tiny_backbone();
    return cfg;
}

// the encoder initialization pretrain must arrive at for a given root seed:
// everything flows from the "init" split
ParamSet<float> expected_init(const training::PretrainConfig& cfg) {
    const uint64_t init_seed = RngStream::child(cfg.seed, "init", 0, 0).next_u64();
    snn::Backbone<float> b(cfg.backbone, init_seed);
    snn::ProjectionHead<float> p(cfg.backbone.embedding_dim, init_seed);
    ParamSet<float> ps;
    b.collect(ps, "backbone.");
    p.collect(ps, "proj.");
    return ps;
}

bool all_zero(const std::vector<float>& v) {
    for (float x : v)
        if (x != 0.0) return false;
    return true;
}

} // namespace

TEST_CASE("pretrain config validation and default milestones") {
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    CHECK_NOTHROW(training::validate(cfg));

    auto broken = [&](auto&& mutate) {
        training::PretrainConfig c = cfg;
        mutate(c);
        CHECK_THROWS_AS(training::validate(c), ConfigError);
    };
    broken([](auto& c) { c.time_steps = 0; });
    broken([](auto& c) { c.batch_size = 0; });
    broken([](auto& c) { c.epochs = 0; });
    broken([](auto& c) { c.lr = -0.1; });
    broken([](auto& c) { c.momentum = 1.0; });
    broken([](auto& c) { c.momentum = -0.1; });
    broken([](auto& c) { c.lr_gamma = 0.0; });
    broken([](auto& c) { c.contrastive.alpha = 0.7; }); // alpha+beta != 1
    broken([](auto& c) { c.batch_size = 64; });         // exceeds queue length 16

    training::PretrainConfig d = cfg;
    d.epochs = 20;
    CHECK(training::effective_milestones(d) == std::vector<int64_t>{12, 16});
    d.epochs = 200;
    CHECK(training::effective_milestones(d) == std::vector<int64_t>{120, 160});
    d.milestones = {5, 9};
    CHECK(training::effective_milestones(d) == std::vector<int64_t>{5, 9});
}

TEST_CASE("finetune config validation") {
    training::FinetuneConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.epochs = 10;
    cfg.warmup_epochs = 2;
    CHECK_NOTHROW(training::validate(cfg));

    auto broken = [&](auto&& mutate) {
        training::FinetuneConfig c = cfg;
        mutate(c);
        CHECK_THROWS_AS(training::validate(c), ConfigError);
    };
    broken([](auto& c) { c.batch_size = 0; });
    broken([](auto& c) { c.epochs = 0; });
    broken([](auto& c) { c.lr = -1.0; });
    broken([](auto& c) { c.warmup_epochs = 11; }); // > epochs
    broken([](auto& c) { c.warmup_epochs = -1; });
    broken([](auto& c) { c.beta1 = 1.0; });
    broken([](auto& c) { c.eps = 0.0; });
}

TEST_CASE("pretrain validates dataset geometry") {
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    dataset::FrameDataset ds = tiny_dataset(2, 2, 4, 11);

    training::PretrainConfig wrong_t = cfg;
    wrong_t.time_steps = 8;
    CHECK_THROWS_AS(training::pretrain(wrong_t, ds), ConfigError);

    dataset::FrameDataset empty;
    CHECK_THROWS_AS(training::pretrain(cfg, empty), ConfigError);

    training::PretrainConfig wrong_res = cfg;
    wrong_res.backbone.input_width = 32;
    wrong_res.backbone.input_height = 32;
    CHECK_THROWS_AS(training::pretrain(wrong_res, ds), ConfigError);
}

TEST_CASE("first pretraining batch obeys the uniform-logit bound") {
    // with L prefilled random negatives, the worst near-uniform-logit loss is
    // about ln(1+L); the positive pair only pulls it below that
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    cfg.batch_size = 6;
    dataset::FrameDataset ds = tiny_dataset(2, 3, 4, 21);

    training::PretrainOutput out = training::pretrain(cfg, ds);
    REQUIRE(out.metrics.records.size() == 1);
    const double loss0 = out.metrics.records[0].loss;
    CHECK(loss0 > 0.0);
    CHECK(loss0 <= std::log(1.0 + 16.0) + 1.0);
}

TEST_CASE("an unfilled queue starts at zero loss and fills during the epoch") {
    // no prefill: the first batch sees only its positive, so both loss terms
    // are exactly zero; by epoch 2 the queue holds the epoch-1 keys
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    cfg.contrastive.prefill_random = false;
    cfg.epochs = 2;
    dataset::FrameDataset ds = tiny_dataset(2, 2, 4, 31);

    training::PretrainOutput out = training::pretrain(cfg, ds);
    REQUIRE(out.metrics.records.size() == 2);
    CHECK(out.metrics.records[0].loss == 0.0);
    CHECK(out.metrics.records[1].loss > 0.0);
}

TEST_CASE("zero learning rate leaves the master encoder untouched") {
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    cfg.lr = 0.0;
    cfg.epochs = 2;
    cfg.batch_size = 2;
    dataset::FrameDataset ds = tiny_dataset(2, 2, 4, 41);

    training::PretrainOutput out = training::pretrain(cfg, ds);
    ParamSet<float> init = expected_init(cfg);
    for (const auto& [name, t0] : init) {
        if (!t0.requires_grad()) continue; // normalization buffers do move
        const auto& t1 = out.params.at("q." + name);
        REQUIRE(t1.values().size() == t0.values().size());
        for (size_t j = 0; j < t0.values().size(); ++j)
            CHECK(t1.values()[j] == t0.values()[j]);
    }
}

TEST_CASE("one step moves the subordinate encoder exactly along the momentum rule") {
    // dataset == one batch and one epoch: a single optimization step. The
    // subordinate parameters must equal m*k0 + (1-m)*q1 entry for entry,
    // recomputed here from the reconstructed initialization — and no gradient
    // may have reached them.
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    dataset::FrameDataset ds = tiny_dataset(2, 2, 4, 51);
    REQUIRE(ds.size() == cfg.batch_size);

    training::PretrainOutput out = training::pretrain(cfg, ds);
    ParamSet<float> k0 = expected_init(cfg);
    const float m = static_cast<float>(cfg.momentum);

    for (const auto& [name, t_init] : k0) {
        const auto& q1 = out.params.at("q." + name);
        const auto& k1 = out.params.at("k." + name);
        REQUIRE(k1.values().size() == t_init.values().size());
        for (size_t j = 0; j < t_init.values().size(); ++j) {
            const double expect = static_cast<double>(m) * t_init.values()[j] +
                                  static_cast<double>(1.0f - m) * q1.values()[j];
            CHECK(std::fabs(k1.values()[j] - expect) <=
                  1e-6 * std::max(1.0, std::fabs(expect)));
        }
        CHECK((k1.grad().empty() || all_zero(k1.grad())));
    }

    // the step did change the master encoder
    bool q_moved = false;
    for (const auto& [name, t_init] : k0) {
        const auto& q1 = out.params.at("q." + name);
        for (size_t j = 0; j < t_init.values().size(); ++j)
            if (q1.values()[j] != t_init.values()[j]) q_moved = true;
    }
    CHECK(q_moved);
}

TEST_CASE("fixed seed reproduces pretraining bit for bit") {
    training::PretrainConfig cfg = tiny_pretrain_config(4);
    cfg.epochs = 2;
    cfg.batch_size = 2;
    dataset::FrameDataset ds = tiny_dataset(2, 2, 4, 61);

    training::PretrainOutput a = training::pretrain(cfg, ds);
    training::PretrainOutput b = training::pretrain(cfg, ds);
    CHECK(metrics::to_jsonl(a.metrics) == metrics::to_jsonl(b.metrics));

    const auto ea = checkpoint::from_params(a.params);
    const auto eb = checkpoint::from_params(b.params);
    REQUIRE(ea.size() == eb.size());
    for (size_t i = 0; i < ea.size(); ++i) {
        CHECK(ea[i].name == eb[i].name);
        CHECK(ea[i].data == eb[i].data);
    }

    // a different seed must actually change the trajectory
    training::PretrainConfig other = cfg;
    other.seed = 8;
    training::PretrainOutput c = training::pretrain(other, ds);
    CHECK(metrics::to_jsonl(a.metrics) != metrics::to_jsonl(c.metrics));
}

TEST_CASE("finetune starts near ln K and improves on separable data") {
    training::FinetuneConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.batch_size = 16;
    cfg.epochs = 6;
    cfg.lr = 0.01;
    cfg.warmup_epochs = 2;
    cfg.weight_decay = 0.01;
    cfg.seed = 5;
    dataset::FrameDataset train = tiny_dataset(2, 8, 4, 71);
    dataset::FrameDataset test = tiny_dataset(2, 4, 4, 72);

    training::FinetuneOutput out = training::finetune(cfg, train, test, nullptr);
    REQUIRE(out.metrics.records.size() == 6);

    // one batch per epoch, so the epoch-0 loss is evaluated at initialization:
    // a fresh head should sit near the ln K entropy floor
    CHECK(std::fabs(out.metrics.records[0].loss - std::log(2.0)) < 0.4);
    CHECK(out.metrics.records.back().loss < out.metrics.records[0].loss);

    for (size_t e = 0; e < out.metrics.records.size(); ++e) {
        const auto& r = out.metrics.records[e];
        CHECK(r.epoch == static_cast<int64_t>(e));
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(r.lr == optim::lr_warmup_cosine(r.epoch, cfg.lr, cfg.warmup_epochs, cfg.epochs));
    }
}

TEST_CASE("finetune is deterministic and the frozen probe trains only the head") {
    training::FinetuneConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.batch_size = 8;
    cfg.epochs = 2;
    cfg.lr = 0.01;
    cfg.warmup_epochs = 1;
    cfg.freeze_backbone = true;
    cfg.seed = 9;
    dataset::FrameDataset train = tiny_dataset(2, 4, 4, 81);
    dataset::FrameDataset test = tiny_dataset(2, 2, 4, 82);

    training::FinetuneOutput a = training::finetune(cfg, train, test, nullptr);
    training::FinetuneOutput b = training::finetune(cfg, train, test, nullptr);
    CHECK(metrics::to_jsonl(a.metrics) == metrics::to_jsonl(b.metrics));

    // the frozen backbone (parameters and normalization buffers alike) must
    // be bitwise identical to its initialization; the head must have moved
    const uint64_t init_seed = RngStream::child(cfg.seed, "init", 0, 0).next_u64();
    training::Classifier fresh = training::make_classifier(cfg.backbone, 2, init_seed);
    bool head_moved = false;
    for (const auto& [name, t1] : a.params) {
        const auto& t0 = fresh.params.at(name);
        if (name.rfind("backbone.", 0) == 0) {
            for (size_t j = 0; j < t0.values().size(); ++j)
                CHECK(t1.values()[j] == t0.values()[j]);
        } else {
            for (size_t j = 0; j < t0.values().size(); ++j)
                if (t1.values()[j] != t0.values()[j]) head_moved = true;
        }
    }
    CHECK(head_moved);
}

TEST_CASE("finetune restores the pretrained master backbone") {
    training::PretrainConfig pre_cfg = tiny_pretrain_config(4);
    dataset::FrameDataset pool = tiny_dataset(2, 2, 4, 91);
    training::PretrainOutput pre = training::pretrain(pre_cfg, pool);
    const auto entries = checkpoint::from_params(pre.params);

    training::FinetuneConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.batch_size = 4;
    cfg.epochs = 1;
    cfg.lr = 0.01;
    cfg.warmup_epochs = 0;
    cfg.freeze_backbone = true; // keeps the loaded backbone observable
    cfg.seed = 3;
    dataset::FrameDataset train = tiny_dataset(2, 2, 4, 92);
    dataset::FrameDataset test = tiny_dataset(2, 1, 4, 93);

    training::FinetuneOutput out = training::finetune(cfg, train, test, &entries);
    for (const auto& e : entries) {
        if (e.name.rfind("q.backbone.", 0) != 0) continue;
        const std::string target = "backbone." + e.name.substr(std::string("q.backbone.").size());
        const auto& t = out.params.at(target);
        REQUIRE(t.values().size() == e.data.size());
        for (size_t j = 0; j < e.data.size(); ++j)
            CHECK(t.values()[j] == e.data[j]);
    }

    SUBCASE("class count mismatch is rejected") {
        dataset::FrameDataset bad_test = tiny_dataset(2, 1, 4, 94);
        bad_test.samples[0].label = 5;
        bad_test.num_classes = 6;
        CHECK_THROWS_AS(training::finetune(cfg, train, bad_test, &entries), ConfigError);
    }
    SUBCASE("a checkpoint without the master encoder is rejected") {
        const auto head_only =
            checkpoint::from_params(training::make_classifier(cfg.backbone, 2, 1).params);
        CHECK_THROWS_AS(training::finetune(cfg, train, test, &head_only), ValidationError);
    }
}

TEST_CASE("evaluate matches a per-sample recount and memorizes a tiny set") {
    dataset::FrameDataset train = tiny_dataset(2, 1, 4, 101); // one sample per class
    training::FinetuneConfig cfg;
    cfg.backbone = tiny_backbone();
    cfg.batch_size = 2;
    cfg.epochs = 12;
    cfg.lr = 0.02;
    cfg.warmup_epochs = 1;
    cfg.weight_decay = 0.0;
    cfg.seed = 13;

    training::FinetuneOutput out = training::finetune(cfg, train, train, nullptr);
    CHECK(out.metrics.records.back().accuracy == 1.0);

    // rebuild the trained model and recount accuracy one sample at a time
    training::Classifier model = training::make_classifier(cfg.backbone, 2, 1);
    checkpoint::load_into(checkpoint::from_params(out.params), model.params);
    dataset::FrameDataset probe = tiny_dataset(2, 3, 4, 102);
    const double batched = training::evaluate(model, probe, 4);

    int64_t correct = 0;
    for (const auto& s : probe.samples) {
        Tensor<float> x = dataset::pack_batch<float>({&s.frames});
        Tensor<float> logits = model.head.forward(model.backbone.forward(x, false));
        Tensor<float> avg = mean_over(logits, 0);
        int64_t arg = 0;
        for (int64_t k = 1; k < 2; ++k)
            if (avg.values()[k] > avg.values()[arg]) arg = k;
        if (arg == s.label) ++correct;
    }
    CHECK(batched == static_cast<double>(correct) / static_cast<double>(probe.size()));
}

TEST_CASE("evaluate sits at chance on label-shuffled data") {
    // random pairing of balanced labels with frames: any fixed predictor
    // lands at 1/K in expectation
    training::Classifier model = training::make_classifier(tiny_backbone(), 2, 42);
    dataset::FrameDataset base = tiny_dataset(2, 10, 4, 111);

    dataset::FrameDataset shuffled;
    shuffled.num_classes = 2;
    std::vector<int64_t> labels;
    for (int rep = 0; rep < 10; ++rep)
        for (int64_t i = 0; i < base.size(); ++i) {
            shuffled.samples.push_back(base.samples[static_cast<size_t>(i)]);
            labels.push_back(i % 2);
        }
    RngStream rng(7);
    rng.shuffle(labels);
    for (size_t i = 0; i < labels.size(); ++i) shuffled.samples[i].label = labels[i];

    const double acc = training::evaluate(model, shuffled, 32);
    CHECK(acc > 0.3);
    CHECK(acc < 0.7);
}

TEST_CASE("infer_backbone_config reconstructs the architecture from a checkpoint") {
    snn::BackboneConfig cfg = tiny_backbone();
    cfg.stage_widths = {8, 12, 16};
    cfg.stage_blocks = {1, 2, 1};
    cfg.embedding_dim = 24;
    training::Classifier model = training::make_classifier(cfg, 5, 17);
    const auto entries = checkpoint::from_params(model.params);

    snn::BackboneConfig got = training::infer_backbone_config(entries, 16, 16);
    CHECK(got.stage_widths == cfg.stage_widths);
    CHECK(got.stage_blocks == cfg.stage_blocks);
    CHECK(got.embedding_dim == cfg.embedding_dim);
    CHECK(got.input_height == 16);
    CHECK(got.input_width == 16);
    CHECK(training::infer_num_classes(entries) == 5);

    // the inferred config rebuilds a loadable twin
    training::Classifier twin = training::make_classifier(got, training::infer_num_classes(entries), 1);
    CHECK_NOTHROW(checkpoint::load_into(entries, twin.params));

    std::vector<checkpoint::Entry> junk = {{"something.w", {2, 2}, {1, 2, 3, 4}}};
    CHECK_THROWS_AS(training::infer_backbone_config(junk, 16, 16), ValidationError);
    CHECK_THROWS_AS(training::infer_num_classes(junk), ValidationError);
}
