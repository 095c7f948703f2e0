#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "neuromoco/augment.hpp"
#include "neuromoco/checkpoint.hpp"
#include "neuromoco/contrastive.hpp"
#include "neuromoco/dataset.hpp"
#include "neuromoco/metrics.hpp"
#include "neuromoco/optim.hpp"
#include "neuromoco/params.hpp"
#include "neuromoco/snn.hpp"

namespace neuromoco::training {

struct PretrainConfig {
    int64_t time_steps = 16;
    double momentum = 0.999; // subordinate-encoder momentum m
    int64_t batch_size = 32;
    int64_t epochs = 200;
    double lr = 0.03;
    double sgd_momentum = 0.9;
    double weight_decay = 1e-4;
    std::vector<int64_t> milestones; // empty -> {0.6*epochs, 0.8*epochs}
    double lr_gamma = 0.1;
    uint64_t seed = 1;
    contrastive::ContrastiveConfig contrastive;
    augment::AugmentPolicy augment; // width/height are overwritten from the backbone config
    snn::BackboneConfig backbone;
};

void validate(const PretrainConfig& cfg);
std::vector<int64_t> effective_milestones(const PretrainConfig& cfg);

struct FinetuneConfig {
    int64_t batch_size = 16;
    int64_t epochs = 100;
    double lr = 0.001;
    double weight_decay = 0.06;
    int64_t warmup_epochs = 30;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    bool freeze_backbone = false; // linear probe: train only the classification head
    uint64_t seed = 1;
    snn::BackboneConfig backbone;
};

void validate(const FinetuneConfig& cfg);

// Invoked after every epoch with the metrics so far and the live checkpoint
// parameter set (shared handles, so the values are current).
using EpochFn = std::function<void(const metrics::Metrics&, const ParamSet<float>&)>;

struct PretrainOutput {
    ParamSet<float> params; // q.* and k.* (backbone + projection head each)
    metrics::Metrics metrics;
};

// Momentum-contrast pretraining over an unlabeled frame pool: two augmented
// views per sample, master encoder trained by SGD on the mixed loss, the
// subordinate encoder following through the momentum update, keys feeding the
// FIFO negative queue.
PretrainOutput pretrain(const PretrainConfig& cfg, const dataset::FrameDataset& data,
                        const EpochFn& on_epoch = {});

struct Classifier {
    snn::BackboneConfig cfg;
    int64_t num_classes = 0;
    snn::Backbone<float> backbone;
    snn::ClassificationHead<float> head;
    ParamSet<float> params; // backbone.* + head.*
};

Classifier make_classifier(const snn::BackboneConfig& cfg, int64_t num_classes, uint64_t init_seed);

// Recover the encoder architecture from a fine-tune checkpoint's entry names
// and shapes (input resolution comes from the evaluation data instead).
snn::BackboneConfig infer_backbone_config(const std::vector<checkpoint::Entry>& entries,
                                          int64_t input_height, int64_t input_width);
int64_t infer_num_classes(const std::vector<checkpoint::Entry>& entries);

struct FinetuneOutput {
    ParamSet<float> params; // backbone.* + head.*
    metrics::Metrics metrics;
};

// Supervised fine-tuning with a fresh per-time-step classification head; the
// loss is cross entropy per (t, n) cell averaged over both axes. `pretrained`
// may be null for a random-init baseline; otherwise the master backbone is
// loaded from the given pretrain checkpoint entries.
FinetuneOutput finetune(const FinetuneConfig& cfg, const dataset::FrameDataset& train,
                        const dataset::FrameDataset& test,
                        const std::vector<checkpoint::Entry>* pretrained,
                        const EpochFn& on_epoch = {});

// Accuracy under the time-averaged readout: predictions are the argmax of
// logits averaged over T. Runs the encoder in inference mode.
double evaluate(Classifier& model, const dataset::FrameDataset& data, int64_t batch_size = 32);

} // namespace neuromoco::training
