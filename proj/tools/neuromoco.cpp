#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "neuromoco/checkpoint.hpp"
#include "neuromoco/common.hpp"
#include "neuromoco/config.hpp"
#include "neuromoco/dataset.hpp"
#include "neuromoco/events.hpp"
#include "neuromoco/gradcheck.hpp"
#include "neuromoco/metrics.hpp"
#include "neuromoco/rng.hpp"
#include "neuromoco/training.hpp"
#include "neuromoco/version.hpp"

namespace fs = std::filesystem;
using namespace neuromoco;

namespace {

// NMC_THREADS caps the worker count; this build computes on a single thread,
// so the effective cap is 1, but the variable is still validated.
void check_thread_env() {
    const char* raw = std::getenv("NMC_THREADS");
    if (!raw) return;
    char* end = nullptr;
    const long v = std::strtol(raw, &end, 10);
    if (end == raw || *end != '\0' || v < 1)
        throw ConfigError("NMC_THREADS must be a positive integer");
}

void require_dir(const std::string& path, const std::string& what) {
    if (path.empty()) throw ConfigError(what + " is required");
    if (!fs::is_directory(path)) throw ValidationError(what + " '" + path + "' is not a directory");
}

std::string swap_extension(const std::string& name, const std::string& from, const std::string& to) {
    if (name.size() > from.size() && name.compare(name.size() - from.size(), from.size(), from) == 0)
        return name.substr(0, name.size() - from.size()) + to;
    return name + to;
}

struct GenOptions {
    int classes = 4;
    int per_class = 50;
    uint64_t seed = 1;
    std::string out_dir;
    events::GenParams params;
};

int cmd_gen(const GenOptions& opt) {
    if (opt.classes < 1 || opt.per_class < 1)
        throw ValidationError("gen: --classes and --per-class must be positive");
    fs::create_directories(opt.out_dir);

    events::GenParams gp = opt.params;
    gp.num_classes = opt.classes;

    std::vector<std::pair<std::string, int64_t>> rows;
    for (int c = 0; c < opt.classes; ++c)
        for (int i = 0; i < opt.per_class; ++i) {
            const uint64_t sample_seed =
                RngStream::child(opt.seed, "gen", static_cast<uint64_t>(c), static_cast<uint64_t>(i))
                    .next_u64();
            events::LabeledStream ls = events::gen_synthetic_stream(c, sample_seed, gp);
            char name[64];
            std::snprintf(name, sizeof(name), "class%d_%04d.evst", c, i);
            events::write_event_file(ls.stream, (fs::path(opt.out_dir) / name).string());
            rows.push_back({name, ls.label});
        }
    dataset::write_manifest(opt.out_dir, rows);
    std::printf("wrote %zu event files and manifest.csv to %s\n", rows.size(), opt.out_dir.c_str());
    return 0;
}

struct BinOptions {
    std::string in_dir;
    std::string out_dir;
    int64_t time_steps = 16;
};

int cmd_bin(const BinOptions& opt) {
    require_dir(opt.in_dir, "--in-dir");
    if (opt.time_steps < 1) throw ValidationError("bin: --T must be positive");
    fs::create_directories(opt.out_dir);

    const auto rows = dataset::read_manifest(opt.in_dir);
    std::vector<std::pair<std::string, int64_t>> out_rows;
    for (const auto& [name, label] : rows) {
        events::EventStream stream = events::parse_event_file((fs::path(opt.in_dir) / name).string());
        events::BinningConfig bc;
        bc.num_windows = opt.time_steps;
        events::BinResult r = events::bin_events(stream, bc);

        // conservation: every event lands in exactly one (window, polarity) cell
        double binned = 0.0;
        for (float v : r.frames.data) binned += static_cast<double>(v);
        const auto total = static_cast<double>(stream.events.size());
        const bool ok = binned + static_cast<double>(r.dropped) == total;
        std::printf("%s: events=%zu binned=%.0f dropped=%zu %s\n", name.c_str(),
                    stream.events.size(), binned, static_cast<size_t>(r.dropped),
                    ok ? "ok" : "MISMATCH");
        if (!ok) throw NumericalError("bin: conservation failed for '" + name + "'");

        const std::string out_name = swap_extension(name, ".evst", ".frmt");
        events::write_frame_file(r.frames, (fs::path(opt.out_dir) / out_name).string());
        out_rows.push_back({out_name, label});
    }
    dataset::write_manifest(opt.out_dir, out_rows);
    std::printf("wrote %zu frame files and manifest.csv to %s\n", out_rows.size(),
                opt.out_dir.c_str());
    return 0;
}

int cmd_pretrain(const std::string& config_path) {
    config::RunConfig rc = config::load_file(config_path);
    require_dir(rc.train_dir, "data.train_dir");
    if (rc.output_dir.empty()) throw ConfigError("output.dir is required");
    fs::create_directories(rc.output_dir);

    dataset::FrameDataset pool = dataset::load_frame_dataset(rc.train_dir);
    std::printf("pretraining on %lld samples (T=%lld, %lldx%lld), %lld epochs\n",
                static_cast<long long>(pool.size()), static_cast<long long>(pool.time_steps()),
                static_cast<long long>(pool.height()), static_cast<long long>(pool.width()),
                static_cast<long long>(rc.pretrain.epochs));

    const std::string metrics_path = (fs::path(rc.output_dir) / "pretrain_metrics.jsonl").string();
    const std::string ckpt_path = (fs::path(rc.output_dir) / "pretrain_checkpoint.nmcw").string();
    training::pretrain(rc.pretrain, pool,
                       [&](const metrics::Metrics& m, const ParamSet<float>& params) {
                           const auto& r = m.last();
                           std::printf("[pretrain] epoch %lld/%lld loss=%.6g lr=%.4g (%.1fs)\n",
                                       static_cast<long long>(r.epoch + 1),
                                       static_cast<long long>(rc.pretrain.epochs), r.loss, r.lr,
                                       r.wall_time_s);
                           std::fflush(stdout);
                           metrics::write_file(metrics_path, m);
                           checkpoint::write_file(ckpt_path, checkpoint::from_params(params));
                       });
    std::printf("wrote %s and %s\n", metrics_path.c_str(), ckpt_path.c_str());
    return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& checkpoint_path, bool scratch,
                 bool freeze_backbone) {
    if (checkpoint_path.empty() == !scratch)
        throw ConfigError("finetune: pass exactly one of --checkpoint or --scratch");
    config::RunConfig rc = config::load_file(config_path);
    require_dir(rc.train_dir, "data.train_dir");
    require_dir(rc.test_dir, "data.test_dir");
    if (rc.output_dir.empty()) throw ConfigError("output.dir is required");
    fs::create_directories(rc.output_dir);
    if (freeze_backbone) rc.finetune.freeze_backbone = true;

    dataset::FrameDataset train = dataset::load_frame_dataset(rc.train_dir);
    dataset::FrameDataset test = dataset::load_frame_dataset(rc.test_dir);
    std::vector<checkpoint::Entry> entries;
    if (!scratch) entries = checkpoint::read_file(checkpoint_path);
    std::printf("fine-tuning on %lld train / %lld test samples, %lld classes, %lld epochs%s\n",
                static_cast<long long>(train.size()), static_cast<long long>(test.size()),
                static_cast<long long>(train.num_classes),
                static_cast<long long>(rc.finetune.epochs),
                rc.finetune.freeze_backbone ? " (frozen backbone)" : "");

    const std::string metrics_path = (fs::path(rc.output_dir) / "finetune_metrics.jsonl").string();
    const std::string ckpt_path = (fs::path(rc.output_dir) / "finetune_checkpoint.nmcw").string();
    training::FinetuneOutput out = training::finetune(
        rc.finetune, train, test, scratch ? nullptr : &entries,
        [&](const metrics::Metrics& m, const ParamSet<float>& params) {
            const auto& r = m.last();
            std::printf("[finetune] epoch %lld/%lld loss=%.6g lr=%.4g accuracy=%.4f (%.1fs)\n",
                        static_cast<long long>(r.epoch + 1),
                        static_cast<long long>(rc.finetune.epochs), r.loss, r.lr, r.accuracy,
                        r.wall_time_s);
            std::fflush(stdout);
            metrics::write_file(metrics_path, m);
            checkpoint::write_file(ckpt_path, checkpoint::from_params(params));
        });
    std::printf("final accuracy=%s\n", metrics::format_double(out.metrics.last().accuracy).c_str());
    std::printf("wrote %s and %s\n", metrics_path.c_str(), ckpt_path.c_str());
    return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir,
             const std::string& config_path, int64_t batch_size) {
    require_dir(data_dir, "--data");
    const auto entries = checkpoint::read_file(checkpoint_path);
    dataset::FrameDataset data = dataset::load_frame_dataset(data_dir);

    snn::BackboneConfig cfg = training::infer_backbone_config(entries, data.height(), data.width());
    if (!config_path.empty()) {
        // neuron constants are not serialized; a config restores non-default ones
        config::RunConfig rc = config::load_file(config_path);
        cfg.lif = rc.finetune.backbone.lif;
    }
    const int64_t num_classes = training::infer_num_classes(entries);
    if (data.num_classes > num_classes)
        throw ValidationError("eval: dataset labels exceed the checkpoint class count");

    training::Classifier model = training::make_classifier(cfg, num_classes, 1);
    checkpoint::load_into(entries, model.params);
    const double acc = training::evaluate(model, data, batch_size);
    std::printf("samples=%lld classes=%lld\n", static_cast<long long>(data.size()),
                static_cast<long long>(num_classes));
    std::printf("accuracy=%s\n", metrics::format_double(acc).c_str());
    return 0;
}

int cmd_gradcheck(int seeds) {
    if (seeds < 1) throw ValidationError("gradcheck: --seeds must be positive");
    std::vector<gradcheck::GradCase> cases = gradcheck::standard_suite();
    for (auto& c : gradcheck::contrastive_suite()) cases.push_back(std::move(c));

    bool all_pass = true;
    double worst = 0.0;
    for (const auto& c : cases) {
        gradcheck::GradReport r = gradcheck::run_case(c, seeds);
        std::printf("%-20s max_rel_err=%.3e seeds=%d %s\n", r.name.c_str(), r.max_rel_err, r.seeds,
                    r.pass ? "pass" : "FAIL");
        all_pass = all_pass && r.pass;
        worst = std::max(worst, r.max_rel_err);
    }

    const double spike_err = gradcheck::spike_surrogate_max_error(seeds);
    const bool spike_pass = spike_err < 1e-10;
    std::printf("%-20s max_abs_err=%.3e seeds=%d %s\n", "spike_surrogate", spike_err, seeds,
                spike_pass ? "pass" : "FAIL");
    all_pass = all_pass && spike_pass;

    std::printf("gradcheck: %zu cases, worst relative error %.3e\n", cases.size() + 1, worst);
    if (!all_pass) throw NumericalError("gradcheck: at least one op failed");
    std::printf("all gradient checks passed\n");
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"momentum-contrast pretraining for spiking networks on event data"};
    app.set_version_flag("--version", std::string(version_string()));
    app.require_subcommand(1);

    GenOptions gen;
    CLI::App* sub_gen = app.add_subcommand("gen", "generate a labeled synthetic event dataset");
    sub_gen->add_option("--classes", gen.classes, "number of classes")->capture_default_str();
    sub_gen->add_option("--per-class", gen.per_class, "samples per class")->capture_default_str();
    sub_gen->add_option("--seed", gen.seed, "root seed")->capture_default_str();
    sub_gen->add_option("--out-dir", gen.out_dir, "output directory")->required();
    sub_gen->add_option("--width", gen.params.width, "sensor width")->capture_default_str();
    sub_gen->add_option("--height", gen.params.height, "sensor height")->capture_default_str();
    sub_gen->add_option("--duration-us", gen.params.duration_us, "stream duration in microseconds")
        ->capture_default_str();
    sub_gen->add_option("--signal-events", gen.params.signal_events, "expected signal events")
        ->capture_default_str();
    sub_gen->add_option("--noise-fraction", gen.params.noise_fraction, "noise budget fraction")
        ->capture_default_str();

    BinOptions bin;
    CLI::App* sub_bin = app.add_subcommand("bin", "bin event streams into frame tensors");
    sub_bin->add_option("--in-dir", bin.in_dir, "directory of event files + manifest")->required();
    sub_bin->add_option("--T", bin.time_steps, "number of time windows")->capture_default_str();
    sub_bin->add_option("--out-dir", bin.out_dir, "output directory")->required();

    std::string pre_config;
    CLI::App* sub_pre = app.add_subcommand("pretrain", "self-supervised pretraining");
    sub_pre->add_option("--config", pre_config, "run configuration file")->required();

    std::string fin_config, fin_checkpoint;
    bool fin_scratch = false, fin_freeze = false;
    CLI::App* sub_fin = app.add_subcommand("finetune", "supervised fine-tuning");
    sub_fin->add_option("--config", fin_config, "run configuration file")->required();
    sub_fin->add_option("--checkpoint", fin_checkpoint, "pretraining checkpoint to start from");
    sub_fin->add_flag("--scratch", fin_scratch, "train from random initialization");
    sub_fin->add_flag("--freeze-backbone", fin_freeze, "linear probe: train only the head");

    std::string eval_checkpoint, eval_data, eval_config;
    int64_t eval_batch = 32;
    CLI::App* sub_eval = app.add_subcommand("eval", "evaluate a fine-tuned checkpoint");
    sub_eval->add_option("--checkpoint", eval_checkpoint, "fine-tuned checkpoint")->required();
    sub_eval->add_option("--data", eval_data, "directory of frame files + manifest")->required();
    sub_eval->add_option("--config", eval_config, "optional config for neuron constants");
    sub_eval->add_option("--batch-size", eval_batch, "evaluation batch size")->capture_default_str();

    int gc_seeds = 20;
    CLI::App* sub_gc = app.add_subcommand("gradcheck", "finite-difference gradient audit");
    sub_gc->add_option("--seeds", gc_seeds, "random input draws per op")->capture_default_str();

    try {
        app.parse(argc, argv);
        check_thread_env();
        if (sub_gen->parsed()) return cmd_gen(gen);
        if (sub_bin->parsed()) return cmd_bin(bin);
        if (sub_pre->parsed()) return cmd_pretrain(pre_config);
        if (sub_fin->parsed()) return cmd_finetune(fin_config, fin_checkpoint, fin_scratch, fin_freeze);
        if (sub_eval->parsed()) return cmd_eval(eval_checkpoint, eval_data, eval_config, eval_batch);
        if (sub_gc->parsed()) return cmd_gradcheck(gc_seeds);
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 1;
    }
}
