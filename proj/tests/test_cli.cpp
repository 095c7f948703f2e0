#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

using namespace std::string_literals;
namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string out;
};

// workspace shared by the whole file: the pipeline stages build on each other
const fs::path kWork = fs::temp_directory_path() / ("nmc_cli_" + std::to_string(::getpid()));

RunResult run_cli(const std::string& args) {
    static int counter = 0;
    const std::string out_file = (kWork / ("stdout_" + std::to_string(counter++) + ".txt")).string();
    const std::string cmd =
        "cd " + kWork.string() + " && " + NEUROMOCO_CLI_PATH + " " + args + " > " + out_file + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    std::ifstream is(out_file);
    std::stringstream ss;
    ss << is.rdbuf();
    r.out = ss.str();
    return r;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    REQUIRE(is.good());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

// value of `"key":...` or `key=...` up to the next delimiter
std::string extract_after(const std::string& text, const std::string& marker) {
    const size_t at = text.find(marker);
    REQUIRE(at != std::string::npos);
    size_t end = at + marker.size();
    while (end < text.size() && text[end] != '\n' && text[end] != ',' && text[end] != '}') ++end;
    return text.substr(at + marker.size(), end - at - marker.size());
}

void write_config(const fs::path& path, const std::string& out_dir) {
    std::ofstream os(path);
    os << "mode = desk\n"
          "seed = 11\n"
          "data.train_dir = frames\n"
          "data.test_dir = frames\n"
          "output.dir = " +
              out_dir +
          "\n"
          "pretrain.time_steps = 4\n"
          "pretrain.batch_size = 4\n"
          "pretrain.epochs = 2\n"
          "contrastive.queue_length = 8\n"
          "model.stage_widths = 8,16\n"
          "model.stage_blocks = 1,1\n"
          "model.embedding_dim = 16\n"
          "model.input_height = 16\n"
          "model.input_width = 16\n"
          "finetune.batch_size = 8\n"
          "finetune.epochs = 2\n"
          "finetune.warmup_epochs = 1\n";
}

} // namespace

TEST_CASE("the full pipeline runs through the command line") {
    fs::remove_all(kWork);
    fs::create_directories(kWork);

    // -- gen: count contract and matching manifest labels
    RunResult gen = run_cli("gen --classes 2 --per-class 4 --seed 5 --out-dir events"
                            " --width 16 --height 16 --signal-events 1200");
    REQUIRE(gen.code == 0);
    int evst_files = 0;
    for (const auto& e : fs::directory_iterator(kWork / "events"))
        if (e.path().extension() == ".evst") ++evst_files;
    CHECK(evst_files == 8);
    {
        std::ifstream m(kWork / "events" / "manifest.csv");
        std::string line;
        std::getline(m, line);
        CHECK(line == "file,label");
        int rows = 0, class1 = 0;
        while (std::getline(m, line)) {
            ++rows;
            if (line.substr(line.rfind(',') + 1) == "1") ++class1;
        }
        CHECK(rows == 8);
        CHECK(class1 == 4);
    }

    // gen is deterministic under --seed and sensitive to it
    REQUIRE(run_cli("gen --classes 2 --per-class 4 --seed 5 --out-dir events_again"
                    " --width 16 --height 16 --signal-events 1200")
                .code == 0);
    CHECK(slurp(kWork / "events" / "class0_0000.evst") ==
          slurp(kWork / "events_again" / "class0_0000.evst"));
    REQUIRE(run_cli("gen --classes 2 --per-class 4 --seed 6 --out-dir events_other"
                    " --width 16 --height 16 --signal-events 1200")
                .code == 0);
    CHECK(slurp(kWork / "events" / "class0_0000.evst") !=
          slurp(kWork / "events_other" / "class0_0000.evst"));

    // -- bin: one frame file per event file, conservation printed per file
    RunResult bin = run_cli("bin --in-dir events --T 4 --out-dir frames");
    REQUIRE(bin.code == 0);
    int frmt_files = 0;
    for (const auto& e : fs::directory_iterator(kWork / "frames"))
        if (e.path().extension() == ".frmt") ++frmt_files;
    CHECK(frmt_files == 8);
    int ok_lines = 0;
    for (size_t at = bin.out.find(" ok\n"); at != std::string::npos;
         at = bin.out.find(" ok\n", at + 1))
        ++ok_lines;
    CHECK(ok_lines == 8);
    CHECK(bin.out.find("MISMATCH") == std::string::npos);

    // -- pretrain: writes metrics + checkpoint; a rerun is byte-identical
    write_config(kWork / "run.cfg", "out");
    write_config(kWork / "run2.cfg", "out_rerun");
    REQUIRE(run_cli("pretrain --config run.cfg").code == 0);
    REQUIRE(fs::exists(kWork / "out" / "pretrain_metrics.jsonl"));
    REQUIRE(fs::exists(kWork / "out" / "pretrain_checkpoint.nmcw"));
    REQUIRE(run_cli("pretrain --config run2.cfg").code == 0);
    CHECK(slurp(kWork / "out" / "pretrain_metrics.jsonl") ==
          slurp(kWork / "out_rerun" / "pretrain_metrics.jsonl"));
    CHECK(slurp(kWork / "out" / "pretrain_checkpoint.nmcw") ==
          slurp(kWork / "out_rerun" / "pretrain_checkpoint.nmcw"));

    // -- finetune from the checkpoint, then from scratch
    RunResult fin = run_cli("finetune --config run.cfg --checkpoint out/pretrain_checkpoint.nmcw");
    REQUIRE(fin.code == 0);
    REQUIRE(fs::exists(kWork / "out" / "finetune_metrics.jsonl"));
    REQUIRE(fs::exists(kWork / "out" / "finetune_checkpoint.nmcw"));
    CHECK(run_cli("finetune --config run2.cfg --scratch --freeze-backbone").code == 0);

    // -- eval: printed accuracy equals the metrics file's final_accuracy
    RunResult ev = run_cli("eval --checkpoint out/finetune_checkpoint.nmcw --data frames");
    REQUIRE(ev.code == 0);
    const std::string printed = extract_after(ev.out, "\naccuracy=");
    const auto metrics_bytes = slurp(kWork / "out" / "finetune_metrics.jsonl");
    const std::string metrics_text(metrics_bytes.begin(), metrics_bytes.end());
    CHECK(printed == extract_after(metrics_text, "\"final_accuracy\":"));

    // evaluation is batch-size invariant
    RunResult ev1 = run_cli("eval --checkpoint out/finetune_checkpoint.nmcw --data frames"
                            " --batch-size 1");
    REQUIRE(ev1.code == 0);
    CHECK(extract_after(ev1.out, "\naccuracy=") == printed);

    fs::remove_all(kWork);
}

TEST_CASE("command line failures map to the documented exit codes") {
    fs::remove_all(kWork);
    fs::create_directories(kWork);

    REQUIRE(run_cli("gen --classes 1 --per-class 2 --seed 1 --out-dir ev"
                    " --width 16 --height 16 --signal-events 400")
                .code == 0);
    REQUIRE(run_cli("bin --in-dir ev --T 2 --out-dir fr").code == 0);

    // 1: validation / configuration
    {
        std::ofstream os(kWork / "bad.cfg");
        os << "bogus.key = 1\n";
    }
    CHECK(run_cli("pretrain --config bad.cfg").code == 1);
    CHECK(run_cli("bin --in-dir ev --T 0 --out-dir fr2").code == 1);
    CHECK(run_cli("bin --in-dir missing_dir --T 2 --out-dir fr2").code == 1);
    CHECK(run_cli("finetune --config bad.cfg").code == 1); // neither --checkpoint nor --scratch
    CHECK(run_cli("").code == 1);                          // a subcommand is required
    CHECK(run_cli("no_such_command").code == 1);

    // 2: data-format errors
    {
        std::ofstream os(kWork / "corrupt.nmcw", std::ios::binary);
        os << "not a checkpoint";
    }
    CHECK(run_cli("eval --checkpoint corrupt.nmcw --data fr").code == 2);
    {
        std::ofstream os(kWork / "ev" / "class0_0000.evst", std::ios::binary | std::ios::trunc);
        os << "EVXX";
    }
    CHECK(run_cli("bin --in-dir ev --T 2 --out-dir fr3").code == 2);

    // 0: informational flags
    CHECK(run_cli("--version").code == 0);
    CHECK(run_cli("--help").code == 0);

    fs::remove_all(kWork);
}
