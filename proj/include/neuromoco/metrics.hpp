#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace neuromoco::metrics {

// One training epoch. `accuracy < 0` means "not measured" (pretraining).
// wall_time_s is kept for live logging only and is deliberately left out of
// the serialized form so metrics files stay byte-identical across reruns.
struct EpochRecord {
    int64_t epoch = 0;
    double loss = 0.0;
    double lr = 0.0;
    double accuracy = -1.0;
    double wall_time_s = 0.0;
};

struct Metrics {
    std::string phase; // "pretrain" or "finetune"
    std::vector<EpochRecord> records;

    void add(EpochRecord r);             // enforces a monotone epoch index
    const EpochRecord& last() const;
};

// Deterministic number formatting shared by every serialized artifact:
// shortest form that still round-trips a 64-bit double.
std::string format_double(double v);

// JSON-lines rendering: one record per epoch plus a closing summary line.
std::string to_jsonl(const Metrics& m);
void write_file(const std::string& path, const Metrics& m);

} // namespace neuromoco::metrics
