#include "neuromoco/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include "neuromoco/common.hpp"

namespace neuromoco::metrics {

void Metrics::add(EpochRecord r) {
    if (!records.empty() && r.epoch <= records.back().epoch)
        throw ValidationError("metrics: epoch index must increase (got " + std::to_string(r.epoch) +
                              " after " + std::to_string(records.back().epoch) + ")");
    records.push_back(r);
}

const EpochRecord& Metrics::last() const {
    if (records.empty()) throw ValidationError("metrics: no records yet");
    return records.back();
}

std::string format_double(double v) {
    if (!std::isfinite(v)) throw NumericalError("metrics: non-finite value in serialized output");
    char buf[64];
    // shortest representation that parses back to the same double
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof(buf), "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

std::string to_jsonl(const Metrics& m) {
    std::string out;
    double best_accuracy = -1.0;
    for (const EpochRecord& r : m.records) {
        out += "{\"phase\":\"" + m.phase + "\",\"epoch\":" + std::to_string(r.epoch) +
               ",\"loss\":" + format_double(r.loss) + ",\"lr\":" + format_double(r.lr);
        if (r.accuracy >= 0.0) {
            out += ",\"accuracy\":" + format_double(r.accuracy);
            best_accuracy = std::max(best_accuracy, r.accuracy);
        }
        out += "}\n";
    }
    out += "{\"phase\":\"summary\",\"epochs\":" + std::to_string(m.records.size());
    if (!m.records.empty()) {
        out += ",\"final_loss\":" + format_double(m.records.back().loss);
        if (m.records.back().accuracy >= 0.0)
            out += ",\"final_accuracy\":" + format_double(m.records.back().accuracy) +
                   ",\"best_accuracy\":" + format_double(best_accuracy);
    }
    out += "}\n";
    return out;
}

void write_file(const std::string& path, const Metrics& m) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open metrics file for writing: " + path);
    const std::string body = to_jsonl(m);
    os.write(body.data(), static_cast<std::streamsize>(body.size()));
    os.flush();
    if (!os) throw FormatError("write failed for metrics file: " + path);
}

} // namespace neuromoco::metrics
