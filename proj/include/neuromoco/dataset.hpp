#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "neuromoco/events.hpp"
#include "neuromoco/tensor.hpp"

namespace neuromoco::dataset {

struct FrameSample {
    events::FrameTensor frames;
    int64_t label = 0;
    std::string file;
};

// A directory of FRMT files described by a manifest. All samples share one
// (T, H, W) geometry; labels are dense in [0, num_classes).
struct FrameDataset {
    std::vector<FrameSample> samples;
    int64_t num_classes = 0;

    int64_t size() const { return static_cast<int64_t>(samples.size()); }
    int64_t time_steps() const { return samples.empty() ? 0 : samples.front().frames.num_windows; }
    int64_t height() const { return samples.empty() ? 0 : samples.front().frames.height; }
    int64_t width() const { return samples.empty() ? 0 : samples.front().frames.width; }
};

// manifest.csv: a "file,label" header followed by one relative filename and
// integer label per line.
std::vector<std::pair<std::string, int64_t>> read_manifest(const std::string& dir);
void write_manifest(const std::string& dir, const std::vector<std::pair<std::string, int64_t>>& rows);

FrameDataset load_frame_dataset(const std::string& dir);

// Stack per-sample frame tensors into a time-major training batch
// (T, N, 2, H, W). Every item must share the dataset geometry.
template <class S>
Tensor<S> pack_batch(const std::vector<const events::FrameTensor*>& items) {
    if (items.empty()) throw ValidationError("pack_batch: empty batch");
    const events::FrameTensor& first = *items.front();
    const int64_t T = first.num_windows, H = first.height, W = first.width;
    const int64_t N = static_cast<int64_t>(items.size());
    const int64_t plane = events::FrameTensor::kChannels * H * W;

    Tensor<S> out = Tensor<S>::zeros({T, N, events::FrameTensor::kChannels, H, W});
    S* dst = out.values().data();
    for (int64_t n = 0; n < N; ++n) {
        const events::FrameTensor& f = *items[static_cast<size_t>(n)];
        if (f.num_windows != T || f.height != H || f.width != W)
            throw ShapeError("pack_batch: mixed sample geometry");
        for (int64_t t = 0; t < T; ++t) {
            const float* src = f.data.data() + t * plane;
            S* row = dst + (t * N + n) * plane;
            for (int64_t i = 0; i < plane; ++i) row[i] = static_cast<S>(src[i]);
        }
    }
    return out;
}

} // namespace neuromoco::dataset
