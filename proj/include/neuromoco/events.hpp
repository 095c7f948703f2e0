#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace neuromoco::events {

// One DVS event: microsecond timestamp, pixel coordinates, ON/OFF polarity.
struct Event {
    uint64_t t = 0;
    uint16_t x = 0;
    uint16_t y = 0;
    uint8_t polarity = 0; // 0 = OFF/negative, 1 = ON/positive

    bool operator==(const Event&) const = default;
};

// Time-ordered event recording with the sensor geometry it came from.
// Invariants: events sorted non-decreasing by t, coordinates within bounds.
struct EventStream {
    uint16_t width = 0;
    uint16_t height = 0;
    std::vector<Event> events;

    bool operator==(const EventStream&) const = default;
};

struct BinningConfig {
    int64_t num_windows = 16;
    // Explicit covered span as a half-open interval [begin, end). Defaults to
    // the stream's own inclusive [t_first, t_last]; when set, events outside
    // it are dropped and counted in BinResult::dropped.
    std::optional<std::pair<uint64_t, uint64_t>> span;
};

// Dense (T, 2, H, W) stack of per-window event-count images. Channel 0
// accumulates polarity-0 events, channel 1 polarity-1.
struct FrameTensor {
    static constexpr int64_t kChannels = 2;

    int64_t num_windows = 0;
    int64_t height = 0;
    int64_t width = 0;
    std::vector<float> data; // row-major (T, 2, H, W)

    int64_t numel() const { return num_windows * kChannels * height * width; }

    float& at(int64_t w, int64_t p, int64_t y, int64_t x) {
        return data[static_cast<size_t>(((w * kChannels + p) * height + y) * width + x)];
    }
    float at(int64_t w, int64_t p, int64_t y, int64_t x) const {
        return data[static_cast<size_t>(((w * kChannels + p) * height + y) * width + x)];
    }

    bool operator==(const FrameTensor&) const = default;
};

struct BinResult {
    FrameTensor frames;
    uint64_t dropped = 0; // events outside an explicitly configured span
};

// Synthetic stand-in for DVS recordings: each class is a moving bar with a
// class-specific orientation; the bar's leading edge emits ON events and its
// trailing edge OFF events, over a bed of Poisson background noise.
struct GenParams {
    int num_classes = 4;
    uint16_t width = 32;
    uint16_t height = 32;
    uint64_t duration_us = 100000;
    double signal_events = 4000; // expected bar events per stream; 0 = empty
    double noise_fraction = 0.25; // noise budget as a fraction of signal_events
    double bar_half_thickness = 1.0;
    double bar_length_frac = 0.9; // bar length relative to min(width, height)
    double sweeps = 1.5;          // how many times the bar crosses the field
};

struct LabeledStream {
    EventStream stream;
    int label = 0;
};

EventStream parse_event_file(const std::string& path);
void write_event_file(const EventStream& stream, const std::string& path);

BinResult bin_events(const EventStream& stream, const BinningConfig& cfg);

FrameTensor read_frame_file(const std::string& path);
void write_frame_file(const FrameTensor& frames, const std::string& path);

LabeledStream gen_synthetic_stream(int class_id, uint64_t seed, const GenParams& params);

} // namespace neuromoco::events
