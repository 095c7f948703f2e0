#include "neuromoco/events.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "neuromoco/common.hpp"
#include "neuromoco/rng.hpp"

namespace neuromoco::events {

namespace {

constexpr char kEventMagic[4] = {'E', 'V', 'S', 'T'};
constexpr char kFrameMagic[4] = {'F', 'R', 'M', 'T'};
constexpr uint16_t kFormatVersion = 1;
constexpr size_t kEventHeaderBytes = 18; // magic + version + width + height + count
constexpr size_t kEventRecordBytes = 14; // t + x + y + polarity + pad
constexpr size_t kFrameHeaderBytes = 22; // magic + version + T,C,H,W

void validate_stream(const EventStream& s, const std::string& context) {
    uint64_t prev_t = 0;
    bool first = true;
    for (const Event& e : s.events) {
        if (e.polarity > 1)
            throw ValidationError(context + ": polarity " + std::to_string(e.polarity) + " is not 0/1");
        if (e.x >= s.width || e.y >= s.height)
            throw ValidationError(context + ": event at (" + std::to_string(e.x) + "," + std::to_string(e.y) +
                                  ") outside " + std::to_string(s.width) + "x" + std::to_string(s.height));
        if (!first && e.t < prev_t) throw ValidationError(context + ": events not sorted by timestamp");
        prev_t = e.t;
        first = false;
    }
}

uint64_t file_size_of(std::istream& is, const std::string& path) {
    is.seekg(0, std::ios::end);
    const auto end = is.tellg();
    if (end < 0) throw FormatError("cannot determine size of " + path);
    is.seekg(0, std::ios::beg);
    return static_cast<uint64_t>(end);
}

// Window index for timestamp t over [t0, t0+width]: boundaries belong to the
// lower window, the left edge clamps into window 0, and a degenerate
// zero-width span routes everything to the last window (the span's right
// edge always maps to window T-1).
int64_t window_of(uint64_t t, uint64_t t0, uint64_t width, int64_t T) {
    if (width == 0) return T - 1;
    const auto num = static_cast<unsigned __int128>(t - t0) * static_cast<unsigned __int128>(T);
    const auto q = static_cast<int64_t>(num / width);
    const bool exact = (num % width) == 0;
    const int64_t w = exact ? q - 1 : q; // ceil(num/width) - 1
    return w < 0 ? 0 : w;
}

// Knuth's product-of-uniforms sampler, chunked so exp(-lambda) never
// underflows for large rates.
uint64_t sample_poisson(RngStream& rng, double lambda) {
    uint64_t total = 0;
    while (lambda > 0.0) {
        const double chunk = std::min(lambda, 500.0);
        const double limit = std::exp(-chunk);
        double prod = rng.uniform();
        while (prod > limit) {
            ++total;
            prod *= rng.uniform();
        }
        lambda -= chunk;
    }
    return total;
}

} // namespace

EventStream parse_event_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open event file: " + path);
    const uint64_t fsize = file_size_of(is, path);

    char magic[4];
    io::read_bytes(is, magic, 4, "event file magic");
    if (std::memcmp(magic, kEventMagic, 4) != 0) throw FormatError(path + ": bad magic, not an EVST file");
    const uint16_t version = io::read_le<uint16_t>(is, "event file version");
    if (version != kFormatVersion)
        throw FormatError(path + ": unsupported EVST version " + std::to_string(version));

    EventStream s;
    s.width = io::read_le<uint16_t>(is, "sensor width");
    s.height = io::read_le<uint16_t>(is, "sensor height");
    const uint64_t count = io::read_le<uint64_t>(is, "event count");

    const auto expected = static_cast<unsigned __int128>(kEventHeaderBytes) +
                          static_cast<unsigned __int128>(count) * kEventRecordBytes;
    if (expected != static_cast<unsigned __int128>(fsize))
        throw FormatError(path + ": file size does not match header count " + std::to_string(count));

    s.events.reserve(static_cast<size_t>(count));
    unsigned char rec[kEventRecordBytes];
    for (uint64_t i = 0; i < count; ++i) {
        io::read_bytes(is, rec, kEventRecordBytes, "event record");
        Event e;
        e.t = 0;
        for (int b = 0; b < 8; ++b) e.t |= static_cast<uint64_t>(rec[b]) << (8 * b);
        e.x = static_cast<uint16_t>(rec[8] | (rec[9] << 8));
        e.y = static_cast<uint16_t>(rec[10] | (rec[11] << 8));
        e.polarity = rec[12]; // rec[13] is padding
        s.events.push_back(e);
    }
    validate_stream(s, path);
    return s;
}

void write_event_file(const EventStream& stream, const std::string& path) {
    validate_stream(stream, "write_event_file");
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + path);
    io::write_bytes(os, kEventMagic, 4);
    io::write_le<uint16_t>(os, kFormatVersion);
    io::write_le<uint16_t>(os, stream.width);
    io::write_le<uint16_t>(os, stream.height);
    io::write_le<uint64_t>(os, static_cast<uint64_t>(stream.events.size()));

    std::vector<unsigned char> buf(stream.events.size() * kEventRecordBytes, 0);
    unsigned char* p = buf.data();
    for (const Event& e : stream.events) {
        for (int b = 0; b < 8; ++b) p[b] = static_cast<unsigned char>((e.t >> (8 * b)) & 0xff);
        p[8] = static_cast<unsigned char>(e.x & 0xff);
        p[9] = static_cast<unsigned char>(e.x >> 8);
        p[10] = static_cast<unsigned char>(e.y & 0xff);
        p[11] = static_cast<unsigned char>(e.y >> 8);
        p[12] = e.polarity;
        p[13] = 0;
        p += kEventRecordBytes;
    }
    if (!buf.empty()) io::write_bytes(os, buf.data(), buf.size());
    os.flush();
    if (!os) throw FormatError("write failed: " + path);
}

BinResult bin_events(const EventStream& stream, const BinningConfig& cfg) {
    if (cfg.num_windows < 1) throw ValidationError("bin_events: num_windows must be >= 1");
    const int64_t T = cfg.num_windows;

    BinResult r;
    r.frames.num_windows = T;
    r.frames.height = stream.height;
    r.frames.width = stream.width;
    r.frames.data.assign(static_cast<size_t>(r.frames.numel()), 0.0f);
    if (stream.events.empty()) return r;

    uint64_t t0, width_us;
    bool half_open;
    if (cfg.span) {
        if (cfg.span->second < cfg.span->first)
            throw ValidationError("bin_events: span end precedes begin");
        t0 = cfg.span->first;
        width_us = cfg.span->second - cfg.span->first;
        half_open = true; // [begin, end): t == end falls outside
    } else {
        t0 = stream.events.front().t;
        width_us = stream.events.back().t - t0;
        half_open = false; // inclusive of t_last
    }

    for (const Event& e : stream.events) {
        const bool inside = e.t >= t0 && (half_open ? e.t - t0 < width_us : e.t - t0 <= width_us);
        if (!inside) {
            ++r.dropped;
            continue;
        }
        if (e.polarity > 1 || e.x >= stream.width || e.y >= stream.height)
            throw ValidationError("bin_events: stream violates its bounds invariants");
        const int64_t w = window_of(e.t, t0, width_us, T);
        r.frames.at(w, e.polarity, e.y, e.x) += 1.0f;
    }
    return r;
}

FrameTensor read_frame_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw FormatError("cannot open frame file: " + path);
    const uint64_t fsize = file_size_of(is, path);

    char magic[4];
    io::read_bytes(is, magic, 4, "frame file magic");
    if (std::memcmp(magic, kFrameMagic, 4) != 0) throw FormatError(path + ": bad magic, not a FRMT file");
    const uint16_t version = io::read_le<uint16_t>(is, "frame file version");
    if (version != kFormatVersion)
        throw FormatError(path + ": unsupported FRMT version " + std::to_string(version));

    const uint32_t T = io::read_le<uint32_t>(is, "frame T");
    const uint32_t C = io::read_le<uint32_t>(is, "frame C");
    const uint32_t H = io::read_le<uint32_t>(is, "frame H");
    const uint32_t W = io::read_le<uint32_t>(is, "frame W");
    if (C != FrameTensor::kChannels)
        throw FormatError(path + ": expected 2 polarity channels, header says " + std::to_string(C));

    const auto n = static_cast<unsigned __int128>(T) * C * H * W;
    if (static_cast<unsigned __int128>(kFrameHeaderBytes) + n * 4 != static_cast<unsigned __int128>(fsize))
        throw FormatError(path + ": file size does not match header shape");

    FrameTensor f;
    f.num_windows = T;
    f.height = H;
    f.width = W;
    f.data.resize(static_cast<size_t>(n));
    std::vector<unsigned char> buf(static_cast<size_t>(n) * 4);
    if (!buf.empty()) io::read_bytes(is, buf.data(), buf.size(), "frame payload");
    for (size_t i = 0; i < f.data.size(); ++i) {
        uint32_t bits = static_cast<uint32_t>(buf[4 * i]) | (static_cast<uint32_t>(buf[4 * i + 1]) << 8) |
                        (static_cast<uint32_t>(buf[4 * i + 2]) << 16) |
                        (static_cast<uint32_t>(buf[4 * i + 3]) << 24);
        float v;
        std::memcpy(&v, &bits, 4);
        if (!(v >= 0.0f)) throw FormatError(path + ": frame entries must be non-negative counts");
        f.data[i] = v;
    }
    return f;
}

void write_frame_file(const FrameTensor& frames, const std::string& path) {
    if (frames.num_windows < 0 || frames.height < 0 || frames.width < 0 ||
        frames.num_windows > UINT32_MAX || frames.height > UINT32_MAX || frames.width > UINT32_MAX)
        throw ValidationError("write_frame_file: dimensions out of range");
    if (static_cast<int64_t>(frames.data.size()) != frames.numel())
        throw ValidationError("write_frame_file: data length does not match shape");
    for (float v : frames.data)
        if (!(v >= 0.0f)) throw ValidationError("write_frame_file: entries must be non-negative counts");

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open for writing: " + path);
    io::write_bytes(os, kFrameMagic, 4);
    io::write_le<uint16_t>(os, kFormatVersion);
    io::write_le<uint32_t>(os, static_cast<uint32_t>(frames.num_windows));
    io::write_le<uint32_t>(os, static_cast<uint32_t>(FrameTensor::kChannels));
    io::write_le<uint32_t>(os, static_cast<uint32_t>(frames.height));
    io::write_le<uint32_t>(os, static_cast<uint32_t>(frames.width));

    std::vector<unsigned char> buf(frames.data.size() * 4);
    for (size_t i = 0; i < frames.data.size(); ++i) {
        uint32_t bits;
        std::memcpy(&bits, &frames.data[i], 4);
        buf[4 * i] = static_cast<unsigned char>(bits & 0xff);
        buf[4 * i + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
        buf[4 * i + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
        buf[4 * i + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
    }
    if (!buf.empty()) io::write_bytes(os, buf.data(), buf.size());
    os.flush();
    if (!os) throw FormatError("write failed: " + path);
}

LabeledStream gen_synthetic_stream(int class_id, uint64_t seed, const GenParams& params) {
    if (params.num_classes < 1) throw ValidationError("gen_synthetic_stream: num_classes must be >= 1");
    if (class_id < 0 || class_id >= params.num_classes)
        throw ValidationError("gen_synthetic_stream: class " + std::to_string(class_id) +
                              " outside [0, " + std::to_string(params.num_classes) + ")");
    if (params.width == 0 || params.height == 0)
        throw ValidationError("gen_synthetic_stream: sensor dimensions must be positive");

    EventStream s;
    s.width = params.width;
    s.height = params.height;

    RngStream rng = RngStream::child(seed, "synthetic-stream", static_cast<uint64_t>(class_id), 0);

    // Bar geometry: normal n is the motion direction, tangent runs along the
    // bar. Orientations are spread over half a turn so classes are distinct.
    const double theta = M_PI * static_cast<double>(class_id) / static_cast<double>(params.num_classes);
    const double nx = std::cos(theta), ny = std::sin(theta);
    const double tx = -std::sin(theta), ty = std::cos(theta);
    const double cx = params.width / 2.0, cy = params.height / 2.0;
    const double travel = params.width * std::fabs(nx) + params.height * std::fabs(ny) +
                          2.0 * params.bar_half_thickness;
    const double bar_half_len = 0.5 * params.bar_length_frac * std::min(params.width, params.height);
    const double phase = rng.uniform();

    const auto n_signal = static_cast<int64_t>(std::llround(params.signal_events));
    for (int64_t i = 0; i < n_signal; ++i) {
        const double u = rng.uniform(); // time fraction within the recording
        const auto t = static_cast<uint64_t>(u * static_cast<double>(params.duration_us));
        const double prog = std::fmod(phase + u * params.sweeps, 1.0);
        const double d = (prog * 2.0 - 1.0) * (travel / 2.0);
        const bool on = rng.bernoulli(0.5); // leading edge brightens, trailing darkens
        const double edge = on ? params.bar_half_thickness : -params.bar_half_thickness;
        const double along = (rng.uniform() * 2.0 - 1.0) * bar_half_len;
        const double px = cx + (d + edge) * nx + along * tx + rng.normal() * 0.35;
        const double py = cy + (d + edge) * ny + along * ty + rng.normal() * 0.35;
        const auto ix = std::lround(px), iy = std::lround(py);
        if (ix < 0 || iy < 0 || ix >= params.width || iy >= params.height) continue;
        s.events.push_back({t, static_cast<uint16_t>(ix), static_cast<uint16_t>(iy),
                            static_cast<uint8_t>(on ? 1 : 0)});
    }

    const uint64_t n_noise = sample_poisson(rng, params.noise_fraction * params.signal_events);
    for (uint64_t i = 0; i < n_noise; ++i) {
        const uint64_t t = params.duration_us > 0 ? rng.uniform_int(params.duration_us) : 0;
        s.events.push_back({t, static_cast<uint16_t>(rng.uniform_int(params.width)),
                            static_cast<uint16_t>(rng.uniform_int(params.height)),
                            static_cast<uint8_t>(rng.bernoulli(0.5) ? 1 : 0)});
    }

    std::stable_sort(s.events.begin(), s.events.end(),
                     [](const Event& a, const Event& b) { return a.t < b.t; });
    return {std::move(s), class_id};
}

} // namespace neuromoco::events
