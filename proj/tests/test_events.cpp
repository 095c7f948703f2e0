#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <tuple>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/events.hpp"
#include "neuromoco/rng.hpp"

using namespace neuromoco;
using namespace neuromoco::events;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
    return (fs::temp_directory_path() / ("nmc_events_" + name)).string();
}

std::string slurp(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    REQUIRE(is.good());
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    REQUIRE(os.good());
}

// Independent per-event accumulation: assigns windows with double-precision
// ceil arithmetic (valid for the small spans used here) and counts into a map.
std::map<std::tuple<int64_t, int, int, int>, int64_t> brute_force_bin(const EventStream& s, int64_t T,
                                                                      uint64_t t0, uint64_t width,
                                                                      bool half_open, uint64_t& dropped) {
    std::map<std::tuple<int64_t, int, int, int>, int64_t> counts;
    dropped = 0;
    for (const Event& e : s.events) {
        const bool inside = e.t >= t0 && (half_open ? e.t < t0 + width : e.t <= t0 + width);
        if (!inside) {
            ++dropped;
            continue;
        }
        int64_t w;
        if (width == 0) {
            w = T - 1;
        } else {
            w = static_cast<int64_t>(
                    std::ceil(static_cast<double>(e.t - t0) * static_cast<double>(T) / static_cast<double>(width))) -
                1;
            if (w < 0) w = 0;
        }
        counts[{w, e.polarity, e.y, e.x}] += 1;
    }
    return counts;
}

void check_against_oracle(const EventStream& s, const BinningConfig& cfg) {
    const BinResult r = bin_events(s, cfg);
    uint64_t want_dropped = 0;
    uint64_t t0 = 0, width = 0;
    bool half_open = false;
    if (cfg.span) {
        t0 = cfg.span->first;
        width = cfg.span->second - cfg.span->first;
        half_open = true;
    } else if (!s.events.empty()) {
        t0 = s.events.front().t;
        width = s.events.back().t - t0;
    }
    auto oracle = brute_force_bin(s, cfg.num_windows, t0, width, half_open, want_dropped);

    CHECK(r.dropped == want_dropped);
    double total = 0;
    for (float v : r.frames.data) total += v;
    CHECK(total + static_cast<double>(r.dropped) == static_cast<double>(s.events.size()));

    int64_t oracle_total = 0;
    for (const auto& [key, n] : oracle) {
        const auto [w, p, y, x] = key;
        CHECK(r.frames.at(w, p, y, x) == static_cast<float>(n));
        oracle_total += n;
    }
    CHECK(oracle_total + static_cast<int64_t>(want_dropped) == static_cast<int64_t>(s.events.size()));
}

EventStream random_stream(RngStream& rng, uint16_t width, uint16_t height, size_t count, uint64_t t_max) {
    EventStream s;
    s.width = width;
    s.height = height;
    std::vector<uint64_t> ts(count);
    for (auto& t : ts) t = rng.uniform_int(t_max + 1);
    std::sort(ts.begin(), ts.end());
    for (uint64_t t : ts)
        s.events.push_back({t, static_cast<uint16_t>(rng.uniform_int(width)),
                            static_cast<uint16_t>(rng.uniform_int(height)),
                            static_cast<uint8_t>(rng.bernoulli(0.5) ? 1 : 0)});
    return s;
}

} // namespace

TEST_CASE("event file: empty and single-record round trips") {
    EventStream s;
    s.width = 128;
    s.height = 128;
    const auto p0 = tmp_path("empty.evst");
    write_event_file(s, p0);
    const EventStream back = parse_event_file(p0);
    CHECK(back == s);
    CHECK(back.events.empty());

    s.events.push_back({5, 3, 7, 1});
    const auto p1 = tmp_path("one.evst");
    write_event_file(s, p1);
    CHECK(parse_event_file(p1) == s);
}

TEST_CASE("event file: generated streams survive a bitwise round trip") {
    GenParams params;
    params.signal_events = 1000;
    for (uint64_t seed : {1u, 2u, 3u, 4u, 5u}) {
        const auto [stream, label] = gen_synthetic_stream(static_cast<int>(seed) % 4, seed, params);
        const auto p = tmp_path("roundtrip.evst");
        write_event_file(stream, p);
        CHECK(parse_event_file(p) == stream);
    }
}

TEST_CASE("event file: malformed inputs raise typed errors") {
    EventStream s;
    s.width = 10;
    s.height = 10;
    s.events = {{10, 1, 2, 0}, {20, 3, 4, 1}};
    const auto p = tmp_path("valid.evst");
    write_event_file(s, p);
    const std::string good = slurp(p);

    const auto bad = tmp_path("bad.evst");

    // magic
    std::string b = good;
    b[0] = 'X';
    spit(bad, b);
    CHECK_THROWS_AS(parse_event_file(bad), FormatError);

    // version
    b = good;
    b[4] = 9;
    spit(bad, b);
    CHECK_THROWS_AS(parse_event_file(bad), FormatError);

    // truncated record
    spit(bad, good.substr(0, good.size() - 3));
    CHECK_THROWS_AS(parse_event_file(bad), FormatError);

    // trailing bytes
    spit(bad, good + "zz");
    CHECK_THROWS_AS(parse_event_file(bad), FormatError);

    // out-of-bounds x (record 0 starts at byte 18; x lives at offset 8..9)
    b = good;
    b[18 + 8] = 99;
    spit(bad, b);
    CHECK_THROWS_AS(parse_event_file(bad), ValidationError);

    // polarity outside {0,1}
    b = good;
    b[18 + 12] = 2;
    spit(bad, b);
    CHECK_THROWS_AS(parse_event_file(bad), ValidationError);

    // timestamps out of order (swap the two records' t fields)
    b = good;
    b[18] = 30; // first record t=30 > second record t=20
    spit(bad, b);
    CHECK_THROWS_AS(parse_event_file(bad), ValidationError);

    CHECK_THROWS_AS(parse_event_file(tmp_path("does_not_exist.evst")), FormatError);
}

TEST_CASE("bin_events: empty stream gives a zero tensor") {
    EventStream s;
    s.width = 8;
    s.height = 6;
    const BinResult r = bin_events(s, {.num_windows = 4, .span = {}});
    CHECK(r.frames.num_windows == 4);
    CHECK(r.frames.height == 6);
    CHECK(r.frames.width == 8);
    CHECK(r.dropped == 0);
    CHECK(static_cast<int64_t>(r.frames.data.size()) == 4 * 2 * 6 * 8);
    for (float v : r.frames.data) CHECK(v == 0.0f);
}

TEST_CASE("bin_events: worked example over an explicit half-open span") {
    // three events at t = 0, 50, 99 us, all at (x=1, y=1, polarity=1),
    // covered span [0, 100), T=2: window 0 collects two, window 1 one
    EventStream s;
    s.width = 4;
    s.height = 4;
    s.events = {{0, 1, 1, 1}, {50, 1, 1, 1}, {99, 1, 1, 1}};
    BinningConfig cfg;
    cfg.num_windows = 2;
    cfg.span = {{0, 100}};
    const BinResult r = bin_events(s, cfg);
    CHECK(r.dropped == 0);
    CHECK(r.frames.at(0, 1, 1, 1) == 2.0f);
    CHECK(r.frames.at(1, 1, 1, 1) == 1.0f);
    double total = 0;
    for (float v : r.frames.data) total += v;
    CHECK(total == 3.0);
}

TEST_CASE("bin_events: span edge ownership") {
    EventStream s;
    s.width = 2;
    s.height = 2;
    // default span [100, 300]: right edge belongs to the last window,
    // the boundary point 200 to the lower window
    s.events = {{100, 0, 0, 0}, {200, 0, 0, 0}, {300, 0, 0, 0}};
    const BinResult r = bin_events(s, {.num_windows = 2, .span = {}});
    CHECK(r.frames.at(0, 0, 0, 0) == 2.0f); // t=100 (left edge) and t=200 (boundary)
    CHECK(r.frames.at(1, 0, 0, 0) == 1.0f); // t=300 (right edge)

    // all events at one timestamp: degenerate span routes to the last window
    EventStream one;
    one.width = 2;
    one.height = 2;
    one.events = {{77, 1, 0, 1}, {77, 1, 0, 1}};
    const BinResult r1 = bin_events(one, {.num_windows = 4, .span = {}});
    CHECK(r1.frames.at(3, 1, 0, 1) == 2.0f);
}

TEST_CASE("bin_events: explicit spans drop outside events and report them") {
    EventStream s;
    s.width = 4;
    s.height = 4;
    s.events = {{0, 0, 0, 0}, {10, 1, 1, 1}, {20, 2, 2, 0}, {30, 3, 3, 1}, {40, 0, 3, 0}};
    BinningConfig cfg;
    cfg.num_windows = 2;
    cfg.span = {{10, 40}}; // keeps t = 10, 20, 30; drops 0 and 40
    const BinResult r = bin_events(s, cfg);
    CHECK(r.dropped == 2);
    double total = 0;
    for (float v : r.frames.data) total += v;
    CHECK(total == 3.0);
}

TEST_CASE("bin_events: matches the per-event oracle on random streams") {
    RngStream rng(2024);
    for (int i = 0; i < 30; ++i) {
        const auto width = static_cast<uint16_t>(2 + rng.uniform_int(31));
        const auto height = static_cast<uint16_t>(2 + rng.uniform_int(31));
        const size_t count = rng.uniform_int(2000);
        const uint64_t t_max = 1 + rng.uniform_int(1000000);
        const EventStream s = random_stream(rng, width, height, count, t_max);
        BinningConfig cfg;
        cfg.num_windows = 1 + static_cast<int64_t>(rng.uniform_int(20));
        check_against_oracle(s, cfg);

        // same stream under a random explicit span
        const uint64_t a = rng.uniform_int(t_max);
        cfg.span = {{a, a + rng.uniform_int(t_max - a + 1)}};
        check_against_oracle(s, cfg);
    }
}

TEST_CASE("bin_events: polarity channels stay separated") {
    RngStream rng(11);
    for (uint8_t pol : {uint8_t{0}, uint8_t{1}}) {
        EventStream s;
        s.width = 8;
        s.height = 8;
        for (int i = 0; i < 500; ++i)
            s.events.push_back({static_cast<uint64_t>(i), static_cast<uint16_t>(rng.uniform_int(8)),
                                static_cast<uint16_t>(rng.uniform_int(8)), pol});
        const BinResult r = bin_events(s, {.num_windows = 5, .span = {}});
        double on_other = 0;
        for (int64_t w = 0; w < 5; ++w)
            for (int64_t y = 0; y < 8; ++y)
                for (int64_t x = 0; x < 8; ++x) on_other += r.frames.at(w, 1 - pol, y, x);
        CHECK(on_other == 0.0);
    }
}

TEST_CASE("frame file: round trips are bitwise") {
    RngStream rng(5);
    FrameTensor f;
    f.num_windows = 3;
    f.height = 4;
    f.width = 5;
    f.data.resize(static_cast<size_t>(f.numel()));
    for (auto& v : f.data) v = static_cast<float>(rng.uniform(0.0, 30.0));
    const auto p = tmp_path("frames.frmt");
    write_frame_file(f, p);
    const FrameTensor back = read_frame_file(p);
    CHECK(back == f);

    // zero tensor and default-pipeline header shape
    FrameTensor z;
    z.num_windows = 16;
    z.height = 128;
    z.width = 128;
    z.data.assign(static_cast<size_t>(z.numel()), 0.0f);
    const auto pz = tmp_path("zeros.frmt");
    write_frame_file(z, pz);
    const FrameTensor zback = read_frame_file(pz);
    CHECK(zback == z);
    CHECK(zback.num_windows == 16);
    CHECK(zback.height == 128);
    CHECK(zback.width == 128);
}

TEST_CASE("frame file: malformed headers and payloads are rejected") {
    FrameTensor f;
    f.num_windows = 2;
    f.height = 2;
    f.width = 2;
    f.data.assign(static_cast<size_t>(f.numel()), 1.0f);
    const auto p = tmp_path("good.frmt");
    write_frame_file(f, p);
    const std::string good = slurp(p);
    const auto bad = tmp_path("bad.frmt");

    std::string b = good;
    b[1] = 'X';
    spit(bad, b);
    CHECK_THROWS_AS(read_frame_file(bad), FormatError);

    // C != 2 (C field at bytes 10..13; adjusting it also breaks the size check)
    b = good;
    b[10] = 3;
    spit(bad, b);
    CHECK_THROWS_AS(read_frame_file(bad), FormatError);

    spit(bad, good.substr(0, good.size() - 1));
    CHECK_THROWS_AS(read_frame_file(bad), FormatError);

    // negative payload entry
    b = good;
    b[good.size() - 1] = static_cast<char>(0xbf); // flips the last float to a negative value
    spit(bad, b);
    CHECK_THROWS_AS(read_frame_file(bad), FormatError);

    FrameTensor neg = f;
    neg.data[0] = -1.0f;
    CHECK_THROWS_AS(write_frame_file(neg, bad), ValidationError);
}

TEST_CASE("generator: deterministic, class-validated, empty at zero rate") {
    GenParams params;
    params.signal_events = 800;
    const auto a = gen_synthetic_stream(2, 42, params);
    const auto b = gen_synthetic_stream(2, 42, params);
    CHECK(a.stream == b.stream);
    CHECK(a.label == 2);
    const auto c = gen_synthetic_stream(2, 43, params);
    CHECK(a.stream.events != c.stream.events);

    CHECK_THROWS_AS(gen_synthetic_stream(4, 1, params), ValidationError);
    CHECK_THROWS_AS(gen_synthetic_stream(-1, 1, params), ValidationError);

    GenParams quiet = params;
    quiet.signal_events = 0;
    CHECK(gen_synthetic_stream(0, 7, quiet).stream.events.empty());
}

TEST_CASE("generator: classes are separable by nearest centroid on mean frames") {
    GenParams params;
    params.width = 16;
    params.height = 16;
    params.signal_events = 1200;
    const int64_t T = 4;
    const size_t dims = static_cast<size_t>(T) * 2 * 16 * 16;
    const int per_class = 500; // 1000 samples total across the two classes

    auto features = [&](int cls, uint64_t seed) {
        const auto ls = gen_synthetic_stream(cls, seed, params);
        const BinResult r = bin_events(ls.stream, {.num_windows = T, .span = {}});
        std::vector<double> v(r.frames.data.begin(), r.frames.data.end());
        return v;
    };

    std::vector<std::vector<double>> centroid(2, std::vector<double>(dims, 0.0));
    const int train = per_class / 2;
    for (int cls = 0; cls < 2; ++cls)
        for (int i = 0; i < train; ++i) {
            const auto v = features(cls, 1000 + static_cast<uint64_t>(cls) * 10000 + i);
            for (size_t d = 0; d < dims; ++d) centroid[cls][d] += v[d] / train;
        }

    int correct = 0, total = 0;
    for (int cls = 0; cls < 2; ++cls)
        for (int i = train; i < per_class; ++i) {
            const auto v = features(cls, 1000 + static_cast<uint64_t>(cls) * 10000 + i);
            double d0 = 0, d1 = 0;
            for (size_t d = 0; d < dims; ++d) {
                d0 += (v[d] - centroid[0][d]) * (v[d] - centroid[0][d]);
                d1 += (v[d] - centroid[1][d]) * (v[d] - centroid[1][d]);
            }
            const int pred = d1 < d0 ? 1 : 0;
            correct += pred == cls;
            ++total;
        }
    const double acc = static_cast<double>(correct) / total;
    INFO("nearest-centroid accuracy " << acc);
    CHECK(acc > 0.75); // well above the 0.5 chance level
}
