#include "neuromoco/augment.hpp"

#include <cmath>
#include <vector>

#include "neuromoco/common.hpp"
#include "neuromoco/rng.hpp"

namespace neuromoco::augment {

namespace {

void validate_policy(const AugmentPolicy& p) {
    if (p.flip_prob < 0.0 || p.flip_prob > 1.0)
        throw ValidationError("augment policy: flip_prob must be in [0,1]");
    if (p.shear_max < 0.0 || p.rotate_max_deg < 0.0 || p.translate_frac < 0.0 || p.translate_frac > 1.0)
        throw ValidationError("augment policy: negative range or translate_frac outside [0,1]");
    if (!(p.scale_min > 0.0) || p.scale_max < p.scale_min)
        throw ValidationError("augment policy: need 0 < scale_min <= scale_max");
    if (p.width < 1 || p.height < 1)
        throw ValidationError("augment policy: frame geometry must be set");
}

int64_t draw_shift(RngStream& rng, int64_t max_px) {
    if (max_px <= 0) return 0;
    return static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(2 * max_px + 1))) - max_px;
}

} // namespace

ViewParams sample_view_params(const AugmentPolicy& policy, uint64_t seed) {
    validate_policy(policy);
    RngStream rng = RngStream::child(seed, "view-params", 0, 0);
    ViewParams p;
    p.seed = seed;
    // fixed draw order keeps parameter streams reproducible across runs
    p.flip = rng.bernoulli(policy.flip_prob);
    p.shear_y = rng.uniform(-policy.shear_max, policy.shear_max);
    p.dx = draw_shift(rng, static_cast<int64_t>(std::floor(policy.translate_frac * policy.width)));
    p.dy = draw_shift(rng, static_cast<int64_t>(std::floor(policy.translate_frac * policy.height)));
    p.rotation_deg = rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg);
    p.resize_scale = rng.uniform(policy.scale_min, policy.scale_max);
    return p;
}

events::FrameTensor apply_view(const events::FrameTensor& frames, const ViewParams& p) {
    if (p.is_identity()) return frames; // bitwise-equal fast path

    const int64_t T = frames.num_windows, H = frames.height, W = frames.width;
    const int64_t C = events::FrameTensor::kChannels;
    events::FrameTensor out;
    out.num_windows = T;
    out.height = H;
    out.width = W;
    out.data.assign(static_cast<size_t>(out.numel()), 0.0f);
    if (H == 0 || W == 0) return out;

    // Forward transform about the image center: flip ∘ rotate ∘ shearY ∘ scale,
    // then translate. Output pixels pull from inverse-mapped source positions
    // with nearest-neighbor rounding; pure flips and integer translations stay
    // exact because the arithmetic below is exact on integers.
    const double rad = p.rotation_deg * M_PI / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double k = p.resize_scale, sh = p.shear_y;
    // A = F * R * Sh * S
    double a00 = cs * k, a01 = -sn * k;
    double a10 = sn * k + cs * sh * k, a11 = cs * k - sn * sh * k;
    if (p.flip) {
        a00 = -a00;
        a01 = -a01;
    }
    const double det = a00 * a11 - a01 * a10;
    const double i00 = a11 / det, i01 = -a01 / det;
    const double i10 = -a10 / det, i11 = a00 / det;
    const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;

    // One source-index map shared by every (t, channel) plane: temporal
    // consistency holds by construction.
    std::vector<int64_t> src_of(static_cast<size_t>(H * W), -1);
    for (int64_t yo = 0; yo < H; ++yo)
        for (int64_t xo = 0; xo < W; ++xo) {
            const double vx = static_cast<double>(xo - p.dx) - cx;
            const double vy = static_cast<double>(yo - p.dy) - cy;
            const long sx = std::lround(i00 * vx + i01 * vy + cx);
            const long sy = std::lround(i10 * vx + i11 * vy + cy);
            if (sx >= 0 && sx < W && sy >= 0 && sy < H) src_of[static_cast<size_t>(yo * W + xo)] = sy * W + sx;
        }

    for (int64_t tc = 0; tc < T * C; ++tc) {
        const float* in = frames.data.data() + tc * H * W;
        float* dst = out.data.data() + tc * H * W;
        for (int64_t i = 0; i < H * W; ++i)
            if (src_of[static_cast<size_t>(i)] >= 0) dst[i] = in[src_of[static_cast<size_t>(i)]];
    }
    return out;
}

events::FrameTensor resize_to(const events::FrameTensor& frames, int64_t h, int64_t w) {
    if (h < 1 || w < 1) throw ValidationError("resize_to: target dimensions must be >= 1");
    const int64_t T = frames.num_windows, H = frames.height, W = frames.width;
    const int64_t C = events::FrameTensor::kChannels;
    if (h == H && w == W) return frames;
    if (H == 0 || W == 0) throw ValidationError("resize_to: cannot resize an empty frame");

    events::FrameTensor out;
    out.num_windows = T;
    out.height = h;
    out.width = w;
    out.data.resize(static_cast<size_t>(out.numel()));

    // integer nearest-neighbor index mapping: src = dst * in / out, which makes
    // a 2x upsample followed by a 2x downsample an exact identity
    std::vector<int64_t> sx(static_cast<size_t>(w)), sy(static_cast<size_t>(h));
    for (int64_t x = 0; x < w; ++x) sx[static_cast<size_t>(x)] = x * W / w;
    for (int64_t y = 0; y < h; ++y) sy[static_cast<size_t>(y)] = y * H / h;

    for (int64_t tc = 0; tc < T * C; ++tc) {
        const float* in = frames.data.data() + tc * H * W;
        float* dst = out.data.data() + tc * h * w;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                dst[y * w + x] = in[sy[static_cast<size_t>(y)] * W + sx[static_cast<size_t>(x)]];
    }
    return out;
}

} // namespace neuromoco::augment
