#pragma once

#include <cstdint>

#include "neuromoco/events.hpp"

namespace neuromoco::augment {

// Ranges for drawing per-view geometric parameters. Width/height describe
// the frame geometry the policy operates at (integer pixel shifts are drawn
// relative to them). All-zero ranges with scale 1 yield identity params.
struct AugmentPolicy {
    double flip_prob = 0.5;
    double shear_max = 0.15;      // vertical shear factor bound
    double translate_frac = 0.125; // max shift as a fraction of each side
    double rotate_max_deg = 15.0;
    double scale_min = 0.8;
    double scale_max = 1.2;
    int64_t width = 0;
    int64_t height = 0;
};

// One sampled geometric view. A single ViewParams is applied identically to
// every time frame of a sample.
struct ViewParams {
    bool flip = false;        // horizontal mirror
    double shear_y = 0.0;     // ShearY factor
    int64_t dx = 0;           // integer pixel translation
    int64_t dy = 0;
    double resize_scale = 1.0; // zoom about the center (crop/pad semantics)
    double rotation_deg = 0.0;
    uint64_t seed = 0; // the seed the draw consumed

    bool is_identity() const {
        return !flip && shear_y == 0.0 && dx == 0 && dy == 0 && resize_scale == 1.0 &&
               rotation_deg == 0.0;
    }

    bool operator==(const ViewParams&) const = default;
};

ViewParams sample_view_params(const AugmentPolicy& policy, uint64_t seed);

events::FrameTensor apply_view(const events::FrameTensor& frames, const ViewParams& p);

events::FrameTensor resize_to(const events::FrameTensor& frames, int64_t h, int64_t w);

} // namespace neuromoco::augment
