#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "tdsnet/episodes.hpp"
#include "tdsnet/rng.hpp"

namespace tdsnet {

// Desk-scale fine-grained dataset. Every class shares one glyph (the
// super-category: an elliptic body with satellite parts); class identity
// lives in small per-part angular offsets and hue shifts, while heavy
// per-image nuisance (translation, rotation, background, brightness) keeps
// intra-class variance high. Same spec + seed -> byte-identical files.
struct SyntheticSpec {
    std::size_t image_size = 32;
    std::size_t num_classes = 25;
    std::size_t auxiliary_classes = 20; // first classes -> auxiliary split, rest -> test
    std::size_t images_per_class = 40;
    std::size_t parts = 3;
    double part_offset_range = 0.45; // radians around each base angle
    double hue_delta_range = 0.28;
    double jitter_translate = 0.08; // fraction of image size
    double jitter_rotate = 0.30;    // radians
    double background_noise = 0.05;     // per-pixel
    double background_variation = 0.15; // per-image gradient colors
    double brightness_jitter = 0.12;
    std::uint64_t seed = 1;
};

namespace detail {

struct PartDef {
    double angle, radial, radius;
    double color[3];
};

inline std::vector<PartDef> class_parts(const SyntheticSpec& spec, std::size_t cls) {
    static const double base_colors[3][3] = {{0.85, 0.25, 0.20}, {0.20, 0.80, 0.30}, {0.25, 0.35, 0.90}};
    Rng rng = Rng(spec.seed).child("class", cls);
    std::vector<PartDef> parts(spec.parts);
    for (std::size_t p = 0; p < spec.parts; ++p) {
        PartDef& d = parts[p];
        d.angle = 2.0 * 3.14159265358979 * double(p) / double(spec.parts) +
                  rng.uniform(-spec.part_offset_range, spec.part_offset_range);
        d.radial = rng.uniform(0.55, 0.80);
        d.radius = rng.uniform(0.10, 0.16);
        for (int c = 0; c < 3; ++c) {
            d.color[c] = base_colors[p % 3][c] + rng.uniform(-spec.hue_delta_range, spec.hue_delta_range);
            d.color[c] = std::min(0.95, std::max(0.05, d.color[c]));
        }
    }
    return parts;
}

} // namespace detail

inline Image render_synthetic_image(const SyntheticSpec& spec, std::size_t cls, std::size_t img_idx) {
    const std::size_t s = spec.image_size;
    const double half = double(s) / 2.0;
    auto parts = detail::class_parts(spec, cls);
    Rng rng = Rng(spec.seed).child("image", cls * 1000003ull + img_idx);

    const double tx = rng.uniform(-spec.jitter_translate, spec.jitter_translate) * double(s);
    const double ty = rng.uniform(-spec.jitter_translate, spec.jitter_translate) * double(s);
    const double rot = rng.uniform(-spec.jitter_rotate, spec.jitter_rotate);
    const double bright = 1.0 + rng.uniform(-spec.brightness_jitter, spec.brightness_jitter);
    double bg0[3], bg1[3];
    for (int c = 0; c < 3; ++c) {
        bg0[c] = 0.25 + rng.uniform(-spec.background_variation, spec.background_variation);
        bg1[c] = 0.25 + rng.uniform(-spec.background_variation, spec.background_variation);
    }

    std::vector<double> canvas(s * s * 3);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double g = (double(x) + double(y)) / (2.0 * double(s));
            for (int c = 0; c < 3; ++c) {
                double v = bg0[c] * (1 - g) + bg1[c] * g + rng.uniform(-spec.background_noise, spec.background_noise);
                canvas[(y * s + x) * 3 + c] = v;
            }
        }

    auto blend = [&](std::size_t y, std::size_t x, double cov, const double color[3]) {
        if (cov <= 0) return;
        cov = std::min(1.0, cov);
        for (int c = 0; c < 3; ++c) {
            double& dst = canvas[(y * s + x) * 3 + c];
            dst = dst * (1 - cov) + color[c] * bright * cov;
        }
    };

    // body: rotated ellipse, soft one-pixel edge
    const double body_color[3] = {0.45, 0.38, 0.30};
    const double rx = 0.34 * double(s), ry = 0.22 * double(s);
    const double cx = half + tx, cy = half + ty;
    const double cr = std::cos(-rot), sr = std::sin(-rot);
    for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
            const double dx = (double(x) + 0.5) - cx, dy = (double(y) + 0.5) - cy;
            const double u = dx * cr - dy * sr, v = dx * sr + dy * cr;
            const double d = std::sqrt((u / rx) * (u / rx) + (v / ry) * (v / ry));
            blend(y, x, 0.5 - (d - 1.0) * std::min(rx, ry), body_color);
        }

    for (const auto& part : parts) {
        const double a = part.angle + rot;
        const double px = cx + part.radial * half * std::cos(a);
        const double py = cy + part.radial * half * std::sin(a);
        const double pr = part.radius * double(s);
        for (std::size_t y = 0; y < s; ++y)
            for (std::size_t x = 0; x < s; ++x) {
                const double dx = (double(x) + 0.5) - px, dy = (double(y) + 0.5) - py;
                blend(y, x, 0.5 - (std::sqrt(dx * dx + dy * dy) - pr), part.color);
            }
    }

    Image img;
    img.width = img.height = s;
    img.rgb.resize(s * s * 3);
    for (std::size_t i = 0; i < canvas.size(); ++i) {
        const double v = std::min(1.0, std::max(0.0, canvas[i]));
        img.rgb[i] = std::uint8_t(std::lround(v * 255.0));
    }
    return img;
}

inline std::string synthetic_class_name(std::size_t cls) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "class_%03zu", cls);
    return buf;
}

// Writes root/<class>/img_xxx.ppm plus auxiliary.txt and test.txt.
inline void generate_synthetic(const SyntheticSpec& spec, const std::string& out_root) {
    namespace fs = std::filesystem;
    fs::create_directories(out_root);
    std::ofstream aux(fs::path(out_root) / "auxiliary.txt");
    std::ofstream test(fs::path(out_root) / "test.txt");
    for (std::size_t cls = 0; cls < spec.num_classes; ++cls) {
        const std::string name = synthetic_class_name(cls);
        (cls < spec.auxiliary_classes ? aux : test) << name << "\n";
        const fs::path dir = fs::path(out_root) / name;
        fs::create_directories(dir);
        for (std::size_t i = 0; i < spec.images_per_class; ++i) {
            char buf[16];
            std::snprintf(buf, sizeof(buf), "img_%03zu.ppm", i);
            write_ppm((dir / buf).string(), render_synthetic_image(spec, cls, i));
        }
    }
}

} // namespace tdsnet
