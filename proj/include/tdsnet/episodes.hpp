#pragma once

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "tdsnet/rng.hpp"
#include "tdsnet/serialize.hpp"
#include "tdsnet/tensor.hpp"

namespace tdsnet {

// ---------------------------------------------------------------------------
// P6 portable pixmap, maxval 255
// ---------------------------------------------------------------------------

struct Image {
    std::size_t width = 0, height = 0;
    std::vector<std::uint8_t> rgb; // row-major, 3 bytes per pixel
};

namespace detail {

inline std::string ppm_token(std::istream& is, const std::string& path) {
    std::string tok;
    int ch;
    while ((ch = is.get()) != EOF) {
        if (ch == '#') {
            while ((ch = is.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) return tok;
            continue;
        }
        tok.push_back(char(ch));
    }
    if (tok.empty()) throw std::runtime_error("malformed ppm (truncated header): " + path);
    return tok;
}

} // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open image: " + path);
    if (detail::ppm_token(is, path) != "P6") throw std::runtime_error("malformed ppm (not P6): " + path);
    Image img;
    try {
        img.width = std::stoul(detail::ppm_token(is, path));
        img.height = std::stoul(detail::ppm_token(is, path));
        if (std::stoul(detail::ppm_token(is, path)) != 255)
            throw std::runtime_error("malformed ppm (maxval != 255): " + path);
    } catch (const std::invalid_argument&) {
        throw std::runtime_error("malformed ppm (bad header field): " + path);
    }
    if (img.width == 0 || img.height == 0) throw std::runtime_error("malformed ppm (zero extent): " + path);
    img.rgb.resize(img.width * img.height * 3);
    is.read(reinterpret_cast<char*>(img.rgb.data()), img.rgb.size());
    if (std::size_t(is.gcount()) != img.rgb.size())
        throw std::runtime_error("malformed ppm (truncated payload): " + path);
    return img;
}

inline void write_ppm(const std::string& path, const Image& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open for write: " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()), img.rgb.size());
    if (!os) throw std::runtime_error("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Preprocessing: bilinear resize, [0,1] scaling, per-channel normalization
// ---------------------------------------------------------------------------

inline constexpr double kChannelMean[3] = {0.485, 0.456, 0.406};
inline constexpr double kChannelStd[3] = {0.229, 0.224, 0.225};

template <class T>
Tensor<T> preprocess(const Image& img, std::size_t size) {
    std::vector<T> out(size * size * 3);
    const double sy = double(img.height) / double(size);
    const double sx = double(img.width) / double(size);
    for (std::size_t y = 0; y < size; ++y) {
        // half-pixel source coordinates, clamped at the borders
        const double fy = std::max(0.0, std::min((y + 0.5) * sy - 0.5, double(img.height) - 1.0));
        const std::size_t y0 = std::size_t(fy);
        const std::size_t y1 = std::min(y0 + 1, img.height - 1);
        const double wy = fy - double(y0);
        for (std::size_t x = 0; x < size; ++x) {
            const double fx = std::max(0.0, std::min((x + 0.5) * sx - 0.5, double(img.width) - 1.0));
            const std::size_t x0 = std::size_t(fx);
            const std::size_t x1 = std::min(x0 + 1, img.width - 1);
            const double wx = fx - double(x0);
            for (std::size_t c = 0; c < 3; ++c) {
                auto px = [&](std::size_t yy, std::size_t xx) {
                    return double(img.rgb[(yy * img.width + xx) * 3 + c]) / 255.0;
                };
                const double v = (1 - wy) * ((1 - wx) * px(y0, x0) + wx * px(y0, x1)) +
                                 wy * ((1 - wx) * px(y1, x0) + wx * px(y1, x1));
                out[(y * size + x) * 3 + c] = T((v - kChannelMean[c]) / kChannelStd[c]);
            }
        }
    }
    return Tensor<T>::from_vec({size, size, 3}, std::move(out));
}

// ---------------------------------------------------------------------------
// Dataset index and episode sampling
// ---------------------------------------------------------------------------

struct DatasetIndex {
    struct ClassEntry {
        std::string name;
        std::vector<std::string> files; // absolute paths, sorted
    };
    std::string root;
    std::string split_tag;
    std::vector<ClassEntry> classes; // sorted by name
};

// Loads the classes named in `split_file` (one per line) from
// root/<class>/*.ppm. Ordering is lexicographic throughout.
inline DatasetIndex load_dataset(const std::string& root, const std::string& split_file) {
    namespace fs = std::filesystem;
    std::ifstream is(split_file);
    if (!is) throw std::runtime_error("cannot open split file: " + split_file);
    DatasetIndex index;
    index.root = root;
    index.split_tag = fs::path(split_file).stem().string();
    std::set<std::string> names;
    std::string line;
    while (std::getline(is, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (line.empty()) continue;
        if (!names.insert(line).second)
            throw std::runtime_error("split file lists class twice: " + line);
    }
    if (names.empty()) throw std::runtime_error("split file names no classes: " + split_file);
    for (const auto& name : names) {
        const fs::path dir = fs::path(root) / name;
        if (!fs::is_directory(dir)) throw std::runtime_error("missing class directory: " + dir.string());
        DatasetIndex::ClassEntry entry;
        entry.name = name;
        for (const auto& e : fs::directory_iterator(dir))
            if (e.is_regular_file() && e.path().extension() == ".ppm") entry.files.push_back(e.path().string());
        std::sort(entry.files.begin(), entry.files.end());
        if (entry.files.empty()) throw std::runtime_error("class has no images: " + name);
        index.classes.push_back(std::move(entry));
    }
    return index;
}

// The split label spaces must be disjoint.
inline void check_disjoint(const DatasetIndex& a, const DatasetIndex& b) {
    std::set<std::string> names;
    for (const auto& c : a.classes) names.insert(c.name);
    for (const auto& c : b.classes)
        if (names.count(c.name))
            throw std::runtime_error("overlapping label spaces: class '" + c.name + "' appears in splits '" +
                                     a.split_tag + "' and '" + b.split_tag + "'");
}

// Content digest over class names, file names and file sizes.
inline std::string index_digest(const DatasetIndex& index) {
    Fnv1a h;
    for (const auto& c : index.classes) {
        h.update(c.name);
        for (const auto& f : c.files) {
            h.update(f);
            const auto sz = std::filesystem::file_size(f);
            h.update(&sz, sizeof(sz));
        }
    }
    return h.hex();
}

// One sampled N-way K-shot task, as indices into the dataset.
struct EpisodeDraw {
    std::vector<std::size_t> class_ids;                // N entries
    std::vector<std::vector<std::size_t>> support;     // per way, K file indices
    std::vector<std::vector<std::size_t>> query;       // per way, Q file indices
    std::uint64_t seed = 0;
};

inline EpisodeDraw sample_episode(const DatasetIndex& index, std::size_t n_way, std::size_t k_shot,
                                  std::size_t q_per, Rng rng, std::uint64_t seed_label = 0) {
    if (index.classes.size() < n_way)
        throw std::runtime_error("split '" + index.split_tag + "' has " + std::to_string(index.classes.size()) +
                                 " classes, need " + std::to_string(n_way));
    EpisodeDraw draw;
    draw.seed = seed_label;
    draw.class_ids = rng.sample_without_replacement(index.classes.size(), n_way);
    for (std::size_t c : draw.class_ids) {
        const auto& files = index.classes[c].files;
        if (files.size() < k_shot + q_per)
            throw std::runtime_error("class '" + index.classes[c].name + "' has " +
                                     std::to_string(files.size()) + " images, need " +
                                     std::to_string(k_shot + q_per));
        auto picks = rng.sample_without_replacement(files.size(), k_shot + q_per);
        draw.support.emplace_back(picks.begin(), picks.begin() + k_shot);
        draw.query.emplace_back(picks.begin() + k_shot, picks.end());
    }
    return draw;
}

// ---------------------------------------------------------------------------
// Episode provider: decoded + preprocessed images, optional disk cache
// ---------------------------------------------------------------------------

template <class T>
class EpisodeProvider {
public:
    EpisodeProvider(const DatasetIndex& index, std::size_t image_size, std::string cache_dir = "")
        : index_(&index), image_size_(image_size) {
        namespace fs = std::filesystem;
        if (!cache_dir.empty()) fs::create_directories(cache_dir);
        images_.resize(index.classes.size());
        for (std::size_t c = 0; c < index.classes.size(); ++c) {
            images_[c].reserve(index.classes[c].files.size());
            for (const auto& file : index.classes[c].files) {
                if (cache_dir.empty()) {
                    images_[c].push_back(preprocess<T>(read_ppm(file), image_size));
                    continue;
                }
                Fnv1a key;
                std::ifstream raw(file, std::ios::binary);
                std::string bytes((std::istreambuf_iterator<char>(raw)), std::istreambuf_iterator<char>());
                key.update(bytes);
                key.update(&image_size_, sizeof(image_size_));
                const std::uint8_t dtype = sizeof(T) == 4 ? 0 : 1;
                key.update(&dtype, 1);
                const fs::path cached = fs::path(cache_dir) / (key.hex() + ".tdsn");
                if (fs::exists(cached)) {
                    images_[c].push_back(load_tensor<T>(cached.string()));
                } else {
                    Tensor<T> t = preprocess<T>(read_ppm(file), image_size);
                    save_tensor(cached.string(), t);
                    images_[c].push_back(std::move(t));
                }
            }
        }
    }

    const DatasetIndex& index() const { return *index_; }
    std::size_t image_size() const { return image_size_; }

    // Assembles the class-major support batch and the query batch with
    // position-based labels.
    template <class Batch>
    Batch materialize(const EpisodeDraw& draw, std::size_t q_per) const {
        Batch ep;
        const std::size_t n = draw.class_ids.size();
        const std::size_t k = draw.support[0].size();
        const std::size_t px = image_size_ * image_size_ * 3;
        std::vector<T> sup(n * k * px), qry(n * q_per * px);
        for (std::size_t c = 0; c < n; ++c) {
            for (std::size_t s = 0; s < k; ++s)
                std::memcpy(sup.data() + (c * k + s) * px,
                            images_[draw.class_ids[c]][draw.support[c][s]].data(), px * sizeof(T));
            for (std::size_t q = 0; q < q_per; ++q) {
                std::memcpy(qry.data() + (c * q_per + q) * px,
                            images_[draw.class_ids[c]][draw.query[c][q]].data(), px * sizeof(T));
                ep.labels.push_back(int(c));
            }
        }
        ep.n_way = n;
        ep.k_shot = k;
        ep.support = Tensor<T>::from_vec({n * k, image_size_, image_size_, 3}, std::move(sup));
        ep.query = Tensor<T>::from_vec({n * q_per, image_size_, image_size_, 3}, std::move(qry));
        return ep;
    }

private:
    const DatasetIndex* index_;
    std::size_t image_size_;
    std::vector<std::vector<Tensor<T>>> images_; // [class][file]
};

} // namespace tdsnet
