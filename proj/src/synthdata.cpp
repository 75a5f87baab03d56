#include "uniap/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "uniap/rng.hpp"

namespace uniap::synthdata {

namespace fs = std::filesystem;
using json = nlohmann::json;
using numkit::RngStream;

namespace {

struct Vec2 {
    double x, y;
};

// Canonical geometry, unit scale. Keypoints are boundary landmarks plus the
// centroid (last entry).
std::vector<Vec2> canonical_keypoints(int family) {
    switch (family) {
        case 0: {  // triangle: three corners
            std::vector<Vec2> v;
            for (int i = 0; i < 3; ++i) {
                double a = M_PI / 2 + i * 2 * M_PI / 3;
                v.push_back({std::cos(a), std::sin(a)});
            }
            v.push_back({0, 0});
            return v;
        }
        case 1: {  // square: four corners
            std::vector<Vec2> v = {{1, 1}, {-1, 1}, {-1, -1}, {1, -1}};
            for (auto& p : v) {
                p.x *= M_SQRT1_2;
                p.y *= M_SQRT1_2;
            }
            v.push_back({0, 0});
            return v;
        }
        case 2: {  // circle: four extremal points
            return {{1, 0}, {0, 1}, {-1, 0}, {0, -1}, {0, 0}};
        }
        default:
            throw std::invalid_argument("unknown shape family");
    }
}

bool canonical_inside(int family, double x, double y) {
    switch (family) {
        case 0: {
            // intersection of the three corner-edge half planes
            auto ks = canonical_keypoints(0);
            for (int i = 0; i < 3; ++i) {
                Vec2 a = ks[i], b = ks[(i + 1) % 3];
                double cross = (b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x);
                if (cross < 0) return false;
            }
            return true;
        }
        case 1:
            return std::fabs(x) <= M_SQRT1_2 && std::fabs(y) <= M_SQRT1_2;
        case 2:
            return x * x + y * y <= 1.0;
        default:
            return false;
    }
}

std::array<float, 3> color_rgb(const std::string& name) {
    if (name == "red") return {0.85f, 0.20f, 0.20f};
    if (name == "green") return {0.20f, 0.80f, 0.25f};
    if (name == "blue") return {0.20f, 0.35f, 0.90f};
    if (name == "yellow") return {0.90f, 0.85f, 0.20f};
    if (name == "magenta") return {0.85f, 0.25f, 0.80f};
    if (name == "cyan") return {0.20f, 0.80f, 0.85f};
    throw std::invalid_argument("unknown color name: " + name);
}

int family_index(const std::string& name) {
    const auto& names = family_names();
    auto it = std::find(names.begin(), names.end(), name);
    if (it == names.end()) throw std::invalid_argument("unknown family: " + name);
    return static_cast<int>(it - names.begin());
}

std::uint64_t fnv1a_bytes(const void* data, size_t n, std::uint64_t h) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

std::uint64_t fnv1a_str(const std::string& s, std::uint64_t h) {
    return fnv1a_bytes(s.data(), s.size(), h);
}

Sample render_sample(const DatasetSpec& spec, const ClassInfo& cls, int sample_id,
                     RngStream rng) {
    Sample s;
    s.id = sample_id;
    s.class_id = cls.id;
    s.split = cls.split;
    s.size = spec.canvas;
    s.family = cls.family;
    s.color = cls.color;

    const int R = spec.canvas;
    s.scl = rng.uniform(0.22, 0.36) * R;
    s.rot = rng.uniform(0.0, 2 * M_PI);
    double margin = s.scl + 2.0;
    s.cx = rng.uniform(margin, R - margin);
    s.cy = rng.uniform(margin, R - margin);

    s.mask = render_mask(s);

    auto fg = color_rgb(cls.name.substr(cls.name.find('_') + 1));
    s.image.assign(static_cast<size_t>(3) * R * R, 0.0f);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j) {
            bool in = s.mask[static_cast<size_t>(i) * R + j] != 0;
            for (int c = 0; c < 3; ++c) {
                float base = in ? fg[c] : 0.12f;
                float v = base + static_cast<float>(rng.normal(0.0, spec.noise_std));
                s.image[(static_cast<size_t>(c) * R + i) * R + j] =
                    std::clamp(v, 0.0f, 1.0f);
            }
        }

    double ca = std::cos(s.rot), sa = std::sin(s.rot);
    for (const auto& p : canonical_keypoints(cls.family)) {
        Keypoint kp;
        kp.x = s.cx + s.scl * (ca * p.x - sa * p.y);
        kp.y = s.cy + s.scl * (sa * p.x + ca * p.y);
        kp.visible = true;
        s.keypoints.push_back(kp);
    }

    // bbox covers the mask and every visible keypoint
    double minx = 1e9, miny = 1e9, maxx = -1e9, maxy = -1e9;
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j)
            if (s.mask[static_cast<size_t>(i) * R + j]) {
                minx = std::min(minx, static_cast<double>(j));
                maxx = std::max(maxx, static_cast<double>(j) + 1);
                miny = std::min(miny, static_cast<double>(i));
                maxy = std::max(maxy, static_cast<double>(i) + 1);
            }
    for (const auto& kp : s.keypoints) {
        minx = std::min(minx, kp.x - 0.5);
        maxx = std::max(maxx, kp.x + 0.5);
        miny = std::min(miny, kp.y - 0.5);
        maxy = std::max(maxy, kp.y + 0.5);
    }
    minx = std::max(0.0, minx);
    miny = std::max(0.0, miny);
    maxx = std::min(static_cast<double>(R), maxx);
    maxy = std::min(static_cast<double>(R), maxy);
    s.bbox = {minx, miny, maxx - minx, maxy - miny};
    return s;
}

}  // namespace

const std::vector<std::string>& family_names() {
    static const std::vector<std::string> names = {"triangle", "square", "circle"};
    return names;
}

int family_keypoint_count(int family) {
    return static_cast<int>(canonical_keypoints(family).size());
}

std::vector<std::uint8_t> render_mask(const Sample& s) {
    const int R = s.size;
    std::vector<std::uint8_t> mask(static_cast<size_t>(R) * R, 0);
    double ca = std::cos(-s.rot), sa = std::sin(-s.rot);
    for (int i = 0; i < R; ++i)
        for (int j = 0; j < R; ++j) {
            double px = (j + 0.5 - s.cx) / s.scl;
            double py = (i + 0.5 - s.cy) / s.scl;
            double ux = ca * px - sa * py;
            double uy = sa * px + ca * py;
            if (canonical_inside(s.family, ux, uy))
                mask[static_cast<size_t>(i) * R + j] = 1;
        }
    return mask;
}

std::vector<int> DatasetManifest::class_ids(const std::string& split) const {
    std::vector<int> out;
    for (const auto& [id, c] : classes)
        if (c.split == split) out.push_back(id);
    return out;
}

void DatasetManifest::check_split_disjointness() const {
    std::map<int, std::set<std::string>> splits_of_class;
    for (const auto& s : samples) splits_of_class[s.class_id].insert(s.split);
    for (const auto& [id, ss] : splits_of_class)
        if (ss.size() > 1)
            throw std::invalid_argument("manifest violates split disjointness for class " +
                                     std::to_string(id));
}

DatasetManifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed) {
    int n_classes = static_cast<int>(spec.families.size() * spec.colors.size());
    if (n_classes < 4)
        throw std::invalid_argument("dataset spec must define at least 4 classes");
    if (spec.train_classes < 2 || spec.test_classes < 1)
        throw std::invalid_argument("need at least 2 train classes and 1 test class");
    if (spec.train_classes + spec.val_classes + spec.test_classes > n_classes)
        throw std::invalid_argument("split sizes exceed class count");

    DatasetManifest m;
    m.spec = spec;
    m.seed = seed;

    // interleave family/color so each split sees a mix of families
    int id = 0;
    for (size_t ci = 0; ci < spec.colors.size(); ++ci)
        for (size_t fi = 0; fi < spec.families.size(); ++fi) {
            ClassInfo c;
            c.id = id++;
            c.family = family_index(spec.families[fi]);
            c.color = static_cast<int>(ci);
            c.name = spec.families[fi] + "_" + spec.colors[ci];
            if (c.id < spec.train_classes)
                c.split = "train";
            else if (c.id < spec.train_classes + spec.val_classes)
                c.split = "val";
            else if (c.id < spec.train_classes + spec.val_classes + spec.test_classes)
                c.split = "test";
            else
                c.split = "train";
            m.classes[c.id] = c;
        }

    RngStream root(seed, "synthdata");
    int sample_id = 0;
    for (const auto& [cid, cls] : m.classes) {
        for (int k = 0; k < spec.samples_per_class; ++k) {
            auto stream = root.split("class" + std::to_string(cid) + ".sample" +
                                     std::to_string(k));
            m.samples.push_back(render_sample(spec, cls, sample_id++, stream));
        }
    }
    m.check_split_disjointness();
    return m;
}

std::vector<float> rasterize_keypoint_heatmap(double kx, double ky, double sigma_px,
                                              int size) {
    if (kx < 0 || ky < 0 || kx > size - 1 || ky > size - 1)
        throw std::invalid_argument("rasterize_keypoint_heatmap: keypoint out of bounds");
    std::vector<float> out(static_cast<size_t>(size) * size);
    double inv2s2 = 1.0 / (2.0 * sigma_px * sigma_px);
    for (int i = 0; i < size; ++i)
        for (int j = 0; j < size; ++j) {
            double d2 = (j - kx) * (j - kx) + (i - ky) * (i - ky);
            out[static_cast<size_t>(i) * size + j] =
                static_cast<float>(std::exp(-d2 * inv2s2));
        }
    return out;
}

CroppedSample crop_and_resize(const Sample& sample, int out_size) {
    const auto [bx, by, bw, bh] = sample.bbox;
    if (bw <= 0 || bh <= 0)
        throw std::invalid_argument("crop_and_resize: degenerate bbox");
    if (sample.image.empty())
        throw std::invalid_argument("crop_and_resize: sample has no pixel data");
    const int R = sample.size, S = out_size;
    CroppedSample out;
    out.size = S;
    out.class_id = sample.class_id;
    out.image.assign(static_cast<size_t>(3) * S * S, 0.0f);
    out.mask.assign(static_cast<size_t>(S) * S, 0.0f);

    double sx = bw / S, sy = bh / S;
    for (int i = 0; i < S; ++i)
        for (int j = 0; j < S; ++j) {
            // bilinear sample at the crop-frame pixel center
            double xs = bx + (j + 0.5) * sx - 0.5;
            double ys = by + (i + 0.5) * sy - 0.5;
            int x0 = static_cast<int>(std::floor(xs));
            int y0 = static_cast<int>(std::floor(ys));
            double fx = xs - x0, fy = ys - y0;
            for (int c = 0; c < 3; ++c) {
                auto px = [&](int yy, int xx) -> double {
                    yy = std::clamp(yy, 0, R - 1);
                    xx = std::clamp(xx, 0, R - 1);
                    return sample.image[(static_cast<size_t>(c) * R + yy) * R + xx];
                };
                double v = (1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                           fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1));
                out.image[(static_cast<size_t>(c) * S + i) * S + j] =
                    static_cast<float>(v);
            }
            int xn = std::clamp(static_cast<int>(std::floor(bx + (j + 0.5) * sx)), 0, R - 1);
            int yn = std::clamp(static_cast<int>(std::floor(by + (i + 0.5) * sy)), 0, R - 1);
            out.mask[static_cast<size_t>(i) * S + j] =
                sample.mask.empty() ? 0.0f
                                    : static_cast<float>(sample.mask[static_cast<size_t>(yn) * R + xn]);
        }

    for (const auto& kp : sample.keypoints) {
        Keypoint k2;
        k2.x = (kp.x - bx) / sx;
        k2.y = (kp.y - by) / sy;
        k2.visible = kp.visible && k2.x >= 0 && k2.y >= 0 && k2.x <= S - 1 && k2.y <= S - 1;
        out.keypoints.push_back(k2);
    }
    return out;
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

namespace {

constexpr char kImageMagic[8] = {'U', 'A', 'P', 'I', 'M', 'G', '1', '\0'};

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

json spec_to_json(const DatasetSpec& s) {
    return json{{"canvas", s.canvas},
                {"samples_per_class", s.samples_per_class},
                {"families", s.families},
                {"colors", s.colors},
                {"train_classes", s.train_classes},
                {"val_classes", s.val_classes},
                {"test_classes", s.test_classes},
                {"noise_std", s.noise_std}};
}

DatasetSpec spec_from_json(const json& j) {
    DatasetSpec s;
    s.canvas = j.at("canvas");
    s.samples_per_class = j.at("samples_per_class");
    s.families = j.at("families").get<std::vector<std::string>>();
    s.colors = j.at("colors").get<std::vector<std::string>>();
    s.train_classes = j.at("train_classes");
    s.val_classes = j.at("val_classes");
    s.test_classes = j.at("test_classes");
    s.noise_std = j.at("noise_std");
    return s;
}

std::string mask_to_string(const std::vector<std::uint8_t>& mask) {
    std::string s(mask.size(), '0');
    for (size_t i = 0; i < mask.size(); ++i)
        if (mask[i]) s[i] = '1';
    return s;
}

}  // namespace

void write_image(const std::string& path, const std::vector<float>& chw, int channels,
                 int height, int width) {
    if (chw.size() != static_cast<size_t>(channels) * height * width)
        throw std::invalid_argument("write_image: size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("write_image: cannot open " + path);
    os.write(kImageMagic, 7);
    write_u32(os, static_cast<std::uint32_t>(width));
    write_u32(os, static_cast<std::uint32_t>(height));
    write_u32(os, static_cast<std::uint32_t>(channels));
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(chw.data()),
             static_cast<std::streamsize>(chw.size() * 4));
}

std::vector<float> read_image(const std::string& path, int& channels, int& height,
                              int& width) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("read_image: cannot open " + path);
    char magic[7];
    is.read(magic, 7);
    if (std::memcmp(magic, kImageMagic, 7) != 0)
        throw std::runtime_error("read_image: bad magic in " + path);
    width = static_cast<int>(read_u32(is));
    height = static_cast<int>(read_u32(is));
    channels = static_cast<int>(read_u32(is));
    std::vector<float> out(static_cast<size_t>(channels) * height * width);
    is.read(reinterpret_cast<char*>(out.data()),
            static_cast<std::streamsize>(out.size() * 4));
    if (!is) throw std::runtime_error("read_image: truncated file " + path);
    return out;
}

std::uint64_t manifest_hash(const DatasetManifest& m) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a_str(spec_to_json(m.spec).dump(), h);
    h = fnv1a_bytes(&m.seed, sizeof(m.seed), h);
    for (const auto& s : m.samples) {
        h = fnv1a_bytes(s.image.data(), s.image.size() * sizeof(float), h);
        h = fnv1a_bytes(s.mask.data(), s.mask.size(), h);
        h = fnv1a_bytes(s.bbox.data(), sizeof(s.bbox), h);
        for (const auto& kp : s.keypoints) {
            h = fnv1a_bytes(&kp.x, sizeof(kp.x), h);
            h = fnv1a_bytes(&kp.y, sizeof(kp.y), h);
        }
    }
    return h;
}

void save_manifest(const DatasetManifest& m, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "images");
    json j;
    j["spec"] = spec_to_json(m.spec);
    j["seed"] = m.seed;
    j["spec_hash"] = manifest_hash(m);
    for (const auto& [id, c] : m.classes)
        j["classes"].push_back({{"id", c.id},
                                {"name", c.name},
                                {"family", c.family},
                                {"color", c.color},
                                {"split", c.split}});
    j["samples"] = json::array();
    for (const auto& s : m.samples) {
        char name[64];
        std::snprintf(name, sizeof(name), "images/sample_%05d.img", s.id);
        write_image((fs::path(dir) / name).string(), s.image, 3, s.size, s.size);
        json kps = json::array();
        for (const auto& kp : s.keypoints)
            kps.push_back({kp.x, kp.y, kp.visible ? 1 : 0});
        j["samples"].push_back({{"id", s.id},
                                {"class_id", s.class_id},
                                {"split", s.split},
                                {"size", s.size},
                                {"image", name},
                                {"bbox", s.bbox},
                                {"keypoints", kps},
                                {"mask", mask_to_string(s.mask)},
                                {"pose", {s.cx, s.cy, s.rot, s.scl}},
                                {"family", s.family},
                                {"color", s.color}});
    }
    std::ofstream os(fs::path(dir) / "manifest.json");
    os << j.dump(1) << "\n";
}

DatasetManifest load_manifest(const std::string& dir) {
    std::ifstream is(fs::path(dir) / "manifest.json");
    if (!is) throw std::runtime_error("load_manifest: cannot open manifest in " + dir);
    json j = json::parse(is);
    DatasetManifest m;
    m.spec = spec_from_json(j.at("spec"));
    m.seed = j.at("seed");
    for (const auto& cj : j.at("classes")) {
        ClassInfo c;
        c.id = cj.at("id");
        c.name = cj.at("name");
        c.family = cj.at("family");
        c.color = cj.at("color");
        c.split = cj.at("split");
        m.classes[c.id] = c;
    }
    for (const auto& sj : j.at("samples")) {
        Sample s;
        s.id = sj.at("id");
        s.class_id = sj.at("class_id");
        s.split = sj.at("split");
        s.size = sj.at("size");
        s.image_path = (fs::path(dir) / sj.at("image").get<std::string>()).string();
        int ch, hh, ww;
        s.image = read_image(s.image_path, ch, hh, ww);
        if (ch != 3 || hh != s.size || ww != s.size)
            throw std::runtime_error("load_manifest: image geometry mismatch");
        auto bb = sj.at("bbox");
        s.bbox = {bb[0], bb[1], bb[2], bb[3]};
        for (const auto& kj : sj.at("keypoints"))
            s.keypoints.push_back(Keypoint{kj[0], kj[1], kj[2].get<int>() > 0});
        std::string ms = sj.at("mask");
        s.mask.resize(ms.size());
        for (size_t i = 0; i < ms.size(); ++i) s.mask[i] = ms[i] == '1' ? 1 : 0;
        auto pose = sj.at("pose");
        s.cx = pose[0];
        s.cy = pose[1];
        s.rot = pose[2];
        s.scl = pose[3];
        s.family = sj.at("family");
        s.color = sj.at("color");
        m.samples.push_back(std::move(s));
    }
    m.check_split_disjointness();
    return m;
}

CocoLoadResult load_coco_keypoints(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("load_coco_keypoints: cannot open " + path);
    json j;
    try {
        j = json::parse(is);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(std::string("load_coco_keypoints: malformed JSON: ") +
                                 e.what());
    }
    for (const char* key : {"images", "annotations", "categories"})
        if (!j.contains(key))
            throw std::runtime_error(std::string("load_coco_keypoints: missing key '") +
                                     key + "'");

    CocoLoadResult res;
    std::map<int, std::pair<std::string, int>> image_info;  // id -> (file, max side)
    for (const auto& im : j["images"]) {
        int w = im.value("width", 0), h = im.value("height", 0);
        image_info[im.at("id")] = {im.value("file_name", std::string()), std::max(w, h)};
    }
    for (const auto& cat : j["categories"]) {
        ClassInfo c;
        c.id = cat.at("id");
        c.name = cat.value("name", std::string("category_") + std::to_string(c.id));
        c.split = "train";
        res.manifest.classes[c.id] = c;
    }
    int sample_id = 0;
    for (const auto& an : j["annotations"]) {
        if (!an.contains("bbox") || an["bbox"].size() != 4) {
            ++res.skipped_without_bbox;
            continue;
        }
        Sample s;
        s.id = sample_id++;
        s.class_id = an.at("category_id");
        s.split = "train";
        auto bb = an["bbox"];
        s.bbox = {bb[0], bb[1], bb[2], bb[3]};
        auto info = image_info.find(an.at("image_id").get<int>());
        if (info != image_info.end()) {
            s.image_path = info->second.first;
            s.size = info->second.second;
        }
        if (an.contains("keypoints")) {
            const auto& kp = an["keypoints"];
            for (size_t i = 0; i + 2 < kp.size(); i += 3) {
                int v = kp[i + 2];
                if (v > 0)
                    s.keypoints.push_back(
                        Keypoint{kp[i].get<double>(), kp[i + 1].get<double>(), true});
            }
        }
        res.manifest.samples.push_back(std::move(s));
    }
    return res;
}

}  // namespace uniap::synthdata
