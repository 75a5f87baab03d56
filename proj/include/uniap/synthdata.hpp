#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace uniap::synthdata {

struct Keypoint {
    double x = 0, y = 0;
    bool visible = true;
};

// One rendered shape instance with analytic labels.
struct Sample {
    int id = 0;
    int class_id = 0;
    std::string split;  // train / val / test
    int size = 0;       // square canvas side in pixels
    std::vector<float> image;   // 3*size*size, [0,1], CHW
    std::array<double, 4> bbox{};  // x, y, w, h
    std::vector<Keypoint> keypoints;
    std::vector<std::uint8_t> mask;  // size*size, {0,1}
    // pose used to render; kept so labels can be re-derived
    double cx = 0, cy = 0, rot = 0, scl = 0;
    int family = 0, color = 0;
    std::string image_path;  // set when images live on disk
};

struct ClassInfo {
    int id = 0;
    std::string name;
    int family = 0, color = 0;
    std::string split;
};

struct DatasetSpec {
    int canvas = 48;
    int samples_per_class = 12;
    std::vector<std::string> families = {"triangle", "square", "circle"};
    std::vector<std::string> colors = {"red", "green"};
    int train_classes = 4, val_classes = 1, test_classes = 1;
    double noise_std = 0.02;
};

struct DatasetManifest {
    DatasetSpec spec;
    std::uint64_t seed = 0;
    std::map<int, ClassInfo> classes;
    std::vector<Sample> samples;

    std::vector<int> class_ids(const std::string& split) const;
    void check_split_disjointness() const;
};

// Keypoint schema size for a shape family index.
int family_keypoint_count(int family);
const std::vector<std::string>& family_names();

DatasetManifest generate_dataset(const DatasetSpec& spec, std::uint64_t seed);

// Gaussian heatmap with peak value 1 at (kx, ky), std sigma_px.
std::vector<float> rasterize_keypoint_heatmap(double kx, double ky, double sigma_px,
                                              int size);

struct CroppedSample {
    int size = 0;
    std::vector<float> image;            // 3*size*size
    std::vector<float> mask;             // size*size, {0,1}
    std::vector<Keypoint> keypoints;     // in crop coordinates
    int class_id = 0;
};

// Bilinear crop of the bbox region resized to `out_size`; keypoints follow
// the same affine map, the mask is nearest-neighbour resampled.
CroppedSample crop_and_resize(const Sample& sample, int out_size);

// Re-renders the sample's mask from its stored pose; used by the
// label/image correspondence check.
std::vector<std::uint8_t> render_mask(const Sample& s);

std::uint64_t manifest_hash(const DatasetManifest& m);

void save_manifest(const DatasetManifest& m, const std::string& dir);
DatasetManifest load_manifest(const std::string& dir);

struct CocoLoadResult {
    DatasetManifest manifest;
    int skipped_without_bbox = 0;
};

// Minimal COCO-keypoints ingester: images / annotations / categories with
// bbox and [x,y,v] triplets. Annotation-only; pixels are not decoded.
CocoLoadResult load_coco_keypoints(const std::string& path);

// Raw image container: magic "UAPIMG1", u32 width/height/channels (LE),
// then row-major f32 LE samples, channel-major planes.
void write_image(const std::string& path, const std::vector<float>& chw, int channels,
                 int height, int width);
std::vector<float> read_image(const std::string& path, int& channels, int& height,
                              int& width);

}  // namespace uniap::synthdata
