#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskdiff/image.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

enum class Split { train, val, test };
enum class Provenance { real, d1, d2, toy };

std::string to_string(Split s);
std::string to_string(Provenance p);
Split parse_split(const std::string& s);
Provenance parse_provenance(const std::string& s);

struct DatasetRecord {
  std::string image;                // path relative to the manifest file
  std::optional<std::string> mask;  // same
  Split split = Split::train;
  std::map<std::string, double> metadata;
  Provenance provenance = Provenance::real;
  std::string tag;  // optional evaluation sub-group (e.g. "seen"/"unseen"); empty = none
};

inline constexpr const char* kManifestVersion = "1";

struct Manifest {
  std::string version = kManifestVersion;
  int num_classes = 4;
  std::vector<std::string> class_names;
  std::vector<DatasetRecord> records;
  std::filesystem::path base_dir;  // directory of the manifest file; not serialized

  [[nodiscard]] std::filesystem::path resolve(const std::string& ref) const { return base_dir / ref; }
  [[nodiscard]] Manifest filter(Split split) const;
  void validate() const;
};

Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const Manifest& manifest, const std::filesystem::path& path);
std::string manifest_to_json(const Manifest& manifest);

// A record with its pixels loaded.
struct Sample {
  Tensor<float> image;  // (1,3,H,W) in [-1,1]
  std::optional<LabelMap> mask;
  std::map<std::string, double> metadata;
  std::string image_ref;
  std::string tag;
};

// Loads every record; masks are checked against the manifest's class count.
std::vector<Sample> load_samples(const Manifest& manifest);

// ---- tiling ---------------------------------------------------------------

struct Tile {
  Tensor<float> image;
  int y = 0;
  int x = 0;
};

// Raster-order tiles with stride patch - overlap; the last row/column is
// shifted inward so every pixel is covered.
std::vector<Tile> tile(const Tensor<float>& image, int patch, int overlap);
std::vector<int> tile_origins(int extent, int patch, int overlap);
// Inverse of tile: overlapping contributions are averaged.
Tensor<float> stitch(std::span<const Tile> tiles, int height, int width);

// ---- geometric / photometric ops -----------------------------------------

Tensor<float> rotate90(const Tensor<float>& image, int quarter_turns);
LabelMap rotate90(const LabelMap& mask, int quarter_turns);
Tensor<float> flip(const Tensor<float>& image, bool horizontal);
LabelMap flip(const LabelMap& mask, bool horizontal);
Tensor<float> crop(const Tensor<float>& image, int y, int x, int h, int w);
LabelMap crop(const LabelMap& mask, int y, int x, int h, int w);

// Displacement field sampled per pixel: the output at (y,x) reads the input at
// (y + dy, x + dx); bilinear for images, nearest for masks.
struct DisplacementField {
  int height = 0;
  int width = 0;
  std::vector<double> dy, dx;
};
DisplacementField random_elastic_field(int height, int width, double sigma, double magnitude, Rng& rng);
Tensor<float> warp(const Tensor<float>& image, const DisplacementField& field);
LabelMap warp(const LabelMap& mask, const DisplacementField& field);

enum class AugmentOp { rotate90, flip, color_shift, random_crop, elastic };

struct AugmentParams {
  int crop_size = 0;  // random_crop output side; 0 = 3/4 of the input
  double elastic_sigma = 3.0;
  double elastic_magnitude = 2.0;
  double color_jitter = 0.1;
};

struct AugmentedPair {
  Tensor<float> image;
  std::optional<LabelMap> mask;
};

// Applies ops in order. Geometric ops transform image and mask identically;
// color_shift touches only the image.
AugmentedPair augment(const Tensor<float>& image, const std::optional<LabelMap>& mask, std::span<const AugmentOp> ops,
                      Rng& rng, const AugmentParams& params = {});

enum class ResizeMode { bilinear_image, nearest_mask };
Tensor<float> resize(const Tensor<float>& image, int target, ResizeMode mode = ResizeMode::bilinear_image);
LabelMap resize(const LabelMap& mask, int target, ResizeMode mode = ResizeMode::nearest_mask);

// ---- procedural pseudo-histology -----------------------------------------

struct ToySpec {
  int n = 0;
  int resolution = 32;
  int num_classes = 4;
  std::uint64_t seed = 0;
  int n_val = 0;   // records n-n_val-n_test .. are val, the last n_test are test
  int n_test = 0;
};

struct ToySample {
  Tensor<float> image;
  LabelMap mask;
  std::map<std::string, double> metadata;
  Split split = Split::train;
};

std::vector<std::string> toy_class_names(int num_classes);
ToySample make_toy_sample(int resolution, int num_classes, std::uint64_t seed);
std::vector<ToySample> make_toy_samples(const ToySpec& spec);
// Writes images/ and masks/ under out_dir plus manifest.json; returns the manifest.
Manifest make_toy_dataset(const ToySpec& spec, const std::filesystem::path& out_dir);

}  // namespace maskdiff
