#include "maskdiff/datapipe.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "json.hpp"

#include "maskdiff/png_io.hpp"

namespace maskdiff {

using nlohmann::json;

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::real: return "real";
    case Provenance::d1: return "d1";
    case Provenance::d2: return "d2";
    case Provenance::toy: return "toy";
  }
  return "real";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ValidationError("unknown split: " + s);
}

Provenance parse_provenance(const std::string& s) {
  if (s == "real") return Provenance::real;
  if (s == "d1") return Provenance::d1;
  if (s == "d2") return Provenance::d2;
  if (s == "toy") return Provenance::toy;
  throw ValidationError("unknown provenance: " + s);
}

Manifest Manifest::filter(Split split) const {
  Manifest out = *this;
  out.records.clear();
  for (const auto& r : records)
    if (r.split == split) out.records.push_back(r);
  return out;
}

void Manifest::validate() const {
  if (version != kManifestVersion) throw ValidationError("unrecognized manifest version: " + version);
  if (num_classes < 1) throw ValidationError("manifest num_classes must be >= 1");
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (r.image.empty()) throw ValidationError("manifest record without image reference");
    if (!seen.insert(r.image).second) throw ValidationError("duplicate image reference in manifest: " + r.image);
  }
}

std::string manifest_to_json(const Manifest& m) {
  json j;
  j["version"] = m.version;
  j["num_classes"] = m.num_classes;
  j["class_names"] = m.class_names;
  j["records"] = json::array();
  for (const auto& r : m.records) {
    json rec;
    rec["image"] = r.image;
    if (r.mask) rec["mask"] = *r.mask;
    rec["split"] = to_string(r.split);
    rec["metadata"] = json::object();
    for (const auto& [k, v] : r.metadata) rec["metadata"][k] = v;
    rec["provenance"] = to_string(r.provenance);
    if (!r.tag.empty()) rec["tag"] = r.tag;
    j["records"].push_back(std::move(rec));
  }
  return j.dump(2) + "\n";
}

void save_manifest(const Manifest& manifest, const std::filesystem::path& path) {
  manifest.validate();
  const std::string text = manifest_to_json(manifest);
  write_file(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  Manifest m;
  try {
    const json j = json::parse(in);
    m.version = j.at("version").get<std::string>();
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
    for (const auto& rec : j.at("records")) {
      DatasetRecord r;
      r.image = rec.at("image").get<std::string>();
      if (rec.contains("mask") && !rec["mask"].is_null()) r.mask = rec["mask"].get<std::string>();
      r.split = parse_split(rec.value("split", std::string("train")));
      if (rec.contains("metadata")) {
        for (const auto& [k, v] : rec["metadata"].items()) r.metadata[k] = v.get<double>();
      }
      r.provenance = parse_provenance(rec.value("provenance", std::string("real")));
      r.tag = rec.value("tag", std::string());
      m.records.push_back(std::move(r));
    }
  } catch (const json::exception& e) {
    throw ValidationError("malformed manifest " + path.string() + ": " + e.what());
  }
  m.base_dir = path.parent_path();
  m.validate();
  return m;
}

std::vector<Sample> load_samples(const Manifest& manifest) {
  std::vector<Sample> out;
  out.reserve(manifest.records.size());
  for (const auto& r : manifest.records) {
    Sample s;
    s.image = read_image(manifest.resolve(r.image));
    if (r.mask) {
      LabelMap m = read_mask(manifest.resolve(*r.mask));
      if (m.height != s.image.h() || m.width != s.image.w()) {
        throw ValidationError("mask " + *r.mask + " does not match image dimensions of " + r.image);
      }
      if (m.max_label() >= manifest.num_classes) {
        throw ValidationError("mask " + *r.mask + " has class index " + std::to_string(m.max_label()) +
                              " >= num_classes " + std::to_string(manifest.num_classes));
      }
      s.mask = std::move(m);
    }
    s.metadata = r.metadata;
    s.image_ref = r.image;
    s.tag = r.tag;
    out.push_back(std::move(s));
  }
  return out;
}

// ---- tiling ---------------------------------------------------------------

std::vector<int> tile_origins(int extent, int patch, int overlap) {
  if (patch < 1 || patch > extent) {
    throw DomainError("tile: patch " + std::to_string(patch) + " larger than image extent " + std::to_string(extent));
  }
  if (overlap < 0 || overlap >= patch) throw DomainError("tile: overlap must be in [0, patch)");
  const int stride = patch - overlap;
  std::vector<int> origins;
  for (int o = 0;; o += stride) {
    if (o + patch >= extent) {
      origins.push_back(extent - patch);
      break;
    }
    origins.push_back(o);
  }
  return origins;
}

std::vector<Tile> tile(const Tensor<float>& image, int patch, int overlap) {
  const auto ys = tile_origins(image.h(), patch, overlap);
  const auto xs = tile_origins(image.w(), patch, overlap);
  std::vector<Tile> tiles;
  for (int y : ys)
    for (int x : xs) tiles.push_back({crop(image, y, x, patch, patch), y, x});
  return tiles;
}

Tensor<float> stitch(std::span<const Tile> tiles, int height, int width) {
  if (tiles.empty()) throw DomainError("stitch: no tiles");
  const int c = tiles.front().image.c();
  std::vector<double> sum(static_cast<std::size_t>(c) * height * width, 0.0);
  std::vector<int> count(static_cast<std::size_t>(height) * width, 0);
  for (const auto& t : tiles) {
    for (int y = 0; y < t.image.h(); ++y)
      for (int x = 0; x < t.image.w(); ++x) {
        const int gy = t.y + y, gx = t.x + x;
        if (gy >= height || gx >= width) throw ShapeError("stitch: tile exceeds target extent");
        ++count[static_cast<std::size_t>(gy) * width + gx];
        for (int ch = 0; ch < c; ++ch) {
          sum[(static_cast<std::size_t>(ch) * height + gy) * width + gx] += t.image.at(0, ch, y, x);
        }
      }
  }
  Tensor<float> out(Shape{1, c, height, width});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        const int n = count[static_cast<std::size_t>(y) * width + x];
        if (n == 0) throw ShapeError("stitch: pixel not covered by any tile");
        out.at(0, ch, y, x) = static_cast<float>(sum[(static_cast<std::size_t>(ch) * height + y) * width + x] / n);
      }
  return out;
}

// ---- geometric ops --------------------------------------------------------

namespace {

// Maps an output coordinate to its source under k counter-clockwise quarter turns
// of a square image.
std::pair<int, int> rotated_source(int y, int x, int n, int k) {
  switch (k) {
    case 1: return {x, n - 1 - y};
    case 2: return {n - 1 - y, n - 1 - x};
    case 3: return {n - 1 - x, y};
    default: return {y, x};
  }
}

int normalize_turns(int k) { return ((k % 4) + 4) % 4; }

}  // namespace

Tensor<float> rotate90(const Tensor<float>& image, int quarter_turns) {
  if (image.h() != image.w()) throw ShapeError("rotate90 requires a square image");
  const int k = normalize_turns(quarter_turns);
  if (k == 0) return image;
  const int n = image.h();
  Tensor<float> out(image.shape());
  for (int b = 0; b < image.n(); ++b)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
          const auto [sy, sx] = rotated_source(y, x, n, k);
          out.at(b, c, y, x) = image.at(b, c, sy, sx);
        }
  return out;
}

LabelMap rotate90(const LabelMap& mask, int quarter_turns) {
  if (mask.height != mask.width) throw ShapeError("rotate90 requires a square mask");
  const int k = normalize_turns(quarter_turns);
  if (k == 0) return mask;
  const int n = mask.height;
  LabelMap out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      const auto [sy, sx] = rotated_source(y, x, n, k);
      out.at(y, x) = mask.at(sy, sx);
    }
  return out;
}

Tensor<float> flip(const Tensor<float>& image, bool horizontal) {
  Tensor<float> out(image.shape());
  const int h = image.h(), w = image.w();
  for (int b = 0; b < image.n(); ++b)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
          out.at(b, c, y, x) = horizontal ? image.at(b, c, y, w - 1 - x) : image.at(b, c, h - 1 - y, x);
        }
  return out;
}

LabelMap flip(const LabelMap& mask, bool horizontal) {
  LabelMap out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      out.at(y, x) = horizontal ? mask.at(y, mask.width - 1 - x) : mask.at(mask.height - 1 - y, x);
    }
  return out;
}

Tensor<float> crop(const Tensor<float>& image, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > image.h() || x0 + w > image.w()) {
    throw DomainError("crop window exceeds image bounds");
  }
  Tensor<float> out(Shape{image.n(), image.c(), h, w});
  for (int b = 0; b < image.n(); ++b)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out.at(b, c, y, x) = image.at(b, c, y0 + y, x0 + x);
  return out;
}

LabelMap crop(const LabelMap& mask, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h < 1 || w < 1 || y0 + h > mask.height || x0 + w > mask.width) {
    throw DomainError("crop window exceeds mask bounds");
  }
  LabelMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) out.at(y, x) = mask.at(y0 + y, x0 + x);
  return out;
}

namespace {

std::vector<double> gaussian_smooth(const std::vector<double>& f, int h, int w, double sigma) {
  if (sigma <= 0) return f;
  const int radius = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double ks = 0;
  for (int i = -radius; i <= radius; ++i) ks += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  std::vector<double> tmp(f.size()), out(f.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * f[y * w + std::clamp(x + i, 0, w - 1)];
      tmp[y * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0;
      for (int i = -radius; i <= radius; ++i) s += k[i + radius] * tmp[std::clamp(y + i, 0, h - 1) * w + x];
      out[y * w + x] = s;
    }
  return out;
}

}  // namespace

DisplacementField random_elastic_field(int height, int width, double sigma, double magnitude, Rng& rng) {
  DisplacementField f{height, width, {}, {}};
  const std::size_t n = static_cast<std::size_t>(height) * width;
  std::vector<double> dy(n), dx(n);
  for (std::size_t i = 0; i < n; ++i) {
    dy[i] = rng.uniform(-1.0, 1.0);
    dx[i] = rng.uniform(-1.0, 1.0);
  }
  dy = gaussian_smooth(dy, height, width, sigma);
  dx = gaussian_smooth(dx, height, width, sigma);
  double peak = 0;
  for (std::size_t i = 0; i < n; ++i) peak = std::max({peak, std::abs(dy[i]), std::abs(dx[i])});
  const double s = peak > 0 ? magnitude / peak : 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    dy[i] *= s;
    dx[i] *= s;
  }
  f.dy = std::move(dy);
  f.dx = std::move(dx);
  return f;
}

Tensor<float> warp(const Tensor<float>& image, const DisplacementField& f) {
  if (f.height != image.h() || f.width != image.w()) throw ShapeError("warp: field does not match image");
  Tensor<float> out(image.shape());
  const int h = image.h(), w = image.w();
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * w + x;
      const double sy = std::clamp(y + f.dy[i], 0.0, h - 1.0);
      const double sx = std::clamp(x + f.dx[i], 0.0, w - 1.0);
      const int y0 = static_cast<int>(std::floor(sy)), x0 = static_cast<int>(std::floor(sx));
      const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
      const double wy = sy - y0, wx = sx - x0;
      for (int b = 0; b < image.n(); ++b)
        for (int c = 0; c < image.c(); ++c) {
          const double v = (1 - wy) * ((1 - wx) * image.at(b, c, y0, x0) + wx * image.at(b, c, y0, x1)) +
                           wy * ((1 - wx) * image.at(b, c, y1, x0) + wx * image.at(b, c, y1, x1));
          out.at(b, c, y, x) = static_cast<float>(v);
        }
    }
  return out;
}

LabelMap warp(const LabelMap& mask, const DisplacementField& f) {
  if (f.height != mask.height || f.width != mask.width) throw ShapeError("warp: field does not match mask");
  LabelMap out(mask.height, mask.width);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x) {
      const std::size_t i = static_cast<std::size_t>(y) * mask.width + x;
      const int sy = std::clamp(static_cast<int>(std::lround(y + f.dy[i])), 0, mask.height - 1);
      const int sx = std::clamp(static_cast<int>(std::lround(x + f.dx[i])), 0, mask.width - 1);
      out.at(y, x) = mask.at(sy, sx);
    }
  return out;
}

AugmentedPair augment(const Tensor<float>& image, const std::optional<LabelMap>& mask, std::span<const AugmentOp> ops,
                      Rng& rng, const AugmentParams& params) {
  if (mask && (mask->height != image.h() || mask->width != image.w())) {
    throw ShapeError("augment: mask and image dimensions differ");
  }
  AugmentedPair out{image, mask};
  for (AugmentOp op : ops) {
    switch (op) {
      case AugmentOp::rotate90: {
        const int k = rng.uniform_int(0, 3);
        out.image = rotate90(out.image, k);
        if (out.mask) out.mask = rotate90(*out.mask, k);
        break;
      }
      case AugmentOp::flip: {
        for (bool horizontal : {true, false}) {
          if (rng.uniform() < 0.5) {
            out.image = flip(out.image, horizontal);
            if (out.mask) out.mask = flip(*out.mask, horizontal);
          }
        }
        break;
      }
      case AugmentOp::color_shift: {
        const int hw = out.image.h() * out.image.w();
        for (int c = 0; c < out.image.c(); ++c) {
          const double gain = 1.0 + rng.uniform(-params.color_jitter, params.color_jitter);
          const double shift = rng.uniform(-params.color_jitter, params.color_jitter);
          for (int b = 0; b < out.image.n(); ++b) {
            float* p = out.image.data() + out.image.index(b, c, 0, 0);
            for (int i = 0; i < hw; ++i) p[i] = static_cast<float>(std::clamp(p[i] * gain + shift, -1.0, 1.0));
          }
        }
        break;
      }
      case AugmentOp::random_crop: {
        const int side = params.crop_size > 0 ? params.crop_size : std::max(1, out.image.h() * 3 / 4);
        if (side > out.image.h() || side > out.image.w()) {
          throw DomainError("random_crop: crop " + std::to_string(side) + " larger than input");
        }
        const int y = rng.uniform_int(0, out.image.h() - side);
        const int x = rng.uniform_int(0, out.image.w() - side);
        out.image = crop(out.image, y, x, side, side);
        if (out.mask) out.mask = crop(*out.mask, y, x, side, side);
        break;
      }
      case AugmentOp::elastic: {
        const auto field = random_elastic_field(out.image.h(), out.image.w(), params.elastic_sigma,
                                                params.elastic_magnitude, rng);
        out.image = warp(out.image, field);
        if (out.mask) out.mask = warp(*out.mask, field);
        break;
      }
    }
  }
  return out;
}

Tensor<float> resize(const Tensor<float>& image, int target, ResizeMode mode) {
  if (target < 1) throw DomainError("resize: target must be >= 1");
  if (mode == ResizeMode::bilinear_image) return resize_bilinear(image, target, target);
  Tensor<float> out(Shape{image.n(), image.c(), target, target});
  for (int b = 0; b < image.n(); ++b)
    for (int c = 0; c < image.c(); ++c)
      for (int y = 0; y < target; ++y)
        for (int x = 0; x < target; ++x) {
          const int sy = std::min(static_cast<int>((y + 0.5) * image.h() / target), image.h() - 1);
          const int sx = std::min(static_cast<int>((x + 0.5) * image.w() / target), image.w() - 1);
          out.at(b, c, y, x) = image.at(b, c, sy, sx);
        }
  return out;
}

LabelMap resize(const LabelMap& mask, int target, ResizeMode mode) {
  if (mode != ResizeMode::nearest_mask) throw DomainError("masks can only be resized with nearest_mask");
  return resize_nearest(mask, target, target);
}

// ---- procedural pseudo-histology -----------------------------------------

std::vector<std::string> toy_class_names(int num_classes) {
  static const char* base[] = {"background", "tubuli", "glomeruli", "vessels"};
  std::vector<std::string> names;
  for (int i = 0; i < num_classes; ++i) names.push_back(i < 4 ? base[i] : "class" + std::to_string(i));
  return names;
}

namespace {

struct Rgb {
  double r, g, b;
};

// Shape family per foreground class: 0 small filled ellipses, 1 rings,
// 2 elongated bars. Classes beyond 3 reuse families with a rotated hue.
int family_of(int cls) { return (cls - 1) % 3; }

Rgb class_color(int cls) {
  switch (cls) {
    case 1: return {0.56, 0.30, 0.62};
    case 2: return {0.44, 0.32, 0.68};
    case 3: return {0.78, 0.32, 0.42};
    default: {
      const double hue = 0.37 * cls;
      return {0.5 + 0.3 * std::sin(hue), 0.5 + 0.3 * std::sin(hue + 2.1), 0.5 + 0.3 * std::sin(hue + 4.2)};
    }
  }
}

class Canvas {
 public:
  explicit Canvas(int r) : r_(r), px_(3 * static_cast<std::size_t>(r) * r) {}

  void blend(int y, int x, Rgb c, double a) {
    if (a <= 0) return;
    a = std::min(a, 1.0);
    const std::size_t i = static_cast<std::size_t>(y) * r_ + x;
    const std::size_t plane = static_cast<std::size_t>(r_) * r_;
    px_[i] += a * (c.r - px_[i]);
    px_[plane + i] += a * (c.g - px_[plane + i]);
    px_[2 * plane + i] += a * (c.b - px_[2 * plane + i]);
  }
  [[nodiscard]] std::vector<double>& pixels() { return px_; }

 private:
  int r_;
  std::vector<double> px_;
};

constexpr double kEdgeSoftness = 1.2;  // pixels over which a boundary fades

double edge_alpha(double signed_dist) { return std::clamp(0.5 - signed_dist / kEdgeSoftness, 0.0, 1.0); }

}  // namespace

ToySample make_toy_sample(int resolution, int num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ValidationError("toy data needs at least 2 classes");
  if (resolution < 8) throw ValidationError("toy resolution must be >= 8");
  Rng rng(seed);
  const int r = resolution;
  const double pi = std::numbers::pi;
  ToySample out;
  for (int attempt = 0; attempt < 64; ++attempt) {
    Canvas canvas(r);
    LabelMap mask(r, r);
    const Rgb stain{rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
    const double bright = rng.uniform(0.75, 1.1);
    const double zoom = rng.uniform(0.75, 1.3);
    const double drift = rng.uniform(-0.08, 0.08);
    const Rgb bg{0.86 + stain.r, 0.62 + stain.g, 0.76 + stain.b};
    double wave[3][4];
    for (auto& w : wave) {
      w[0] = rng.uniform(0.5, 4.0) * 2 * pi / r;
      w[1] = rng.uniform(0.0, 2 * pi);
      w[2] = rng.uniform(0.0, pi);
      w[3] = rng.uniform(0.01, 0.04);
    }
    for (int y = 0; y < r; ++y)
      for (int x = 0; x < r; ++x) {
        double t = 0;
        for (const auto& w : wave) t += w[3] * std::sin(w[0] * (x * std::cos(w[2]) + y * std::sin(w[2])) + w[1]);
        canvas.blend(y, x, {bg.r + t, bg.g + t, bg.b + t}, 1.0);
      }

    // unlabelled thin fibres
    const int fibres = rng.uniform_int(1, 3);
    for (int f = 0; f < fibres; ++f) {
      const double cy = rng.uniform(0.0, 1.0) * r, cx = rng.uniform(0.0, 1.0) * r;
      const double theta = rng.uniform(0.0, pi), half_len = rng.uniform(0.2, 0.45) * r;
      const double width = rng.uniform(0.5, 0.9);
      const Rgb col{0.80 + stain.r, 0.46 + stain.g, 0.58 + stain.b};
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double u = dx * std::cos(theta) + dy * std::sin(theta);
          const double v = -dx * std::sin(theta) + dy * std::cos(theta);
          if (std::abs(u) > half_len) continue;
          canvas.blend(y, x, col, 0.8 * edge_alpha(std::abs(v) - width));
        }
    }

    std::vector<int> order;
    for (int c = 2; c < num_classes; ++c) order.push_back(c);
    order.push_back(1);
    for (int cls : order) {
      const int fam = family_of(cls);
      const int count = fam == 0 ? rng.uniform_int(2, 5) : rng.uniform_int(1, 2);
      const Rgb base = class_color(cls);
      for (int k = 0; k < count; ++k) {
        const Rgb col{base.r + stain.r + drift * (cls - 2) + rng.uniform(-0.06, 0.06),
                      base.g + stain.g + rng.uniform(-0.06, 0.06), base.b + stain.b - drift * (cls - 2) + rng.uniform(-0.06, 0.06)};
        const double cy = rng.uniform(0.1, 0.9) * r, cx = rng.uniform(0.1, 0.9) * r;
        const double theta = rng.uniform(0.0, pi);
        double a = 0, b = 0, inner = 0;
        if (fam == 0) {
          a = rng.uniform(0.06, 0.10) * r * zoom;
          b = a * rng.uniform(0.6, 1.0);
        } else if (fam == 1) {
          a = b = rng.uniform(0.13, 0.19) * r * zoom;
          inner = a - rng.uniform(0.05, 0.07) * r * zoom;
        } else {
          a = rng.uniform(0.18, 0.28) * r * zoom;
          b = rng.uniform(0.045, 0.065) * r * zoom;
        }
        const Rgb lumen{bg.r + 0.04, bg.g + 0.06, bg.b + 0.04};
        for (int y = 0; y < r; ++y)
          for (int x = 0; x < r; ++x) {
            const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
            const double u = dx * std::cos(theta) + dy * std::sin(theta);
            const double v = -dx * std::sin(theta) + dy * std::cos(theta);
            const double rho = std::sqrt((u * u) / (a * a) + (v * v) / (b * b));
            const double dist = (rho - 1.0) * std::min(a, b);
            double alpha = edge_alpha(dist);
            bool inside = rho <= 1.0;
            if (fam == 1) {
              const double rin = std::sqrt(u * u + v * v);
              if (rin < inner) inside = false;
              canvas.blend(y, x, lumen, std::min(edge_alpha(rin - inner), alpha));
              alpha = std::min(alpha, edge_alpha(inner - rin));
            }
            canvas.blend(y, x, col, alpha);
            if (fam == 1 && rho <= 1.0 && !inside) mask.at(y, x) = 0;
            if (inside) mask.at(y, x) = static_cast<std::uint8_t>(cls);
          }
      }
    }

    // nuclei sprinkled over everything; labels stay those of the tissue beneath
    const int nuclei = rng.uniform_int(4, 10);
    for (int k = 0; k < nuclei; ++k) {
      const double cy = rng.uniform(0.0, 1.0) * r, cx = rng.uniform(0.0, 1.0) * r;
      const double rad = rng.uniform(0.6, 1.2);
      const Rgb col{0.36 + stain.r, 0.20 + stain.g, 0.46 + stain.b};
      for (int y = 0; y < r; ++y)
        for (int x = 0; x < r; ++x) {
          const double d = std::hypot(y + 0.5 - cy, x + 0.5 - cx) - rad;
          canvas.blend(y, x, col, 0.9 * edge_alpha(d));
        }
    }

    std::vector<int> hist(num_classes, 0);
    for (auto v : mask.labels) ++hist[v];
    bool complete = true;
    for (int c = 1; c < num_classes; ++c) complete = complete && hist[c] > 0;
    if (!complete && attempt < 63) continue;

    const auto& px = canvas.pixels();
    Tensor<float> img(Shape{1, 3, r, r});
    for (std::size_t i = 0; i < px.size(); ++i) {
      const double v = std::clamp(px[i] * bright + rng.normal() * 0.05, 0.0, 1.0);
      img[i] = from_byte(to_byte(static_cast<float>(2.0 * v - 1.0)));
    }
    const double density = 1.0 - static_cast<double>(hist[0]) / static_cast<double>(mask.size());
    out.image = std::move(img);
    out.mask = std::move(mask);
    out.metadata["density"] = density;
    out.metadata["creatinine"] = 0.8 + 2.0 * density + 0.05 * rng.normal();
    return out;
  }
  return out;
}

std::vector<ToySample> make_toy_samples(const ToySpec& spec) {
  if (spec.n < 0 || spec.n_val < 0 || spec.n_test < 0 || spec.n_val + spec.n_test > spec.n) {
    throw ValidationError("toy split sizes are inconsistent");
  }
  std::vector<ToySample> out;
  out.reserve(spec.n);
  const int first_val = spec.n - spec.n_val - spec.n_test;
  const int first_test = spec.n - spec.n_test;
  for (int i = 0; i < spec.n; ++i) {
    ToySample s = make_toy_sample(spec.resolution, spec.num_classes, derive_seed(spec.seed, i));
    s.split = i >= first_test ? Split::test : i >= first_val ? Split::val : Split::train;
    out.push_back(std::move(s));
  }
  return out;
}

Manifest make_toy_dataset(const ToySpec& spec, const std::filesystem::path& out_dir) {
  const auto samples = make_toy_samples(spec);
  Manifest m;
  m.num_classes = spec.num_classes;
  m.class_names = toy_class_names(spec.num_classes);
  m.base_dir = out_dir;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu.png", i);
    DatasetRecord r;
    r.image = std::string("images/") + name;
    r.mask = std::string("masks/") + name;
    r.split = samples[i].split;
    r.metadata = samples[i].metadata;
    r.provenance = Provenance::toy;
    write_image(out_dir / r.image, samples[i].image);
    write_mask(out_dir / *r.mask, samples[i].mask);
    m.records.push_back(std::move(r));
  }
  save_manifest(m, out_dir / "manifest.json");
  return m;
}

}  // namespace maskdiff
