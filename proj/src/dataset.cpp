#include "eas/dataset.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "eas/rng.h"

namespace eas {

TensorF Split::batch(std::span<const std::size_t> indices) const {
  if (indices.empty()) throw DatasetError("empty batch");
  const std::size_t n = sample_size();
  std::vector<float> v(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= size()) throw DatasetError("sample index " + std::to_string(indices[i]) + " out of range");
    std::copy_n(pixels.begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n,
                v.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  return TensorF(Shape{indices.size(), channels, height, width}, std::move(v));
}

std::vector<int> Split::batch_labels(std::span<const std::size_t> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(labels.at(i));
  return out;
}

std::vector<std::size_t> Split::indices_of(std::span<const int> classes) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i)
    if (std::find(classes.begin(), classes.end(), labels[i]) != classes.end()) out.push_back(i);
  return out;
}

void Dataset::check_partition(const SuperclassPartition& partition) const {
  partition.validate(num_classes());
}

namespace {

struct SplitCounts {
  std::size_t train, val, test;
};

SplitCounts split_counts(std::size_t n, SplitFractions f) {
  if (f.train <= 0 || f.val < 0 || f.train + f.val > 1.0 + 1e-12)
    throw DatasetError("invalid split fractions " + std::to_string(f.train) + "/" + std::to_string(f.val));
  const auto train = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.train));
  const auto val = static_cast<std::size_t>(std::llround(static_cast<double>(n) * f.val));
  if (train + val > n) throw DatasetError("split fractions exceed the sample count");
  return {train, val, n - train - val};
}

void init_split(Split& s, std::size_t c, std::size_t h, std::size_t w) {
  s.channels = c;
  s.height = h;
  s.width = w;
}

void append(Split& s, std::span<const float> sample, int label) {
  s.pixels.insert(s.pixels.end(), sample.begin(), sample.end());
  s.labels.push_back(label);
}

// Bilinear upsampling of a g x g grid to h x w (cell centres aligned).
std::vector<float> smooth_field(int grid, int h, int w, Rng& rng) {
  std::vector<double> coarse(static_cast<std::size_t>(grid * grid));
  for (auto& v : coarse) v = rng.normal();
  std::vector<float> out(static_cast<std::size_t>(h * w));
  auto at = [&](int r, int c) {
    r = std::clamp(r, 0, grid - 1);
    c = std::clamp(c, 0, grid - 1);
    return coarse[static_cast<std::size_t>(r * grid + c)];
  };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double gy = (y + 0.5) * grid / h - 0.5, gx = (x + 0.5) * grid / w - 0.5;
      const int y0 = static_cast<int>(std::floor(gy)), x0 = static_cast<int>(std::floor(gx));
      const double fy = gy - y0, fx = gx - x0;
      const double v = (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) +
                       fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
      out[static_cast<std::size_t>(y * w + x)] = static_cast<float>(v);
    }
  return out;
}

}  // namespace

nlohmann::json SyntheticSpec::to_json() const {
  return {{"kind", "synthetic"},
          {"classes", classes},
          {"superclasses", superclasses},
          {"samples_per_class", samples_per_class},
          {"train_fraction", fractions.train},
          {"val_fraction", fractions.val},
          {"channels", channels},
          {"height", height},
          {"width", width},
          {"class_scale", class_scale},
          {"noise", noise},
          {"max_shift", max_shift},
          {"seed", seed}};
}

SyntheticSpec SyntheticSpec::from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.classes = j.value("classes", s.classes);
  s.superclasses = j.value("superclasses", s.superclasses);
  s.samples_per_class = j.value("samples_per_class", s.samples_per_class);
  s.fractions.train = j.value("train_fraction", s.fractions.train);
  s.fractions.val = j.value("val_fraction", s.fractions.val);
  s.channels = j.value("channels", s.channels);
  s.height = j.value("height", s.height);
  s.width = j.value("width", s.width);
  s.class_scale = j.value("class_scale", s.class_scale);
  s.noise = j.value("noise", s.noise);
  s.max_shift = j.value("max_shift", s.max_shift);
  s.seed = j.value("seed", s.seed);
  return s;
}

Dataset make_synthetic(const SyntheticSpec& spec) {
  if (spec.classes <= 0 || spec.superclasses <= 0 || spec.superclasses > spec.classes)
    throw DatasetError("synthetic spec needs 0 < superclasses <= classes");
  if (spec.samples_per_class <= 0 || spec.channels <= 0 || spec.height <= 0 || spec.width <= 0)
    throw DatasetError("synthetic spec has a non-positive size");
  const auto counts = split_counts(static_cast<std::size_t>(spec.samples_per_class), spec.fractions);
  const int h = spec.height, w = spec.width, ch = spec.channels;
  const std::size_t plane = static_cast<std::size_t>(h * w);

  Rng root(spec.seed);
  Rng proto_rng = root.split("prototypes");
  std::vector<std::vector<float>> super_proto, class_pattern;
  for (int s = 0; s < spec.superclasses; ++s) {
    std::vector<float> p;
    for (int c = 0; c < ch; ++c) {
      auto f = smooth_field(4, h, w, proto_rng);
      p.insert(p.end(), f.begin(), f.end());
    }
    super_proto.push_back(std::move(p));
  }
  for (int k = 0; k < spec.classes; ++k) {
    std::vector<float> p;
    for (int c = 0; c < ch; ++c) {
      auto f = smooth_field(8, h, w, proto_rng);
      p.insert(p.end(), f.begin(), f.end());
    }
    class_pattern.push_back(std::move(p));
  }

  Dataset d;
  d.seed = spec.seed;
  d.source = spec.to_json();
  for (Split* s : {&d.train, &d.val, &d.test})
    init_split(*s, static_cast<std::size_t>(ch), static_cast<std::size_t>(h), static_cast<std::size_t>(w));
  std::vector<float> signal(plane * static_cast<std::size_t>(ch)), sample(signal.size());
  for (int k = 0; k < spec.classes; ++k) {
    d.class_names.push_back("class" + std::to_string(k));
    const int group = k * spec.superclasses / spec.classes;
    for (std::size_t i = 0; i < signal.size(); ++i)
      signal[i] = super_proto[static_cast<std::size_t>(group)][i] +
                  static_cast<float>(spec.class_scale) * class_pattern[static_cast<std::size_t>(k)][i];
    Rng sample_rng = root.split("samples").split(static_cast<std::uint64_t>(k));
    for (int n = 0; n < spec.samples_per_class; ++n) {
      const int span = 2 * spec.max_shift + 1;
      const int dy = static_cast<int>(sample_rng.index(static_cast<std::size_t>(span))) - spec.max_shift;
      const int dx = static_cast<int>(sample_rng.index(static_cast<std::size_t>(span))) - spec.max_shift;
      const double gain = sample_rng.uniform(0.8, 1.2);
      for (int c = 0; c < ch; ++c)
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) {
            const int sy = ((y - dy) % h + h) % h, sx = ((x - dx) % w + w) % w;
            const std::size_t src = static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(sy * w + sx);
            const std::size_t dst = static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * w + x);
            sample[dst] = static_cast<float>(gain * signal[src] + spec.noise * sample_rng.normal());
          }
      const auto u = static_cast<std::size_t>(n);
      Split& target = u < counts.train ? d.train : (u < counts.train + counts.val ? d.val : d.test);
      append(target, sample, k);
    }
  }
  return d;
}

namespace {

struct Image {
  std::size_t channels = 0, height = 0, width = 0;
  std::vector<float> pixels;  // CHW in [0, 1]
};

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6" && magic != "P5") throw DatasetError(path.string() + ": only binary P5/P6 images are supported");
  auto next_int = [&]() {
    int v = 0;
    while (true) {
      in >> std::ws;
      if (in.peek() == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (!(in >> v)) throw DatasetError(path.string() + ": malformed header");
      return v;
    }
  };
  const int w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255)
    throw DatasetError(path.string() + ": unsupported size or depth");
  in.get();  // single whitespace before the raster
  const std::size_t c = magic == "P6" ? 3 : 1;
  std::vector<unsigned char> raw(c * static_cast<std::size_t>(w * h));
  if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw DatasetError(path.string() + ": truncated raster");
  Image img{c, static_cast<std::size_t>(h), static_cast<std::size_t>(w), std::vector<float>(raw.size())};
  const std::size_t plane = img.height * img.width;
  for (std::size_t p = 0; p < plane; ++p)
    for (std::size_t k = 0; k < c; ++k) img.pixels[k * plane + p] = raw[p * c + k] / static_cast<float>(maxval);
  return img;
}

}  // namespace

Dataset load_image_directory(const std::filesystem::path& root, SplitFractions fractions, std::uint64_t seed) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DatasetError("dataset directory " + root.string() + " does not exist");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw DatasetError(root.string() + " has no class subfolders");

  Dataset d;
  d.seed = seed;
  d.source = {{"kind", "directory"},
              {"root", root.string()},
              {"train_fraction", fractions.train},
              {"val_fraction", fractions.val},
              {"seed", seed}};
  Rng rng = Rng(seed).split("directory-split");
  std::size_t C = 0, H = 0, W = 0;
  for (std::size_t k = 0; k < class_dirs.size(); ++k) {
    d.class_names.push_back(class_dirs[k].filename().string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[k])) {
      const auto ext = e.path().extension().string();
      if (e.is_regular_file() && (ext == ".ppm" || ext == ".pgm")) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw DatasetError("class folder " + class_dirs[k].string() + " has no images");
    std::shuffle(files.begin(), files.end(), rng.engine());
    const auto counts = split_counts(files.size(), fractions);
    for (std::size_t i = 0; i < files.size(); ++i) {
      Image img = read_pnm(files[i]);
      if (C == 0) {
        C = img.channels;
        H = img.height;
        W = img.width;
        for (Split* s : {&d.train, &d.val, &d.test}) init_split(*s, C, H, W);
      } else if (img.channels != C || img.height != H || img.width != W) {
        throw DatasetError(files[i].string() + ": image size differs from the first image");
      }
      Split& target = i < counts.train ? d.train : (i < counts.train + counts.val ? d.val : d.test);
      append(target, img.pixels, static_cast<int>(k));
    }
  }
  // Per-channel standardisation with statistics from the training split.
  const std::size_t plane = H * W;
  for (std::size_t c = 0; c < C; ++c) {
    double sum = 0, sq = 0;
    std::size_t n = 0;
    for (std::size_t s = 0; s < d.train.size(); ++s)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = d.train.pixels[s * C * plane + c * plane + p];
        sum += v;
        sq += v * v;
        ++n;
      }
    const double mean = n ? sum / static_cast<double>(n) : 0.0;
    const double sd = n ? std::sqrt(std::max(sq / static_cast<double>(n) - mean * mean, 1e-12)) : 1.0;
    for (Split* sp : {&d.train, &d.val, &d.test})
      for (std::size_t s = 0; s < sp->size(); ++s)
        for (std::size_t p = 0; p < plane; ++p) {
          float& v = sp->pixels[s * C * plane + c * plane + p];
          v = static_cast<float>((v - mean) / sd);
        }
  }
  return d;
}

}  // namespace eas
