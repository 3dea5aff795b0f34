#pragma once

// Synthetic two-modality scenes, raster I/O, dataset directories and
// training-time augmentation.
//
// Classes are grouped. A confounded pair {2p, 2p+1} shares one colour
// distribution in the first modality and differs only in the height raster
// (2p low, 2p+1 high). Classes beyond the pairs are singletons with their own
// colour. Scenes are layers of rectangles and ellipses over a full-image
// background; each layer draws its group uniformly and, inside a pair, is the
// high class with probability high_fraction.

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mmnet/config.hpp"
#include "mmnet/tensor_io.hpp"

namespace mmnet {

// ------------------------------------------------------------------ samples

struct Sample {
  std::string id;
  std::size_t height = 0, width = 0;
  std::vector<Tensor<float>> rasters;  // one [C,H,W] per modality, values in [0,1]
  std::vector<std::int32_t> labels;    // training target per pixel
  std::vector<std::uint32_t> label_sets;  // per-pixel class bitmask; empty unless multi-label
  std::vector<std::uint8_t> valid;        // 1 = evaluated

  std::size_t pixels() const { return height * width; }
  std::uint32_t label_set(std::size_t i) const {
    return label_sets.empty() ? (1u << labels[i]) : label_sets[i];
  }
};

struct DatasetMeta {
  std::size_t num_classes = 4;
  std::vector<std::string> modality_names{"rgb", "dsm"};
  std::vector<std::size_t> modality_channels{3, 1};
  std::size_t confounded_pairs = 2;
  bool multi_label = false;

  std::size_t group_of(std::size_t cls) const { return cls < 2 * confounded_pairs ? cls / 2 : cls - confounded_pairs; }
  std::size_t group_count() const { return num_classes - confounded_pairs; }
};

// ------------------------------------------------------------------ synthesis

struct SynthSpec {
  std::size_t num_classes = 4;
  std::size_t confounded_pairs = 2;
  std::size_t size = 64;
  std::size_t train = 200, val = 50, test = 0;
  std::size_t min_shapes = 3, max_shapes = 7;
  double noise = 0.05;
  double high_fraction = 0.5;
  double invalid_prob = 0.2;  // chance of one void rectangle per image
  double overlap_prob = 0.3;  // multi-label only: chance a shape adds to, not replaces, the label set
  bool multi_label = false;
  std::uint64_t seed = 7;

  static SynthSpec from(const KeyValues& kv) {
    SynthSpec s;
    s.num_classes = kv.number<std::size_t>("num_classes", s.num_classes);
    s.confounded_pairs = kv.number<std::size_t>("confounded_pairs", s.confounded_pairs);
    s.size = kv.number<std::size_t>("size", s.size);
    s.train = kv.number<std::size_t>("train", s.train);
    s.val = kv.number<std::size_t>("val", s.val);
    s.test = kv.number<std::size_t>("test", s.test);
    s.min_shapes = kv.number<std::size_t>("min_shapes", s.min_shapes);
    s.max_shapes = kv.number<std::size_t>("max_shapes", s.max_shapes);
    s.noise = kv.number<double>("noise", s.noise);
    s.high_fraction = kv.number<double>("high_fraction", s.high_fraction);
    s.invalid_prob = kv.number<double>("invalid_prob", s.invalid_prob);
    s.overlap_prob = kv.number<double>("overlap_prob", s.overlap_prob);
    s.multi_label = kv.flag("multi_label", s.multi_label);
    s.seed = kv.number<std::uint64_t>("seed", s.seed);
    s.validate();
    return s;
  }

  void validate() const {
    if (num_classes < 2 || num_classes > 16) throw ConfigError("synth: num_classes must be in [2, 16]");
    if (2 * confounded_pairs > num_classes) throw ConfigError("synth: too many confounded pairs for num_classes");
    if (size < 16 || size % 16) throw ConfigError("synth: size must be a positive multiple of 16");
    if (min_shapes > max_shapes) throw ConfigError("synth: min_shapes > max_shapes");
    if (noise < 0 || high_fraction < 0 || high_fraction > 1) throw ConfigError("synth: noise/high_fraction out of range");
  }

  std::string to_string() const {
    std::ostringstream os;
    os << "num_classes=" << num_classes << "\nconfounded_pairs=" << confounded_pairs << "\nsize=" << size
       << "\ntrain=" << train << "\nval=" << val << "\ntest=" << test << "\nmin_shapes=" << min_shapes
       << "\nmax_shapes=" << max_shapes << "\nnoise=" << noise << "\nhigh_fraction=" << high_fraction
       << "\ninvalid_prob=" << invalid_prob << "\noverlap_prob=" << overlap_prob
       << "\nmulti_label=" << (multi_label ? "true" : "false") << "\nseed=" << seed << "\n";
    return os.str();
  }

  DatasetMeta meta() const {
    DatasetMeta m;
    m.num_classes = num_classes;
    m.confounded_pairs = confounded_pairs;
    m.multi_label = multi_label;
    return m;
  }
};

namespace detail {

inline constexpr std::array<std::array<float, 3>, 14> kGroupColours{{
    {0.85f, 0.25f, 0.20f}, {0.20f, 0.70f, 0.30f}, {0.20f, 0.35f, 0.85f}, {0.85f, 0.80f, 0.20f},
    {0.65f, 0.25f, 0.80f}, {0.20f, 0.80f, 0.80f}, {0.55f, 0.55f, 0.55f}, {0.95f, 0.55f, 0.75f},
    {0.45f, 0.30f, 0.10f}, {0.10f, 0.10f, 0.40f}, {0.60f, 0.85f, 0.55f}, {0.95f, 0.60f, 0.20f},
    {0.30f, 0.55f, 0.35f}, {0.90f, 0.90f, 0.90f},
}};

struct HeightRange {
  float lo, hi;
};

inline HeightRange height_range(const DatasetMeta& m, std::size_t cls) {
  if (cls < 2 * m.confounded_pairs) return cls % 2 ? HeightRange{0.60f, 0.95f} : HeightRange{0.05f, 0.30f};
  return {0.30f, 0.60f};
}

}  // namespace detail

inline std::vector<Sample> synth_split(const SynthSpec& spec, std::size_t count, std::uint64_t stream,
                                       const std::string& prefix) {
  spec.validate();
  const auto meta = spec.meta();
  const std::size_t s = spec.size, px = s * s;
  std::mt19937_64 rng(spec.seed * 0x9E3779B97F4A7C15ull + stream);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto uniform_int = [&](std::size_t lo, std::size_t hi) {
    return lo + static_cast<std::size_t>(u01(rng) * static_cast<double>(hi - lo + 1)) % (hi - lo + 1);
  };
  auto draw_class = [&] {
    const auto g = uniform_int(0, meta.group_count() - 1);
    if (g < spec.confounded_pairs) return 2 * g + (u01(rng) < spec.high_fraction ? 1 : 0);
    return g + spec.confounded_pairs;
  };

  std::vector<Sample> out;
  for (std::size_t n = 0; n < count; ++n) {
    Sample smp;
    char id[32];
    std::snprintf(id, sizeof(id), "%s%05zu", prefix.c_str(), n);
    smp.id = id;
    smp.height = smp.width = s;
    smp.labels.assign(px, 0);
    if (spec.multi_label) smp.label_sets.assign(px, 0);
    smp.valid.assign(px, 1);
    std::vector<std::int32_t> region(px, 0);

    // Layer 0 covers everything; later layers overwrite inside their shape.
    const std::size_t layers = 1 + uniform_int(spec.min_shapes, spec.max_shapes);
    std::vector<std::size_t> layer_class(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto cls = draw_class();
      layer_class[l] = cls;
      const bool additive = spec.multi_label && l > 0 && u01(rng) < spec.overlap_prob;
      const bool ellipse = u01(rng) < 0.5;
      const double cy = u01(rng) * s, cx = u01(rng) * s;
      const double ry = (0.08 + 0.22 * u01(rng)) * s, rx = (0.08 + 0.22 * u01(rng)) * s;
      for (std::size_t y = 0; y < s; ++y)
        for (std::size_t x = 0; x < s; ++x) {
          const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
          const bool inside = l == 0 || (ellipse ? dy * dy + dx * dx <= 1.0 : std::abs(dy) <= 1 && std::abs(dx) <= 1);
          if (!inside) continue;
          const auto i = y * s + x;
          if (spec.multi_label) smp.label_sets[i] = (additive ? smp.label_sets[i] : 0u) | (1u << cls);
          smp.labels[i] = static_cast<std::int32_t>(cls);
          region[i] = static_cast<std::int32_t>(l);
        }
    }

    // Per-region appearance: colour offset and height level, then per-pixel noise.
    std::vector<std::array<double, 3>> colour(layers);
    std::vector<double> level(layers);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& base = detail::kGroupColours[meta.group_of(layer_class[l]) % detail::kGroupColours.size()];
      for (int c = 0; c < 3; ++c) colour[l][c] = base[c] + spec.noise * (2 * u01(rng) - 1);
      const auto hr = detail::height_range(meta, layer_class[l]);
      level[l] = hr.lo + (hr.hi - hr.lo) * u01(rng);
    }
    Tensor<float> rgb({3, s, s}), dsm({1, s, s});
    for (std::size_t i = 0; i < px; ++i) {
      const auto l = static_cast<std::size_t>(region[i]);
      for (std::size_t c = 0; c < 3; ++c) {
        rgb[c * px + i] = static_cast<float>(std::clamp(colour[l][c] + spec.noise * gauss(rng), 0.0, 1.0));
      }
      dsm[i] = static_cast<float>(std::clamp(level[l] + 0.5 * spec.noise * gauss(rng), 0.0, 1.0));
    }
    smp.rasters = {rgb, dsm};

    if (u01(rng) < spec.invalid_prob) {
      const auto h = uniform_int(2, s / 8), w = uniform_int(2, s / 8);
      const auto y0 = uniform_int(0, s - h), x0 = uniform_int(0, s - w);
      for (std::size_t y = y0; y < y0 + h; ++y)
        for (std::size_t x = x0; x < x0 + w; ++x) smp.valid[y * s + x] = 0;
    }
    out.push_back(std::move(smp));
  }
  return out;
}

struct SynthDataset {
  std::vector<Sample> train, val, test;
};

inline SynthDataset synth_generate(const SynthSpec& spec) {
  return {synth_split(spec, spec.train, 1, "tr"), synth_split(spec, spec.val, 2, "va"),
          synth_split(spec, spec.test, 3, "te")};
}

// ------------------------------------------------------------------ Bayes ceiling

/// Best scores reachable by any classifier that sees only the first modality's
/// colour, measured by brute force over quantised colour histograms.
struct UnimodalCeiling {
  double pixel_accuracy = 0.0;      // sum over bins of the majority count / total
  double confounded_accuracy = 0.0; // majority member share inside each pair's colour region
  double miou = 0.0;                // best expected mIoU (see below)
  std::vector<double> split;        // chosen high-class fraction per pair
};

/// mIoU ceiling: each colour bin is assigned to the class group with the
/// largest count. Inside a pair the colour carries no information, so the
/// remaining freedom is the fraction f_p of the pair's pixels predicted as the
/// high class; f_p is grid-searched on {0, 0.01, ..., 1} with IoU evaluated on
/// expected counts.
inline UnimodalCeiling unimodal_ceiling(const std::vector<Sample>& samples, const DatasetMeta& meta,
                                        int levels = 8) {
  const auto k = meta.num_classes, groups = meta.group_count();
  std::map<std::size_t, std::vector<double>> hist;
  for (const auto& smp : samples) {
    const auto px = smp.pixels();
    const auto& rgb = smp.rasters.at(0);
    const auto ch = rgb.dim(0);
    for (std::size_t i = 0; i < px; ++i) {
      if (!smp.valid[i]) continue;
      std::size_t bin = 0;
      for (std::size_t c = 0; c < ch; ++c) {
        const auto q = std::min<std::size_t>(static_cast<std::size_t>(rgb[c * px + i] * levels), levels - 1);
        bin = bin * static_cast<std::size_t>(levels) + q;
      }
      auto& h = hist[bin];
      if (h.empty()) h.assign(k, 0.0);
      h[static_cast<std::size_t>(smp.labels[i])] += 1;
    }
  }

  UnimodalCeiling out;
  double total = 0, correct = 0, conf_total = 0, conf_correct = 0;
  // counts[g][c]: pixels of class c in bins assigned to group g.
  std::vector<std::vector<double>> counts(groups, std::vector<double>(k, 0.0));
  std::vector<double> support(k, 0.0);
  for (const auto& [bin, h] : hist) {
    std::vector<double> per_group(groups, 0.0);
    for (std::size_t c = 0; c < k; ++c) {
      per_group[meta.group_of(c)] += h[c];
      support[c] += h[c];
      total += h[c];
    }
    correct += *std::max_element(h.begin(), h.end());
    const auto g = static_cast<std::size_t>(std::max_element(per_group.begin(), per_group.end()) - per_group.begin());
    for (std::size_t c = 0; c < k; ++c) counts[g][c] += h[c];
  }
  out.pixel_accuracy = total ? correct / total : 0.0;
  for (std::size_t g = 0; g < meta.confounded_pairs; ++g) {
    conf_total += counts[g][2 * g] + counts[g][2 * g + 1];
    conf_correct += std::max(counts[g][2 * g], counts[g][2 * g + 1]);
  }
  out.confounded_accuracy = conf_total ? conf_correct / conf_total : 0.0;

  auto iou = [](double tp, double fp, double fn) { return tp + fp + fn > 0 ? tp / (tp + fp + fn) : 0.0; };
  double iou_sum = 0;
  std::size_t present = 0;
  for (std::size_t g = 0; g < groups; ++g) {
    double assigned = 0;
    for (std::size_t c = 0; c < k; ++c) assigned += counts[g][c];
    if (g < meta.confounded_pairs) {
      const std::size_t lo = 2 * g, hi = 2 * g + 1;
      double best = -1, best_f = 0;
      for (int step = 0; step <= 100; ++step) {
        const double f = step / 100.0;
        // Predicted high on a fraction f of the group's pixels, low on the rest.
        const double tp_hi = f * counts[g][hi], tp_lo = (1 - f) * counts[g][lo];
        double score = 0;
        int n = 0;
        if (support[hi] > 0) {
          score += iou(tp_hi, f * assigned - tp_hi, support[hi] - tp_hi);
          ++n;
        }
        if (support[lo] > 0) {
          score += iou(tp_lo, (1 - f) * assigned - tp_lo, support[lo] - tp_lo);
          ++n;
        }
        if (n && score > best) {
          best = score;
          best_f = f;
        }
      }
      if (best >= 0) iou_sum += best;
      present += (support[lo] > 0) + (support[hi] > 0);
      out.split.push_back(best_f);
    } else {
      const std::size_t c = g + meta.confounded_pairs;
      if (support[c] > 0) {
        iou_sum += iou(counts[g][c], assigned - counts[g][c], support[c] - counts[g][c]);
        ++present;
      }
    }
  }
  out.miou = present ? iou_sum / static_cast<double>(present) : 0.0;
  return out;
}

// ------------------------------------------------------------------ 8-bit rasters

/// Binary PGM (P5, one channel) or PPM (P6, three channels), maxval 255.
struct Image8 {
  std::size_t width = 0, height = 0, channels = 1;
  std::vector<std::uint8_t> pixels;  // interleaved, row-major
};

inline Image8 decode_pnm(const std::vector<std::uint8_t>& bytes, const std::string& what = "image") {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto read_uint = [&](const char* field) {
    skip_space();
    std::size_t v = 0, digits = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos++] - '0');
      if (++digits > 9) throw FormatError(what + ": " + field + " too large");
    }
    if (!digits) throw FormatError(what + ": malformed header, expected " + std::string(field));
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) {
    throw FormatError(what + ": not a binary PGM/PPM (expected P5 or P6)");
  }
  Image8 img;
  img.channels = bytes[1] == '5' ? 1 : 3;
  pos = 2;
  img.width = read_uint("width");
  img.height = read_uint("height");
  const auto maxval = read_uint("maxval");
  if (img.width == 0 || img.height == 0) throw FormatError(what + ": zero image extent");
  if (maxval != 255) throw FormatError(what + ": only maxval 255 is supported, got " + std::to_string(maxval));
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) throw FormatError(what + ": malformed header");
  ++pos;
  const auto need = img.width * img.height * img.channels;
  if (bytes.size() - pos < need) throw FormatError(what + ": truncated payload");
  img.pixels.assign(bytes.begin() + static_cast<long>(pos), bytes.begin() + static_cast<long>(pos + need));
  return img;
}

inline std::vector<std::uint8_t> encode_pnm(const Image8& img) {
  if (img.channels != 1 && img.channels != 3) throw FormatError("pnm: channels must be 1 or 3");
  const std::string header = std::string(img.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(img.width) + " " +
                             std::to_string(img.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

inline Image8 read_pnm(const std::filesystem::path& path) { return decode_pnm(detail::read_bytes(path), path.string()); }
inline void write_pnm(const std::filesystem::path& path, const Image8& img) { detail::write_bytes(path, encode_pnm(img)); }

/// [C,H,W] in [0,1] (C = 1 or 3) to 8 bits: round(clamp(v) * 255).
inline Image8 to_image8(const Tensor<float>& t) {
  if (t.ndim() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) throw ShapeError("to_image8: expected [1|3,H,W]");
  Image8 img{t.dim(2), t.dim(1), t.dim(0), {}};
  const auto px = img.width * img.height;
  img.pixels.resize(px * img.channels);
  for (std::size_t i = 0; i < px; ++i)
    for (std::size_t c = 0; c < img.channels; ++c) {
      const float v = std::clamp(t[c * px + i], 0.0f, 1.0f);
      img.pixels[i * img.channels + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  return img;
}

inline Tensor<float> from_image8(const Image8& img) {
  const auto px = img.width * img.height;
  Tensor<float> t({img.channels, img.height, img.width});
  for (std::size_t i = 0; i < px; ++i)
    for (std::size_t c = 0; c < img.channels; ++c) t[c * px + i] = img.pixels[i * img.channels + c] / 255.0f;
  return t;
}

/// .ten rasters are lossless; .pgm/.ppm go through 8-bit quantisation.
inline Tensor<float> load_raster(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ten") return load_ten<float>(path);
  if (ext == ".pgm" || ext == ".ppm") return from_image8(read_pnm(path));
  throw FormatError(path.string() + ": unsupported raster extension '" + ext + "'");
}

inline void save_raster(const Tensor<float>& t, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ten") return save_ten(t, path);
  if (ext == ".pgm" || ext == ".ppm") return write_pnm(path, to_image8(t));
  throw FormatError(path.string() + ": unsupported raster extension '" + ext + "'");
}

// ------------------------------------------------------------------ dataset directories
//
// <root>/dataset.txt                  num_classes, modalities (name:channels), pairs, multi_label
// <root>/<split>/index.txt            one sample id per line
// <root>/<split>/<id>/mod-<name>.ten  [C,H,W] float32
// <root>/<split>/<id>/labels.ten      [H,W] class ids, or [L,H,W] 0/1 planes in multi-label mode
// <root>/<split>/<id>/mask.pgm        255 = valid, 0 = ignored

inline void save_meta(const DatasetMeta& m, const std::filesystem::path& root) {
  std::filesystem::create_directories(root);
  std::ofstream out(root / "dataset.txt", std::ios::trunc);
  out << "num_classes=" << m.num_classes << "\nmodalities=";
  for (std::size_t i = 0; i < m.modality_names.size(); ++i) {
    out << (i ? "," : "") << m.modality_names[i] << ":" << m.modality_channels[i];
  }
  out << "\nconfounded_pairs=" << m.confounded_pairs << "\nmulti_label=" << (m.multi_label ? "true" : "false")
      << "\n";
}

inline DatasetMeta load_meta(const std::filesystem::path& root) {
  auto kv = KeyValues::load(root / "dataset.txt");
  DatasetMeta m;
  m.num_classes = kv.number<std::size_t>("num_classes");
  m.confounded_pairs = kv.number<std::size_t>("confounded_pairs", 0);
  m.multi_label = kv.flag("multi_label", false);
  m.modality_names.clear();
  m.modality_channels.clear();
  for (const auto& item : split(kv.str("modalities"), ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("dataset.txt: modalities entries must be name:channels");
    KeyValues one;
    one.set("c", item.substr(colon + 1));
    m.modality_names.push_back(item.substr(0, colon));
    m.modality_channels.push_back(one.number<std::size_t>("c"));
  }
  return m;
}

inline void save_split(const std::vector<Sample>& samples, const DatasetMeta& meta, const std::filesystem::path& root,
                       const std::string& split_name) {
  const auto dir = root / split_name;
  std::filesystem::create_directories(dir);
  std::ofstream index(dir / "index.txt", std::ios::trunc);
  for (const auto& smp : samples) {
    const auto sd = dir / smp.id;
    std::filesystem::create_directories(sd);
    for (std::size_t m = 0; m < smp.rasters.size(); ++m) save_ten(smp.rasters[m], sd / ("mod-" + meta.modality_names[m] + ".ten"));
    const auto px = smp.pixels();
    if (meta.multi_label) {
      Tensor<float> planes({meta.num_classes, smp.height, smp.width});
      for (std::size_t c = 0; c < meta.num_classes; ++c)
        for (std::size_t i = 0; i < px; ++i) planes[c * px + i] = (smp.label_set(i) >> c) & 1u ? 1.0f : 0.0f;
      save_ten(planes, sd / "labels.ten");
    } else {
      Tensor<float> ids({smp.height, smp.width});
      for (std::size_t i = 0; i < px; ++i) ids[i] = static_cast<float>(smp.labels[i]);
      save_ten(ids, sd / "labels.ten");
    }
    Image8 mask{smp.width, smp.height, 1, {}};
    for (auto v : smp.valid) mask.pixels.push_back(v ? 255 : 0);
    write_pnm(sd / "mask.pgm", mask);
    index << smp.id << "\n";
  }
}

/// Reads one sample directory. In multi-label mode the training target is the
/// highest-numbered class in each pixel's set.
inline Sample load_sample(const std::filesystem::path& dir, const DatasetMeta& meta) {
  Sample smp;
  smp.id = dir.filename().string();
  for (std::size_t m = 0; m < meta.modality_names.size(); ++m) {
    auto r = load_ten<float>(dir / ("mod-" + meta.modality_names[m] + ".ten"));
    if (r.ndim() != 3 || r.dim(0) != meta.modality_channels[m]) {
      throw FormatError(dir.string() + ": modality '" + meta.modality_names[m] + "' has shape " + shape_str(r.shape()));
    }
    if (m == 0) {
      smp.height = r.dim(1);
      smp.width = r.dim(2);
    } else if (r.dim(1) != smp.height || r.dim(2) != smp.width) {
      throw FormatError(dir.string() + ": modalities are not co-registered");
    }
    smp.rasters.push_back(r);
  }
  const auto px = smp.pixels();
  auto lab = load_ten<float>(dir / "labels.ten");
  smp.labels.assign(px, 0);
  if (meta.multi_label) {
    if (lab.shape() != Shape{meta.num_classes, smp.height, smp.width}) throw FormatError(dir.string() + ": labels shape");
    smp.label_sets.assign(px, 0);
    for (std::size_t c = 0; c < meta.num_classes; ++c)
      for (std::size_t i = 0; i < px; ++i)
        if (lab[c * px + i] > 0.5f) {
          smp.label_sets[i] |= 1u << c;
          smp.labels[i] = static_cast<std::int32_t>(c);
        }
  } else {
    if (lab.shape() != Shape{smp.height, smp.width}) throw FormatError(dir.string() + ": labels shape");
    for (std::size_t i = 0; i < px; ++i) {
      const auto c = static_cast<long>(std::lround(lab[i]));
      if (c < 0 || c >= static_cast<long>(meta.num_classes)) throw FormatError(dir.string() + ": label out of range");
      smp.labels[i] = static_cast<std::int32_t>(c);
    }
  }
  auto mask = read_pnm(dir / "mask.pgm");
  if (mask.width != smp.width || mask.height != smp.height || mask.channels != 1) {
    throw FormatError(dir.string() + ": mask.pgm does not match the rasters");
  }
  smp.valid.resize(px);
  for (std::size_t i = 0; i < px; ++i) smp.valid[i] = mask.pixels[i] ? 1 : 0;
  return smp;
}

inline std::vector<Sample> load_split(const std::filesystem::path& root, const std::string& split_name,
                                      const DatasetMeta& meta) {
  std::ifstream index(root / split_name / "index.txt");
  if (!index) throw std::runtime_error("dataset split '" + split_name + "' not found under " + root.string());
  std::vector<Sample> out;
  std::string id;
  while (std::getline(index, id)) {
    id = trim(id);
    if (!id.empty()) out.push_back(load_sample(root / split_name / id, meta));
  }
  if (out.empty()) throw std::runtime_error("dataset split '" + split_name + "' is empty");
  return out;
}

// ------------------------------------------------------------------ batches

struct Batch {
  std::size_t n = 0, height = 0, width = 0;
  std::vector<Tensor<float>> inputs;  // one [N,C,H,W] per modality
  std::vector<std::int32_t> labels;   // N*H*W
  std::vector<std::uint8_t> valid;    // N*H*W
};

inline Batch make_batch(const std::vector<Sample>& samples, const std::vector<std::size_t>& indices) {
  Batch b;
  b.n = indices.size();
  const auto& first = samples.at(indices.at(0));
  b.height = first.height;
  b.width = first.width;
  for (const auto& r : first.rasters) b.inputs.emplace_back(Shape{b.n, r.dim(0), b.height, b.width});
  for (std::size_t j = 0; j < b.n; ++j) {
    const auto& smp = samples[indices[j]];
    if (smp.height != b.height || smp.width != b.width) throw ShapeError("make_batch: samples differ in size");
    for (std::size_t m = 0; m < smp.rasters.size(); ++m) {
      const auto chunk = smp.rasters[m].numel();
      std::copy(smp.rasters[m].values().begin(), smp.rasters[m].values().end(),
                b.inputs[m].data().begin() + static_cast<long>(j * chunk));
    }
    b.labels.insert(b.labels.end(), smp.labels.begin(), smp.labels.end());
    b.valid.insert(b.valid.end(), smp.valid.begin(), smp.valid.end());
  }
  return b;
}

// ------------------------------------------------------------------ augmentation

struct AugmentConfig {
  double probability = 0.5;
  double noise_sigma = 0.02;
  double jitter = 0.10;
};

/// Uniform [0,1) from any URBG, so tests can drive decisions with a stub.
template <class URBG>
double uniform01(URBG& g) {
  const double span = static_cast<double>(URBG::max() - URBG::min()) + 1.0;
  return static_cast<double>(g() - URBG::min()) / span;
}

template <class URBG>
double standard_normal(URBG& g) {
  const double u1 = std::max(uniform01(g), std::numeric_limits<double>::min());
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

namespace detail {

// Moves every per-pixel array of a sample with the same source-index map.
inline void remap_sample(Sample& s, std::size_t new_h, std::size_t new_w,
                         const std::vector<std::size_t>& src_of_dst) {
  const auto px = s.pixels();
  for (auto& r : s.rasters) {
    const auto ch = r.dim(0);
    std::vector<float> v(ch * px);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t i = 0; i < px; ++i) v[c * px + i] = r[c * px + src_of_dst[i]];
    r = Tensor<float>({ch, new_h, new_w}, std::move(v));
  }
  auto move = [&](auto& vec) {
    if (vec.empty()) return;
    auto copy = vec;
    for (std::size_t i = 0; i < px; ++i) vec[i] = copy[src_of_dst[i]];
  };
  move(s.labels);
  move(s.label_sets);
  move(s.valid);
  s.height = new_h;
  s.width = new_w;
}

}  // namespace detail

inline Sample hflip_sample(Sample s) {
  std::vector<std::size_t> map(s.pixels());
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) map[y * s.width + x] = y * s.width + (s.width - 1 - x);
  detail::remap_sample(s, s.height, s.width, map);
  return s;
}

inline Sample vflip_sample(Sample s) {
  std::vector<std::size_t> map(s.pixels());
  for (std::size_t y = 0; y < s.height; ++y)
    for (std::size_t x = 0; x < s.width; ++x) map[y * s.width + x] = (s.height - 1 - y) * s.width + x;
  detail::remap_sample(s, s.height, s.width, map);
  return s;
}

/// Quarter turn counter-clockwise: dst(y, x) = src(x, W-1-y), output is W x H.
inline Sample rot90_sample(Sample s) {
  const auto h = s.height, w = s.width;
  std::vector<std::size_t> map(s.pixels());
  for (std::size_t y = 0; y < w; ++y)
    for (std::size_t x = 0; x < h; ++x) map[y * h + x] = x * w + (w - 1 - y);
  detail::remap_sample(s, w, h, map);
  return s;
}

template <class URBG>
Sample augment(Sample s, URBG& rng, const AugmentConfig& cfg = {}) {
  auto hit = [&] { return uniform01(rng) < cfg.probability; };
  if (hit()) s = hflip_sample(std::move(s));
  if (hit()) s = vflip_sample(std::move(s));
  if (hit()) s = rot90_sample(std::move(s));
  const bool noise = hit();
  const bool jitter = hit();
  if (noise || jitter) {
    const double contrast = 1.0 + cfg.jitter * (2 * uniform01(rng) - 1);
    const double brightness = cfg.jitter * (2 * uniform01(rng) - 1);
    for (auto& r : s.rasters) {
      r = Tensor<float>(r.shape(), r.values());  // the caller's sample shares storage
      for (auto& v : r.data()) {
        double x = v;
        if (noise) x += cfg.noise_sigma * standard_normal(rng);
        if (jitter) x = x * contrast + brightness;
        v = static_cast<float>(std::clamp(x, 0.0, 1.0));
      }
    }
  }
  return s;
}

}  // namespace mmnet
