#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/image_ops.hpp"
#include "causalfs/io.hpp"
#include "causalfs/rng.hpp"
#include "causalfs/tensor.hpp"

namespace causalfs {

// ----------------------------------------------------------------- dataset ---

struct Dataset {
  std::vector<FeatureMap<float>> images;
  std::vector<int> labels;                    // parallel to images
  std::vector<std::vector<int>> class_index;  // class id -> sample indices, ascending
  std::string name;
  int image_h = 0, image_w = 0, channels = 0;

  int num_classes() const { return static_cast<int>(class_index.size()); }
  int num_samples() const { return static_cast<int>(images.size()); }

  void rebuild_class_index() {
    int n_classes = 0;
    for (int l : labels) n_classes = std::max(n_classes, l + 1);
    class_index.assign(static_cast<std::size_t>(n_classes), {});
    for (int i = 0; i < num_samples(); ++i) {
      if (labels[static_cast<std::size_t>(i)] < 0)
        throw std::invalid_argument("Dataset: negative class label");
      class_index[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])].push_back(i);
    }
  }

  void validate() const {
    if (images.size() != labels.size())
      throw std::invalid_argument("Dataset: images/labels length mismatch");
    for (const auto& img : images)
      if (img.h != image_h || img.w != image_w || img.channels() != channels)
        throw std::invalid_argument("Dataset: inconsistent image shape");
    std::size_t indexed = 0;
    for (int c = 0; c < num_classes(); ++c) {
      const auto& idx = class_index[static_cast<std::size_t>(c)];
      indexed += idx.size();
      for (std::size_t j = 0; j < idx.size(); ++j) {
        const int i = idx[j];
        if (i < 0 || i >= num_samples() || labels[static_cast<std::size_t>(i)] != c)
          throw std::invalid_argument("Dataset: class_index inconsistent with labels");
        if (j > 0 && idx[j - 1] >= i)
          throw std::invalid_argument("Dataset: class_index not strictly ascending");
      }
    }
    if (indexed != images.size())
      throw std::invalid_argument("Dataset: class_index does not cover all samples");
  }

  std::uint64_t content_hash() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& img : images)
      h = fnv1a(img.data.data(), sizeof(float) * static_cast<std::size_t>(img.data.size()), h);
    if (!labels.empty()) h = fnv1a(labels.data(), sizeof(int) * labels.size(), h);
    return h;
  }
};

// ------------------------------------------------------------ class splits ---

struct ClassSplit {
  std::vector<int> train, val, test;

  void validate(int n_classes) const {
    std::vector<int> seen(static_cast<std::size_t>(n_classes), 0);
    auto mark = [&](const std::vector<int>& ids, const char* which) {
      for (int c : ids) {
        if (c < 0 || c >= n_classes)
          throw std::invalid_argument(std::string("ClassSplit: ") + which + " has class " +
                                      std::to_string(c) + " outside [0," +
                                      std::to_string(n_classes) + ")");
        if (seen[static_cast<std::size_t>(c)]++)
          throw std::invalid_argument(std::string("ClassSplit: class ") + std::to_string(c) +
                                      " appears in more than one split");
      }
    };
    mark(train, "train");
    mark(val, "val");
    mark(test, "test");
    const std::size_t total = train.size() + val.size() + test.size();
    if (total != static_cast<std::size_t>(n_classes))
      throw std::invalid_argument("ClassSplit: splits cover " + std::to_string(total) + " of " +
                                  std::to_string(n_classes) + " classes");
  }
};

inline ClassSplit split_classes(int n_classes, int n_train, int n_val, int n_test,
                                std::uint64_t seed) {
  if (n_train < 0 || n_val < 0 || n_test < 0 || n_train + n_val + n_test != n_classes)
    throw std::invalid_argument("split_classes: counts " + std::to_string(n_train) + "+" +
                                std::to_string(n_val) + "+" + std::to_string(n_test) +
                                " must sum to " + std::to_string(n_classes));
  std::vector<int> ids(static_cast<std::size_t>(n_classes));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(seed, stream::kDataset);
  rng.shuffle(ids);
  ClassSplit split;
  split.train.assign(ids.begin(), ids.begin() + n_train);
  split.val.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  split.test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());
  split.validate(n_classes);
  return split;
}

// ---------------------------------------------------------------- episodes ---

// Index-based episode over a dataset. Slot-major layout: support[slot*k_shot + j]
// and query[slot*n_query + j]; the classification target of a query is its slot.
struct Episode {
  int n_way = 0, k_shot = 0, n_query = 0;
  std::vector<int> classes;  // dataset class id per slot
  std::vector<int> support;  // sample indices, n_way * k_shot
  std::vector<int> query;    // sample indices, n_way * n_query
};

inline Episode sample_episode(const Dataset& ds, const std::vector<int>& class_pool, int n_way,
                              int k_shot, int n_query, Rng& rng) {
  if (n_way < 2) throw std::invalid_argument("sample_episode: n_way must be >= 2");
  if (k_shot < 1 || n_query < 1)
    throw std::invalid_argument("sample_episode: k_shot and n_query must be >= 1");
  if (static_cast<std::size_t>(n_way) > class_pool.size())
    throw std::invalid_argument("sample_episode: n_way=" + std::to_string(n_way) +
                                " exceeds pool of " + std::to_string(class_pool.size()) +
                                " classes");
  Episode ep;
  ep.n_way = n_way;
  ep.k_shot = k_shot;
  ep.n_query = n_query;
  ep.classes = rng.sample_without_replacement(class_pool, static_cast<std::size_t>(n_way));
  ep.support.reserve(static_cast<std::size_t>(n_way) * k_shot);
  ep.query.reserve(static_cast<std::size_t>(n_way) * n_query);
  for (int slot = 0; slot < n_way; ++slot) {
    const int c = ep.classes[static_cast<std::size_t>(slot)];
    const auto& pool = ds.class_index.at(static_cast<std::size_t>(c));
    const std::size_t need = static_cast<std::size_t>(k_shot) + n_query;
    if (pool.size() < need)
      throw std::invalid_argument("sample_episode: class " + std::to_string(c) + " has " +
                                  std::to_string(pool.size()) + " samples, episode needs " +
                                  std::to_string(need));
    std::vector<int> chosen = rng.sample_without_replacement(pool, need);
    for (int j = 0; j < k_shot; ++j) ep.support.push_back(chosen[static_cast<std::size_t>(j)]);
    for (int j = 0; j < n_query; ++j)
      ep.query.push_back(chosen[static_cast<std::size_t>(k_shot + j)]);
  }
  return ep;
}

// ------------------------------------------------------------- augmentation ---

struct AugmentConfig {
  double crop_min = 0.65, crop_max = 1.0;  // random crop side fraction (train)
  double flip_prob = 0.5;
  double jitter_min = 0.6, jitter_max = 1.4;  // brightness/contrast/saturation factors
  double center_crop = 0.875;                 // deterministic eval crop side fraction
};

// Draw order is fixed (crop fraction, y, x, flip, 3 jitter factors) so that the
// consumed randomness per image is identical across configurations.
inline FeatureMap<float> augment_train(const FeatureMap<float>& img, const AugmentConfig& cfg,
                                       Rng& rng) {
  const double frac = rng.real(cfg.crop_min, cfg.crop_max);
  const int side_h = std::max(1, static_cast<int>(std::lround(frac * img.h)));
  const int side_w = std::max(1, static_cast<int>(std::lround(frac * img.w)));
  const int y0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.h - side_h + 1)));
  const int x0 = static_cast<int>(rng.next_below(static_cast<std::uint64_t>(img.w - side_w + 1)));
  const bool flip = rng.bernoulli(cfg.flip_prob);
  const float b = static_cast<float>(rng.real(cfg.jitter_min, cfg.jitter_max));
  const float c = static_cast<float>(rng.real(cfg.jitter_min, cfg.jitter_max));
  const float s = static_cast<float>(rng.real(cfg.jitter_min, cfg.jitter_max));

  FeatureMap<float> out = crop(img, y0, x0, side_h, side_w);
  out = resize_bilinear(out, img.h, img.w);
  if (flip) out = hflip(out);
  return color_jitter(out, b, c, s);
}

inline FeatureMap<float> augment_eval(const FeatureMap<float>& img, const AugmentConfig& cfg) {
  const int side_h = std::max(1, static_cast<int>(std::lround(cfg.center_crop * img.h)));
  const int side_w = std::max(1, static_cast<int>(std::lround(cfg.center_crop * img.w)));
  FeatureMap<float> out = crop(img, (img.h - side_h) / 2, (img.w - side_w) / 2, side_h, side_w);
  return resize_bilinear(out, img.h, img.w);
}

// --------------------------------------------------- synthetic fine-grained ---
//
// All classes share one coarse body/head layout and color scheme; class identity
// lives in fine textures (stripe/ring/dot frequency, channel emphasis, a small
// marking) that are invariant to horizontal flips. Per-sample nuisances (random
// textured background, pose/scale/rotation jitter, brightness, pixel noise) are
// stronger than the class signal, so coarse statistics mislead.

struct SyntheticSpec {
  int n_classes = 32;
  int samples_per_class = 30;
  int image_size = 32;
  std::uint64_t seed = 7;
  double center_jitter = 0.10;
  double scale_jitter = 0.18;
  double rot_jitter = 0.40;        // radians
  double brightness_jitter = 0.18;
  double noise = 0.02;
  double signal_amp = 0.16;

  void validate() const {
    if (n_classes < 2) throw std::invalid_argument("SyntheticSpec: need at least 2 classes");
    if (samples_per_class < 1)
      throw std::invalid_argument("SyntheticSpec: need at least 1 sample per class");
    if (image_size < 16) throw std::invalid_argument("SyntheticSpec: image_size must be >= 16");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "classes=" << n_classes << " samples_per_class=" << samples_per_class
       << " image_size=" << image_size << " seed=" << seed << " center_jitter=" << center_jitter
       << " scale_jitter=" << scale_jitter << " rot_jitter=" << rot_jitter
       << " brightness_jitter=" << brightness_jitter << " noise=" << noise
       << " signal_amp=" << signal_amp;
    return os.str();
  }
};

namespace detail {

struct ClassSignature {
  int pattern = 0;       // 0 h-stripes, 1 v-stripes, 2 rings, 3 dot grid
  double freq = 4.0;     // cycles across the body
  double chan[3] = {0, 0, 0};  // signed per-channel emphasis, unit norm
  double mark_v = 0.0;   // marking offset along the body minor axis, in [-0.6, 0.6]
  double mark_r = 0.14;  // marking radius relative to the body minor axis
  double mark_chan[3] = {0, 0, 0};
};

inline ClassSignature class_signature(const SyntheticSpec& spec, int cls) {
  Rng rng(spec.seed, 0x5161000000ull + static_cast<std::uint64_t>(cls));
  ClassSignature sig;
  sig.pattern = rng.next_int(0, 3);
  sig.freq = rng.real(2.5, 7.5);
  double norm = 0.0;
  for (int c = 0; c < 3; ++c) {
    sig.chan[c] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.real(0.35, 1.0);
    norm += sig.chan[c] * sig.chan[c];
  }
  norm = std::sqrt(norm);
  for (double& v : sig.chan) v /= norm;
  sig.mark_v = rng.real(-0.6, 0.6);
  sig.mark_r = rng.real(0.10, 0.20);
  norm = 0.0;
  for (int c = 0; c < 3; ++c) {
    sig.mark_chan[c] = (rng.bernoulli(0.5) ? 1.0 : -1.0) * rng.real(0.35, 1.0);
    norm += sig.mark_chan[c] * sig.mark_chan[c];
  }
  norm = std::sqrt(norm);
  for (double& v : sig.mark_chan) v /= norm;
  return sig;
}

inline FeatureMap<float> render_sample(const SyntheticSpec& spec, const ClassSignature& sig,
                                       int cls, int sample) {
  Rng rng(spec.seed, 0x5182000000ull + (static_cast<std::uint64_t>(cls) << 24) +
                         static_cast<std::uint64_t>(sample));
  const int S = spec.image_size;
  FeatureMap<float> img = FeatureMap<float>::zeros(3, S, S);

  // nuisance background: gradient, blobs, or coarse checker, in random colors
  const int bg_style = rng.next_int(0, 2);
  double bg_a[3], bg_b[3];
  for (int c = 0; c < 3; ++c) {
    bg_a[c] = rng.real(0.15, 0.85);
    bg_b[c] = rng.real(0.15, 0.85);
  }
  const bool bg_horiz = rng.bernoulli(0.5);
  const double checker_period = rng.real(0.18, 0.42) * S;
  double blob_x[3], blob_y[3], blob_r[3];
  for (int b = 0; b < 3; ++b) {
    blob_x[b] = rng.real(0.0, 1.0) * S;
    blob_y[b] = rng.real(0.0, 1.0) * S;
    blob_r[b] = rng.real(0.18, 0.40) * S;
  }

  // nuisance pose
  const double cx = (0.5 + rng.real(-spec.center_jitter, spec.center_jitter)) * S;
  const double cy = (0.5 + rng.real(-spec.center_jitter, spec.center_jitter)) * S;
  const double body_a = 0.31 * S * (1.0 + rng.real(-spec.scale_jitter, spec.scale_jitter));
  const double body_b = 0.21 * S * (1.0 + rng.real(-spec.scale_jitter, spec.scale_jitter));
  const double theta = rng.real(-spec.rot_jitter, spec.rot_jitter);
  const double ct = std::cos(theta), st = std::sin(theta);
  const double bright = 1.0 + rng.real(-spec.brightness_jitter, spec.brightness_jitter);
  const double phase = rng.real(0.0, 6.283185307179586);

  const double body_color[3] = {0.52 * bright, 0.42 * bright, 0.30 * bright};
  const double head_color[3] = {0.38 * bright, 0.30 * bright, 0.22 * bright};
  const double head_cx = cx + 0.95 * body_a * ct;
  const double head_cy = cy + 0.95 * body_a * st;
  const double head_r = 0.42 * body_b;

  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      double px[3];
      if (bg_style == 0) {
        const double t = bg_horiz ? double(x) / (S - 1) : double(y) / (S - 1);
        for (int c = 0; c < 3; ++c) px[c] = bg_a[c] + t * (bg_b[c] - bg_a[c]);
      } else if (bg_style == 1) {
        for (int c = 0; c < 3; ++c) px[c] = bg_a[c];
        for (int b = 0; b < 3; ++b) {
          const double d2 = ((x - blob_x[b]) * (x - blob_x[b]) + (y - blob_y[b]) * (y - blob_y[b])) /
                            (blob_r[b] * blob_r[b]);
          const double wgt = std::exp(-d2);
          for (int c = 0; c < 3; ++c) px[c] += wgt * (bg_b[c] - bg_a[c]);
        }
      } else {
        const int par = (static_cast<int>(x / checker_period) + static_cast<int>(y / checker_period)) & 1;
        for (int c = 0; c < 3; ++c) px[c] = par ? bg_b[c] : bg_a[c];
      }

      // body-local coordinates
      const double dx = x - cx, dy = y - cy;
      const double u = (dx * ct + dy * st) / body_a;
      const double v = (-dx * st + dy * ct) / body_b;
      const double r2 = u * u + v * v;
      const double alpha = std::clamp((1.10 - r2) / 0.20, 0.0, 1.0);
      if (alpha > 0.0) {
        double obj[3];
        for (int c = 0; c < 3; ++c) obj[c] = body_color[c];
        // fine class texture
        double wave = 0.0;
        const double tau = 6.283185307179586;
        switch (sig.pattern) {
          case 0: wave = std::sin(tau * sig.freq * v * 0.5 + phase); break;
          case 1: wave = std::sin(tau * sig.freq * u * 0.5 + phase); break;
          case 2: wave = std::sin(tau * sig.freq * std::sqrt(r2) * 0.5 + phase); break;
          default:
            wave = std::sin(tau * sig.freq * u * 0.5 + phase) *
                   std::sin(tau * sig.freq * v * 0.5 + phase);
        }
        for (int c = 0; c < 3; ++c) obj[c] += spec.signal_amp * wave * sig.chan[c];
        // class marking: disc offset along the minor axis, flip-stable
        const double mu = u, mv = v - sig.mark_v;
        if (mu * mu / (sig.mark_r * sig.mark_r * 2.2) + mv * mv / (sig.mark_r * sig.mark_r) < 1.0)
          for (int c = 0; c < 3; ++c) obj[c] += 1.6 * spec.signal_amp * sig.mark_chan[c];
        for (int c = 0; c < 3; ++c) px[c] = alpha * obj[c] + (1.0 - alpha) * px[c];
      }

      // head disc on top, shared by every class
      const double hd2 = (x - head_cx) * (x - head_cx) + (y - head_cy) * (y - head_cy);
      const double halpha = std::clamp((1.10 - hd2 / (head_r * head_r)) / 0.25, 0.0, 1.0);
      if (halpha > 0.0)
        for (int c = 0; c < 3; ++c) px[c] = halpha * head_color[c] + (1.0 - halpha) * px[c];

      for (int c = 0; c < 3; ++c)
        img.at(c, y, x) = static_cast<float>(px[c] + rng.real(-spec.noise, spec.noise));
    }
  clamp01(img);
  return img;
}

}  // namespace detail

inline Dataset generate_synthetic_dataset(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.name = "synthetic";
  ds.image_h = ds.image_w = spec.image_size;
  ds.channels = 3;
  ds.images.reserve(static_cast<std::size_t>(spec.n_classes) * spec.samples_per_class);
  ds.labels.reserve(ds.images.capacity());
  for (int cls = 0; cls < spec.n_classes; ++cls) {
    const detail::ClassSignature sig = detail::class_signature(spec, cls);
    for (int s = 0; s < spec.samples_per_class; ++s) {
      ds.images.push_back(detail::render_sample(spec, sig, cls, s));
      ds.labels.push_back(cls);
    }
  }
  ds.rebuild_class_index();
  ds.validate();
  return ds;
}

// ------------------------------------------------------------------ manifest ---

inline std::string dataset_manifest(const Dataset& ds, const std::string& generator_desc) {
  std::ostringstream os;
  os << "dataset manifest v1\n";
  os << "name " << ds.name << '\n';
  os << "image_shape " << ds.channels << ' ' << ds.image_h << ' ' << ds.image_w << '\n';
  os << "classes " << ds.num_classes() << '\n';
  os << "samples " << ds.num_samples() << '\n';
  for (int c = 0; c < ds.num_classes(); ++c)
    os << "class " << c << " count " << ds.class_index[static_cast<std::size_t>(c)].size() << '\n';
  if (!generator_desc.empty()) os << "generator " << generator_desc << '\n';
  os << "content_hash 0x" << std::hex << ds.content_hash() << std::dec << '\n';
  return os.str();
}

// ----------------------------------------------------------- folder loading ---
// Directory tree: one subdirectory per class, images inside. Subdirectories and
// files are taken in lexicographic order; class ids are assigned densely.

inline Dataset load_image_folder(const std::string& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw std::runtime_error("load_image_folder: " + root + " is not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty())
    throw std::runtime_error("load_image_folder: no class subdirectories in " + root);
  Dataset ds;
  ds.name = fs::path(root).filename().string();
  ds.channels = 3;
  for (std::size_t cls = 0; cls < class_dirs.size(); ++cls) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[cls]))
      if (e.is_regular_file() && (e.path().extension() == ".ppm" || e.path().extension() == ".pnm"))
        files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty())
      throw std::runtime_error("load_image_folder: class directory " + class_dirs[cls].string() +
                               " has no .ppm images");
    for (const auto& f : files) {
      FeatureMap<float> img = read_ppm(f.string());
      if (ds.images.empty()) {
        ds.image_h = img.h;
        ds.image_w = img.w;
      } else if (img.h != ds.image_h || img.w != ds.image_w) {
        throw std::runtime_error("load_image_folder: " + f.string() + " is " + std::to_string(img.w) +
                                 "x" + std::to_string(img.h) + ", dataset is " +
                                 std::to_string(ds.image_w) + "x" + std::to_string(ds.image_h));
      }
      ds.images.push_back(std::move(img));
      ds.labels.push_back(static_cast<int>(cls));
    }
  }
  ds.rebuild_class_index();
  ds.validate();
  return ds;
}

}  // namespace causalfs
