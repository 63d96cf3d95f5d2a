#pragma once

#include <filesystem>
#include <sstream>
#include <string>
#include <vector>

#include "causalfs/imfr.hpp"
#include "causalfs/io.hpp"
#include "causalfs/model.hpp"

// Activation visualization: per-sample channel-mean maps of the input, the
// four backbone taps, and the fused head features, written as grayscale PGM
// files with a manifest. Query gates and their binary masks export the same
// way.

namespace causalfs {

template <typename Scalar>
RowVectorX<Scalar> channel_mean(const FeatureMap<Scalar>& m) {
  return m.data.colwise().mean();
}

// Min-max to [0,1]; a constant map becomes uniform 0.5.
template <typename Scalar>
RowVectorX<Scalar> normalize_unit(const RowVectorX<Scalar>& row) {
  if (row.size() == 0) throw std::invalid_argument("normalize_unit: empty map");
  const Scalar lo = row.minCoeff(), hi = row.maxCoeff();
  if (lo == hi) return RowVectorX<Scalar>::Constant(row.size(), Scalar(0.5));
  return (row.array() - lo) / (hi - lo);
}

// Nearest-neighbor upsample of a row-encoded (h x w) map to (out_h x out_w).
template <typename Scalar>
RowVectorX<Scalar> upsample_nearest(const RowVectorX<Scalar>& row, int h, int w, int out_h,
                                    int out_w) {
  if (row.size() != Eigen::Index(h) * w)
    throw std::invalid_argument("upsample_nearest: map is not h*w");
  if (out_h < h || out_w < w)
    throw std::invalid_argument("upsample_nearest: target smaller than source");
  RowVectorX<Scalar> out(Eigen::Index(out_h) * out_w);
  for (int y = 0; y < out_h; ++y) {
    const int sy = y * h / out_h;
    for (int x = 0; x < out_w; ++x) {
      const int sx = x * w / out_w;
      out(Eigen::Index(y) * out_w + x) = row(Eigen::Index(sy) * w + sx);
    }
  }
  return out;
}

namespace detail {

template <typename Scalar>
void write_gray(const std::string& path, const RowVectorX<Scalar>& row, int h, int w) {
  MatrixX<float> gray(1, row.size());
  for (Eigen::Index i = 0; i < row.size(); ++i) gray(0, i) = float(row(i));
  write_pgm(path, gray, h, w);
}

}  // namespace detail

// Six maps per sample: input, the four backbone taps, the fused head features.
// Each is channel-meaned, min-max normalized, upsampled to the input size, and
// written as <stem>_{input,tap1..tap4,fused}.pgm plus <stem>_manifest.txt.
// Returns the written paths (manifest last).
template <typename Scalar>
std::vector<std::string> export_sample_heatmaps(const ModelConfig& cfg,
                                                const ModelParams<Scalar>& params,
                                                const FeatureMap<Scalar>& image,
                                                const std::string& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  ImageFeatures<Scalar> f = feature_forward<Scalar>(cfg, params, image, nullptr, /*full=*/true);

  struct Row {
    std::string name;
    const FeatureMap<Scalar>* map;
  };
  const std::vector<Row> rows{{"input", &image},     {"tap1", &f.taps[0]}, {"tap2", &f.taps[1]},
                              {"tap3", &f.taps[2]},  {"tap4", &f.taps[3]}, {"fused", &f.head}};
  std::vector<std::string> written;
  std::ostringstream manifest;
  manifest << "heatmap manifest v1\n";
  manifest << "stem " << stem << '\n';
  manifest << "image_size " << image.h << ' ' << image.w << '\n';
  for (const Row& row : rows) {
    RowVectorX<Scalar> flat =
        upsample_nearest(normalize_unit(RowVectorX<Scalar>(channel_mean(*row.map))), row.map->h,
                         row.map->w, image.h, image.w);
    const std::string path = (fs::path(dir) / (stem + "_" + row.name + ".pgm")).string();
    detail::write_gray(path, flat, image.h, image.w);
    manifest << row.name << ' ' << stem + "_" + row.name + ".pgm" << " source " << row.map->h
             << 'x' << row.map->w << '\n';
    written.push_back(path);
  }
  const std::string mpath = (fs::path(dir) / (stem + "_manifest.txt")).string();
  write_text_file(mpath, manifest.str());
  written.push_back(mpath);
  return written;
}

// Continuous gate and binary mask of one query at the head resolution,
// upsampled to the input size: <stem>_gate.pgm and <stem>_mask.pgm. The gate
// is already sigmoid output in (0,1) and is written unnormalized.
template <typename Scalar>
std::vector<std::string> export_query_masks(const ModelConfig& cfg,
                                            const ModelParams<Scalar>& params,
                                            const FeatureMap<Scalar>& image,
                                            const std::string& dir, const std::string& stem) {
  namespace fs = std::filesystem;
  if (!cfg.use_imfr)
    throw std::invalid_argument("export_query_masks: the mask head is disabled in this model");
  fs::create_directories(dir);
  ImageFeatures<Scalar> f = feature_forward(cfg, params, image);
  RowVectorX<Scalar> gate = global_mask<Scalar>(f.head, params.imfr.gate_conv);
  const int hw = int(f.head.data.cols());
  RowVectorX<Scalar> mask = binarize_topk(gate, std::min(cfg.topk, hw));
  std::vector<std::string> written;
  const std::string gpath = (fs::path(dir) / (stem + "_gate.pgm")).string();
  const std::string bpath = (fs::path(dir) / (stem + "_mask.pgm")).string();
  detail::write_gray(gpath, RowVectorX<Scalar>(upsample_nearest(gate, f.head.h, f.head.w, image.h, image.w)),
                     image.h, image.w);
  detail::write_gray(bpath, RowVectorX<Scalar>(upsample_nearest(mask, f.head.h, f.head.w, image.h, image.w)),
                     image.h, image.w);
  written.push_back(gpath);
  written.push_back(bpath);
  return written;
}

}  // namespace causalfs
