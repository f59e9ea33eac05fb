#pragma once

#include <algorithm>
#include <optional>
#include <span>
#include <vector>

#include "noduleid/annotations.hpp"
#include "noduleid/backbone.hpp"
#include "noduleid/nn/adam.hpp"
#include "noduleid/nn/layers.hpp"
#include "noduleid/nn/losses.hpp"
#include "noduleid/volume.hpp"

namespace noduleid {

// LUNA-style hit criterion: candidate center strictly inside the annotation
// radius. Distance exactly equal to the radius is a miss.
inline bool hit(const Candidate& c, const NoduleAnnotation& a) {
  return distance(c.center_world, a.center_world) < a.diameter / 2.0;
}

// First k of an already-sorted candidate list (the 32-FP operating point).
inline std::vector<Candidate> top_k(const std::vector<Candidate>& sorted, int k) {
  if (k < 0) throw std::invalid_argument("top_k: k must be >= 0");
  const std::size_t n = std::min<std::size_t>(sorted.size(), static_cast<std::size_t>(k));
  return std::vector<Candidate>(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(n));
}

// Probability descending, coordinates ascending as the deterministic tie-break.
inline void sort_candidates(std::vector<Candidate>& cs) {
  std::sort(cs.begin(), cs.end(), [](const Candidate& a, const Candidate& b) {
    if (a.probability != b.probability) return a.probability > b.probability;
    if (a.center_world[0] != b.center_world[0]) return a.center_world[0] < b.center_world[0];
    if (a.center_world[1] != b.center_world[1]) return a.center_world[1] < b.center_world[1];
    return a.center_world[2] < b.center_world[2];
  });
}

// Center-distance NMS, keep-highest-probability. Input need not be sorted;
// output is sorted.
inline std::vector<Candidate> nms(std::vector<Candidate> cs, double radius_mm) {
  sort_candidates(cs);
  std::vector<Candidate> kept;
  for (const Candidate& c : cs) {
    bool suppressed = false;
    for (const Candidate& k : kept)
      if (distance(c.center_world, k.center_world) <= radius_mm) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(c);
  }
  return kept;
}

// Indices of the `quota` highest losses (ties broken by lower index).
inline std::vector<int> hard_negative_select(const std::vector<double>& losses, int quota) {
  std::vector<int> idx(losses.size());
  for (std::size_t i = 0; i < losses.size(); ++i) idx[i] = static_cast<int>(i);
  const int k = std::min<int>(quota, static_cast<int>(losses.size()));
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return losses[static_cast<std::size_t>(a)] >
                                              losses[static_cast<std::size_t>(b)]; });
  idx.resize(static_cast<std::size_t>(std::max(0, k)));
  std::sort(idx.begin(), idx.end());
  return idx;
}

struct DetectorConfig {
  std::array<int, 4> widths{16, 32, 64, 64};  // stem, enc1, enc2, enc3
  std::vector<double> anchors_mm{5.0, 10.0, 20.0};
  double nms_radius_mm = 10.0;     // max anchor / 2
  double prob_floor = 0.05;        // decode cutoff before NMS
  int max_per_patch = 128;

  int n_anchors() const { return static_cast<int>(anchors_mm.size()); }
};

struct DetectorRecipe {
  int epochs = 450;
  int batch_size = 8;
  double lr0 = 0.1;
  double lr_decay = 0.001;  // multiplicative factor applied every decay_every epochs
  int decay_every = 100;
  int hard_negative_factor = 20;  // times batch size
  int crop_size = 64;             // training crop side (network is fully convolutional)
  double center_jitter_mm = 10.0;
  bool augment = true;  // axis flips + quarter turns on crops
  std::uint64_t seed = 0;
};

// lr(epoch) = lr0 * decay^floor(epoch / every).
inline double detector_lr_at(const DetectorRecipe& r, int epoch) {
  return r.lr0 * std::pow(r.lr_decay, static_cast<double>(epoch / r.decay_every));
}

// One preprocessed scan (1 mm isotropic, normalized) with every lesion that
// should be detected.
struct DetectorCase {
  Volume volume;
  std::vector<NoduleAnnotation> lesions;
};

// ---------------------------------------------------------------------------
// Encoder-decoder detector with symmetric skip links and a dual head: one
// 4-vector regression (center offsets + log-diameter) and one logit per
// anchor, on a stride-4 grid fed with the scan-relative location channels.
// ---------------------------------------------------------------------------
template <typename T = float>
class Detector {
 public:
  explicit Detector(DetectorConfig cfg = {}, std::uint64_t seed = 0) : cfg_(std::move(cfg)) {
    const auto [w0, w1, w2, w3] = cfg_.widths;
    const int a = cfg_.n_anchors();
    stem_ = nn::Conv3d<T>(1, w0, 3, 2, 1, false, "stem.conv");
    stem_bn_ = nn::BatchNorm<T>(w0, "stem.bn");
    enc1_ = BasicBlock<T>(w0, w1, 2, "enc1");
    enc2_ = BasicBlock<T>(w1, w2, 2, "enc2");
    enc3_ = BasicBlock<T>(w2, w3, 2, "enc3");
    dec2_ = nn::Conv3d<T>(w3 + w2, w2, 3, 1, 1, false, "dec2.conv");
    dec2_bn_ = nn::BatchNorm<T>(w2, "dec2.bn");
    dec1_ = nn::Conv3d<T>(w2 + w1, w1, 3, 1, 1, false, "dec1.conv");
    dec1_bn_ = nn::BatchNorm<T>(w1, "dec1.bn");
    merge_ = nn::Conv3d<T>(w1 + 3, w1, 3, 1, 1, false, "merge.conv");
    merge_bn_ = nn::BatchNorm<T>(w1, "merge.bn");
    cls_ = nn::Conv3d<T>(w1, a, 1, 1, 0, true, "head.cls");
    reg_ = nn::Conv3d<T>(w1, 4 * a, 1, 1, 0, true, "head.reg");

    Rng rng(mix_seed(seed, 0xde7ec7ULL));
    stem_.init(rng);
    enc1_.init(rng);
    enc2_.init(rng);
    enc3_.init(rng);
    dec2_.init(rng);
    dec1_.init(rng);
    merge_.init(rng);
    cls_.init(rng);
    reg_.init(rng);
  }

  const DetectorConfig& config() const { return cfg_; }

  struct Output {
    Tensor<T> cls;  // (N, A, g, g, g) logits
    Tensor<T> reg;  // (N, 4A, g, g, g)
  };

  // x: (N, 1, S, S, S) with S divisible by 16; loc: (N, 3, S/4, S/4, S/4).
  Output forward(const Tensor<T>& x, const Tensor<T>& loc, const nn::Ctx& ctx) {
    if (x.ndim() != 5 || x.dim(1) != 1)
      throw std::invalid_argument("detector expects (N,1,S,S,S) input, got " + x.shape_str());
    if (x.dim(2) % 16 != 0 || x.dim(2) != x.dim(3) || x.dim(2) != x.dim(4))
      throw std::invalid_argument("detector input side must be cubic and divisible by 16");
    if (loc.dim(2) != x.dim(2) / 4)
      throw std::invalid_argument("location grid must be input side / 4");

    Tensor<T> s = stem_relu_.forward(stem_bn_.forward(stem_.forward(x, ctx), ctx), ctx);
    Tensor<T> e1 = enc1_.forward(s, ctx);
    Tensor<T> e2 = enc2_.forward(e1, ctx);
    Tensor<T> e3 = enc3_.forward(e2, ctx);

    Tensor<T> u2 = nn::concat_channels(up2_.forward(e3, ctx), e2);
    Tensor<T> d2 = dec2_relu_.forward(dec2_bn_.forward(dec2_.forward(u2, ctx), ctx), ctx);
    Tensor<T> u1 = nn::concat_channels(up1_.forward(d2, ctx), e1);
    Tensor<T> d1 = dec1_relu_.forward(dec1_bn_.forward(dec1_.forward(u1, ctx), ctx), ctx);

    Tensor<T> m = nn::concat_channels(d1, loc);
    Tensor<T> f = merge_relu_.forward(merge_bn_.forward(merge_.forward(m, ctx), ctx), ctx);

    Output out;
    out.cls = cls_.forward(f, ctx);
    out.reg = reg_.forward(f, ctx);
    if (ctx.train) {
      e1_ch_ = e1.dim(1);
      e2_ch_ = e2.dim(1);
      d1_ch_ = d1.dim(1);
    }
    return out;
  }

  void backward(const Tensor<T>& dcls, const Tensor<T>& dreg) {
    Tensor<T> df = cls_.backward(dcls);
    Tensor<T> df2 = reg_.backward(dreg);
    for (std::int64_t i = 0; i < df.numel(); ++i) df[i] += df2[i];
    Tensor<T> dm = merge_.backward(merge_bn_.backward(merge_relu_.backward(df)));
    Tensor<T> dd1, dloc;
    nn::split_channels(dm, d1_ch_, dd1, dloc);
    Tensor<T> du1 = dec1_.backward(dec1_bn_.backward(dec1_relu_.backward(dd1)));
    Tensor<T> dup1, de1_skip;
    nn::split_channels(du1, du1.dim(1) - e1_ch_, dup1, de1_skip);
    Tensor<T> dd2 = up1_.backward(dup1);
    Tensor<T> du2 = dec2_.backward(dec2_bn_.backward(dec2_relu_.backward(dd2)));
    Tensor<T> dup2, de2_skip;
    nn::split_channels(du2, du2.dim(1) - e2_ch_, dup2, de2_skip);
    Tensor<T> de3 = up2_.backward(dup2);
    Tensor<T> de2 = enc3_.backward(de3);
    for (std::int64_t i = 0; i < de2.numel(); ++i) de2[i] += de2_skip[i];
    Tensor<T> de1 = enc2_.backward(de2);
    for (std::int64_t i = 0; i < de1.numel(); ++i) de1[i] += de1_skip[i];
    Tensor<T> ds = enc1_.backward(de1);
    stem_.backward(stem_bn_.backward(stem_relu_.backward(ds)));
  }

  nn::ParamRefs<T> params() {
    nn::ParamRefs<T> out;
    stem_.collect(out);
    stem_bn_.collect(out);
    enc1_.collect(out);
    enc2_.collect(out);
    enc3_.collect(out);
    dec2_.collect(out);
    dec2_bn_.collect(out);
    dec1_.collect(out);
    dec1_bn_.collect(out);
    merge_.collect(out);
    merge_bn_.collect(out);
    cls_.collect(out);
    reg_.collect(out);
    return out;
  }

  std::vector<nn::BufferRef<T>> buffers() {
    std::vector<nn::BufferRef<T>> out;
    stem_bn_.collect_buffers(out);
    enc1_.collect_buffers(out);
    enc2_.collect_buffers(out);
    enc3_.collect_buffers(out);
    dec2_bn_.collect_buffers(out);
    dec1_bn_.collect_buffers(out);
    merge_bn_.collect_buffers(out);
    return out;
  }

  void save(const std::filesystem::path& path) {
    std::vector<checkpoint::NamedTensor> tensors;
    std::vector<Tensor<float>> storage;
    nn::ParamRefs<T> ps = params();
    auto bs = buffers();
    storage.reserve(ps.size() + bs.size());
    const auto push = [&](const std::string& name, const Tensor<T>& t) {
      if constexpr (std::is_same_v<T, float>) {
        tensors.push_back({name, &t});
      } else {
        storage.push_back(t.template cast<float>());
        tensors.push_back({name, &storage.back()});
      }
    };
    for (auto* p : ps) push(p->name, p->v);
    for (auto& b : bs) push(b.name, *b.t);
    nlohmann::json meta;
    meta["widths"] = cfg_.widths;
    meta["anchors_mm"] = cfg_.anchors_mm;
    meta["nms_radius_mm"] = cfg_.nms_radius_mm;
    meta["prob_floor"] = cfg_.prob_floor;
    checkpoint::save(path, "detector", meta, tensors);
  }

  static Detector<T> load_from(const std::filesystem::path& path) {
    checkpoint::Loaded ck = checkpoint::load(path);
    if (ck.kind != "detector")
      throw CorruptCheckpointError("checkpoint kind '" + ck.kind + "' is not a detector");
    DetectorConfig cfg;
    cfg.widths = ck.meta.at("widths").get<std::array<int, 4>>();
    cfg.anchors_mm = ck.meta.at("anchors_mm").get<std::vector<double>>();
    cfg.nms_radius_mm = ck.meta.value("nms_radius_mm", cfg.nms_radius_mm);
    cfg.prob_floor = ck.meta.value("prob_floor", cfg.prob_floor);
    Detector<T> det(cfg, 0);
    const auto fill = [&](const std::string& name, Tensor<T>& dst) {
      auto it = ck.tensors.find(name);
      if (it == ck.tensors.end())
        throw CorruptCheckpointError("checkpoint missing tensor " + name);
      if (it->second.shape() != dst.shape())
        throw CorruptCheckpointError("checkpoint shape mismatch for " + name);
      for (std::int64_t i = 0; i < dst.numel(); ++i) dst[i] = static_cast<T>(it->second[i]);
    };
    for (auto* p : det.params()) fill(p->name, p->v);
    for (auto& b : det.buffers()) fill(b.name, *b.t);
    return det;
  }

 private:
  DetectorConfig cfg_;
  nn::Conv3d<T> stem_;
  nn::BatchNorm<T> stem_bn_;
  nn::ReLU<T> stem_relu_;
  BasicBlock<T> enc1_, enc2_, enc3_;
  nn::Upsample2x<T> up2_, up1_;
  nn::Conv3d<T> dec2_, dec1_, merge_;
  nn::BatchNorm<T> dec2_bn_, dec1_bn_, merge_bn_;
  nn::ReLU<T> dec2_relu_, dec1_relu_, merge_relu_;
  nn::Conv3d<T> cls_, reg_;
  int e1_ch_ = 0, e2_ch_ = 0, d1_ch_ = 0;
};

// ---------------------------------------------------------------------------
// Anchor coding. Grid stride is 4 voxels (1 mm isotropic): cell centers sit at
// start + (index + 0.5) * 4 per axis; regression targets are center offsets
// normalized by the anchor diameter and log(d / anchor).
// ---------------------------------------------------------------------------
namespace anchor {

inline constexpr int kGridStride = 4;

inline Vec3 cell_center_voxel(const Idx3& patch_start, int gx, int gy, int gz) {
  return {patch_start[0] + (gx + 0.5) * kGridStride, patch_start[1] + (gy + 0.5) * kGridStride,
          patch_start[2] + (gz + 0.5) * kGridStride};
}

inline std::array<float, 4> encode(const Vec3& cell_center, const Vec3& lesion_center,
                                   double diameter, double anchor) {
  return {static_cast<float>((lesion_center[0] - cell_center[0]) / anchor),
          static_cast<float>((lesion_center[1] - cell_center[1]) / anchor),
          static_cast<float>((lesion_center[2] - cell_center[2]) / anchor),
          static_cast<float>(std::log(diameter / anchor))};
}

inline Candidate decode(const Vec3& cell_center_vox, double anchor, float dx, float dy, float dz,
                        float dlog, double prob, const Volume& vol) {
  Candidate c;
  const double logd = std::clamp(static_cast<double>(dlog), -3.0, 3.0);
  const Vec3 vox{cell_center_vox[0] + dx * anchor, cell_center_vox[1] + dy * anchor,
                 cell_center_vox[2] + dz * anchor};
  c.center_world = voxel_to_world(vox, vol);
  c.diameter = anchor * std::exp(logd);
  c.probability = prob;
  return c;
}

struct Assignment {
  std::vector<int> positive;              // flat anchor indices
  std::vector<int> negative;
  std::vector<std::array<float, 4>> reg_targets;  // aligned with positive
};

struct LocalLesion {
  Vec3 center;  // voxel coordinates relative to the crop origin
  double diameter = 0.0;
};

// Flat anchor index layout matches the network output: a * g^3 + (gz*g + gy)*g
// + gx per sample, channel-major over anchors. Cells near a lesion but not
// well matched are excluded from the negatives.
inline Assignment assign_anchors(const std::vector<double>& anchors_mm, int g,
                                 const std::vector<LocalLesion>& lesions) {
  Assignment out;
  const int a_count = static_cast<int>(anchors_mm.size());
  const std::int64_t cells = static_cast<std::int64_t>(g) * g * g;

  std::vector<std::optional<std::array<float, 4>>> target(
      static_cast<std::size_t>(a_count) * cells);
  std::vector<bool> forbidden(static_cast<std::size_t>(a_count) * cells, false);

  for (const LocalLesion& le : lesions) {
    const Vec3& c = le.center;
    const double d = le.diameter;
    double best_cost = 1e30;
    int best_idx = -1;
    double best_dist = 1e30;
    for (int ai = 0; ai < a_count; ++ai) {
      const double a = anchors_mm[static_cast<std::size_t>(ai)];
      const double ratio = d / a;
      const double ratio_pen = std::abs(std::log(ratio));
      for (int gz = 0; gz < g; ++gz)
        for (int gy = 0; gy < g; ++gy)
          for (int gx = 0; gx < g; ++gx) {
            const Vec3 cc = cell_center_voxel({0, 0, 0}, gx, gy, gz);
            const double dist = distance(cc, c);
            const std::int64_t flat =
                static_cast<std::int64_t>(ai) * cells +
                (static_cast<std::int64_t>(gz) * g + gy) * g + gx;
            if (dist <= d / 2.0 + 8.0) forbidden[static_cast<std::size_t>(flat)] = true;
            if (ratio >= 0.5 && ratio <= 2.0 && dist <= std::max(2.0, d / 4.0))
              target[static_cast<std::size_t>(flat)] = encode(cc, c, d, a);
            const double cost = dist + 4.0 * ratio_pen;
            if (cost < best_cost) {
              best_cost = cost;
              best_dist = dist;
              best_idx = static_cast<int>(flat);
            }
          }
    }
    // Guarantee at least one positive anchor per lesion visible in the crop.
    if (best_idx >= 0 && best_dist <= static_cast<double>(g) * kGridStride) {
      const int ai = best_idx / static_cast<int>(cells);
      const std::int64_t cell = best_idx % cells;
      const int gz = static_cast<int>(cell / (static_cast<std::int64_t>(g) * g));
      const int gy = static_cast<int>((cell / g) % g);
      const int gx = static_cast<int>(cell % g);
      const Vec3 cc = cell_center_voxel({0, 0, 0}, gx, gy, gz);
      target[static_cast<std::size_t>(best_idx)] =
          encode(cc, c, d, anchors_mm[static_cast<std::size_t>(ai)]);
    }
  }

  for (std::int64_t i = 0; i < static_cast<std::int64_t>(target.size()); ++i) {
    if (target[static_cast<std::size_t>(i)]) {
      out.positive.push_back(static_cast<int>(i));
      out.reg_targets.push_back(*target[static_cast<std::size_t>(i)]);
    } else if (!forbidden[static_cast<std::size_t>(i)]) {
      out.negative.push_back(static_cast<int>(i));
    }
  }
  return out;
}

}  // namespace anchor

namespace detail {

// Cubic crop with zero padding plus its location grid (3, side/4, ...), using
// the same scan-relative normalization as split_overlapping.
struct DetectorCrop {
  Tensor<float> voxels;    // (1, s, s, s)
  Tensor<float> loc_grid;  // (3, s/4, s/4, s/4)
  std::vector<anchor::LocalLesion> lesions;
};

inline DetectorCrop make_crop(const Volume& v, Idx3 start, int side,
                              const std::vector<NoduleAnnotation>& lesions) {
  DetectorCrop out;
  out.voxels = Tensor<float>({1, side, side, side});
  for (int z = 0; z < side; ++z) {
    const int vz = start[2] + z;
    if (vz < 0 || vz >= v.dims[2]) continue;
    for (int y = 0; y < side; ++y) {
      const int vy = start[1] + y;
      if (vy < 0 || vy >= v.dims[1]) continue;
      const int xa = std::max(0, -start[0]);
      const int xb = std::min(side, v.dims[0] - start[0]);
      if (xa >= xb) continue;
      const float* src = &v.voxels[static_cast<std::size_t>(v.index(start[0] + xa, vy, vz))];
      std::copy(src, src + (xb - xa),
                out.voxels.data() + (static_cast<std::int64_t>(z) * side + y) * side + xa);
    }
  }
  const int g = side / anchor::kGridStride;
  out.loc_grid = Tensor<float>({3, g, g, g});
  const std::int64_t plane = static_cast<std::int64_t>(g) * g * g;
  std::int64_t i = 0;
  for (int z = 0; z < g; ++z)
    for (int y = 0; y < g; ++y)
      for (int x = 0; x < g; ++x, ++i) {
        const double px = start[0] + (x + 0.5) * anchor::kGridStride;
        const double py = start[1] + (y + 0.5) * anchor::kGridStride;
        const double pz = start[2] + (z + 0.5) * anchor::kGridStride;
        out.loc_grid[i] = static_cast<float>(std::clamp(2.0 * px / v.dims[0] - 1.0, -1.0, 1.0));
        out.loc_grid[plane + i] =
            static_cast<float>(std::clamp(2.0 * py / v.dims[1] - 1.0, -1.0, 1.0));
        out.loc_grid[2 * plane + i] =
            static_cast<float>(std::clamp(2.0 * pz / v.dims[2] - 1.0, -1.0, 1.0));
      }
  for (const auto& le : lesions) {
    const Vec3 cv = world_to_voxel(le.center_world, v);
    const Vec3 local{cv[0] - start[0], cv[1] - start[1], cv[2] - start[2]};
    if (local[0] > -8 && local[0] < side + 8 && local[1] > -8 && local[1] < side + 8 &&
        local[2] > -8 && local[2] < side + 8)
      out.lesions.push_back({local, le.diameter});
  }
  return out;
}

// Random axis flips and one random quarter turn, applied consistently to the
// crop, its location grid, and the lesion coordinates. Tensor spatial axes are
// (D,H,W) == (z,y,x); local lesion coordinates are (x,y,z).
inline void augment_crop(DetectorCrop& crop, Rng& rng) {
  const int side = crop.voxels.dim(1);
  const auto local_axis = [](int tensor_axis) { return 2 - tensor_axis; };
  for (int t = 0; t < 3; ++t) {
    if (!rng.bernoulli(0.5)) continue;
    crop.voxels = nn::flip_axis(crop.voxels, t);
    crop.loc_grid = nn::flip_axis(crop.loc_grid, t);
    for (auto& le : crop.lesions)
      le.center[static_cast<std::size_t>(local_axis(t))] =
          (side - 1) - le.center[static_cast<std::size_t>(local_axis(t))];
  }
  static constexpr int planes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  const int p = rng.uniform_int(3);
  const int quarters = rng.uniform_int(4);
  for (int q = 0; q < quarters; ++q) {
    const int ta = planes[p][0], tb = planes[p][1];
    crop.voxels = nn::rot90(crop.voxels, ta, tb);
    crop.loc_grid = nn::rot90(crop.loc_grid, ta, tb);
    const int la = local_axis(ta), lb = local_axis(tb);
    for (auto& le : crop.lesions) {
      const double a = le.center[static_cast<std::size_t>(la)];
      const double b = le.center[static_cast<std::size_t>(lb)];
      le.center[static_cast<std::size_t>(la)] = (side - 1) - b;
      le.center[static_cast<std::size_t>(lb)] = a;
    }
  }
}

}  // namespace detail

// Hard-negative-mined training on random crops (one lesion-centered and one
// random crop per scan per epoch).
template <typename T>
TrainHistory train_detector(Detector<T>& det, std::span<const DetectorCase> cases,
                            const DetectorRecipe& recipe) {
  std::int64_t total_lesions = 0;
  for (const auto& c : cases) total_lesions += static_cast<std::int64_t>(c.lesions.size());
  if (total_lesions == 0)
    throw ConfigError("train_detector: no positive anchors in the entire dataset");
  if (recipe.crop_size % 16 != 0)
    throw ConfigError("train_detector: crop size must be divisible by 16");

  Rng rng(mix_seed(recipe.seed, 0xd37ec7ULL));
  nn::ParamRefs<T> params = det.params();
  nn::Adam<T> opt(recipe.lr0);
  TrainHistory history;

  const int cs = recipe.crop_size;
  const int g = cs / anchor::kGridStride;
  const std::vector<double>& anchors = det.config().anchors_mm;
  const int a_count = static_cast<int>(anchors.size());
  const std::int64_t cells = static_cast<std::int64_t>(g) * g * g;

  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    opt.set_lr(detector_lr_at(recipe, epoch));

    // Assemble this epoch's crops.
    std::vector<detail::DetectorCrop> crops;
    for (const auto& c : cases) {
      const auto rand_start = [&](const Vec3& around, double jitter) {
        Idx3 s;
        for (int a = 0; a < 3; ++a) {
          const double lo = around[a] - cs / 2.0 - jitter;
          const double hi = around[a] - cs / 2.0 + jitter;
          s[a] = static_cast<int>(std::lround(rng.uniform(lo, hi)));
          s[a] = std::clamp(s[a], -cs / 4, std::max(-cs / 4, c.volume.dims[a] - 3 * cs / 4));
        }
        return s;
      };
      if (!c.lesions.empty()) {
        const auto& le = c.lesions[static_cast<std::size_t>(
            rng.uniform_int(static_cast<int>(c.lesions.size())))];
        const Vec3 cv = world_to_voxel(le.center_world, c.volume);
        crops.push_back(detail::make_crop(c.volume, rand_start(cv, recipe.center_jitter_mm), cs,
                                          c.lesions));
      }
      const Vec3 rnd{rng.uniform(0.0, c.volume.dims[0]), rng.uniform(0.0, c.volume.dims[1]),
                     rng.uniform(0.0, c.volume.dims[2])};
      crops.push_back(detail::make_crop(c.volume, rand_start(rnd, cs / 2.0), cs, c.lesions));
    }
    rng.shuffle(crops);
    if (recipe.augment)
      for (auto& cr : crops) detail::augment_crop(cr, rng);

    double epoch_loss = 0.0;
    std::int64_t steps = 0;
    for (std::size_t start = 0; start < crops.size();
         start += static_cast<std::size_t>(recipe.batch_size)) {
      const std::size_t end =
          std::min(crops.size(), start + static_cast<std::size_t>(recipe.batch_size));
      const int b = static_cast<int>(end - start);
      Tensor<T> x({b, 1, cs, cs, cs});
      Tensor<T> loc({b, 3, g, g, g});
      std::vector<anchor::Assignment> assigns(static_cast<std::size_t>(b));
      const std::int64_t xs = x.numel() / b, ls = loc.numel() / b;
      for (int r = 0; r < b; ++r) {
        const auto& cr = crops[start + static_cast<std::size_t>(r)];
        for (std::int64_t q = 0; q < xs; ++q) x[r * xs + q] = static_cast<T>(cr.voxels[q]);
        for (std::int64_t q = 0; q < ls; ++q) loc[r * ls + q] = static_cast<T>(cr.loc_grid[q]);
        assigns[static_cast<std::size_t>(r)] = anchor::assign_anchors(anchors, g, cr.lesions);
      }

      nn::Ctx ctx{true, &rng};
      nn::zero_grads(params);
      auto out = det.forward(x, loc, ctx);

      // Classification: positives plus the hardest negatives across the batch.
      std::vector<std::int64_t> pos_flat, neg_flat;
      std::vector<double> neg_losses;
      const std::int64_t per_sample = static_cast<std::int64_t>(a_count) * cells;
      for (int r = 0; r < b; ++r) {
        for (int i : assigns[static_cast<std::size_t>(r)].positive)
          pos_flat.push_back(r * per_sample + i);
        for (int i : assigns[static_cast<std::size_t>(r)].negative) {
          const std::int64_t fi = r * per_sample + i;
          neg_flat.push_back(fi);
          const double z = static_cast<double>(out.cls[fi]);
          neg_losses.push_back(std::log1p(std::exp(-std::abs(z))) + std::max(z, 0.0));
        }
      }
      const int quota = recipe.hard_negative_factor * recipe.batch_size;
      const std::vector<int> chosen = hard_negative_select(neg_losses, quota);

      std::vector<T> zsel;
      std::vector<int> ysel;
      std::vector<std::int64_t> sel_flat;
      for (std::int64_t fi : pos_flat) {
        zsel.push_back(out.cls[fi]);
        ysel.push_back(1);
        sel_flat.push_back(fi);
      }
      for (int ni : chosen) {
        const std::int64_t fi = neg_flat[static_cast<std::size_t>(ni)];
        zsel.push_back(out.cls[fi]);
        ysel.push_back(0);
        sel_flat.push_back(fi);
      }
      std::vector<T> dz;
      const T cls_loss = nn::bce_with_logits(zsel, ysel, {}, dz);

      // Regression on positive anchors.
      std::vector<T> rpred, rtarget;
      std::vector<std::int64_t> rflat;
      for (int r = 0; r < b; ++r) {
        const auto& as = assigns[static_cast<std::size_t>(r)];
        for (std::size_t k = 0; k < as.positive.size(); ++k) {
          const int i = as.positive[k];
          const int ai = i / static_cast<int>(cells);
          const std::int64_t cell = i % cells;
          for (int q = 0; q < 4; ++q) {
            const std::int64_t fi =
                r * (4 * static_cast<std::int64_t>(a_count) * cells) +
                (static_cast<std::int64_t>(4 * ai + q)) * cells + cell;
            rpred.push_back(out.reg[fi]);
            rtarget.push_back(static_cast<T>(as.reg_targets[k][static_cast<std::size_t>(q)]));
            rflat.push_back(fi);
          }
        }
      }
      std::vector<T> dreg_v;
      const T reg_loss = rpred.empty() ? T(0) : nn::smooth_l1(rpred, rtarget, dreg_v);

      Tensor<T> dcls(out.cls.shape());
      for (std::size_t k = 0; k < sel_flat.size(); ++k) dcls[sel_flat[k]] = dz[k];
      Tensor<T> dreg(out.reg.shape());
      for (std::size_t k = 0; k < rflat.size(); ++k) dreg[rflat[k]] = dreg_v[k];
      det.backward(dcls, dreg);
      if (opt.lr() > 0.0) opt.step(params);

      epoch_loss += static_cast<double>(cls_loss) + static_cast<double>(reg_loss);
      ++steps;
    }
    history.epochs.push_back({steps ? epoch_loss / steps : 0.0, 0.0});
  }
  return history;
}

// Candidates for one preprocessed scan, probability-descending after NMS.
template <typename T>
std::vector<Candidate> detect(Detector<T>& det, const Volume& volume) {
  const auto patches = split_overlapping(volume, 128, 32);
  const DetectorConfig& cfg = det.config();
  const int g = 128 / anchor::kGridStride;
  const std::int64_t cells = static_cast<std::int64_t>(g) * g * g;
  const int a_count = cfg.n_anchors();

  std::vector<Candidate> all;
  nn::Ctx ev;
  for (const auto& lp : patches) {
    Tensor<T> x({1, 1, 128, 128, 128});
    for (std::int64_t i = 0; i < x.numel(); ++i)
      x[i] = static_cast<T>(lp.patch.values[static_cast<std::size_t>(i)]);
    Tensor<T> loc({1, 3, g, g, g});
    for (std::int64_t i = 0; i < loc.numel(); ++i)
      loc[i] = static_cast<T>(lp.location_grid[i]);
    auto out = det.forward(x, loc, ev);

    std::vector<Candidate> patch_cands;
    for (int ai = 0; ai < a_count; ++ai) {
      const double a = cfg.anchors_mm[static_cast<std::size_t>(ai)];
      for (int gz = 0; gz < g; ++gz)
        for (int gy = 0; gy < g; ++gy)
          for (int gx = 0; gx < g; ++gx) {
            const std::int64_t cell = (static_cast<std::int64_t>(gz) * g + gy) * g + gx;
            const double p =
                static_cast<double>(nn::sigmoid(out.cls[ai * cells + cell]));
            if (p < cfg.prob_floor) continue;
            const Vec3 cc = anchor::cell_center_voxel(lp.start, gx, gy, gz);
            patch_cands.push_back(anchor::decode(
                cc, a, static_cast<float>(out.reg[(4 * ai + 0) * cells + cell]),
                static_cast<float>(out.reg[(4 * ai + 1) * cells + cell]),
                static_cast<float>(out.reg[(4 * ai + 2) * cells + cell]),
                static_cast<float>(out.reg[(4 * ai + 3) * cells + cell]), p, volume));
          }
    }
    sort_candidates(patch_cands);
    if (static_cast<int>(patch_cands.size()) > cfg.max_per_patch)
      patch_cands.resize(static_cast<std::size_t>(cfg.max_per_patch));
    all.insert(all.end(), patch_cands.begin(), patch_cands.end());
  }
  return nms(std::move(all), cfg.nms_radius_mm);
}

}  // namespace noduleid
