#pragma once

#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "noduleid/annotations.hpp"
#include "noduleid/backbone.hpp"
#include "noduleid/nn/losses.hpp"

namespace noduleid {

enum class HeadKind { basic, fc, cnn, mfc };
enum class LossKind { contrastive, bce };

inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::basic: return "basic";
    case HeadKind::fc: return "FC";
    case HeadKind::cnn: return "CNN";
    case HeadKind::mfc: return "MFC";
  }
  return "?";
}

// One of the eight named configurations. The four name letters decode to
// pretrained mode (F/U), feature maps (I/C), head (B/F/C/M), loss (C/B).
struct SiameseConfig {
  std::string name;
  bool frozen = true;
  bool combined = false;
  HeadKind head = HeadKind::basic;
  LossKind loss = LossKind::contrastive;
  std::vector<Tap> taps;
  double margin = 1.0;    // contrastive margin (free scale; embeddings unnormalized)
  double dropout = 0.3;

  void validate() const {
    if ((head == HeadKind::basic) != (loss == LossKind::contrastive))
      throw ConfigError(name + ": basic head pairs with contrastive loss, all others with BCE");
    if ((head == HeadKind::mfc) != combined)
      throw ConfigError(name + ": MFC head is exactly the combined-features head");
    if (taps.empty()) throw ConfigError(name + ": feature tap set must be non-empty");
    if (!combined && taps.size() != 1)
      throw ConfigError(name + ": individual feature mode takes exactly one tap");
    if (combined && taps.size() < 2)
      throw ConfigError(name + ": combined feature mode takes at least two taps");
    if (head == HeadKind::cnn)
      for (Tap t : taps)
        if (t == Tap::avgpool)
          throw ConfigError(name + ": CNN head needs spatial feature maps; avgpool has no "
                                   "spatial entry point");
    for (std::size_t i = 1; i < taps.size(); ++i)
      if (taps[i] <= taps[i - 1]) throw ConfigError(name + ": taps must be strictly ordered");
  }
};

inline const std::vector<std::string>& siamese_config_names() {
  static const std::vector<std::string> names = {"FIBC", "UIBC", "FIFB", "UIFB",
                                                 "FICB", "UICB", "FCMB", "UCMB"};
  return names;
}

// Default tap choice per configuration: the best-performing layer set reported
// for each network.
inline std::vector<Tap> default_taps(const std::string& name) {
  if (name == "FIBC") return {Tap::layer2};
  if (name == "UIBC") return {Tap::layer3};
  if (name == "FIFB") return {Tap::layer1};
  if (name == "UIFB") return {Tap::layer2};
  if (name == "FICB") return {Tap::layer1};
  if (name == "UICB") return {Tap::layer1};
  if (name == "FCMB") return {Tap::layer1, Tap::layer2};
  if (name == "UCMB") return {Tap::layer1, Tap::layer2, Tap::avgpool};
  throw ConfigError("unknown siamese configuration '" + name + "'");
}

inline ConfigError unknown_config_error(const std::string& name) {
  std::string valid;
  for (const auto& n : siamese_config_names()) valid += (valid.empty() ? "" : ", ") + n;
  return ConfigError("unknown siamese configuration '" + name + "' (valid: " + valid + ")");
}

inline SiameseConfig siamese_config_from_name(
    const std::string& name, const std::optional<std::vector<Tap>>& taps = std::nullopt) {
  if (name.size() != 4) throw unknown_config_error(name);
  SiameseConfig c;
  c.name = name;
  switch (name[0]) {
    case 'F': c.frozen = true; break;
    case 'U': c.frozen = false; break;
    default: throw unknown_config_error(name);
  }
  switch (name[1]) {
    case 'I': c.combined = false; break;
    case 'C': c.combined = true; break;
    default: throw unknown_config_error(name);
  }
  switch (name[2]) {
    case 'B': c.head = HeadKind::basic; break;
    case 'F': c.head = HeadKind::fc; break;
    case 'C': c.head = HeadKind::cnn; break;
    case 'M': c.head = HeadKind::mfc; break;
    default: throw unknown_config_error(name);
  }
  switch (name[3]) {
    case 'C': c.loss = LossKind::contrastive; break;
    case 'B': c.loss = LossKind::bce; break;
    default: throw unknown_config_error(name);
  }
  c.taps = taps.value_or(default_taps(name));
  c.validate();
  return c;
}

// The siamese training unit: two 32^3 normalized patches and a match label.
struct PairSample {
  Patch patch_t1, patch_t2;
  int label = 0;  // 1 matching, 0 non-matching
  std::string case_id_t1, case_id_t2;
};

struct CasePatches {
  std::string case_id;
  Patch patch_t1, patch_t2;
};

// Balanced pair set: one positive per case plus one negative pairing the T1
// nodule with a uniformly random other case's T2 nodule (never its own).
inline std::vector<PairSample> build_pair_dataset(std::span<const CasePatches> cases,
                                                  std::uint64_t seed) {
  const int n = static_cast<int>(cases.size());
  if (n < 2) throw ConfigError("build_pair_dataset: need at least 2 cases to form negatives");
  Rng rng(mix_seed(seed, 0x9a125ULL));
  std::vector<PairSample> out;
  out.reserve(2 * static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    PairSample s;
    s.patch_t1 = cases[static_cast<std::size_t>(i)].patch_t1;
    s.patch_t2 = cases[static_cast<std::size_t>(i)].patch_t2;
    s.label = 1;
    s.case_id_t1 = s.case_id_t2 = cases[static_cast<std::size_t>(i)].case_id;
    out.push_back(std::move(s));
  }
  for (int i = 0; i < n; ++i) {
    int j = rng.uniform_int(n - 1);
    if (j >= i) ++j;
    PairSample s;
    s.patch_t1 = cases[static_cast<std::size_t>(i)].patch_t1;
    s.patch_t2 = cases[static_cast<std::size_t>(j)].patch_t2;
    s.label = 0;
    s.case_id_t1 = cases[static_cast<std::size_t>(i)].case_id;
    s.case_id_t2 = cases[static_cast<std::size_t>(j)].case_id;
    out.push_back(std::move(s));
  }
  return out;
}

struct TrainRecipe {
  int epochs = 150;
  double learning_rate = 1e-4;
  int batch_size = 8;
  double dropout = 0.3;
  int early_stop_patience = 10;
  bool augment = true;  // random rotation, flip, zoom
  double val_fraction = 0.2;
  std::uint64_t seed = 0;

  void validate() const {
    if (epochs < 0 || batch_size < 1 || learning_rate < 0.0 || dropout < 0.0 ||
        dropout >= 1.0 || early_stop_patience < 1 || val_fraction < 0.0 || val_fraction >= 1.0)
      throw ConfigError("invalid train recipe");
  }
};

struct SiameseTrainResult {
  std::vector<EpochStats> train_history;   // running loss/accuracy per epoch
  std::vector<double> val_accuracy;        // per epoch
  double best_val_accuracy = 0.0;
  int best_epoch = -1;
  double final_train_accuracy = 0.0;
};

// ---------------------------------------------------------------------------
// Sibling feature extractors share one backbone parameter set; the head
// consumes the elementwise absolute difference of the two embeddings, which
// makes every configuration symmetric in its two inputs by construction.
// ---------------------------------------------------------------------------
template <typename T = float>
class SiameseModel {
 public:
  using Embedding = std::map<Tap, Tensor<T>>;  // per tap, batch dim kept

  SiameseModel(SiameseConfig cfg, std::shared_ptr<Backbone<T>> backbone,
               std::uint64_t seed = 0)
      : cfg_(std::move(cfg)), backbone_(std::move(backbone)) {
    cfg_.validate();
    if (!backbone_) throw ConfigError("siamese model needs a backbone");
    Rng rng(mix_seed(seed, std::hash<std::string>{}(cfg_.name)));
    if (cfg_.head == HeadKind::fc || cfg_.head == HeadKind::mfc) {
      fc1_ = nn::Linear<T>(static_cast<int>(head_input_width()), 64, "head.fc1");
      fc1_.init(rng);
      fc_bn_ = nn::BatchNorm<T>(64, "head.bn");
      fc_drop_ = nn::Dropout<T>(cfg_.dropout);
      fc2_ = nn::Linear<T>(64, 1, "head.fc2");
      fc2_.init(rng);
    } else if (cfg_.head == HeadKind::cnn) {
      const bool has_l1 = has_tap(Tap::layer1);
      const bool has_l2 = has_tap(Tap::layer2);
      if (has_l1) {
        cnn_stage2_ = ResStage<T>(64, 128, 4, 2, "head.layer2");
        cnn_stage2_.init(rng);
        built_stage2_ = true;
      }
      if (has_l1 || has_l2) {
        cnn_stage3_ = ResStage<T>(128, 256, 6, 2, "head.layer3");
        cnn_stage3_.init(rng);
        built_stage3_ = true;
      }
      cnn_stage4_ = ResStage<T>(256, 512, 3, 2, "head.layer4");
      cnn_stage4_.init(rng);
      cnn_fc_ = nn::Linear<T>(512, 1, "head.fc");
      cnn_fc_.init(rng);
    }
  }

  const SiameseConfig& config() const { return cfg_; }
  std::shared_ptr<Backbone<T>> backbone() { return backbone_; }

  // True when larger scores mean a better match (BCE probability); false for
  // contrastive distance.
  bool higher_is_better() const { return cfg_.loss == LossKind::bce; }

  std::int64_t head_input_width() const {
    std::int64_t w = 0;
    for (Tap t : cfg_.taps) w += tap_contract(t).numel();
    return w;
  }

  nn::ParamRefs<T> head_params() {
    nn::ParamRefs<T> out;
    if (cfg_.head == HeadKind::fc || cfg_.head == HeadKind::mfc) {
      fc1_.collect(out);
      fc_bn_.collect(out);
      fc2_.collect(out);
    } else if (cfg_.head == HeadKind::cnn) {
      if (built_stage2_) cnn_stage2_.collect(out);
      if (built_stage3_) cnn_stage3_.collect(out);
      cnn_stage4_.collect(out);
      cnn_fc_.collect(out);
    }
    return out;
  }

  std::vector<nn::BufferRef<T>> head_buffers() {
    std::vector<nn::BufferRef<T>> out;
    if (cfg_.head == HeadKind::fc || cfg_.head == HeadKind::mfc) fc_bn_.collect_buffers(out);
    if (cfg_.head == HeadKind::cnn) {
      if (built_stage2_) cnn_stage2_.collect_buffers(out);
      if (built_stage3_) cnn_stage3_.collect_buffers(out);
      cnn_stage4_.collect_buffers(out);
    }
    return out;
  }

  nn::ParamRefs<T> trainable_params() {
    nn::ParamRefs<T> out = head_params();
    if (!cfg_.frozen) {
      nn::ParamRefs<T> bb = backbone_->params();
      out.insert(out.end(), bb.begin(), bb.end());
    }
    return out;
  }

  // --- embeddings ------------------------------------------------------------

  Embedding embed_batch(const Tensor<T>& x, const nn::Ctx& ctx) {
    return backbone_->extract_batch(x, cfg_.taps, ctx);
  }

  Embedding embed_patch(const Patch& p) {
    check_patch(p);
    Tensor<T> x({1, 1, p.side, p.side, p.side});
    std::copy(p.values.begin(), p.values.end(), x.data());
    nn::Ctx ev;
    return embed_batch(x, ev);
  }

  // --- head ------------------------------------------------------------------

  // delta: per-tap |fa - fb| with batch dim. Returns raw head outputs: logits
  // for BCE heads, mean-L1 distances for the basic head.
  std::vector<T> head_forward(const std::map<Tap, Tensor<T>>& delta, const nn::Ctx& ctx) {
    const int n = delta.begin()->second.dim(0);
    std::vector<T> out(static_cast<std::size_t>(n));
    if (cfg_.head == HeadKind::basic) {
      const std::int64_t width = head_input_width();
      for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (Tap t : cfg_.taps) {
          const Tensor<T>& d = delta.at(t);
          const std::int64_t stride = d.numel() / n;
          const T* p = d.data() + static_cast<std::int64_t>(i) * stride;
          for (std::int64_t j = 0; j < stride; ++j) s += std::abs(static_cast<double>(p[j]));
        }
        out[static_cast<std::size_t>(i)] = static_cast<T>(s / static_cast<double>(width));
      }
      return out;
    }
    if (cfg_.head == HeadKind::fc || cfg_.head == HeadKind::mfc) {
      Tensor<T> flat({n, static_cast<int>(head_input_width())});
      std::int64_t off = 0;
      for (Tap t : cfg_.taps) {
        const Tensor<T>& d = delta.at(t);
        const std::int64_t stride = d.numel() / n;
        for (int i = 0; i < n; ++i)
          std::copy(d.data() + i * stride, d.data() + (i + 1) * stride,
                    flat.data() + static_cast<std::int64_t>(i) * head_input_width() + off);
        off += stride;
      }
      Tensor<T> z = fc2_.forward(
          fc_drop_.forward(fc_relu_.forward(fc_bn_.forward(fc1_.forward(flat, ctx), ctx), ctx),
                           ctx),
          ctx);
      for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = z[i];
      return out;
    }
    // CNN head: distance maps enter the clean residual network at the block
    // matching each tap's depth.
    Tensor<T> x;
    bool have = false;
    if (has_tap(Tap::layer1)) {
      x = cnn_stage2_.forward(delta.at(Tap::layer1), ctx);
      have = true;
    }
    if (has_tap(Tap::layer2)) {
      if (have)
        add_into(x, delta.at(Tap::layer2));
      else
        x = delta.at(Tap::layer2);
      have = true;
    }
    if (built_stage3_) x = cnn_stage3_.forward(x, ctx);
    if (has_tap(Tap::layer3)) {
      if (have)
        add_into(x, delta.at(Tap::layer3));
      else
        x = delta.at(Tap::layer3);
    }
    x = cnn_stage4_.forward(x, ctx);
    Tensor<T> z = cnn_fc_.forward(cnn_pool_.forward(x, ctx), ctx);
    for (int i = 0; i < n; ++i) out[static_cast<std::size_t>(i)] = z[i];
    return out;
  }

  // dscore w.r.t. the raw head outputs -> gradients w.r.t. each delta tensor.
  std::map<Tap, Tensor<T>> head_backward(const std::vector<T>& dscore) {
    const int n = static_cast<int>(dscore.size());
    std::map<Tap, Tensor<T>> ddelta;
    if (cfg_.head == HeadKind::basic) {
      const std::int64_t width = head_input_width();
      for (Tap t : cfg_.taps) {
        Tensor<T> d = tap_batch_tensor(t, n);
        const std::int64_t stride = d.numel() / n;
        for (int i = 0; i < n; ++i) {
          const T g = static_cast<T>(static_cast<double>(dscore[static_cast<std::size_t>(i)]) /
                                     static_cast<double>(width));
          T* p = d.data() + static_cast<std::int64_t>(i) * stride;
          for (std::int64_t j = 0; j < stride; ++j) p[j] = g;
        }
        ddelta[t] = std::move(d);
      }
      return ddelta;
    }
    if (cfg_.head == HeadKind::fc || cfg_.head == HeadKind::mfc) {
      Tensor<T> dz({n, 1});
      for (int i = 0; i < n; ++i) dz[i] = dscore[static_cast<std::size_t>(i)];
      Tensor<T> dflat = fc1_.backward(
          fc_bn_.backward(fc_relu_.backward(fc_drop_.backward(fc2_.backward(dz)))));
      std::int64_t off = 0;
      for (Tap t : cfg_.taps) {
        Tensor<T> d = tap_batch_tensor(t, n);
        const std::int64_t stride = d.numel() / n;
        for (int i = 0; i < n; ++i)
          std::copy(dflat.data() + static_cast<std::int64_t>(i) * head_input_width() + off,
                    dflat.data() + static_cast<std::int64_t>(i) * head_input_width() + off + stride,
                    d.data() + i * stride);
        off += stride;
        ddelta[t] = std::move(d);
      }
      return ddelta;
    }
    Tensor<T> dz({n, 1});
    for (int i = 0; i < n; ++i) dz[i] = dscore[static_cast<std::size_t>(i)];
    Tensor<T> g = cnn_stage4_.backward(cnn_pool_.backward(cnn_fc_.backward(dz)));
    if (has_tap(Tap::layer3)) ddelta[Tap::layer3] = g;
    if (built_stage3_) {
      g = cnn_stage3_.backward(g);
      if (has_tap(Tap::layer2)) ddelta[Tap::layer2] = g;
      if (built_stage2_) ddelta[Tap::layer1] = cnn_stage2_.backward(g);
    }
    return ddelta;
  }

  // --- scoring ---------------------------------------------------------------

  // Raw score for one pair: match probability for BCE heads (sigmoid of the
  // logit), embedding distance for the basic head.
  double forward_pair(const Patch& a, const Patch& b) {
    check_patch(a);
    check_patch(b);
    Tensor<T> x({2, 1, a.side, a.side, a.side});
    const std::int64_t stride = x.numel() / 2;
    std::copy(a.values.begin(), a.values.end(), x.data());
    std::copy(b.values.begin(), b.values.end(), x.data() + stride);
    nn::Ctx ev;
    Embedding emb = embed_batch(x, ev);
    std::map<Tap, Tensor<T>> delta;
    for (Tap t : cfg_.taps) {
      const Tensor<T>& f = emb.at(t);
      const std::int64_t s = f.numel() / 2;
      Tensor<T> d = tap_batch_tensor(t, 1);
      for (std::int64_t j = 0; j < s; ++j) d[j] = std::abs(f[j] - f[s + j]);
      delta[t] = std::move(d);
    }
    const std::vector<T> raw = head_forward(delta, ev);
    return finalize_score(raw[0]);
  }

  // Scores for all pairs (i, j) between two embedded candidate lists; row-major
  // n1 x n2. Embeddings are computed once per patch by the caller.
  std::vector<double> pair_score_matrix(const std::vector<Embedding>& side1,
                                        const std::vector<Embedding>& side2,
                                        int chunk_pairs = 256) {
    const int n1 = static_cast<int>(side1.size()), n2 = static_cast<int>(side2.size());
    std::vector<double> out(static_cast<std::size_t>(n1) * n2);
    std::vector<std::pair<int, int>> todo;
    todo.reserve(static_cast<std::size_t>(n1) * n2);
    for (int i = 0; i < n1; ++i)
      for (int j = 0; j < n2; ++j) todo.emplace_back(i, j);
    nn::Ctx ev;
    for (std::size_t start = 0; start < todo.size();
         start += static_cast<std::size_t>(chunk_pairs)) {
      const std::size_t end = std::min(todo.size(), start + static_cast<std::size_t>(chunk_pairs));
      const int b = static_cast<int>(end - start);
      std::map<Tap, Tensor<T>> delta;
      for (Tap t : cfg_.taps) {
        Tensor<T> d = tap_batch_tensor(t, b);
        const std::int64_t stride = d.numel() / b;
        for (int r = 0; r < b; ++r) {
          const auto [i, j] = todo[start + static_cast<std::size_t>(r)];
          const Tensor<T>& fa = side1[static_cast<std::size_t>(i)].at(t);
          const Tensor<T>& fb = side2[static_cast<std::size_t>(j)].at(t);
          T* p = d.data() + static_cast<std::int64_t>(r) * stride;
          for (std::int64_t q = 0; q < stride; ++q) p[q] = std::abs(fa[q] - fb[q]);
        }
        delta[t] = std::move(d);
      }
      const std::vector<T> raw = head_forward(delta, ev);
      for (int r = 0; r < b; ++r) {
        const auto [i, j] = todo[start + static_cast<std::size_t>(r)];
        out[static_cast<std::size_t>(i) * n2 + j] = finalize_score(raw[static_cast<std::size_t>(r)]);
      }
    }
    return out;
  }

  // --- training ---------------------------------------------------------------

  SiameseTrainResult train(std::span<const PairSample> samples, const TrainRecipe& recipe) {
    recipe.validate();
    if (samples.empty()) throw ConfigError("siamese train: empty sample list");
    Rng rng(mix_seed(recipe.seed, 0x51a3e5eULL));

    // Stratified train/validation split.
    std::vector<int> pos, neg;
    for (std::size_t i = 0; i < samples.size(); ++i)
      (samples[i].label == 1 ? pos : neg).push_back(static_cast<int>(i));
    rng.shuffle(pos);
    rng.shuffle(neg);
    std::vector<int> val_idx, train_idx;
    const auto take = [&](std::vector<int>& src) {
      const int nv = static_cast<int>(std::floor(recipe.val_fraction * src.size()));
      for (int i = 0; i < nv; ++i) val_idx.push_back(src[static_cast<std::size_t>(i)]);
      for (std::size_t i = static_cast<std::size_t>(nv); i < src.size(); ++i)
        train_idx.push_back(src[i]);
    };
    take(pos);
    take(neg);
    if (val_idx.empty()) val_idx = train_idx;  // tiny sets: validate on train
    return fit(samples, train_idx, val_idx, recipe, rng);
  }

  // Core loop with explicit index sets (used directly by cross_validate).
  SiameseTrainResult fit(std::span<const PairSample> samples, const std::vector<int>& train_idx,
                         const std::vector<int>& val_idx, const TrainRecipe& recipe, Rng& rng) {
    recipe.validate();
    if (train_idx.empty()) throw ConfigError("siamese train: empty sample list");
    fc_drop_ = nn::Dropout<T>(recipe.dropout);

    nn::ParamRefs<T> trainable = trainable_params();
    nn::Adam<T> opt(recipe.learning_rate);
    SiameseTrainResult result;

    // Frozen backbone embeddings do not change; without augmentation they can
    // be computed once.
    const bool precompute = cfg_.frozen && !recipe.augment;
    std::vector<Embedding> emb1, emb2;
    if (precompute) {
      emb1.resize(samples.size());
      emb2.resize(samples.size());
      std::vector<int> all;
      for (int i : train_idx) all.push_back(i);
      for (int i : val_idx) all.push_back(i);
      for (int i : all) {
        if (!emb1[static_cast<std::size_t>(i)].empty()) continue;
        emb1[static_cast<std::size_t>(i)] = embed_patch(samples[static_cast<std::size_t>(i)].patch_t1);
        emb2[static_cast<std::size_t>(i)] = embed_patch(samples[static_cast<std::size_t>(i)].patch_t2);
      }
    }

    std::vector<Tensor<T>> best_params;
    std::vector<Tensor<T>> best_buffers;
    const auto snapshot = [&]() {
      best_params.clear();
      for (auto* p : trainable) best_params.push_back(p->v);
      best_buffers.clear();
      for (auto& b : all_buffers()) best_buffers.push_back(*b.t);
    };
    const auto restore = [&]() {
      if (best_params.empty()) return;
      std::size_t k = 0;
      for (auto* p : trainable) p->v = best_params[k++];
      k = 0;
      for (auto& b : all_buffers()) *b.t = best_buffers[k++];
    };

    std::vector<int> order = train_idx;
    int since_improve = 0;
    for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
      rng.shuffle(order);
      double epoch_loss = 0.0;
      std::int64_t correct = 0, seen = 0;
      for (std::size_t start = 0; start < order.size();
           start += static_cast<std::size_t>(recipe.batch_size)) {
        const std::size_t end =
            std::min(order.size(), start + static_cast<std::size_t>(recipe.batch_size));
        const int b = static_cast<int>(end - start);
        std::vector<int> labels(static_cast<std::size_t>(b));
        for (int r = 0; r < b; ++r)
          labels[static_cast<std::size_t>(r)] =
              samples[static_cast<std::size_t>(order[start + static_cast<std::size_t>(r)])].label;

        std::map<Tap, Tensor<T>> delta, sign;
        const bool backprop_backbone = !cfg_.frozen;
        if (precompute) {
          build_delta_from_cache(emb1, emb2, order, start, b, delta);
        } else {
          // (2B) stacked sibling forward; caches support one backward pass.
          Tensor<T> x({2 * b, 1, kBackboneInputSide, kBackboneInputSide, kBackboneInputSide});
          const std::int64_t stride = x.numel() / (2 * b);
          for (int r = 0; r < b; ++r) {
            const PairSample& s =
                samples[static_cast<std::size_t>(order[start + static_cast<std::size_t>(r)])];
            Tensor<float> a_in = s.patch_t1.as_input();
            Tensor<float> b_in = s.patch_t2.as_input();
            if (recipe.augment) {
              nn::AugmentFlags flags{true, true, true, false};
              a_in = nn::random_augment(a_in, rng, flags);
              b_in = nn::random_augment(b_in, rng, flags);
            }
            for (std::int64_t q = 0; q < stride; ++q) {
              x[r * stride + q] = static_cast<T>(a_in[q]);
              x[(b + r) * stride + q] = static_cast<T>(b_in[q]);
            }
          }
          nn::Ctx bctx{backprop_backbone, &rng};
          Embedding emb = embed_batch(x, bctx);
          for (Tap t : cfg_.taps) {
            const Tensor<T>& f = emb.at(t);
            const std::int64_t s = f.numel() / (2 * b);
            Tensor<T> d = tap_batch_tensor(t, b), sg = tap_batch_tensor(t, b);
            for (int r = 0; r < b; ++r)
              for (std::int64_t q = 0; q < s; ++q) {
                const T diff = f[r * s + q] - f[(b + r) * s + q];
                d[r * s + q] = std::abs(diff);
                sg[r * s + q] = diff > T(0) ? T(1) : (diff < T(0) ? T(-1) : T(0));
              }
            delta[t] = std::move(d);
            sign[t] = std::move(sg);
          }
        }

        nn::zero_grads(trainable);
        nn::Ctx hctx{true, &rng};
        const std::vector<T> raw = head_forward(delta, hctx);
        std::vector<T> draw;
        double loss = 0.0;
        if (cfg_.loss == LossKind::bce) {
          loss = static_cast<double>(nn::bce_with_logits(raw, labels, {}, draw));
          for (int r = 0; r < b; ++r)
            correct += (raw[static_cast<std::size_t>(r)] > T(0)) == (labels[static_cast<std::size_t>(r)] == 1);
        } else {
          loss = static_cast<double>(
              nn::contrastive_batch(raw, labels, static_cast<T>(cfg_.margin), draw));
          for (int r = 0; r < b; ++r)
            correct += (raw[static_cast<std::size_t>(r)] < cfg_.margin / 2.0) ==
                       (labels[static_cast<std::size_t>(r)] == 1);
        }
        std::map<Tap, Tensor<T>> ddelta = head_backward(draw);
        if (backprop_backbone) {
          std::map<Tap, Tensor<T>> dtaps;
          for (Tap t : cfg_.taps) {
            const Tensor<T>& dd = ddelta.at(t);
            const Tensor<T>& sg = sign.at(t);
            const std::int64_t s = dd.numel() / b;
            Tensor<T> g = stacked_tap_tensor(t, 2 * b);
            for (int r = 0; r < b; ++r)
              for (std::int64_t q = 0; q < s; ++q) {
                const T v = dd[r * s + q] * sg[r * s + q];
                g[r * s + q] = v;
                g[(b + r) * s + q] = -v;
              }
            dtaps[t] = std::move(g);
          }
          backbone_->backward_from_taps(dtaps);
        }
        if (recipe.learning_rate > 0.0) opt.step(trainable);
        epoch_loss += loss * b;
        seen += b;
      }

      result.train_history.push_back(
          {epoch_loss / static_cast<double>(seen), static_cast<double>(correct) / seen});

      const double val_acc = precompute
                                 ? evaluate_cached(samples, val_idx, emb1, emb2)
                                 : evaluate(samples, val_idx);
      result.val_accuracy.push_back(val_acc);
      if (val_acc > result.best_val_accuracy || result.best_epoch < 0) {
        result.best_val_accuracy = val_acc;
        result.best_epoch = epoch;
        since_improve = 0;
        snapshot();
      } else if (++since_improve >= recipe.early_stop_patience) {
        break;
      }
    }
    restore();
    if (!result.train_history.empty())
      result.final_train_accuracy = result.train_history.back().accuracy;
    return result;
  }

  double evaluate(std::span<const PairSample> samples, const std::vector<int>& idx) {
    if (idx.empty()) return 0.0;
    std::int64_t correct = 0;
    for (int i : idx) {
      const PairSample& s = samples[static_cast<std::size_t>(i)];
      const double score = forward_pair(s.patch_t1, s.patch_t2);
      correct += predicted_label(score) == s.label;
    }
    return static_cast<double>(correct) / static_cast<double>(idx.size());
  }

  int predicted_label(double score) const {
    if (cfg_.loss == LossKind::bce) return score > 0.5 ? 1 : 0;
    return score < cfg_.margin / 2.0 ? 1 : 0;
  }

  // --- persistence -------------------------------------------------------------

  void save(const std::filesystem::path& path) {
    std::vector<checkpoint::NamedTensor> tensors;
    std::vector<Tensor<float>> storage;
    collect_named(tensors, storage);
    nlohmann::json meta;
    meta["config"] = cfg_.name;
    std::vector<std::string> tap_names;
    for (Tap t : cfg_.taps) tap_names.push_back(to_string(t));
    meta["taps"] = tap_names;
    meta["margin"] = cfg_.margin;
    meta["dropout"] = cfg_.dropout;
    meta["backbone_arch"] = Backbone<T>::arch_id();
    checkpoint::save(path, "siamese", meta, tensors);
  }

  static SiameseModel<T> load_from(const std::filesystem::path& path) {
    checkpoint::Loaded ck = checkpoint::load(path);
    if (ck.kind != "siamese")
      throw CorruptCheckpointError("checkpoint kind '" + ck.kind + "' is not a siamese model");
    std::vector<Tap> taps;
    for (const auto& s : ck.meta.at("taps").get<std::vector<std::string>>())
      taps.push_back(parse_tap(s));
    SiameseConfig cfg = siamese_config_from_name(ck.meta.at("config").get<std::string>(), taps);
    cfg.margin = ck.meta.value("margin", 1.0);
    cfg.dropout = ck.meta.value("dropout", 0.3);
    auto backbone = std::make_shared<Backbone<T>>(0);
    SiameseModel<T> model(cfg, backbone, 0);
    model.assign_named(ck);
    return model;
  }

 private:
  bool has_tap(Tap t) const {
    for (Tap x : cfg_.taps)
      if (x == t) return true;
    return false;
  }

  void check_patch(const Patch& p) const {
    if (p.side != kBackboneInputSide)
      throw std::invalid_argument("siamese expects 32^3 patches, got side " +
                                  std::to_string(p.side));
  }

  double finalize_score(T raw) const {
    if (cfg_.loss == LossKind::bce) return static_cast<double>(nn::sigmoid(raw));
    return static_cast<double>(raw);
  }

  static void add_into(Tensor<T>& x, const Tensor<T>& y) {
    for (std::int64_t i = 0; i < x.numel(); ++i) x[i] += y[i];
  }

  Tensor<T> tap_batch_tensor(Tap t, int n) const {
    const TapShape ts = tap_contract(t);
    if (t == Tap::avgpool) return Tensor<T>({n, ts.channels});
    return Tensor<T>({n, ts.channels, ts.spatial[0], ts.spatial[1], ts.spatial[2]});
  }
  Tensor<T> stacked_tap_tensor(Tap t, int n) const { return tap_batch_tensor(t, n); }

  void build_delta_from_cache(const std::vector<Embedding>& emb1,
                              const std::vector<Embedding>& emb2, const std::vector<int>& order,
                              std::size_t start, int b, std::map<Tap, Tensor<T>>& delta) {
    for (Tap t : cfg_.taps) {
      Tensor<T> d = tap_batch_tensor(t, b);
      const std::int64_t stride = d.numel() / b;
      for (int r = 0; r < b; ++r) {
        const int i = order[start + static_cast<std::size_t>(r)];
        const Tensor<T>& fa = emb1[static_cast<std::size_t>(i)].at(t);
        const Tensor<T>& fb = emb2[static_cast<std::size_t>(i)].at(t);
        T* p = d.data() + static_cast<std::int64_t>(r) * stride;
        for (std::int64_t q = 0; q < stride; ++q) p[q] = std::abs(fa[q] - fb[q]);
      }
      delta[t] = std::move(d);
    }
  }

  double evaluate_cached(std::span<const PairSample> samples, const std::vector<int>& idx,
                         const std::vector<Embedding>& emb1, const std::vector<Embedding>& emb2) {
    if (idx.empty()) return 0.0;
    nn::Ctx ev;
    std::int64_t correct = 0;
    std::map<Tap, Tensor<T>> delta;
    std::vector<int> order = idx;
    build_delta_from_cache(emb1, emb2, order, 0, static_cast<int>(order.size()), delta);
    const std::vector<T> raw = head_forward(delta, ev);
    for (std::size_t r = 0; r < order.size(); ++r) {
      const double score = finalize_score(raw[r]);
      correct += predicted_label(score) == samples[static_cast<std::size_t>(order[r])].label;
    }
    return static_cast<double>(correct) / static_cast<double>(order.size());
  }

  std::vector<nn::BufferRef<T>> all_buffers() {
    std::vector<nn::BufferRef<T>> out = head_buffers();
    if (!cfg_.frozen) {
      auto bb = backbone_->buffers();
      out.insert(out.end(), bb.begin(), bb.end());
    }
    return out;
  }

  void collect_named(std::vector<checkpoint::NamedTensor>& out,
                     std::vector<Tensor<float>>& storage) {
    storage.clear();
    nn::ParamRefs<T> bb = backbone_->params();
    auto bbuf = backbone_->buffers();
    nn::ParamRefs<T> hp = head_params();
    auto hbuf = head_buffers();
    storage.reserve(bb.size() + bbuf.size() + hp.size() + hbuf.size());
    const auto push = [&](const std::string& name, const Tensor<T>& t) {
      if constexpr (std::is_same_v<T, float>) {
        out.push_back({name, &t});
      } else {
        storage.push_back(t.template cast<float>());
        out.push_back({name, &storage.back()});
      }
    };
    for (auto* p : bb) push("backbone." + p->name, p->v);
    for (auto& b : bbuf) push("backbone." + b.name, *b.t);
    for (auto* p : hp) push(p->name, p->v);
    for (auto& b : hbuf) push(b.name, *b.t);
  }

  void assign_named(const checkpoint::Loaded& ck) {
    const auto fetch = [&ck](const std::string& name) -> const Tensor<float>& {
      auto it = ck.tensors.find(name);
      if (it == ck.tensors.end())
        throw CorruptCheckpointError("checkpoint missing tensor " + name);
      return it->second;
    };
    const auto fill = [&](const std::string& name, Tensor<T>& dst) {
      const Tensor<float>& src = fetch(name);
      if (src.shape() != dst.shape())
        throw CorruptCheckpointError("checkpoint shape mismatch for " + name);
      for (std::int64_t i = 0; i < src.numel(); ++i) dst[i] = static_cast<T>(src[i]);
    };
    for (auto* p : backbone_->params()) fill("backbone." + p->name, p->v);
    for (auto& b : backbone_->buffers()) fill("backbone." + b.name, *b.t);
    for (auto* p : head_params()) fill(p->name, p->v);
    for (auto& b : head_buffers()) fill(b.name, *b.t);
  }

  SiameseConfig cfg_;
  std::shared_ptr<Backbone<T>> backbone_;

  nn::Linear<T> fc1_, fc2_;
  nn::BatchNorm<T> fc_bn_;
  nn::ReLU<T> fc_relu_;
  nn::Dropout<T> fc_drop_;

  bool built_stage2_ = false, built_stage3_ = false;
  ResStage<T> cnn_stage2_, cnn_stage3_, cnn_stage4_;
  nn::GlobalAvgPool<T> cnn_pool_;
  nn::Linear<T> cnn_fc_;
};

// ---------------------------------------------------------------------------
// Stratified k-fold cross-validation (fold splits deterministic under seed).
// ---------------------------------------------------------------------------
struct FoldMetrics {
  int fold = 0;
  double train_accuracy = 0.0;
  double val_accuracy = 0.0;
};

struct CrossValResult {
  std::vector<FoldMetrics> folds;
  double mean_train = 0.0, std_train = 0.0;
  double mean_val = 0.0, std_val = 0.0;
};

inline std::vector<std::vector<int>> stratified_folds(const std::vector<int>& labels, int k,
                                                      std::uint64_t seed) {
  std::vector<int> pos, neg;
  for (std::size_t i = 0; i < labels.size(); ++i)
    (labels[i] == 1 ? pos : neg).push_back(static_cast<int>(i));
  const int min_class = static_cast<int>(std::min(pos.size(), neg.size()));
  if (k < 2) throw ConfigError("cross_validate: k must be >= 2");
  if (k > min_class)
    throw ConfigError("cross_validate: k exceeds the smallest class count (" +
                      std::to_string(min_class) + ")");
  Rng rng(mix_seed(seed, 0xf01d5ULL));
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<std::vector<int>> folds(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < pos.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(pos[i]);
  for (std::size_t i = 0; i < neg.size(); ++i) folds[i % static_cast<std::size_t>(k)].push_back(neg[i]);
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

// Trains a fresh model per fold (fresh head; pristine backbone copy when the
// configuration is unfrozen) and aggregates mean +/- std of the best train and
// validation accuracies, as reported per configuration in the study.
template <typename T>
CrossValResult cross_validate(const SiameseConfig& cfg, std::shared_ptr<Backbone<T>> backbone,
                              std::span<const PairSample> samples, int k,
                              const TrainRecipe& recipe) {
  std::vector<int> labels;
  for (const auto& s : samples) labels.push_back(s.label);
  const auto folds = stratified_folds(labels, k, recipe.seed);

  CrossValResult result;
  for (int f = 0; f < k; ++f) {
    std::vector<int> val_idx = folds[static_cast<std::size_t>(f)];
    std::vector<int> train_idx;
    for (int g = 0; g < k; ++g)
      if (g != f)
        for (int i : folds[static_cast<std::size_t>(g)]) train_idx.push_back(i);

    std::shared_ptr<Backbone<T>> fold_backbone =
        cfg.frozen ? backbone : std::make_shared<Backbone<T>>(*backbone);
    SiameseModel<T> model(cfg, fold_backbone, mix_seed(recipe.seed, 1000 + f));
    Rng rng(mix_seed(recipe.seed, 2000 + f));
    TrainRecipe fold_recipe = recipe;
    SiameseTrainResult tr = model.fit(samples, train_idx, val_idx, fold_recipe, rng);

    double best_train = 0.0;
    if (tr.best_epoch >= 0) best_train = tr.train_history[static_cast<std::size_t>(tr.best_epoch)].accuracy;
    result.folds.push_back({f, best_train, tr.best_val_accuracy});
  }

  const auto mean_std = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    return std::pair<double, double>(m, v.size() > 1 ? std::sqrt(s2 / (v.size() - 1)) : 0.0);
  };
  std::vector<double> tr_accs, val_accs;
  for (const auto& f : result.folds) {
    tr_accs.push_back(f.train_accuracy);
    val_accs.push_back(f.val_accuracy);
  }
  std::tie(result.mean_train, result.std_train) = mean_std(tr_accs);
  std::tie(result.mean_val, result.std_val) = mean_std(val_accs);
  return result;
}

// Fold metrics CSV: config,layer_set,fold,tr_acc,val_acc
inline void save_fold_metrics(const SiameseConfig& cfg, const CrossValResult& cv,
                              const std::filesystem::path& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open for writing: " + path.string());
  std::string layers;
  for (Tap t : cfg.taps) layers += (layers.empty() ? "" : "+") + to_string(t);
  f << "config,layer_set,fold,tr_acc,val_acc\n";
  for (const auto& fm : cv.folds)
    f << cfg.name << "," << layers << "," << fm.fold << "," << detail::format_double(fm.train_accuracy)
      << "," << detail::format_double(fm.val_accuracy) << "\n";
}

}  // namespace noduleid
