#pragma once

#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "noduleid/checkpoint.hpp"
#include "noduleid/nn/adam.hpp"
#include "noduleid/nn/augment.hpp"
#include "noduleid/nn/layers.hpp"
#include "noduleid/nn/losses.hpp"
#include "noduleid/volume.hpp"

namespace noduleid {

// Feature tap points exposed by the pre-trained network: the last layer of
// each residual stage plus the global average pool.
enum class Tap { layer1, layer2, layer3, avgpool };

inline std::string to_string(Tap t) {
  switch (t) {
    case Tap::layer1: return "layer1";
    case Tap::layer2: return "layer2";
    case Tap::layer3: return "layer3";
    case Tap::avgpool: return "avgpool";
  }
  return "?";
}

inline Tap parse_tap(const std::string& s) {
  if (s == "layer1") return Tap::layer1;
  if (s == "layer2") return Tap::layer2;
  if (s == "layer3") return Tap::layer3;
  if (s == "avgpool") return Tap::avgpool;
  throw ConfigError("unknown feature tap '" + s +
                    "' (expected layer1, layer2, layer3 or avgpool)");
}

// Contract shapes for a 32^3 input: channels x (D, H, W); avgpool is a flat
// 512-vector.
struct TapShape {
  int channels;
  Idx3 spatial;
  std::int64_t numel() const {
    return static_cast<std::int64_t>(channels) * spatial[0] * spatial[1] * spatial[2];
  }
};

inline TapShape tap_contract(Tap t) {
  switch (t) {
    case Tap::layer1: return {64, {16, 8, 8}};
    case Tap::layer2: return {128, {8, 4, 4}};
    case Tap::layer3: return {256, {4, 2, 2}};
    case Tap::avgpool: return {512, {1, 1, 1}};
  }
  throw std::logic_error("bad tap");
}

template <typename T>
struct FeatureMapSet {
  // Only requested taps present. layerN maps are (C, D, H, W); avgpool is (512).
  std::map<Tap, Tensor<T>> maps;
};

inline constexpr int kBackboneInputSide = 32;

// ---------------------------------------------------------------------------
// Residual building blocks (3D basic block, two 3x3x3 convolutions).
// ---------------------------------------------------------------------------
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(int in_ch, int out_ch, int stride, const std::string& name)
      : conv1_(in_ch, out_ch, 3, stride, 1, false, name + ".conv1"),
        bn1_(out_ch, name + ".bn1"),
        conv2_(out_ch, out_ch, 3, 1, 1, false, name + ".conv2"),
        bn2_(out_ch, name + ".bn2"),
        has_down_(stride != 1 || in_ch != out_ch) {
    if (has_down_) {
      down_conv_ = nn::Conv3d<T>(in_ch, out_ch, 1, stride, 0, false, name + ".down.conv");
      down_bn_ = nn::BatchNorm<T>(out_ch, name + ".down.bn");
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (has_down_) down_conv_.init(rng);
  }

  Tensor<T> forward(const Tensor<T>& x, const nn::Ctx& ctx) {
    Tensor<T> out = relu1_.forward(bn1_.forward(conv1_.forward(x, ctx), ctx), ctx);
    out = bn2_.forward(conv2_.forward(out, ctx), ctx);
    Tensor<T> identity =
        has_down_ ? down_bn_.forward(down_conv_.forward(x, ctx), ctx) : x;
    for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += identity[i];
    return relu2_.forward(out, ctx);
  }

  Tensor<T> backward(const Tensor<T>& dy) {
    const Tensor<T> g = relu2_.backward(dy);
    Tensor<T> dmain = conv1_.backward(bn1_.backward(relu1_.backward(
        conv2_.backward(bn2_.backward(g)))));
    if (has_down_) {
      Tensor<T> did = down_conv_.backward(down_bn_.backward(g));
      for (std::int64_t i = 0; i < dmain.numel(); ++i) dmain[i] += did[i];
    } else {
      for (std::int64_t i = 0; i < dmain.numel(); ++i) dmain[i] += g[i];
    }
    return dmain;
  }

  void collect(nn::ParamRefs<T>& out) {
    conv1_.collect(out);
    bn1_.collect(out);
    conv2_.collect(out);
    bn2_.collect(out);
    if (has_down_) {
      down_conv_.collect(out);
      down_bn_.collect(out);
    }
  }
  void collect_buffers(std::vector<nn::BufferRef<T>>& out) {
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    if (has_down_) down_bn_.collect_buffers(out);
  }

 private:
  nn::Conv3d<T> conv1_, conv2_;
  nn::BatchNorm<T> bn1_, bn2_;
  nn::ReLU<T> relu1_, relu2_;
  bool has_down_ = false;
  nn::Conv3d<T> down_conv_;
  nn::BatchNorm<T> down_bn_;
};

template <typename T>
class ResStage {
 public:
  ResStage() = default;
  ResStage(int in_ch, int out_ch, int n_blocks, int stride, const std::string& name) {
    for (int b = 0; b < n_blocks; ++b)
      blocks_.emplace_back(b == 0 ? in_ch : out_ch, out_ch, b == 0 ? stride : 1,
                           name + "." + std::to_string(b));
  }
  void init(Rng& rng) {
    for (auto& b : blocks_) b.init(rng);
  }
  Tensor<T> forward(const Tensor<T>& x, const nn::Ctx& ctx) {
    Tensor<T> y = x;
    for (auto& b : blocks_) y = b.forward(y, ctx);
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = dy;
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) g = it->backward(g);
    return g;
  }
  void collect(nn::ParamRefs<T>& out) {
    for (auto& b : blocks_) b.collect(out);
  }
  void collect_buffers(std::vector<nn::BufferRef<T>>& out) {
    for (auto& b : blocks_) b.collect_buffers(out);
  }

 private:
  std::vector<BasicBlock<T>> blocks_;
};

// ---------------------------------------------------------------------------
// 34-layer 3D residual classifier for 32^3 single-channel patches. The stem
// stride is (1,2,2) so the stage outputs reproduce the published tap shapes:
// layer1 64x(16,8,8), layer2 128x(8,4,4), layer3 256x(4,2,2), avgpool 512.
// ---------------------------------------------------------------------------
template <typename T = float>
class Backbone {
 public:
  explicit Backbone(std::uint64_t seed = 0)
      : conv1_(1, 64, Idx3{7, 7, 7}, Idx3{1, 2, 2}, Idx3{3, 3, 3}, false, "conv1"),
        bn1_(64, "bn1"),
        pool_(3, 2, 1),
        layer1_(64, 64, 3, 1, "layer1"),
        layer2_(64, 128, 4, 2, "layer2"),
        layer3_(128, 256, 6, 2, "layer3"),
        layer4_(256, 512, 3, 2, "layer4"),
        fc_(512, 1, "fc") {
    Rng rng(mix_seed(seed, 0xbacb0eULL));
    conv1_.init(rng);
    layer1_.init(rng);
    layer2_.init(rng);
    layer3_.init(rng);
    layer4_.init(rng);
    fc_.init(rng);
    fc_.bias().v.zero();
  }

  // --- forward -------------------------------------------------------------

  // Runs the network only as deep as the requested taps need. x is
  // (N, 1, 32, 32, 32).
  FeatureMapSet<T> extract(const Tensor<T>& x, const std::vector<Tap>& taps,
                           const nn::Ctx& ctx) {
    if (taps.empty()) throw ConfigError("extract_features: empty tap set");
    check_input(x);
    Tap deepest = taps[0];
    for (Tap t : taps) deepest = std::max(deepest, t);

    run_forward(x, deepest, /*need_logits=*/false, ctx);

    FeatureMapSet<T> out;
    const int n = x.dim(0);
    for (Tap t : taps) {
      const Tensor<T>& a = activation(t);
      if (n == 1 && t != Tap::avgpool) {
        Tensor<T> m = a;
        m.reshape({a.dim(1), a.dim(2), a.dim(3), a.dim(4)});
        out.maps[t] = std::move(m);
      } else if (n == 1) {
        Tensor<T> m = a;
        m.reshape({a.dim(1)});
        out.maps[t] = std::move(m);
      } else {
        out.maps[t] = a;
      }
    }
    return out;
  }

  // Batched tap activations with the batch dimension kept.
  std::map<Tap, Tensor<T>> extract_batch(const Tensor<T>& x, const std::vector<Tap>& taps,
                                         const nn::Ctx& ctx) {
    if (taps.empty()) throw ConfigError("extract_features: empty tap set");
    check_input(x);
    Tap deepest = taps[0];
    for (Tap t : taps) deepest = std::max(deepest, t);
    run_forward(x, deepest, false, ctx);
    std::map<Tap, Tensor<T>> out;
    for (Tap t : taps) out[t] = activation(t);
    return out;
  }

  Tensor<T> logits(const Tensor<T>& x, const nn::Ctx& ctx) {
    check_input(x);
    run_forward(x, Tap::avgpool, /*need_logits=*/true, ctx);
    return z_;
  }

  // Nodule probability for one 32^3 normalized patch (evaluation mode).
  double classify(const Patch& p) {
    if (p.side != kBackboneInputSide)
      throw std::invalid_argument("classify: patch side must be 32, got " +
                                  std::to_string(p.side));
    nn::Ctx ctx;
    Tensor<T> x({1, 1, p.side, p.side, p.side});
    std::copy(p.values.begin(), p.values.end(), x.data());
    const Tensor<T> z = logits(x, ctx);
    return static_cast<double>(nn::sigmoid(z[0]));
  }

  FeatureMapSet<T> extract_features(const Patch& p, const std::vector<Tap>& taps) {
    if (p.side != kBackboneInputSide)
      throw std::invalid_argument("extract_features: patch side must be 32, got " +
                                  std::to_string(p.side));
    nn::Ctx ctx;
    Tensor<T> x({1, 1, p.side, p.side, p.side});
    std::copy(p.values.begin(), p.values.end(), x.data());
    return extract(x, taps, ctx);
  }

  // --- backward ------------------------------------------------------------

  void backward_from_logits(const Tensor<T>& dz) {
    Tensor<T> dpooled = fc_.backward(dz);
    backward_from_pooled(dpooled, std::map<Tap, Tensor<T>>{});
  }

  // Backward from tap gradients (batch-shaped). Requires a prior train-mode
  // forward at least as deep as the deepest tapped stage.
  void backward_from_taps(const std::map<Tap, Tensor<T>>& grads) {
    if (grads.empty()) return;
    auto it = grads.find(Tap::avgpool);
    if (it != grads.end()) {
      backward_from_pooled(it->second, grads);
      return;
    }
    Tap deepest = grads.begin()->first;
    for (const auto& [t, g] : grads) deepest = std::max(deepest, t);
    Tensor<T> g = grads.at(deepest);
    if (deepest == Tap::layer3) {
      g = layer3_.backward(g);
      add_tap_grad(g, grads, Tap::layer2);
      g = layer2_.backward(g);
      add_tap_grad(g, grads, Tap::layer1);
    } else if (deepest == Tap::layer2) {
      g = layer2_.backward(g);
      add_tap_grad(g, grads, Tap::layer1);
    }
    backward_stem(layer1_.backward(g));
  }

  // --- parameters ----------------------------------------------------------

  nn::ParamRefs<T> params() {
    nn::ParamRefs<T> out;
    conv1_.collect(out);
    bn1_.collect(out);
    layer1_.collect(out);
    layer2_.collect(out);
    layer3_.collect(out);
    layer4_.collect(out);
    fc_.collect(out);
    return out;
  }

  std::vector<nn::BufferRef<T>> buffers() {
    std::vector<nn::BufferRef<T>> out;
    bn1_.collect_buffers(out);
    layer1_.collect_buffers(out);
    layer2_.collect_buffers(out);
    layer3_.collect_buffers(out);
    layer4_.collect_buffers(out);
    return out;
  }

  // FNV-1a over all parameter and buffer bytes; bit-identical state implies
  // identical checksum.
  std::uint64_t checksum() {
    std::uint64_t h = 1469598103934665603ULL;
    const auto mix_bytes = [&h](const void* p, std::size_t n) {
      const unsigned char* b = static_cast<const unsigned char*>(p);
      for (std::size_t i = 0; i < n; ++i) {
        h ^= b[i];
        h *= 1099511628211ULL;
      }
    };
    for (auto* p : params()) mix_bytes(p->v.data(), static_cast<std::size_t>(p->v.numel()) * sizeof(T));
    for (auto& b : buffers()) mix_bytes(b.t->data(), static_cast<std::size_t>(b.t->numel()) * sizeof(T));
    return h;
  }

  static std::string arch_id() { return "resnet34-3d/stem(1,2,2)/32x32x32"; }

  void save(const std::filesystem::path& path) {
    std::vector<checkpoint::NamedTensor> tensors;
    std::vector<Tensor<float>> converted;  // keeps temporaries alive for double models
    collect_named(tensors, converted);
    nlohmann::json meta;
    meta["arch"] = arch_id();
    meta["taps"] = {{"layer1", {64, 16, 8, 8}},
                    {"layer2", {128, 8, 4, 4}},
                    {"layer3", {256, 4, 2, 2}},
                    {"avgpool", {512}}};
    checkpoint::save(path, "backbone", meta, tensors);
  }

  void load(const std::filesystem::path& path) {
    checkpoint::Loaded ck = checkpoint::load(path);
    if (ck.kind != "backbone")
      throw CorruptCheckpointError("checkpoint kind '" + ck.kind + "' is not a backbone");
    if (ck.meta.value("arch", "") != arch_id())
      throw CorruptCheckpointError("backbone architecture mismatch in checkpoint");
    assign_named(ck);
  }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.ndim() != 5 || x.dim(1) != 1 || x.dim(2) != kBackboneInputSide ||
        x.dim(3) != kBackboneInputSide || x.dim(4) != kBackboneInputSide)
      throw std::invalid_argument("backbone expects (N,1,32,32,32) input, got " + x.shape_str());
  }

  const Tensor<T>& activation(Tap t) const {
    switch (t) {
      case Tap::layer1: return a1_;
      case Tap::layer2: return a2_;
      case Tap::layer3: return a3_;
      case Tap::avgpool: return pooled_;
    }
    throw std::logic_error("bad tap");
  }

  void run_forward(const Tensor<T>& x, Tap deepest, bool need_logits, const nn::Ctx& ctx) {
    Tensor<T> s = relu_stem_.forward(bn1_.forward(conv1_.forward(x, ctx), ctx), ctx);
    s = pool_.forward(s, ctx);
    a1_ = layer1_.forward(s, ctx);
    if (deepest >= Tap::layer2 || need_logits) a2_ = layer2_.forward(a1_, ctx);
    if (deepest >= Tap::layer3 || need_logits) a3_ = layer3_.forward(a2_, ctx);
    if (deepest >= Tap::avgpool || need_logits) {
      a4_ = layer4_.forward(a3_, ctx);
      pooled_ = pool_avg_.forward(a4_, ctx);
    }
    if (need_logits) z_ = fc_.forward(pooled_, ctx);
  }

  static void add_tap_grad(Tensor<T>& g, const std::map<Tap, Tensor<T>>& grads, Tap t) {
    auto it = grads.find(t);
    if (it == grads.end()) return;
    const Tensor<T>& extra = it->second;
    for (std::int64_t i = 0; i < g.numel(); ++i) g[i] += extra[i];
  }

  void backward_from_pooled(const Tensor<T>& dpooled, const std::map<Tap, Tensor<T>>& grads) {
    Tensor<T> g = layer4_.backward(pool_avg_.backward(dpooled));
    add_tap_grad(g, grads, Tap::layer3);
    g = layer3_.backward(g);
    add_tap_grad(g, grads, Tap::layer2);
    g = layer2_.backward(g);
    add_tap_grad(g, grads, Tap::layer1);
    backward_stem(layer1_.backward(g));
  }

  void backward_stem(const Tensor<T>& g1) {
    Tensor<T> g = pool_.backward(g1);
    g = relu_stem_.backward(g);
    g = bn1_.backward(g);
    conv1_.backward(g);
  }

  void collect_named(std::vector<checkpoint::NamedTensor>& out,
                     std::vector<Tensor<float>>& storage) {
    nn::ParamRefs<T> ps = params();
    auto bs = buffers();
    storage.clear();
    storage.reserve(ps.size() + bs.size());
    for (auto* p : ps) {
      if constexpr (std::is_same_v<T, float>) {
        out.push_back({p->name, &p->v});
      } else {
        storage.push_back(p->v.template cast<float>());
        out.push_back({p->name, &storage.back()});
      }
    }
    for (auto& b : bs) {
      if constexpr (std::is_same_v<T, float>) {
        out.push_back({b.name, b.t});
      } else {
        storage.push_back(b.t->template cast<float>());
        out.push_back({b.name, &storage.back()});
      }
    }
  }

  void assign_named(const checkpoint::Loaded& ck) {
    nn::ParamRefs<T> ps = params();
    auto bs = buffers();
    const auto fetch = [&ck](const std::string& name) -> const Tensor<float>& {
      auto it = ck.tensors.find(name);
      if (it == ck.tensors.end())
        throw CorruptCheckpointError("checkpoint missing tensor " + name);
      return it->second;
    };
    for (auto* p : ps) {
      const Tensor<float>& src = fetch(p->name);
      if (src.shape() != p->v.shape())
        throw CorruptCheckpointError("checkpoint shape mismatch for " + p->name);
      for (std::int64_t i = 0; i < src.numel(); ++i) p->v[i] = static_cast<T>(src[i]);
    }
    for (auto& b : bs) {
      const Tensor<float>& src = fetch(b.name);
      if (src.shape() != b.t->shape())
        throw CorruptCheckpointError("checkpoint shape mismatch for " + b.name);
      for (std::int64_t i = 0; i < src.numel(); ++i) (*b.t)[i] = static_cast<T>(src[i]);
    }
  }

  nn::Conv3d<T> conv1_;
  nn::BatchNorm<T> bn1_;
  nn::ReLU<T> relu_stem_;
  nn::MaxPool3d<T> pool_;
  ResStage<T> layer1_, layer2_, layer3_, layer4_;
  nn::GlobalAvgPool<T> pool_avg_;
  nn::Linear<T> fc_;

  Tensor<T> a1_, a2_, a3_, a4_, pooled_, z_;
};

// Inverse-frequency class weights, normalized so the weighted mean stays O(1):
// w_pos/w_neg == n_neg/n_pos.
inline std::pair<double, double> class_weights(std::int64_t n_neg, std::int64_t n_pos) {
  if (n_neg <= 0 || n_pos <= 0)
    throw ConfigError("class weights undefined: training data has a single class");
  const double n = static_cast<double>(n_neg + n_pos);
  return {n / (2.0 * static_cast<double>(n_neg)), n / (2.0 * static_cast<double>(n_pos))};
}

struct LabeledPatch {
  Tensor<float> input;  // (1, 32, 32, 32)
  int label = 0;        // 0 candidate, 1 nodule
};

struct ClassifierRecipe {
  int epochs = 5;
  int batch_size = 128;
  double learning_rate = 1e-3;
  bool class_weighting = true;
  nn::AugmentFlags augment{true, true, true, true};  // flip, rotation, zoom, lighting
  bool augment_enabled = true;
  std::uint64_t seed = 0;
};

struct EpochStats {
  double loss = 0.0;
  double accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
};

// Weighted-BCE classifier training on labeled 32^3 patches. Running training
// accuracy is accumulated over each epoch's (augmented) batches.
template <typename T>
TrainHistory train_classifier(Backbone<T>& model, std::span<const LabeledPatch> data,
                              const ClassifierRecipe& recipe) {
  std::int64_t n_pos = 0, n_neg = 0;
  for (const auto& s : data) (s.label == 1 ? n_pos : n_neg)++;
  const auto [w_neg, w_pos] = class_weights(n_neg, n_pos);  // throws on single class

  TrainHistory history;
  if (recipe.epochs == 0 || data.empty()) return history;

  nn::Adam<T> opt(recipe.learning_rate);
  nn::ParamRefs<T> params = model.params();
  Rng rng(mix_seed(recipe.seed, 0xc1a55ULL));

  std::vector<int> order(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) order[i] = static_cast<int>(i);

  for (int epoch = 0; epoch < recipe.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::int64_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(recipe.batch_size)) {
      const std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(recipe.batch_size));
      const int bs = static_cast<int>(end - start);
      Tensor<T> x({bs, 1, kBackboneInputSide, kBackboneInputSide, kBackboneInputSide});
      std::vector<int> labels(static_cast<std::size_t>(bs));
      std::vector<T> weights(static_cast<std::size_t>(bs));
      for (int b = 0; b < bs; ++b) {
        const LabeledPatch& s = data[static_cast<std::size_t>(order[start + b])];
        Tensor<float> in = recipe.augment_enabled
                               ? nn::random_augment(s.input, rng, recipe.augment)
                               : s.input;
        const std::int64_t stride = x.numel() / bs;
        for (std::int64_t i = 0; i < stride; ++i)
          x[b * stride + i] = static_cast<T>(in[i]);
        labels[static_cast<std::size_t>(b)] = s.label;
        weights[static_cast<std::size_t>(b)] =
            static_cast<T>(recipe.class_weighting ? (s.label == 1 ? w_pos : w_neg) : 1.0);
      }

      nn::Ctx ctx{true, &rng};
      nn::zero_grads(params);
      Tensor<T> z = model.logits(x, ctx);
      std::vector<T> zv(static_cast<std::size_t>(bs));
      for (int b = 0; b < bs; ++b) zv[static_cast<std::size_t>(b)] = z[b];
      std::vector<T> dz;
      const T loss = nn::bce_with_logits(zv, labels, weights, dz);
      Tensor<T> dzt({bs, 1});
      for (int b = 0; b < bs; ++b) dzt[b] = dz[static_cast<std::size_t>(b)];
      model.backward_from_logits(dzt);
      opt.step(params);

      epoch_loss += static_cast<double>(loss) * bs;
      for (int b = 0; b < bs; ++b) {
        const int pred = zv[static_cast<std::size_t>(b)] > T(0) ? 1 : 0;
        correct += pred == labels[static_cast<std::size_t>(b)];
      }
      seen += bs;
    }
    history.epochs.push_back(
        {epoch_loss / static_cast<double>(seen), static_cast<double>(correct) / seen});
  }
  return history;
}

}  // namespace noduleid
