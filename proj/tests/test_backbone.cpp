#include <catch2/catch_amalgamated.hpp>
#include <filesystem>

#include "noduleid/backbone.hpp"

using namespace noduleid;
namespace fs = std::filesystem;

namespace {

Tensor<float> random_patch_input(Rng& rng) {
  Tensor<float> x({1, 1, 32, 32, 32});
  for (std::int64_t i = 0; i < x.numel(); ++i) x[i] = static_cast<float>(rng.uniform());
  return x;
}

Patch random_patch(Rng& rng) {
  Patch p;
  p.side = 32;
  p.normalized = true;
  p.values.resize(32 * 32 * 32);
  for (auto& v : p.values) v = static_cast<float>(rng.uniform());
  return p;
}

}  // namespace

TEST_CASE("tap shapes match the published contract for any 32^3 input") {
  Backbone<float> bb(5);
  Rng rng(1);
  nn::Ctx ev;
  for (int rep = 0; rep < 3; ++rep) {
    const Tensor<float> x = random_patch_input(rng);
    auto fm = bb.extract(x, {Tap::layer1, Tap::layer2, Tap::layer3, Tap::avgpool}, ev);
    REQUIRE(fm.maps.at(Tap::layer1).shape() == std::vector<int>{64, 16, 8, 8});
    REQUIRE(fm.maps.at(Tap::layer2).shape() == std::vector<int>{128, 8, 4, 4});
    REQUIRE(fm.maps.at(Tap::layer3).shape() == std::vector<int>{256, 4, 2, 2});
    REQUIRE(fm.maps.at(Tap::avgpool).shape() == std::vector<int>{512});
  }

  SECTION("element counts match the published totals") {
    REQUIRE(tap_contract(Tap::layer1).numel() == 65536);
    REQUIRE(tap_contract(Tap::layer2).numel() == 16384);
    REQUIRE(tap_contract(Tap::layer3).numel() == 4096);
    REQUIRE(tap_contract(Tap::avgpool).numel() == 512);
    REQUIRE(tap_contract(Tap::layer1).numel() + tap_contract(Tap::layer2).numel() +
                tap_contract(Tap::layer3).numel() + tap_contract(Tap::avgpool).numel() ==
            65536 + 16384 + 4096 + 512);
  }

  SECTION("only requested taps are present") {
    const Tensor<float> x = random_patch_input(rng);
    auto fm = bb.extract(x, {Tap::layer2}, ev);
    REQUIRE(fm.maps.size() == 1);
    REQUIRE(fm.maps.count(Tap::layer2) == 1);
  }

  SECTION("unknown tap names are rejected") {
    REQUIRE_THROWS_AS(parse_tap("layer9"), ConfigError);
  }
}

TEST_CASE("classify returns a probability and is deterministic in eval") {
  Backbone<float> bb(6);
  Rng rng(2);
  const Patch p = random_patch(rng);
  const double a = bb.classify(p);
  const double b = bb.classify(p);
  REQUIRE(a >= 0.0);
  REQUIRE(a <= 1.0);
  REQUIRE(a == b);

  SECTION("wrong patch side is a shape error") {
    Patch bad;
    bad.side = 16;
    bad.values.resize(16 * 16 * 16);
    REQUIRE_THROWS_AS(bb.classify(bad), std::invalid_argument);
  }
}

TEST_CASE("class weights are inverse to class frequency") {
  const auto [w_neg, w_pos] = class_weights(75780, 144);
  REQUIRE(w_pos / w_neg == Catch::Approx(75780.0 / 144.0).epsilon(1e-12));
  REQUIRE(w_pos / w_neg == Catch::Approx(526.25).epsilon(1e-9));
  REQUIRE_THROWS_AS(class_weights(100, 0), ConfigError);
  REQUIRE_THROWS_AS(class_weights(0, 100), ConfigError);
}

TEST_CASE("zero training epochs return the model at initialization") {
  Backbone<float> bb(7);
  const std::uint64_t before = bb.checksum();
  std::vector<LabeledPatch> data;
  Rng rng(3);
  for (int i = 0; i < 4; ++i) {
    LabeledPatch lp;
    lp.input = random_patch_input(rng);
    lp.input.reshape({1, 32, 32, 32});
    lp.label = i % 2;
    data.push_back(std::move(lp));
  }
  ClassifierRecipe recipe;
  recipe.epochs = 0;
  const TrainHistory h = train_classifier<float>(bb, data, recipe);
  REQUIRE(h.epochs.empty());
  REQUIRE(bb.checksum() == before);

  SECTION("single-class data is a configuration error") {
    for (auto& lp : data) lp.label = 1;
    recipe.epochs = 1;
    REQUIRE_THROWS_AS(train_classifier<float>(bb, data, recipe), ConfigError);
  }
}

TEST_CASE("classifier training step lowers loss on a tiny separable set") {
  // Bright-center patches vs flat background; two epochs of a small model run.
  Rng rng(8);
  std::vector<LabeledPatch> data;
  for (int i = 0; i < 16; ++i) {
    LabeledPatch lp;
    lp.input = Tensor<float>({1, 32, 32, 32});
    const bool positive = i % 2 == 0;
    for (std::int64_t q = 0; q < lp.input.numel(); ++q)
      lp.input[q] = static_cast<float>(0.12 + 0.02 * rng.normal());
    if (positive) {
      for (int z = 12; z < 20; ++z)
        for (int y = 12; y < 20; ++y)
          for (int x = 12; x < 20; ++x)
            lp.input[(static_cast<std::int64_t>(z) * 32 + y) * 32 + x] = 0.6f;
    }
    lp.label = positive ? 1 : 0;
    data.push_back(std::move(lp));
  }
  Backbone<float> bb(9);
  ClassifierRecipe recipe;
  recipe.epochs = 2;
  recipe.batch_size = 8;
  recipe.learning_rate = 1e-3;
  recipe.augment_enabled = false;
  recipe.seed = 1;
  const TrainHistory h = train_classifier<float>(bb, data, recipe);
  REQUIRE(h.epochs.size() == 2);
  REQUIRE(h.epochs.back().loss < h.epochs.front().loss);
}

TEST_CASE("weighted BCE end-to-end gradient through the logit head") {
  // Analytic d(loss)/d(logits) against central differences, double precision.
  Rng rng(4);
  const int n = 6;
  std::vector<double> z(n), w(n);
  std::vector<int> y(n);
  for (int i = 0; i < n; ++i) {
    z[static_cast<std::size_t>(i)] = rng.uniform(-2.0, 2.0);
    y[static_cast<std::size_t>(i)] = rng.bernoulli(0.3) ? 1 : 0;
    w[static_cast<std::size_t>(i)] = y[static_cast<std::size_t>(i)] ? 10.0 : 0.1;
  }
  std::vector<double> dz;
  nn::bce_with_logits(z, y, w, dz);
  for (int i = 0; i < n; ++i) {
    auto zp = z, zm = z;
    const double h = 1e-6;
    zp[static_cast<std::size_t>(i)] += h;
    zm[static_cast<std::size_t>(i)] -= h;
    std::vector<double> tmp;
    const double fd =
        (nn::bce_with_logits(zp, y, w, tmp) - nn::bce_with_logits(zm, y, w, tmp)) / (2 * h);
    REQUIRE(std::abs(fd - dz[static_cast<std::size_t>(i)]) /
                std::max(std::abs(fd), 1e-8) < 1e-4);
  }
}

TEST_CASE("checkpoint round trip restores outputs exactly") {
  const fs::path dir = fs::temp_directory_path() / "noduleid_backbone_ckpt";
  fs::create_directories(dir);
  Backbone<float> bb(11);
  Rng rng(5);
  const Patch p = random_patch(rng);
  const auto before = bb.extract_features(p, {Tap::layer1, Tap::avgpool});
  const double prob_before = bb.classify(p);

  bb.save(dir / "bb.ckpt");
  Backbone<float> loaded(0);
  loaded.load(dir / "bb.ckpt");
  const auto after = loaded.extract_features(p, {Tap::layer1, Tap::avgpool});
  REQUIRE(loaded.classify(p) == prob_before);
  for (const Tap t : {Tap::layer1, Tap::avgpool}) {
    const auto& a = before.maps.at(t);
    const auto& b = after.maps.at(t);
    REQUIRE(a.shape() == b.shape());
    for (std::int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
  }
  REQUIRE(loaded.checksum() == bb.checksum());

  SECTION("missing file") {
    REQUIRE_THROWS_AS(Backbone<float>(0).load(dir / "missing.ckpt"), NotFoundError);
  }
  SECTION("truncated checkpoint") {
    const auto size = fs::file_size(dir / "bb.ckpt");
    fs::copy_file(dir / "bb.ckpt", dir / "trunc.ckpt", fs::copy_options::overwrite_existing);
    fs::resize_file(dir / "trunc.ckpt", size / 2);
    REQUIRE_THROWS_AS(Backbone<float>(0).load(dir / "trunc.ckpt"), CorruptCheckpointError);
  }
  SECTION("wrong magic") {
    std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
    REQUIRE_THROWS_AS(Backbone<float>(0).load(dir / "junk.ckpt"), CorruptCheckpointError);
  }
}
