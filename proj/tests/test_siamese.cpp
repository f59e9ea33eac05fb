#include <catch2/catch_amalgamated.hpp>

#include "noduleid/siamese.hpp"

using namespace noduleid;

namespace {

Patch random_patch(Rng& rng) {
  Patch p;
  p.side = 32;
  p.normalized = true;
  p.values.resize(32 * 32 * 32);
  for (auto& v : p.values) v = static_cast<float>(rng.uniform());
  return p;
}

std::shared_ptr<Backbone<float>> shared_backbone() {
  static auto bb = std::make_shared<Backbone<float>>(1234);
  return bb;
}

std::vector<PairSample> dummy_pairs(int n_cases, Rng& rng) {
  std::vector<CasePatches> cases;
  for (int i = 0; i < n_cases; ++i) {
    CasePatches cp;
    cp.case_id = "c" + std::to_string(i);
    cp.patch_t1 = random_patch(rng);
    cp.patch_t2 = random_patch(rng);
    cases.push_back(std::move(cp));
  }
  return build_pair_dataset(cases, 7);
}

}  // namespace

TEST_CASE("configuration names decode to their table row") {
  const auto fifb = siamese_config_from_name("FIFB");
  REQUIRE(fifb.frozen);
  REQUIRE_FALSE(fifb.combined);
  REQUIRE(fifb.head == HeadKind::fc);
  REQUIRE(fifb.loss == LossKind::bce);
  REQUIRE(fifb.taps == std::vector<Tap>{Tap::layer1});

  const auto uibc = siamese_config_from_name("UIBC");
  REQUIRE_FALSE(uibc.frozen);
  REQUIRE(uibc.head == HeadKind::basic);
  REQUIRE(uibc.loss == LossKind::contrastive);

  const auto ucmb = siamese_config_from_name("UCMB");
  REQUIRE(ucmb.combined);
  REQUIRE(ucmb.head == HeadKind::mfc);
  REQUIRE(ucmb.taps == std::vector<Tap>{Tap::layer1, Tap::layer2, Tap::avgpool});

  SECTION("all eight names parse and validate") {
    for (const auto& name : siamese_config_names()) REQUIRE_NOTHROW(siamese_config_from_name(name));
  }

  SECTION("unknown name lists the valid ones") {
    try {
      siamese_config_from_name("XXXX");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      const std::string msg = e.what();
      for (const auto& name : siamese_config_names())
        REQUIRE(msg.find(name) != std::string::npos);
    }
  }

  SECTION("consistency rules are enforced") {
    // basic head requires contrastive loss: FIBB is not a valid combination.
    REQUIRE_THROWS_AS(siamese_config_from_name("FIBB"), ConfigError);
    // FC head with contrastive loss is invalid.
    REQUIRE_THROWS_AS(siamese_config_from_name("FIFC"), ConfigError);
    // MFC is the combined head; individual+MFC is invalid.
    REQUIRE_THROWS_AS(siamese_config_from_name("FIMB"), ConfigError);
    // combined with a single tap is invalid.
    REQUIRE_THROWS_AS(siamese_config_from_name("FCMB", std::vector<Tap>{Tap::layer1}),
                      ConfigError);
    // CNN head cannot take avgpool-only features.
    REQUIRE_THROWS_AS(siamese_config_from_name("FICB", std::vector<Tap>{Tap::avgpool}),
                      ConfigError);
  }
}

TEST_CASE("pair dataset is balanced and never self-pairs negatives") {
  Rng rng(1);
  SECTION("n cases give 2n samples, n positive") {
    const auto samples = dummy_pairs(151, rng);
    REQUIRE(samples.size() == 302);
    int positives = 0;
    for (const auto& s : samples) positives += s.label;
    REQUIRE(positives == 151);
    for (const auto& s : samples)
      if (s.label == 0) REQUIRE(s.case_id_t1 != s.case_id_t2);
  }

  SECTION("two cases force the swap") {
    const auto samples = dummy_pairs(2, rng);
    REQUIRE(samples.size() == 4);
    REQUIRE(samples[2].case_id_t1 == "c0");
    REQUIRE(samples[2].case_id_t2 == "c1");
    REQUIRE(samples[3].case_id_t1 == "c1");
    REQUIRE(samples[3].case_id_t2 == "c0");
  }

  SECTION("a single case cannot form negatives") {
    std::vector<CasePatches> one(1);
    one[0].case_id = "c0";
    one[0].patch_t1 = random_patch(rng);
    one[0].patch_t2 = random_patch(rng);
    REQUIRE_THROWS_AS(build_pair_dataset(one, 0), ConfigError);
  }

  SECTION("deterministic under seed") {
    std::vector<CasePatches> cases;
    for (int i = 0; i < 9; ++i) {
      CasePatches cp;
      cp.case_id = "c" + std::to_string(i);
      cp.patch_t1 = random_patch(rng);
      cp.patch_t2 = random_patch(rng);
      cases.push_back(std::move(cp));
    }
    const auto a = build_pair_dataset(cases, 5);
    const auto b = build_pair_dataset(cases, 5);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE(a[i].case_id_t2 == b[i].case_id_t2);
  }
}

TEST_CASE("head input widths follow the tap table") {
  auto bb = shared_backbone();
  REQUIRE(SiameseModel<float>(siamese_config_from_name("FIFB"), bb).head_input_width() == 65536);
  REQUIRE(SiameseModel<float>(siamese_config_from_name("UIFB"), bb).head_input_width() == 16384);
  REQUIRE(SiameseModel<float>(siamese_config_from_name("UCMB"), bb).head_input_width() ==
          65536 + 16384 + 512);
}

TEST_CASE("FIBC has no trainable parameters at all") {
  auto bb = shared_backbone();
  SiameseModel<float> m(siamese_config_from_name("FIBC"), bb);
  REQUIRE(m.head_params().empty());
  REQUIRE(m.trainable_params().empty());

  SiameseModel<float> u(siamese_config_from_name("UIBC"), bb);
  REQUIRE(u.head_params().empty());
  REQUIRE_FALSE(u.trainable_params().empty());  // unfrozen backbone
}

TEST_CASE("same build seed gives identical initial head parameters") {
  auto bb = shared_backbone();
  SiameseModel<float> a(siamese_config_from_name("FIFB"), bb, 99);
  SiameseModel<float> b(siamese_config_from_name("FIFB"), bb, 99);
  SiameseModel<float> c(siamese_config_from_name("FIFB"), bb, 100);
  auto pa = a.head_params(), pb = b.head_params(), pc = c.head_params();
  bool same_ab = true, same_ac = true;
  for (std::size_t i = 0; i < pa.size(); ++i)
    for (std::int64_t j = 0; j < pa[i]->v.numel(); ++j) {
      same_ab &= pa[i]->v[j] == pb[i]->v[j];
      same_ac &= pa[i]->v[j] == pc[i]->v[j];
    }
  REQUIRE(same_ab);
  REQUIRE_FALSE(same_ac);
}

TEST_CASE("forward_pair is symmetric and self-matches for every head") {
  auto bb = shared_backbone();
  Rng rng(42);
  for (const auto& name : {"FIBC", "FIFB", "FICB", "FCMB"}) {
    SiameseModel<float> m(siamese_config_from_name(name), bb, 7);
    for (int k = 0; k < 3; ++k) {
      const Patch a = random_patch(rng), b = random_patch(rng);
      const double ab = m.forward_pair(a, b);
      const double ba = m.forward_pair(b, a);
      REQUIRE(std::abs(ab - ba) <= 1e-5);
      if (m.config().loss == LossKind::bce) {
        REQUIRE(ab > 0.0);
        REQUIRE(ab < 1.0);
      } else {
        REQUIRE(ab >= 0.0);
      }
    }
  }

  SECTION("basic-head self distance is exactly zero") {
    SiameseModel<float> m(siamese_config_from_name("FIBC"), bb, 7);
    for (int k = 0; k < 5; ++k) {
      const Patch a = random_patch(rng);
      REQUIRE(m.forward_pair(a, a) == 0.0);
    }
  }

  SECTION("BCE-head self score is the same constant for every input") {
    SiameseModel<float> m(siamese_config_from_name("FIFB"), bb, 7);
    const Patch first = random_patch(rng);
    const double c = m.forward_pair(first, first);
    for (int k = 0; k < 4; ++k) {
      const Patch a = random_patch(rng);
      REQUIRE(m.forward_pair(a, a) == c);
    }
  }
}

TEST_CASE("batched pair scores equal single forward passes") {
  auto bb = shared_backbone();
  Rng rng(11);
  SiameseModel<float> m(siamese_config_from_name("FIFB"), bb, 3);
  std::vector<Patch> side1, side2;
  for (int i = 0; i < 3; ++i) side1.push_back(random_patch(rng));
  for (int i = 0; i < 2; ++i) side2.push_back(random_patch(rng));
  std::vector<SiameseModel<float>::Embedding> e1, e2;
  for (const auto& p : side1) e1.push_back(m.embed_patch(p));
  for (const auto& p : side2) e2.push_back(m.embed_patch(p));
  const auto matrix = m.pair_score_matrix(e1, e2);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      const double single = m.forward_pair(side1[static_cast<std::size_t>(i)],
                                           side2[static_cast<std::size_t>(j)]);
      REQUIRE(matrix[static_cast<std::size_t>(i) * 2 + j] ==
              Catch::Approx(single).margin(1e-6));
    }
}

TEST_CASE("freeze contract: frozen training leaves the backbone bit-identical") {
  auto bb = std::make_shared<Backbone<float>>(77);
  const std::uint64_t before = bb->checksum();
  SiameseModel<float> m(siamese_config_from_name("FIFB"), bb, 5);
  Rng rng(13);
  const auto samples = dummy_pairs(4, rng);
  TrainRecipe recipe;
  recipe.epochs = 3;
  recipe.batch_size = 4;
  recipe.augment = false;
  recipe.val_fraction = 0.25;
  recipe.learning_rate = 1e-3;
  recipe.seed = 2;
  m.train(samples, recipe);
  REQUIRE(bb->checksum() == before);
}

TEST_CASE("unfrozen training updates the backbone") {
  auto bb = std::make_shared<Backbone<float>>(78);
  const std::uint64_t before = bb->checksum();
  SiameseModel<float> m(siamese_config_from_name("UIFB"), bb, 5);
  Rng rng(14);
  const auto samples = dummy_pairs(2, rng);
  TrainRecipe recipe;
  recipe.epochs = 1;
  recipe.batch_size = 4;
  recipe.augment = false;
  recipe.val_fraction = 0.0;
  recipe.learning_rate = 1e-3;
  recipe.seed = 3;
  m.train(samples, recipe);
  REQUIRE(bb->checksum() != before);
}

TEST_CASE("zero learning rate leaves all parameters unchanged") {
  auto bb = std::make_shared<Backbone<float>>(79);
  SiameseModel<float> m(siamese_config_from_name("FIFB"), bb, 6);
  std::vector<Tensor<float>> head_before;
  for (auto* p : m.head_params()) head_before.push_back(p->v);
  Rng rng(15);
  const auto samples = dummy_pairs(3, rng);
  TrainRecipe recipe;
  recipe.epochs = 2;
  recipe.batch_size = 2;
  recipe.augment = false;
  recipe.learning_rate = 0.0;
  recipe.seed = 4;
  m.train(samples, recipe);
  auto head_after = m.head_params();
  for (std::size_t i = 0; i < head_after.size(); ++i)
    for (std::int64_t j = 0; j < head_after[i]->v.numel(); ++j)
      REQUIRE(head_after[i]->v[j] == head_before[i][j]);
}

TEST_CASE("empty sample list is an error") {
  auto bb = shared_backbone();
  SiameseModel<float> m(siamese_config_from_name("FIFB"), bb, 6);
  TrainRecipe recipe;
  REQUIRE_THROWS_AS(m.train(std::vector<PairSample>{}, recipe), ConfigError);
}

TEST_CASE("stratified folds") {
  SECTION("k=2 on 2 pos + 2 neg puts one of each per fold") {
    const std::vector<int> labels{1, 1, 0, 0};
    const auto folds = stratified_folds(labels, 2, 3);
    REQUIRE(folds.size() == 2);
    for (const auto& f : folds) {
      REQUIRE(f.size() == 2);
      int pos = 0;
      for (int i : f) pos += labels[static_cast<std::size_t>(i)];
      REQUIRE(pos == 1);
    }
  }

  SECTION("k above the smallest class count is rejected") {
    const std::vector<int> labels{1, 1, 0, 0, 0};
    REQUIRE_THROWS_AS(stratified_folds(labels, 3, 0), ConfigError);
  }

  SECTION("deterministic under seed") {
    std::vector<int> labels;
    for (int i = 0; i < 20; ++i) labels.push_back(i % 2);
    REQUIRE(stratified_folds(labels, 5, 9) == stratified_folds(labels, 5, 9));
    REQUIRE(stratified_folds(labels, 5, 9) != stratified_folds(labels, 5, 10));
  }
}

TEST_CASE("cross_validate aggregates fold metrics") {
  auto bb = shared_backbone();
  Rng rng(21);
  const auto samples = dummy_pairs(4, rng);  // 8 samples, 4 pos / 4 neg
  TrainRecipe recipe;
  recipe.epochs = 2;
  recipe.batch_size = 4;
  recipe.augment = false;
  recipe.learning_rate = 1e-3;
  recipe.seed = 5;
  const auto cv =
      cross_validate(siamese_config_from_name("FIFB"), bb, samples, 2, recipe);
  REQUIRE(cv.folds.size() == 2);
  for (const auto& f : cv.folds) {
    REQUIRE(f.val_accuracy >= 0.0);
    REQUIRE(f.val_accuracy <= 1.0);
  }
  REQUIRE(cv.mean_val >= 0.0);
  REQUIRE(cv.std_val >= 0.0);
}
