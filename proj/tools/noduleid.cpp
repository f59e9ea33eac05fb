// noduleid: longitudinal lung-nodule re-identification pipeline CLI.
//
// Subcommands: phantom, train-classifier, train-siamese, train-detector,
// detect, match, pipeline, eval-froc, growth-report.
// Options may come from a JSON --config file; command-line flags win. Every
// run writes a resolved-config snapshot next to its outputs.
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <CLI11.hpp>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <memory>
#include <nlohmann/json.hpp>

#include "noduleid/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace noduleid;

namespace {

// Relative output paths are rooted at NODULEID_OUT_ROOT when it is set.
fs::path resolve_out(const std::string& p) {
  fs::path path(p);
  const char* root = std::getenv("NODULEID_OUT_ROOT");
  if (root != nullptr && *root != '\0' && path.is_relative()) return fs::path(root) / path;
  return path;
}

json load_config_file(const fs::path& path, const std::vector<std::string>& known_keys) {
  std::ifstream f(path);
  if (!f) throw NotFoundError("config file not found: " + path.string());
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw ParseError("bad config " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw ParseError("config must be a JSON object: " + path.string());
  for (const auto& [key, value] : j.items()) {
    if (std::find(known_keys.begin(), known_keys.end(), key) == known_keys.end()) {
      std::string valid;
      for (const auto& k : known_keys) valid += (valid.empty() ? "" : ", ") + k;
      throw ConfigError("unknown config key '" + key + "' (valid: " + valid + ")");
    }
  }
  return j;
}

std::optional<fs::path> find_config_arg(int argc, char** argv) {
  for (int i = 1; i < argc - 1; ++i)
    if (std::string(argv[i]) == "--config") return fs::path(argv[i + 1]);
  return std::nullopt;
}

void write_snapshot(const fs::path& out_dir, const std::string& command, const json& resolved) {
  fs::create_directories(out_dir);
  json j;
  j["command"] = command;
  j["resolved"] = resolved;
  std::ofstream f(out_dir / "resolved_config.json");
  f << j.dump(2) << "\n";
}

template <typename T>
void maybe(const json& cfg, const char* key, T& value) {
  if (cfg.contains(key)) value = cfg.at(key).get<T>();
}

std::vector<Tap> parse_tap_list(const std::string& csv) {
  std::vector<Tap> taps;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!cur.empty()) taps.push_back(parse_tap(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  return taps;
}

// ---------------------------------------------------------------------------

void add_phantom(CLI::App& root, const json& cfg) {
  struct Args {
    int cases = 0;
    std::uint64_t seed = 0;
    std::string out;
    int dims = 96;
    phantom::PhantomSpec spec;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "cases", a->cases);
  maybe(cfg, "seed", a->seed);
  maybe(cfg, "out", a->out);
  maybe(cfg, "dims", a->dims);
  maybe(cfg, "distractors", a->spec.n_distractors);
  if (cfg.contains("diameter_range"))
    a->spec.diameter_range_t1 = cfg.at("diameter_range").get<std::array<double, 2>>();
  if (cfg.contains("growth_range"))
    a->spec.growth_range = cfg.at("growth_range").get<std::array<double, 2>>();
  maybe(cfg, "displacement", a->spec.displacement_range);

  CLI::App* app = root.add_subcommand("phantom", "generate a synthetic longitudinal dataset");
  app->add_option("--cases", a->cases, "number of longitudinal cases")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--seed", a->seed, "dataset seed");
  app->add_option("--out", a->out, "output directory")->required(!cfg.contains("out"));
  app->add_option("--dims", a->dims, "cubic volume side (voxels)");
  app->add_option("--distractors", a->spec.n_distractors, "distractor lesions per volume");
  app->add_option("--displacement", a->spec.displacement_range, "max T1->T2 displacement (mm)");

  app->callback([a]() {
    a->spec.volume_dims = {a->dims, a->dims, a->dims};
    a->spec.seed = a->seed;
    const fs::path out_dir = resolve_out(a->out);
    phantom::generate_dataset(a->spec, a->cases, out_dir);
    write_snapshot(out_dir, "phantom",
                   {{"cases", a->cases},
                    {"seed", a->seed},
                    {"out", out_dir.string()},
                    {"dims", a->dims},
                    {"distractors", a->spec.n_distractors},
                    {"diameter_range", a->spec.diameter_range_t1},
                    {"growth_range", a->spec.growth_range},
                    {"displacement", a->spec.displacement_range}});
    std::cout << (out_dir / "manifest.json").string() << "\n";
  });
}

void add_train_classifier(CLI::App& root, const json& cfg) {
  struct Args {
    std::string data, out;
    ClassifierRecipe recipe;
    int negatives = 3;
    bool no_augment = false;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "data", a->data);
  maybe(cfg, "out", a->out);
  maybe(cfg, "epochs", a->recipe.epochs);
  maybe(cfg, "batch_size", a->recipe.batch_size);
  maybe(cfg, "lr", a->recipe.learning_rate);
  maybe(cfg, "seed", a->recipe.seed);
  maybe(cfg, "negatives_per_volume", a->negatives);
  maybe(cfg, "no_augment", a->no_augment);

  CLI::App* app =
      root.add_subcommand("train-classifier", "train the nodule/candidate classifier");
  app->add_option("--data", a->data, "phantom dataset manifest directory")
      ->required(!cfg.contains("data"));
  app->add_option("--out", a->out, "output directory")->required(!cfg.contains("out"));
  app->add_option("--epochs", a->recipe.epochs);
  app->add_option("--batch-size", a->recipe.batch_size);
  app->add_option("--lr", a->recipe.learning_rate);
  app->add_option("--seed", a->recipe.seed);
  app->add_option("--negatives-per-volume", a->negatives);
  app->add_flag("--no-augment", a->no_augment, "disable 3D augmentation");

  app->callback([a]() {
    a->recipe.augment_enabled = !a->no_augment;
    const fs::path out_dir = resolve_out(a->out);
    const auto manifest = phantom::load_manifest(resolve_out(a->data) / "manifest.json");
    const auto patches = make_classifier_patches(manifest, a->negatives, a->recipe.seed);
    Backbone<float> model(a->recipe.seed);
    const TrainHistory history = train_classifier<float>(model, patches, a->recipe);
    fs::create_directories(out_dir);
    model.save(out_dir / "backbone.ckpt");
    std::ofstream hf(out_dir / "classifier_history.csv");
    hf << "epoch,loss,accuracy\n";
    for (std::size_t e = 0; e < history.epochs.size(); ++e)
      hf << e << "," << history.epochs[e].loss << "," << history.epochs[e].accuracy << "\n";
    write_snapshot(out_dir, "train-classifier",
                   {{"data", a->data},
                    {"out", out_dir.string()},
                    {"epochs", a->recipe.epochs},
                    {"batch_size", a->recipe.batch_size},
                    {"lr", a->recipe.learning_rate},
                    {"seed", a->recipe.seed},
                    {"negatives_per_volume", a->negatives},
                    {"no_augment", a->no_augment}});
    std::cout << (out_dir / "backbone.ckpt").string() << "\n";
  });
}

void add_train_siamese(CLI::App& root, const json& cfg) {
  struct Args {
    std::string config_name, data, out, backbone_path, taps_csv;
    TrainRecipe recipe;
    int folds = 10;
    bool no_augment = false;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "config", a->config_name);
  maybe(cfg, "data", a->data);
  maybe(cfg, "out", a->out);
  maybe(cfg, "backbone", a->backbone_path);
  maybe(cfg, "taps", a->taps_csv);
  maybe(cfg, "epochs", a->recipe.epochs);
  maybe(cfg, "batch_size", a->recipe.batch_size);
  maybe(cfg, "lr", a->recipe.learning_rate);
  maybe(cfg, "dropout", a->recipe.dropout);
  maybe(cfg, "patience", a->recipe.early_stop_patience);
  maybe(cfg, "seed", a->recipe.seed);
  maybe(cfg, "folds", a->folds);
  maybe(cfg, "no_augment", a->no_augment);

  CLI::App* app = root.add_subcommand("train-siamese", "train one siamese configuration");
  app->add_option("--config-name", a->config_name, "siamese configuration (FIBC...UCMB)")
      ->required(!cfg.contains("config"));
  app->add_option("--data", a->data)->required(!cfg.contains("data"));
  app->add_option("--out", a->out)->required(!cfg.contains("out"));
  app->add_option("--backbone", a->backbone_path, "pre-trained backbone checkpoint");
  app->add_option("--taps", a->taps_csv, "comma-separated tap override (e.g. layer1,layer2)");
  app->add_option("--folds", a->folds, "stratified cross-validation folds");
  app->add_option("--epochs", a->recipe.epochs);
  app->add_option("--batch-size", a->recipe.batch_size);
  app->add_option("--lr", a->recipe.learning_rate);
  app->add_option("--dropout", a->recipe.dropout);
  app->add_option("--patience", a->recipe.early_stop_patience);
  app->add_option("--seed", a->recipe.seed);
  app->add_flag("--no-augment", a->no_augment);

  app->callback([a]() {
    a->recipe.augment = !a->no_augment;
    const fs::path out_dir = resolve_out(a->out);
    SiameseConfig sc = siamese_config_from_name(
        a->config_name,
        a->taps_csv.empty() ? std::nullopt
                            : std::optional<std::vector<Tap>>(parse_tap_list(a->taps_csv)));
    sc.dropout = a->recipe.dropout;
    const auto manifest = phantom::load_manifest(resolve_out(a->data) / "manifest.json");
    const auto cases = load_cases(manifest);
    const auto case_patches = make_case_patches(cases);
    const auto samples = build_pair_dataset(case_patches, a->recipe.seed);

    auto backbone = std::make_shared<Backbone<float>>(a->recipe.seed);
    if (!a->backbone_path.empty()) backbone->load(resolve_out(a->backbone_path));

    const CrossValResult cv = cross_validate(sc, backbone, samples, a->folds, a->recipe);
    fs::create_directories(out_dir);
    save_fold_metrics(sc, cv, out_dir / "fold_metrics.csv");

    SiameseModel<float> model(sc, backbone, a->recipe.seed);
    model.train(samples, a->recipe);
    model.save(out_dir / ("siamese_" + sc.name + ".ckpt"));

    write_snapshot(out_dir, "train-siamese",
                   {{"config", sc.name},
                    {"data", a->data},
                    {"out", out_dir.string()},
                    {"backbone", a->backbone_path},
                    {"folds", a->folds},
                    {"epochs", a->recipe.epochs},
                    {"batch_size", a->recipe.batch_size},
                    {"lr", a->recipe.learning_rate},
                    {"dropout", a->recipe.dropout},
                    {"patience", a->recipe.early_stop_patience},
                    {"seed", a->recipe.seed},
                    {"no_augment", a->no_augment}});
    std::cout << "cv val acc " << cv.mean_val << " +/- " << cv.std_val << "\n";
    std::cout << (out_dir / ("siamese_" + sc.name + ".ckpt")).string() << "\n";
  });
}

void add_train_detector(CLI::App& root, const json& cfg) {
  struct Args {
    std::string data, out;
    DetectorRecipe recipe;
    DetectorConfig dcfg;
    std::vector<int> widths_flag;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "data", a->data);
  maybe(cfg, "out", a->out);
  maybe(cfg, "epochs", a->recipe.epochs);
  maybe(cfg, "batch_size", a->recipe.batch_size);
  maybe(cfg, "lr0", a->recipe.lr0);
  maybe(cfg, "lr_decay", a->recipe.lr_decay);
  maybe(cfg, "decay_every", a->recipe.decay_every);
  maybe(cfg, "hard_negative_factor", a->recipe.hard_negative_factor);
  maybe(cfg, "crop", a->recipe.crop_size);
  maybe(cfg, "seed", a->recipe.seed);
  if (cfg.contains("widths")) a->dcfg.widths = cfg.at("widths").get<std::array<int, 4>>();

  CLI::App* app = root.add_subcommand("train-detector", "train the nodule detector");
  app->add_option("--data", a->data)->required(!cfg.contains("data"));
  app->add_option("--out", a->out)->required(!cfg.contains("out"));
  app->add_option("--epochs", a->recipe.epochs);
  app->add_option("--batch-size", a->recipe.batch_size);
  app->add_option("--lr0", a->recipe.lr0);
  app->add_option("--lr-decay", a->recipe.lr_decay);
  app->add_option("--decay-every", a->recipe.decay_every);
  app->add_option("--hard-neg-factor", a->recipe.hard_negative_factor);
  app->add_option("--crop", a->recipe.crop_size);
  app->add_option("--seed", a->recipe.seed);
  app->add_option("--widths", a->widths_flag, "encoder widths (4 values)")->expected(4);

  app->callback([a]() {
    if (!a->widths_flag.empty())
      a->dcfg.widths = {a->widths_flag[0], a->widths_flag[1], a->widths_flag[2],
                        a->widths_flag[3]};
    const fs::path out_dir = resolve_out(a->out);
    const auto manifest = phantom::load_manifest(resolve_out(a->data) / "manifest.json");
    const auto cases = make_detector_cases(manifest);
    Detector<float> det(a->dcfg, a->recipe.seed);
    const TrainHistory history = train_detector<float>(det, cases, a->recipe);
    fs::create_directories(out_dir);
    det.save(out_dir / "detector.ckpt");
    std::ofstream hf(out_dir / "detector_history.csv");
    hf << "epoch,loss\n";
    for (std::size_t e = 0; e < history.epochs.size(); ++e)
      hf << e << "," << history.epochs[e].loss << "\n";
    write_snapshot(out_dir, "train-detector",
                   {{"data", a->data},
                    {"out", out_dir.string()},
                    {"epochs", a->recipe.epochs},
                    {"batch_size", a->recipe.batch_size},
                    {"lr0", a->recipe.lr0},
                    {"lr_decay", a->recipe.lr_decay},
                    {"decay_every", a->recipe.decay_every},
                    {"hard_negative_factor", a->recipe.hard_negative_factor},
                    {"crop", a->recipe.crop_size},
                    {"seed", a->recipe.seed},
                    {"widths", a->dcfg.widths}});
    std::cout << (out_dir / "detector.ckpt").string() << "\n";
  });
}

void add_detect(CLI::App& root, const json& cfg) {
  struct Args {
    std::string volume_path, detector_path, out_csv;
    int topk = 0;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "volume", a->volume_path);
  maybe(cfg, "detector", a->detector_path);
  maybe(cfg, "out", a->out_csv);
  maybe(cfg, "top_k", a->topk);

  CLI::App* app = root.add_subcommand("detect", "run the detector on one volume");
  app->add_option("--volume", a->volume_path)->required(!cfg.contains("volume"));
  app->add_option("--detector", a->detector_path)->required(!cfg.contains("detector"));
  app->add_option("--out", a->out_csv)->required(!cfg.contains("out"));
  app->add_option("--top-k", a->topk, "truncate to k candidates (0: keep all)");

  app->callback([a]() {
    Detector<float> det = Detector<float>::load_from(resolve_out(a->detector_path));
    const Volume v = preprocess(load_volume(resolve_out(a->volume_path)));
    std::vector<Candidate> cands = detect(det, v);
    if (a->topk > 0) cands = top_k(cands, a->topk);
    const std::string sid = fs::path(a->volume_path).stem().string();
    std::vector<std::pair<std::string, Candidate>> rows;
    for (const auto& c : cands) rows.emplace_back(sid, c);
    const fs::path out_path = resolve_out(a->out_csv);
    const fs::path out_dir = out_path.has_parent_path() ? out_path.parent_path() : fs::path(".");
    fs::create_directories(out_dir);
    save_candidates(rows, out_path);
    write_snapshot(out_dir, "detect",
                   {{"volume", a->volume_path},
                    {"detector", a->detector_path},
                    {"out", out_path.string()},
                    {"top_k", a->topk}});
    std::cout << rows.size() << " candidates -> " << out_path.string() << "\n";
  });
}

void add_pipeline(CLI::App& root, const json& cfg, bool match_only) {
  struct Args {
    std::string data, detector_path, siamese_path, out;
    int topk = 32;
    bool t1_annotation = false;
    int bootstrap = 1000;
    std::uint64_t seed = 0;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "data", a->data);
  maybe(cfg, "detector", a->detector_path);
  maybe(cfg, "siamese", a->siamese_path);
  maybe(cfg, "out", a->out);
  maybe(cfg, "top_k", a->topk);
  maybe(cfg, "t1_annotation", a->t1_annotation);
  maybe(cfg, "bootstrap", a->bootstrap);
  maybe(cfg, "seed", a->seed);

  CLI::App* app = root.add_subcommand(
      match_only ? "match" : "pipeline",
      match_only ? "detect and re-identify nodules" : "full detect -> match -> growth evaluation");
  app->add_option("--data", a->data)->required(!cfg.contains("data"));
  app->add_option("--detector", a->detector_path)->required(!cfg.contains("detector"));
  app->add_option("--siamese", a->siamese_path)->required(!cfg.contains("siamese"));
  app->add_option("--out", a->out)->required(!cfg.contains("out"));
  app->add_option("--top-k", a->topk);
  app->add_flag("--t1-annotation", a->t1_annotation,
                "use the annotated T1 nodule instead of detector output at T1");
  app->add_option("--bootstrap", a->bootstrap);
  app->add_option("--seed", a->seed);

  app->callback([a, match_only]() {
    const fs::path out_dir = resolve_out(a->out);
    Detector<float> det = Detector<float>::load_from(resolve_out(a->detector_path));
    SiameseModel<float> siam = SiameseModel<float>::load_from(resolve_out(a->siamese_path));
    const auto manifest = phantom::load_manifest(resolve_out(a->data) / "manifest.json");
    const auto cases = load_cases(manifest);
    if (cases.empty()) throw ConfigError("pipeline: no cases in manifest");

    PipelineOptions opt;
    opt.top_k = a->topk;
    opt.t1_from_detector = !a->t1_annotation;
    opt.bootstrap_resamples = a->bootstrap;
    opt.seed = a->seed;
    opt.out_dir = out_dir;
    const PipelineResult r = run_pipeline(det, siam, cases, opt);
    write_snapshot(out_dir, match_only ? "match" : "pipeline",
                   {{"data", a->data},
                    {"detector", a->detector_path},
                    {"siamese", a->siamese_path},
                    {"out", out_dir.string()},
                    {"top_k", a->topk},
                    {"t1_annotation", a->t1_annotation},
                    {"bootstrap", a->bootstrap},
                    {"seed", a->seed}});
    std::cout << "matching accuracy " << r.match_eval.accuracy << " (" << r.match_eval.correct
              << "/" << r.match_eval.total << "), growth sign accuracy "
              << r.growth_sign_accuracy << "\n";
    std::cout << (out_dir / "summary.json").string() << "\n";
  });
}

void add_eval_froc(CLI::App& root, const json& cfg) {
  struct Args {
    std::string cands_csv, ann_csv, out;
    int bootstrap = 1000;
    std::uint64_t seed = 0;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "candidates", a->cands_csv);
  maybe(cfg, "annotations", a->ann_csv);
  maybe(cfg, "out", a->out);
  maybe(cfg, "bootstrap", a->bootstrap);
  maybe(cfg, "seed", a->seed);

  CLI::App* app = root.add_subcommand("eval-froc", "FROC with bootstrap bounds from CSVs");
  app->add_option("--candidates", a->cands_csv)->required(!cfg.contains("candidates"));
  app->add_option("--annotations", a->ann_csv)->required(!cfg.contains("annotations"));
  app->add_option("--out", a->out)->required(!cfg.contains("out"));
  app->add_option("--bootstrap", a->bootstrap);
  app->add_option("--seed", a->seed);

  app->callback([a]() {
    const auto cand_rows = load_candidates(resolve_out(a->cands_csv));
    const auto anns = load_annotations(resolve_out(a->ann_csv));
    std::map<std::string, ScanData> by_scan;
    for (const auto& [sid, c] : cand_rows) by_scan[sid].candidates.push_back(c);
    for (const auto& ann : anns) by_scan[ann.series_id].annotations.push_back(ann);
    std::vector<ScanData> scans;
    scans.reserve(by_scan.size());
    for (auto& [sid, sd] : by_scan) scans.push_back(std::move(sd));
    const auto rates = default_fp_rates();
    const FrocCurve curve = froc_with_bootstrap(scans, rates, a->bootstrap, 0.95, a->seed);
    const fs::path out_dir = resolve_out(a->out);
    fs::create_directories(out_dir);
    save_froc_csv(curve, out_dir / "froc.csv");
    plot::write_froc_svg(curve, out_dir / "froc.svg");
    write_snapshot(out_dir, "eval-froc",
                   {{"candidates", a->cands_csv},
                    {"annotations", a->ann_csv},
                    {"out", out_dir.string()},
                    {"bootstrap", a->bootstrap},
                    {"seed", a->seed}});
    std::cout << (out_dir / "froc.csv").string() << "\n";
  });
}

void add_growth_report(CLI::App& root, const json& cfg) {
  struct Args {
    std::string pred_csv, truth_csv, out;
  };
  auto a = std::make_shared<Args>();
  maybe(cfg, "pred", a->pred_csv);
  maybe(cfg, "truth", a->truth_csv);
  maybe(cfg, "out", a->out);

  CLI::App* app = root.add_subcommand("growth-report", "growth agreement statistics");
  app->add_option("--pred", a->pred_csv,
                  "predictions CSV: series_id,diameter_t1,diameter_t2,growth_mm")
      ->required(!cfg.contains("pred"));
  app->add_option("--truth", a->truth_csv, "growth truth CSV")->required(!cfg.contains("truth"));
  app->add_option("--out", a->out)->required(!cfg.contains("out"));

  app->callback([a]() {
    const auto pred = phantom::load_growth_truth(resolve_out(a->pred_csv));
    const auto truth = phantom::load_growth_truth(resolve_out(a->truth_csv));
    std::map<std::string, double> truth_by_id;
    for (const auto& t : truth) truth_by_id[t.series_id] = t.growth_mm;

    std::vector<GrowthAssessment> rows;
    std::vector<double> pd, td;
    ConfusionMatrix cm;
    for (const auto& p : pred) {
      auto it = truth_by_id.find(p.series_id);
      if (it == truth_by_id.end())
        throw std::invalid_argument("growth-report: no truth for case " + p.series_id);
      GrowthAssessment g = assess_growth(p.series_id, p.diameter_t1, p.diameter_t2, it->second);
      switch (g.outcome) {
        case GrowthOutcome::TP: ++cm.tp; break;
        case GrowthOutcome::FP: ++cm.fp; break;
        case GrowthOutcome::TN: ++cm.tn; break;
        case GrowthOutcome::FN: ++cm.fn; break;
      }
      pd.push_back(g.delta_pred);
      td.push_back(g.delta_true);
      rows.push_back(std::move(g));
    }
    const fs::path out_dir = resolve_out(a->out);
    fs::create_directories(out_dir);
    save_growth_report(rows, out_dir / "growth_report.csv");
    json j;
    j["confusion"] = {{"tp", cm.tp}, {"fp", cm.fp}, {"tn", cm.tn}, {"fn", cm.fn}};
    if (pd.size() >= 2) {
      bool constant = true;
      for (double t : td) constant &= t == td[0];
      if (!constant) {
        const AgreementReport ar = make_agreement_report(pd, td);
        j["agreement"] = {{"mean_diff", ar.mean_diff}, {"loa_low", ar.loa_low},
                          {"loa_high", ar.loa_high},   {"mae", ar.mae},
                          {"mse", ar.mse},             {"r2", ar.r2},
                          {"t_test_p", ar.t_test_p}};
        plot::write_bland_altman_svg(pd, td, out_dir / "bland_altman.svg");
      }
    }
    std::ofstream sf(out_dir / "growth_summary.json");
    sf << j.dump(2) << "\n";
    write_snapshot(out_dir, "growth-report",
                   {{"pred", a->pred_csv}, {"truth", a->truth_csv}, {"out", out_dir.string()}});
    std::cout << (out_dir / "growth_report.csv").string() << "\n";
  });
}

const std::map<std::string, std::vector<std::string>> kKnownKeys = {
    {"phantom", {"cases", "seed", "out", "dims", "distractors", "diameter_range", "growth_range",
                 "displacement"}},
    {"train-classifier",
     {"data", "out", "epochs", "batch_size", "lr", "seed", "negatives_per_volume", "no_augment"}},
    {"train-siamese", {"config", "data", "out", "backbone", "taps", "folds", "epochs",
                       "batch_size", "lr", "dropout", "patience", "seed", "no_augment"}},
    {"train-detector", {"data", "out", "epochs", "batch_size", "lr0", "lr_decay", "decay_every",
                        "hard_negative_factor", "crop", "seed", "widths"}},
    {"detect", {"volume", "detector", "out", "top_k"}},
    {"match", {"data", "detector", "siamese", "out", "top_k", "t1_annotation", "bootstrap", "seed"}},
    {"pipeline",
     {"data", "detector", "siamese", "out", "top_k", "t1_annotation", "bootstrap", "seed"}},
    {"eval-froc", {"candidates", "annotations", "out", "bootstrap", "seed"}},
    {"growth-report", {"pred", "truth", "out"}},
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Longitudinal lung-nodule re-identification and growth pipeline"};
  app.require_subcommand(1);

  std::string config_path_opt;
  app.add_option("--config", config_path_opt, "JSON config file (flags override)");

  try {
    json cfg = json::object();
    const auto cfg_path = find_config_arg(argc, argv);
    std::string sub;
    for (int i = 1; i < argc; ++i) {
      const std::string arg = argv[i];
      if (!arg.empty() && arg[0] != '-' && kKnownKeys.count(arg)) {
        sub = arg;
        break;
      }
    }
    if (cfg_path) {
      if (sub.empty()) throw ConfigError("--config requires a subcommand");
      cfg = load_config_file(*cfg_path, kKnownKeys.at(sub));
    }

    add_phantom(app, cfg);
    add_train_classifier(app, cfg);
    add_train_siamese(app, cfg);
    add_train_detector(app, cfg);
    add_detect(app, cfg);
    add_pipeline(app, cfg, /*match_only=*/true);
    add_pipeline(app, cfg, /*match_only=*/false);
    add_eval_froc(app, cfg);
    add_growth_report(app, cfg);

    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
