// repcount: synthetic data generation, two-stage training, evaluation and
// prediction for the exemplar-free counting pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "repcount/eval.hpp"
#include "repcount/image.hpp"
#include "repcount/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace repcount;

namespace {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw DataError(path + ": " + e.what());
  }
}

ShapeKind parse_shape(const std::string& s) {
  if (s == "circle") return ShapeKind::kCircle;
  if (s == "square") return ShapeKind::kSquare;
  if (s == "triangle") return ShapeKind::kTriangle;
  throw DataError("unknown shape '" + s + "' (circle|square|triangle)");
}

SceneSpec parse_scene_spec(const json& j) {
  SceneSpec spec;
  if (j.contains("width")) j.at("width").get_to(spec.width);
  if (j.contains("height")) j.at("height").get_to(spec.height);
  if (j.contains("annotated_class"))
    j.at("annotated_class").get_to(spec.annotated_class);
  if (j.contains("max_overlap")) j.at("max_overlap").get_to(spec.max_overlap);
  if (j.contains("noise")) j.at("noise").get_to(spec.noise);
  if (j.contains("placement_retries"))
    j.at("placement_retries").get_to(spec.placement_retries);
  if (j.contains("classes")) {
    spec.classes.clear();
    for (const auto& jc : j.at("classes")) {
      ClassSpec cs;
      if (jc.contains("shape")) cs.shape = parse_shape(jc.at("shape"));
      if (jc.contains("scale_min")) jc.at("scale_min").get_to(cs.scale_min);
      if (jc.contains("scale_max")) jc.at("scale_max").get_to(cs.scale_max);
      if (jc.contains("count_min")) jc.at("count_min").get_to(cs.count_min);
      if (jc.contains("count_max")) jc.at("count_max").get_to(cs.count_max);
      spec.classes.push_back(cs);
    }
  }
  return spec;
}

// precedence: defaults < checkpoint config < --config file < flags < env
struct ConfigCli {
  std::string config_path;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<uint64_t> seed;
  std::optional<std::string> teacher;
  std::optional<int> top_k;

  void attach(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "TrainConfig JSON file");
    cmd->add_option("--lr", lr, "learning rate");
    cmd->add_option("--epochs", epochs, "epochs for this stage");
    cmd->add_option("--seed", seed, "rng seed");
    cmd->add_option("--teacher", teacher, "label/density teacher: oracle|none")
        ->check(CLI::IsMember({"oracle", "none"}));
    cmd->add_option("--top-k", top_k, "exemplars selected per image");
  }

  TrainConfig resolve(const json* ckpt_config, bool rpn_stage) const {
    TrainConfig cfg;
    if (ckpt_config != nullptr) from_json(*ckpt_config, cfg);
    if (!config_path.empty()) from_json(read_json_file(config_path), cfg);
    if (lr) cfg.lr = *lr;
    if (epochs) {
      if (rpn_stage)
        cfg.epochs_rpn = *epochs;
      else
        cfg.epochs_dpn = *epochs;
    }
    if (seed) cfg.seed = *seed;
    if (teacher) cfg.teacher = *teacher;
    if (top_k) cfg.top_k = *top_k;
    if (const char* env = std::getenv("REPCOUNT_SEED")) {
      try {
        cfg.seed = std::stoull(env);
      } catch (const std::exception&) {
        throw DataError("REPCOUNT_SEED is not an integer: " +
                        std::string(env));
      }
    }
    cfg.rpn.anchors_per_location = cfg.anchors.anchors_per_location();
    return cfg;
  }
};

std::vector<AnnotatedImage> load_data_or_throw(const std::string& dir) {
  try {
    return load_dataset(dir);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

Checkpoint load_ckpt_or_throw(const std::string& path,
                              const std::string& stage) {
  if (!fs::exists(path)) throw DataError("missing checkpoint " + path);
  Checkpoint ckpt;
  try {
    ckpt = load_checkpoint(path);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  if (!ckpt.meta.contains("stage") || ckpt.meta["stage"] != stage)
    throw DataError(path + " is not a '" + stage + "' checkpoint");
  return ckpt;
}

int run_gen_data(const std::string& spec_path, const std::string& out_dir,
                 uint64_t seed, int count) {
  SceneSpec spec = parse_scene_spec(read_json_file(spec_path));
  std::mt19937_64 rng(seed);
  std::vector<AnnotatedImage> images;
  for (int i = 0; i < count; ++i) {
    AnnotatedImage im;
    try {
      im = generate_scene(spec, rng);
    } catch (const std::exception& e) {
      throw DataError(e.what());
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "scene_%05d.ppm", i);
    im.name = buf;
    images.push_back(std::move(im));
  }
  save_dataset(images, out_dir);
  json summary;
  summary["images"] = count;
  summary["out"] = out_dir;
  summary["seed"] = seed;
  std::cout << summary.dump() << "\n";
  return 0;
}

int run_train_rpn(const std::string& data_dir, const ConfigCli& cc,
                  const std::string& out_path) {
  TrainConfig cfg = cc.resolve(nullptr, true);
  const std::vector<AnnotatedImage> data = load_data_or_throw(data_dir);
  const ToyBackbone backbone(cfg.backbone_channels, cfg.backbone_seed);
  RpnTrainResult result;
  try {
    result = train_reprpn(data, backbone, cfg, &std::cout);
  } catch (const std::exception& e) {
    throw NumericError(e.what());
  }
  save_checkpoint(rpn_checkpoint(result, cfg), out_path);
  json done;
  done["checkpoint"] = out_path;
  done["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
  std::cout << done.dump() << "\n";
  return 0;
}

int run_train_dpn(const std::string& data_dir, const std::string& rpn_path,
                  const ConfigCli& cc, const std::string& out_path) {
  Checkpoint rpn_ckpt = load_ckpt_or_throw(rpn_path, "rpn");
  const json* ckpt_cfg =
      rpn_ckpt.meta.contains("config") ? &rpn_ckpt.meta["config"] : nullptr;
  TrainConfig cfg = cc.resolve(ckpt_cfg, false);
  std::mt19937_64 rng(cfg.seed);
  RepRpnParams rpn = RepRpnParams::init(cfg.rpn, rng);
  try {
    restore_params(rpn, rpn_ckpt);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
  const std::vector<AnnotatedImage> data = load_data_or_throw(data_dir);
  const ToyBackbone backbone(cfg.backbone_channels, cfg.backbone_seed);
  DpnTrainResult result;
  try {
    result = train_dpn(data, backbone, rpn, cfg, &std::cout);
  } catch (const std::exception& e) {
    throw NumericError(e.what());
  }
  save_checkpoint(dpn_checkpoint(result, cfg), out_path);
  json done;
  done["checkpoint"] = out_path;
  done["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
  done["skipped_images"] = result.skipped_images;
  std::cout << done.dump() << "\n";
  return 0;
}

std::vector<int> parse_ks(const std::string& ks) {
  std::vector<int> out;
  std::stringstream ss(ks);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stoi(tok));
    } catch (const std::exception&) {
      throw DataError("bad --k list: " + ks);
    }
    if (out.back() < 1) throw DataError("k must be >= 1");
  }
  if (out.empty()) throw DataError("empty --k list");
  return out;
}

int run_eval_cmd(const std::string& data_dir, const std::string& rpn_path,
                 const std::string& dpn_path, const std::string& ks,
                 const ConfigCli& cc, const std::string& out_path) {
  Checkpoint rpn_ckpt = load_ckpt_or_throw(rpn_path, "rpn");
  const json* ckpt_cfg =
      rpn_ckpt.meta.contains("config") ? &rpn_ckpt.meta["config"] : nullptr;
  TrainConfig cfg = cc.resolve(ckpt_cfg, false);
  std::mt19937_64 rng(cfg.seed);
  RepRpnParams rpn = RepRpnParams::init(cfg.rpn, rng);
  try {
    restore_params(rpn, rpn_ckpt);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }

  std::optional<DpnParams> dpn;
  if (!dpn_path.empty()) {
    Checkpoint dpn_ckpt = load_ckpt_or_throw(dpn_path, "dpn");
    dpn = DpnParams::init(cfg.dpn, rng);
    try {
      restore_params(*dpn, dpn_ckpt);
    } catch (const std::exception& e) {
      throw DataError(e.what());
    }
  }

  const std::vector<AnnotatedImage> data = load_data_or_throw(data_dir);
  const ToyBackbone backbone(cfg.backbone_channels, cfg.backbone_seed);
  EvalOptions opts;
  opts.ks = parse_ks(ks);
  opts.use_dpn = dpn.has_value();
  const EvalReport report = run_eval(data, backbone, rpn,
                                     dpn ? &*dpn : nullptr, cfg, opts);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw DataError("cannot write " + out_path);
    out << report.json.dump(1) << "\n";
  }
  std::cout << report.json["metrics"].dump() << "\n";
  return 0;
}

int run_predict(const std::string& image_path, const std::string& rpn_path,
                const std::string& dpn_path, const ConfigCli& cc,
                const std::string& out_prefix) {
  Checkpoint rpn_ckpt = load_ckpt_or_throw(rpn_path, "rpn");
  const json* ckpt_cfg =
      rpn_ckpt.meta.contains("config") ? &rpn_ckpt.meta["config"] : nullptr;
  TrainConfig cfg = cc.resolve(ckpt_cfg, false);
  std::mt19937_64 rng(cfg.seed);
  RepRpnParams rpn = RepRpnParams::init(cfg.rpn, rng);
  DpnParams dpn = DpnParams::init(cfg.dpn, rng);
  Checkpoint dpn_ckpt = load_ckpt_or_throw(dpn_path, "dpn");
  try {
    restore_params(rpn, rpn_ckpt);
    restore_params(dpn, dpn_ckpt);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }

  Image img;
  try {
    img = load_ppm(image_path);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }

  const ToyBackbone backbone(cfg.backbone_channels, cfg.backbone_seed);
  const FeatureMap fm = backbone.extract(img);
  const Eigen::MatrixXd pos = positional_embeddings(fm.hf(), fm.wf(), cfg.rpn.d);
  const Eigen::MatrixXd x = to_sequence(fm, pos);
  AnchorConfig acfg = cfg.anchors;
  acfg.stride = fm.stride;
  const std::vector<Box> anchors = generate_anchors(acfg, fm.hf(), fm.wf());

  ad::Tape tape;
  RepRpnNodes nodes = reprpn_forward(tape, rpn, x, false);
  std::vector<Proposal> proposals = extract_proposals(tape, nodes, anchors);
  std::vector<Proposal> selected = select_exemplars(
      std::move(proposals), cfg.top_k, cfg.nms_thresh, img.w, img.h);
  if (selected.empty()) throw NumericError("no surviving proposals");
  const FeatureMap dmap = dpn_image_map(x, fm, rpn, cfg);

  json summary;
  summary["image"] = image_path;
  summary["exemplars"] = json::array();
  DensityMap best;
  for (size_t i = 0; i < selected.size(); ++i) {
    const Proposal& e = selected[i];
    ad::Tape dtape;
    const DensityMap z = predict_density(dtape, dpn, dmap, e.box, img.h, img.w);
    const std::string density_path =
        out_prefix + "_density_" + std::to_string(i) + ".bin";
    save_density(z, density_path);
    if (i == 0) best = z;
    json rec;
    rec["box"] = {e.box.x1, e.box.y1, e.box.x2, e.box.y2};
    rec["repetition"] = e.repetition;
    rec["objectness"] = e.objectness;
    rec["density"] = density_path;
    rec["count"] = count(z);
    summary["exemplars"].push_back(std::move(rec));
  }

  Image overlay = overlay_density(img, best);
  for (const Proposal& e : selected) draw_box(overlay, e.box, {255, 255, 0});
  const std::string overlay_path = out_prefix + "_overlay.ppm";
  save_ppm(hstack(img, overlay), overlay_path);
  summary["overlay"] = overlay_path;
  std::cout << summary.dump(1) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"exemplar-free repetitive-object counter"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_spec, gen_out;
  uint64_t gen_seed = 1;
  int gen_count = 20;
  gen->add_option("--spec", gen_spec, "SceneSpec JSON file")->required();
  gen->add_option("--out", gen_out, "output dataset directory")->required();
  gen->add_option("--seed", gen_seed, "rng seed");
  gen->add_option("--count", gen_count, "number of scenes");

  // train-rpn
  auto* trpn = app.add_subcommand("train-rpn", "stage 1: train the proposal network");
  std::string trpn_data, trpn_out = "rpn.ckpt";
  ConfigCli trpn_cc;
  trpn->add_option("--data", trpn_data, "dataset directory")->required();
  trpn->add_option("--out", trpn_out, "output checkpoint path");
  trpn_cc.attach(trpn);

  // train-dpn
  auto* tdpn = app.add_subcommand("train-dpn", "stage 2: train the density network");
  std::string tdpn_data, tdpn_rpn, tdpn_out = "dpn.ckpt";
  ConfigCli tdpn_cc;
  tdpn->add_option("--data", tdpn_data, "dataset directory")->required();
  tdpn->add_option("--rpn", tdpn_rpn, "stage-1 checkpoint")->required();
  tdpn->add_option("--out", tdpn_out, "output checkpoint path");
  tdpn_cc.attach(tdpn);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate on a dataset");
  std::string ev_data, ev_rpn, ev_dpn, ev_ks = "1,3,5", ev_out;
  ConfigCli ev_cc;
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--ckpt-rpn", ev_rpn, "stage-1 checkpoint")->required();
  ev->add_option("--ckpt-dpn", ev_dpn,
                 "stage-2 checkpoint (omit for the repetition-score fast counter)");
  ev->add_option("--k", ev_ks, "comma-separated top-k list");
  ev->add_option("--out", ev_out, "report JSON path");
  ev_cc.attach(ev);

  // predict
  auto* pr = app.add_subcommand("predict", "count one image and render overlays");
  std::string pr_image, pr_rpn, pr_dpn, pr_prefix = "predict";
  ConfigCli pr_cc;
  pr->add_option("--image", pr_image, "input PPM image")->required();
  pr->add_option("--ckpt-rpn", pr_rpn, "stage-1 checkpoint")->required();
  pr->add_option("--ckpt-dpn", pr_dpn, "stage-2 checkpoint")->required();
  pr->add_option("--out-prefix", pr_prefix, "output file prefix");
  pr_cc.attach(pr);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (gen->parsed()) return run_gen_data(gen_spec, gen_out, gen_seed, gen_count);
    if (trpn->parsed()) return run_train_rpn(trpn_data, trpn_cc, trpn_out);
    if (tdpn->parsed())
      return run_train_dpn(tdpn_data, tdpn_rpn, tdpn_cc, tdpn_out);
    if (ev->parsed())
      return run_eval_cmd(ev_data, ev_rpn, ev_dpn, ev_ks, ev_cc, ev_out);
    if (pr->parsed())
      return run_predict(pr_image, pr_rpn, pr_dpn, pr_cc, pr_prefix);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
