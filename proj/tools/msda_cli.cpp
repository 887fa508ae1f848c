// msda: command-line driver for data generation, training, evaluation,
// ablation, prediction and the gradient audit.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "msda/eval.hpp"
#include "msda/grad_audit.hpp"

namespace {

using namespace msda;

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitDivergence = 3;
constexpr int kExitAudit = 4;

void print_resolved(const std::string& command, const std::string& body) {
  std::printf("# %s resolved configuration\n%s", command.c_str(), body.c_str());
  if (!body.empty() && body.back() != '\n') std::printf("\n");
  std::fflush(stdout);
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto comma = text.find(',', pos);
    const std::string item =
        text.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    out.push_back(detail::parse_uint("seeds", detail::trim(item)));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

struct GenArgs {
  std::string out;
  std::uint64_t seed = 1;
  SplitCounts counts;
  std::size_t size = 64;
};

int run_gen(const GenArgs& a) {
  std::ostringstream os;
  os << "out = " << a.out << "\nseed = " << a.seed << "\nsource_train = " << a.counts.source_train
     << "\ntarget_train = " << a.counts.target_train << "\ntarget_test = " << a.counts.target_test
     << "\nsource_test = " << a.counts.source_test << "\nsize = " << a.size << '\n';
  print_resolved("gen-data", os.str());
  const auto m = make_split(a.seed, a.counts, a.out, a.size);
  std::printf("manifest %s\n", (m.root / kManifestName).string().c_str());
  for (auto s : kAllSplits) {
    const std::size_t n = s == Split::kTargetTrain ? m.unlabeled.size() : m.split(s).size();
    std::printf("%s %zu\n", split_name(s), n);
  }
  std::printf("records %zu\n", m.record_count());
  return kExitOk;
}

struct TrainArgs {
  std::string config;
  bool no_adapt = false;
  std::optional<std::string> scales;
  std::optional<double> lambda;
  std::optional<std::string> resume;
  std::optional<std::string> data;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> iterations;
  bool quiet = false;
};

TrainConfig resolve_train_config(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config_file(a.config);
  if (a.no_adapt) cfg.model.adapt = false;
  if (a.scales) cfg.model.scales_adapted = ScaleSet::parse(*a.scales);
  if (a.lambda) cfg.model.grl_lambda = *a.lambda;
  if (a.data) cfg.data = *a.data;
  if (a.out) cfg.out_dir = *a.out;
  if (a.seed) cfg.seed = *a.seed;
  if (a.iterations) cfg.iterations = *a.iterations;
  cfg.validate();
  return cfg;
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = resolve_train_config(a);
  Checkpoint start;
  if (a.resume) {
    start = load_checkpoint(*a.resume);
    // The run continues under the checkpoint's model; only schedule and I/O
    // settings may change on resume.
    const std::size_t iterations = cfg.iterations;
    const std::string out_dir = a.out ? *a.out : start.config.out_dir;
    const std::string data = cfg.data;
    cfg = start.config;
    cfg.iterations = iterations;
    cfg.out_dir = out_dir;
    if (!data.empty()) cfg.data = data;
    start.config = cfg;
  } else {
    start = fresh_checkpoint(cfg);
  }
  print_resolved("train", config_to_text(cfg));
  if (cfg.data.empty()) throw std::invalid_argument("train: no data manifest (set `data` or --data)");
  const auto manifest = load_manifest(cfg.data);
  const auto data = load_training_data(manifest, cfg.model.adapt);
  auto result = train(std::move(start), data, {.write_files = true, .verbose = !a.quiet});
  std::printf("finished %zu iterations in %.1fs; checkpoint %s\n",
              static_cast<std::size_t>(result.final.iteration), result.seconds,
              (fs::path(cfg.out_dir) / "final.msda").string().c_str());
  return kExitOk;
}

struct EvalArgs {
  std::optional<std::string> ckpt;
  std::optional<std::string> detections;
  std::string data;
  std::string split = "target_test";
  std::optional<std::string> dump;
  EvalOptions opt;
  bool confusion = false;
};

int run_eval(const EvalArgs& a) {
  std::ostringstream os;
  os << "ckpt = " << a.ckpt.value_or("-") << "\ndetections = " << a.detections.value_or("-")
     << "\ndata = " << a.data << "\nsplit = " << a.split
     << "\nconf_thresh = " << detail::fmt_double(a.opt.conf_thresh)
     << "\nnms_iou = " << detail::fmt_double(a.opt.nms_iou)
     << "\niou_thresh = " << detail::fmt_double(a.opt.iou_thresh) << '\n';
  print_resolved("eval", os.str());
  const auto manifest = load_manifest(a.data);
  const Split split = parse_split(a.split);
  if (!split_annotated(split)) {
    throw std::invalid_argument(std::string("eval: split ") + split_name(split) +
                                " carries no annotations");
  }
  const auto test = load_labeled(manifest, split);
  std::vector<std::vector<GroundTruthBox>> gts;
  for (const auto& t : test) gts.push_back(t.boxes);

  EvalOutcome outcome;
  std::optional<Checkpoint> ck;
  if (a.detections) {
    outcome.detections = read_detections(*a.detections);
    outcome.report = evaluate_detections(outcome.detections, gts, class_names().size(),
                                         a.opt.iou_thresh, a.opt.min_gt);
  } else {
    ck = load_checkpoint(*a.ckpt);
    outcome = evaluate(ck->params, test, a.opt);
  }
  if (a.dump) write_detections(*a.dump, outcome.detections);
  std::printf("%s", report_csv(outcome.report).c_str());
  if (a.confusion) {
    if (!ck) throw std::invalid_argument("eval: --confusion needs --ckpt");
    const auto src = load_labeled(manifest, Split::kSourceTest);
    const auto tgt = load_labeled(manifest, Split::kTargetTest);
    if (src.empty() || tgt.empty()) {
      throw std::invalid_argument("eval: --confusion needs source_test and target_test splits");
    }
    std::printf("domain_confusion,%.6f\n", domain_confusion(ck->params, src, tgt));
  }
  return kExitOk;
}

int run_predict(const std::string& ckpt_path, const std::string& image_path, double conf,
                double nms_iou) {
  std::ostringstream os;
  os << "ckpt = " << ckpt_path << "\nimage = " << image_path
     << "\nconf_thresh = " << detail::fmt_double(conf)
     << "\nnms_iou = " << detail::fmt_double(nms_iou) << '\n';
  print_resolved("predict", os.str());
  const auto ck = load_checkpoint(ckpt_path);
  std::size_t size = 0;
  const auto pixels = read_ppm_bytes(image_path, &size);
  if (size != ck.config.model.input_size) {
    throw std::invalid_argument("predict: image is " + std::to_string(size) +
                                " px but the model expects " +
                                std::to_string(ck.config.model.input_size));
  }
  auto dets = run_detector(ck.params, {&pixels}, conf, nms_iou);
  std::sort(dets.begin(), dets.end(), detection_rank_less);
  for (const auto& d : dets) std::printf("%s\n", detection_line(d).c_str());
  return kExitOk;
}

int run_ablate(const TrainArgs& targs, const std::string& seeds, const std::string& out) {
  TrainConfig cfg = resolve_train_config(targs);
  AblationOptions opt;
  opt.seeds = parse_seed_list(seeds);
  opt.threads = worker_threads();
  std::ostringstream os;
  os << config_to_text(cfg) << "seeds = " << seeds << "\nthreads = " << opt.threads
     << "\nablation_csv = " << (out.empty() ? "-" : out) << '\n';
  print_resolved("ablate", os.str());
  if (cfg.data.empty()) throw std::invalid_argument("ablate: no data manifest");
  const auto manifest = load_manifest(cfg.data);
  const auto data = load_training_data(manifest, true);
  const auto test = load_labeled(manifest, Split::kTargetTest);
  std::mutex mu;
  opt.on_run = [&](const AblationRun& r) {
    std::lock_guard lock(mu);
    std::fprintf(stderr, "run %s seed %llu: mAP %.4f (%.0fs)\n", subset_label(r.subset).c_str(),
                 static_cast<unsigned long long>(r.seed), r.report.map, r.seconds);
  };
  const auto result = ablate(cfg, data, test, opt);
  const std::string csv = ablation_csv(result, cfg.model.num_classes);
  std::printf("%s", csv.c_str());
  if (!out.empty()) {
    std::ofstream f(out, std::ios::binary);
    if (!f) throw IoError("cannot open " + out + " for writing");
    f << csv;
  }
  return kExitOk;
}

int run_audit(std::size_t seeds) {
  std::ostringstream os;
  os << "seeds = " << seeds << "\neps = 1e-05\n";
  print_resolved("grad-audit", os.str());
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = run_grad_audit(seeds);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  bool ok = true;
  std::printf("%-24s %-12s %-10s %s\n", "operator", "max_rel_err", "tolerance", "status");
  for (const auto& e : table) {
    std::printf("%-24s %-12.3e %-10.0e %s\n", e.op.c_str(), e.max_error, e.tolerance,
                e.passed() ? "ok" : "FAIL");
    ok = ok && e.passed();
  }
  std::printf("elapsed %.2fs\n", secs);
  return ok ? kExitOk : kExitAudit;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale adversarial domain adaptation for a miniature detector"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate the synthetic clear/foggy dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--seed", gen.seed, "Global seed");
  gen_cmd->add_option("--source-train", gen.counts.source_train);
  gen_cmd->add_option("--target-train", gen.counts.target_train);
  gen_cmd->add_option("--target-test", gen.counts.target_test);
  gen_cmd->add_option("--source-test", gen.counts.source_test,
                      "Held-out labeled clear images (default 0)");
  gen_cmd->add_option("--size", gen.size, "Image edge in pixels");

  TrainArgs targs;
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", targs.config, "Config file (key = value lines)");
    cmd->add_flag("--no-adapt", targs.no_adapt, "Disable domain adaptation");
    cmd->add_option("--scales", targs.scales, "Adapted scales, e.g. F1,F2,F3");
    cmd->add_option("--lambda", targs.lambda, "GRL magnitude");
    cmd->add_option("--data", targs.data, "Dataset directory or manifest");
    cmd->add_option("--out", targs.out, "Run directory");
    cmd->add_option("--seed", targs.seed, "Training seed");
    cmd->add_option("--iterations", targs.iterations, "Iteration count");
  };
  auto* train_cmd = app.add_subcommand("train", "Train a detector");
  add_train_flags(train_cmd);
  train_cmd->add_option("--resume", targs.resume,
                        "Checkpoint to resume from; output goes next to it unless --out is set");
  train_cmd->add_flag("--quiet", targs.quiet, "No per-log-row progress on stderr");

  EvalArgs eargs;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint or a detection dump");
  auto* ckpt_opt = eval_cmd->add_option("--ckpt", eargs.ckpt, "Checkpoint");
  auto* det_opt = eval_cmd->add_option("--detections", eargs.detections, "Detection dump");
  ckpt_opt->excludes(det_opt);
  eval_cmd->add_option("--data", eargs.data, "Dataset directory or manifest")->required();
  eval_cmd->add_option("--split", eargs.split, "Split to score");
  eval_cmd->add_option("--dump", eargs.dump, "Write detections here");
  eval_cmd->add_option("--conf", eargs.opt.conf_thresh, "Confidence threshold");
  eval_cmd->add_option("--nms", eargs.opt.nms_iou, "NMS IoU threshold");
  eval_cmd->add_flag("--confusion", eargs.confusion,
                     "Also report held-out DAN domain accuracy");

  std::string pred_ckpt, pred_image;
  double pred_conf = 0.25, pred_nms = 0.5;
  auto* pred_cmd = app.add_subcommand("predict", "Detect objects in one PPM image");
  pred_cmd->add_option("--ckpt", pred_ckpt)->required();
  pred_cmd->add_option("--image", pred_image)->required();
  pred_cmd->add_option("--conf", pred_conf);
  pred_cmd->add_option("--nms", pred_nms);

  std::string seeds = "1,2,3", ablate_out;
  auto* ablate_cmd = app.add_subcommand("ablate", "Scale ablation table");
  add_train_flags(ablate_cmd);
  ablate_cmd->add_option("--seeds", seeds, "Comma-separated seeds");
  ablate_cmd->add_option("--csv", ablate_out, "Also write the table here");

  std::size_t audit_seeds = 20;
  auto* audit_cmd = app.add_subcommand("grad-audit", "Finite-difference check of every operator");
  audit_cmd->add_option("--seeds", audit_seeds);

  std::string strip_in, strip_out;
  auto* strip_cmd = app.add_subcommand("strip", "Drop DAN parameters from a checkpoint");
  strip_cmd->add_option("--ckpt", strip_in)->required();
  strip_cmd->add_option("--out", strip_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (*gen_cmd) return run_gen(gen);
    if (*train_cmd) return run_train(targs);
    if (*eval_cmd) {
      if (!eargs.ckpt && !eargs.detections) {
        std::fprintf(stderr, "eval: one of --ckpt or --detections is required\n");
        return kExitUsage;
      }
      return run_eval(eargs);
    }
    if (*pred_cmd) return run_predict(pred_ckpt, pred_image, pred_conf, pred_nms);
    if (*ablate_cmd) return run_ablate(targs, seeds, ablate_out);
    if (*audit_cmd) return run_audit(audit_seeds);
    if (*strip_cmd) {
      print_resolved("strip", "ckpt = " + strip_in + "\nout = " + strip_out + "\n");
      save_checkpoint(strip_dan(load_checkpoint(strip_in)), strip_out);
      return kExitOk;
    }
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  }
  return kExitUsage;
}
