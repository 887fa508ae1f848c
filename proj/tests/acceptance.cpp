// Acceptance run: property checks plus the reference-scale experiment.
// Prints one PASS/FAIL line per criterion; exit status 0 only if all pass.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "msda/eval.hpp"
#include "msda/grad_audit.hpp"

using namespace msda;

namespace {

std::map<int, bool> g_results;

void report(int id, bool pass, const std::string& detail) {
  g_results[id] = pass;
  std::printf("CRITERION %d %s: %s\n", id, pass ? "PASS" : "FAIL", detail.c_str());
  std::fflush(stdout);
}

void info(const std::string& s) {
  std::printf("  %s\n", s.c_str());
  std::fflush(stdout);
}

std::string fmt(const char* f, double a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------

void criterion_grad_audit() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto table = run_grad_audit(20, 1e-5);
  const double secs = seconds_since(t0);
  bool ok = secs < 120.0;
  double worst = 0.0;
  for (const auto& e : table) {
    ok = ok && e.passed();
    worst = std::max(worst, e.max_error / e.tolerance);
    if (!e.passed()) info("operator " + e.op + fmt(" error %.3e", e.max_error));
  }
  report(1, ok,
         std::to_string(table.size()) + " operators, worst error/tolerance " +
             fmt("%.2e", worst) + fmt(", %.1fs", secs));
}

void criterion_grl() {
  bool ok = true;
  double worst = 0.0;
  for (double lambda : {0.01, 0.1, 1.0}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Rng rng(seed);
      Tensor x = detail::random_tensor(rng, {2, 3, 4, 4}, -2, 2);
      Graph g;
      Tensor y = grl(g, x, lambda);
      for (std::size_t i = 0; i < x.numel(); ++i) {
        ok = ok && std::bit_cast<std::uint64_t>(y[i]) == std::bit_cast<std::uint64_t>(x[i]);
      }
      g.backward(detail::project(g, sigmoid(g, y), seed + 100));
      const std::vector<double> reversed(x.grad().begin(), x.grad().end());

      Tensor x2 = x.clone(true);
      Graph g2;
      g2.backward(detail::project(g2, sigmoid(g2, x2), seed + 100));
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double expect = -lambda * x2.grad()[i];
        const double rel = std::abs(reversed[i] - expect) / std::max(1e-300, std::abs(expect));
        worst = std::max(worst, rel);
      }
    }
  }
  ok = ok && worst <= 1e-12;
  report(2, ok, "forward bitwise identity, backward max rel deviation " + fmt("%.2e", worst));
}

void criterion_loss() {
  bool ok = true;
  double worst_ln2 = 0.0;
  for (std::size_t s = 0; s < kNumScales; ++s) {
    DomainMaps m;
    const std::size_t e = 8 >> s;
    m.maps[s] = Tensor::full({4, 1, e, e}, 0.5);
    Graph g;
    const double l = domain_loss(g, m,
                                 {Domain::kSource, Domain::kTarget, Domain::kSource, Domain::kTarget},
                                 ScaleSet::only(s))
                         .item();
    worst_ln2 = std::max(worst_ln2, std::abs(l - std::log(2.0)));
  }
  ok = ok && worst_ln2 <= 1e-12;

  ModelConfig cfg;
  auto params = build_model(cfg, 6);
  Rng rng(7);
  const Tensor images = detail::random_tensor(rng, {4, 3, 64, 64}, 0.0, 1.0, false);
  BatchLabels labels;
  labels.add_source({{0, Box{4, 6, 20, 22}}, {2, Box{30, 28, 60, 62}}}, 64);
  labels.add_target();
  labels.add_source({{1, Box{10, 40, 34, 60}}}, 64);
  labels.add_target();
  auto grads = [&](DanCoupling c, int which) {
    params.zero_grad();
    Graph g;
    auto f = forward_training_step(g, params, images, labels, c);
    g.backward(which == 0 ? f.loss.l_total : which == 1 ? f.loss.l_det : f.loss.l_dc);
    std::vector<std::vector<double>> out;
    for (const auto& e : params.entries()) {
      if (e.tensor.has_grad()) out.emplace_back(e.tensor.grad().begin(), e.tensor.grad().end());
      else out.emplace_back(e.tensor.numel(), 0.0);
    }
    return out;
  };
  const auto total = grads(DanCoupling::kReversed, 0);
  const auto det = grads(DanCoupling::kReversed, 1);
  const auto raw = grads(DanCoupling::kIdentity, 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < total.size(); ++i) {
    const auto group = params.entries()[i].group;
    for (std::size_t j = 0; j < total[i].size(); ++j) {
      double expect = det[i][j];
      if (group == Group::kBackbone) expect = det[i][j] - cfg.grl_lambda * raw[i][j];
      if (group == Group::kDan) expect = raw[i][j];
      worst = std::max(worst, std::abs(total[i][j] - expect) / std::max(1.0, std::abs(expect)));
    }
  }
  ok = ok && worst <= 1e-10;
  report(3, ok, "ln2 deviation " + fmt("%.2e", worst_ln2) + ", decomposition deviation " +
                    fmt("%.2e", worst));
}

// Independent references for criterion 4.
double raster_iou(const Box& a, const Box& b) {
  int inter = 0, uni = 0;
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      const double cx = x + 0.5, cy = y + 0.5;
      const bool ia = cx > a.x_min && cx < a.x_max && cy > a.y_min && cy < a.y_max;
      const bool ib = cx > b.x_min && cx < b.x_max && cy > b.y_min && cy < b.y_max;
      inter += ia && ib;
      uni += ia || ib;
    }
  }
  return uni ? static_cast<double>(inter) / uni : 0.0;
}

double envelope_ap(const std::vector<bool>& tp, std::size_t num_gt) {
  std::vector<double> prec, rec;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    hits += tp[i];
    prec.push_back(static_cast<double>(hits) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(hits) / static_cast<double>(num_gt));
  }
  double ap = 0.0;
  for (std::size_t j = 1; j <= num_gt; ++j) {
    double best = 0.0;
    for (std::size_t i = 0; i < tp.size(); ++i) {
      if (rec[i] * static_cast<double>(num_gt) >= static_cast<double>(j) - 1e-9) {
        best = std::max(best, prec[i]);
      }
    }
    ap += best / static_cast<double>(num_gt);
  }
  return ap;
}

void criterion_eval() {
  Rng rng(2024);
  auto rbox = [&]() {
    const double x0 = static_cast<double>(rng.uniform_int(0, 12));
    const double y0 = static_cast<double>(rng.uniform_int(0, 12));
    return Box{x0, y0, x0 + static_cast<double>(rng.uniform_int(1, 16 - static_cast<int>(x0))),
               y0 + static_cast<double>(rng.uniform_int(1, 16 - static_cast<int>(y0)))};
  };
  double worst_iou = 0.0, worst_ap = 0.0;
  std::size_t match_errors = 0, instances = 0;
  while (instances < 20) {
    std::vector<Box> gts;
    const auto ng = rng.uniform_int(1, 3);
    for (int i = 0; i < ng; ++i) gts.push_back(rbox());
    std::vector<Detection> dets;
    const auto nd = rng.uniform_int(1, 4);
    for (int i = 0; i < nd; ++i) {
      Box b = rng.uniform() < 0.6 ? gts[static_cast<std::size_t>(rng.uniform_int(0, ng - 1))]
                                  : rbox();
      b.y_max = std::min(16.0, b.y_max + static_cast<double>(rng.uniform_int(0, 1)));
      dets.push_back({0, b, static_cast<double>(rng.uniform_int(1, 3)) / 3.0, 0});
    }
    ++instances;
    for (const auto& d : dets) {
      for (const auto& gt : gts) worst_iou = std::max(worst_iou, std::abs(iou(d.box, gt) -
                                                                          raster_iou(d.box, gt)));
    }
    // Reference greedy: stable order by (score desc, box), bitmask of used gts.
    std::vector<Detection> order = dets;
    std::stable_sort(order.begin(), order.end(), [](const Detection& a, const Detection& b) {
      return std::make_tuple(-a.score, a.box.x_min, a.box.y_min, a.box.x_max, a.box.y_max) <
             std::make_tuple(-b.score, b.box.x_min, b.box.y_min, b.box.x_max, b.box.y_max);
    });
    unsigned used = 0;
    std::vector<bool> ref_tp;
    for (const auto& d : order) {
      int best = -1;
      double best_o = 0.0;
      for (std::size_t k = 0; k < gts.size(); ++k) {
        if (used >> k & 1u) continue;
        const double o = raster_iou(d.box, gts[k]);
        if (o >= 0.5 && (best < 0 || o > best_o)) {
          best = static_cast<int>(k);
          best_o = o;
        }
      }
      if (best >= 0) used |= 1u << best;
      ref_tp.push_back(best >= 0);
    }
    const auto ours = match_and_score(dets, {{0, gts}});
    for (std::size_t i = 0; i < ours.size(); ++i) match_errors += ours[i].tp != ref_tp[i];
    worst_ap = std::max(worst_ap, std::abs(*average_precision(ours, gts.size()) -
                                           envelope_ap(ref_tp, gts.size())));
  }
  const double example = *average_precision({{0.9, true}, {0.8, false}, {0.7, true}}, 2);
  char shown[32];
  std::snprintf(shown, sizeof shown, "%.4f", example);
  const bool ok = worst_iou <= 1e-12 && worst_ap <= 1e-12 && match_errors == 0 &&
                  std::string(shown) == "0.8333" && std::abs(example - 5.0 / 6.0) <= 1e-15;
  report(4, ok,
         std::to_string(instances) + " instances, IoU dev " + fmt("%.1e", worst_iou) +
             ", AP dev " + fmt("%.1e", worst_ap) + ", match mismatches " +
             std::to_string(match_errors) + ", example AP " + shown);
}

// ---------------------------------------------------------------------------

struct Experiment {
  fs::path work;
  DatasetManifest manifest;
  TrainingData data;
  std::vector<LabeledImage> target_test, source_test;
  TrainConfig base;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
};

// Diagnostic only: per image and scale, vote by the map mean.
double image_vote_accuracy(const ModelParams& params, const std::vector<LabeledImage>& source,
                           const std::vector<LabeledImage>& target) {
  const auto frozen = frozen_copy(params);
  const auto& cfg = frozen.config();
  double credit = 0.0;
  std::size_t votes = 0;
  for (int d = 0; d < 2; ++d) {
    const auto& set = d ? target : source;
    for (std::size_t begin = 0; begin < set.size(); begin += 50) {
      std::vector<const std::vector<std::uint8_t>*> part;
      for (std::size_t i = begin; i < std::min(set.size(), begin + 50); ++i) {
        part.push_back(&set[i].pixels);
      }
      Graph g;
      const auto maps =
          forward_dan(g, frozen, forward_backbone(g, frozen, pixels_to_tensor(part, cfg.input_size)),
                      cfg.scales_adapted, cfg.grl_lambda, DanCoupling::kDetached);
      for (std::size_t s = 0; s < kNumScales; ++s) {
        if (!cfg.scales_adapted.contains(s)) continue;
        const auto& m = maps.maps[s];
        const std::size_t plane = m.dim(2) * m.dim(3);
        for (std::size_t i = 0; i < part.size(); ++i) {
          double mean = 0.0;
          for (std::size_t c = 0; c < plane; ++c) mean += m.values()[i * plane + c];
          mean /= static_cast<double>(plane);
          credit += mean == 0.5 ? 0.5 : ((mean > 0.5) == (d == 0) ? 1.0 : 0.0);
          ++votes;
        }
      }
    }
  }
  return credit / static_cast<double>(votes);
}

fs::path run_dir(const Experiment& x, const std::string& label, std::uint64_t seed) {
  return x.work / "ablation" / (label + "_seed" + std::to_string(seed));
}

void experiments(const fs::path& work) {
  Experiment x;
  x.work = work;
  const auto t0 = std::chrono::steady_clock::now();
  x.manifest = make_split(1, {2000, 2000, 200, 200}, work / "data", 64, 3);
  x.data = load_training_data(x.manifest, true);
  x.target_test = load_labeled(x.manifest, Split::kTargetTest);
  x.source_test = load_labeled(x.manifest, Split::kSourceTest);
  info(fmt("dataset ready in %.0fs", seconds_since(t0)));

  x.base.data = (work / "data").string();
  x.base.out_dir = (work / "ablation").string();

  AblationOptions opt;
  opt.seeds = x.seeds;
  opt.threads = worker_threads();
  opt.on_run = [](const AblationRun& r) {
    info("run " + subset_label(r.subset) + " seed " + std::to_string(r.seed) +
         fmt(": target mAP %.4f", r.report.map) + fmt(" (%.0fs)", r.seconds));
  };
  const auto ablation = ablate(x.base, x.data, x.target_test, opt);
  std::ofstream(work / "ablation.csv") << ablation_csv(ablation, 3);
  info("ablation table (median over seeds):");
  std::istringstream table(ablation_csv(ablation, 3));
  for (std::string line; std::getline(table, line);) info("  " + line);

  // 5: domain gap of the baseline.
  std::vector<double> gaps, base_target, base_source;
  for (auto seed : x.seeds) {
    const auto ck = load_checkpoint(run_dir(x, "baseline", seed) / "final.msda");
    const double src = evaluate(ck.params, x.source_test).report.map;
    const double tgt = evaluate(ck.params, x.target_test).report.map;
    base_source.push_back(src);
    base_target.push_back(tgt);
    gaps.push_back(src - tgt);
  }
  report(5, median(gaps) >= 0.05,
         fmt("baseline source_test mAP %.4f", median(base_source)) +
             fmt(", target_test mAP %.4f", median(base_target)) +
             fmt(", median gap %.4f (need >= 0.05)", median(gaps)));

  // 6: adaptation direction.
  std::map<std::uint64_t, double> base_by_seed, all_by_seed;
  for (const auto& r : ablation.runs) {
    if (!r.subset) base_by_seed[r.seed] = r.report.map;
    else if (*r.subset == ScaleSet::all()) all_by_seed[r.seed] = r.report.map;
  }
  std::vector<double> b, a;
  for (auto seed : x.seeds) {
    b.push_back(base_by_seed.at(seed));
    a.push_back(all_by_seed.at(seed));
  }
  const double gain = median(a) - median(b);
  report(6, gain >= 0.02 && ablation.rows.size() == 8,
         fmt("target mAP baseline %.4f", median(b)) + fmt(", all scales %.4f", median(a)) +
             fmt(", gain %.4f (need >= 0.02)", gain) + ", table rows " +
             std::to_string(ablation.rows.size()));

  // 7: domain confusion with and without reversal.
  std::vector<double> adv_acc, plain_acc;
  for (auto seed : x.seeds) {
    const auto ck = load_checkpoint(run_dir(x, "F1+F2+F3", seed) / "final.msda");
    adv_acc.push_back(domain_confusion(ck.params, x.source_test, x.target_test));
    TrainConfig cfg = x.base;
    cfg.seed = seed;
    cfg.model.grl_lambda = 0.0;
    cfg.out_dir = (work / ("no_reversal_seed" + std::to_string(seed))).string();
    const auto trained = train(fresh_checkpoint(cfg), x.data);
    plain_acc.push_back(domain_confusion(trained.final.params, x.source_test, x.target_test));
    info("seed " + std::to_string(seed) + fmt(": adversarial DAN accuracy %.4f", adv_acc.back()) +
         fmt(", reversal disabled %.4f", plain_acc.back()) +
         fmt("; per-image vote %.4f", image_vote_accuracy(ck.params, x.source_test, x.target_test)) +
         fmt(" vs %.4f", image_vote_accuracy(trained.final.params, x.source_test, x.target_test)));
  }
  const double adv = median(adv_acc), plain = median(plain_acc);
  report(7, adv >= 0.4 && adv <= 0.65 && plain > 0.9,
         fmt("held-out DAN accuracy adversarial %.4f (need [0.4, 0.65])", adv) +
             fmt(", reversal disabled %.4f (need > 0.9)", plain));

  // 8: inference equivalence after stripping.
  {
    const auto ck = load_checkpoint(run_dir(x, "F1+F2+F3", 1) / "final.msda");
    const auto stripped = parse_checkpoint(serialize_checkpoint(strip_dan(ck)));
    Rng rng(99);
    std::vector<std::vector<std::uint8_t>> images(10, std::vector<std::uint8_t>(3 * 64 * 64));
    for (auto& img : images) {
      for (auto& p : img) p = static_cast<std::uint8_t>(rng.uniform_int(0, 255));
    }
    std::vector<const std::vector<std::uint8_t>*> ptrs;
    for (const auto& img : images) ptrs.push_back(&img);
    const auto a_det = run_detector(ck.params, ptrs, 0.01, 0.5);
    const auto b_det = run_detector(stripped.params, ptrs, 0.01, 0.5);
    bool same = a_det.size() == b_det.size();
    for (std::size_t i = 0; same && i < a_det.size(); ++i) {
      same = std::bit_cast<std::uint64_t>(a_det[i].score) ==
                 std::bit_cast<std::uint64_t>(b_det[i].score) &&
             a_det[i] == b_det[i];
    }
    report(8, same && stripped.params.count(Group::kDan) == 0,
           std::to_string(a_det.size()) + " detections on 10 random images, " +
               (same ? "bitwise identical" : "MISMATCH"));
  }

  // 9: rerun one reference run into the same directory, then resume it from
  // its midpoint checkpoint.
  {
    const fs::path dir = run_dir(x, "F1+F2+F3", 1);
    const std::string csv0 = slurp(dir / "metrics.csv");
    const std::string ck0 = slurp(dir / "final.msda");
    const std::string mid0 = slurp(dir / "ckpt_001500.msda");
    fs::remove_all(dir);
    TrainConfig cfg = x.base;
    cfg.seed = 1;
    cfg.out_dir = dir.string();
    train(fresh_checkpoint(cfg), x.data);
    const bool rerun_same =
        slurp(dir / "metrics.csv") == csv0 && slurp(dir / "final.msda") == ck0 &&
        slurp(dir / "ckpt_001500.msda") == mid0;

    fs::remove(dir / "final.msda");
    for (int it : {2000, 2500, 3000}) fs::remove(dir / detail::checkpoint_name(it));
    train(load_checkpoint(dir / "ckpt_001500.msda"), x.data);
    const bool resume_same =
        slurp(dir / "metrics.csv") == csv0 && slurp(dir / "final.msda") == ck0;
    report(9, rerun_same && resume_same,
           std::string("rerun ") + (rerun_same ? "byte-identical" : "DIFFERS") +
               ", resume from iteration 1500 " + (resume_same ? "byte-identical" : "DIFFERS"));
  }
  info(fmt("experiments finished in %.0fs", seconds_since(t0)));
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = "acceptance_work";
  for (int i = 1; i + 1 < argc; ++i) {
    if (std::string(argv[i]) == "--work") work = argv[i + 1];
  }
  fs::remove_all(work);
  fs::create_directories(work);

  criterion_grad_audit();
  criterion_grl();
  criterion_loss();
  criterion_eval();
  try {
    experiments(work);
  } catch (const std::exception& e) {
    std::printf("experiment aborted: %s\n", e.what());
  }
  for (int id = 5; id <= 9; ++id) {
    if (!g_results.count(id)) report(id, false, "not reached");
  }
  bool all = true;
  for (const auto& [id, pass] : g_results) all = all && pass;
  std::printf("SUMMARY %s\n", all ? "PASS" : "FAIL");
  return all ? 0 : 1;
}
