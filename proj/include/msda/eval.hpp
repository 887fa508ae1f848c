#pragma once

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "msda/box.hpp"
#include "msda/data.hpp"
#include "msda/model.hpp"
#include "msda/train.hpp"

namespace msda {

inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> names = {"circle", "square", "triangle"};
  return names;
}

inline std::string class_label(std::size_t c) {
  return c < class_names().size() ? class_names()[c] : "class" + std::to_string(c);
}

/// Detection order used everywhere: score descending, then image id, then
/// box coordinates.
inline bool detection_rank_less(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.image_id != b.image_id) return a.image_id < b.image_id;
  return a.box < b.box;
}

struct ScoredMatch {
  double score = 0.0;
  bool tp = false;
};

/// Greedy matching for one class: each detection, in rank order, takes the
/// highest-IoU still-unmatched ground truth of its image if IoU >= threshold.
inline std::vector<ScoredMatch> match_and_score(
    std::vector<Detection> dets, const std::map<std::size_t, std::vector<Box>>& gts,
    double iou_thresh = 0.5) {
  std::sort(dets.begin(), dets.end(), detection_rank_less);
  std::map<std::size_t, std::vector<bool>> used;
  for (const auto& [img, boxes] : gts) used[img].assign(boxes.size(), false);
  std::vector<ScoredMatch> out;
  out.reserve(dets.size());
  for (const auto& d : dets) {
    bool tp = false;
    auto it = gts.find(d.image_id);
    if (it != gts.end()) {
      auto& taken = used[d.image_id];
      double best = -1.0;
      std::size_t best_k = 0;
      for (std::size_t k = 0; k < it->second.size(); ++k) {
        if (taken[k]) continue;
        const double o = iou(d.box, it->second[k]);
        if (o > best) {
          best = o;
          best_k = k;
        }
      }
      if (best >= iou_thresh) {
        taken[best_k] = true;
        tp = true;
      }
    }
    out.push_back({d.score, tp});
  }
  return out;
}

/// All-point interpolated AP over a rank-ordered match list. nullopt when the
/// class has no ground truth.
inline std::optional<double> average_precision(const std::vector<ScoredMatch>& ranked,
                                               std::size_t num_gt) {
  if (num_gt == 0) return std::nullopt;
  std::vector<double> recall, precision;
  double tp = 0.0, fp = 0.0;
  for (const auto& m : ranked) {
    (m.tp ? tp : fp) += 1.0;
    recall.push_back(tp / static_cast<double>(num_gt));
    precision.push_back(tp / (tp + fp));
  }
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0, prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

struct ClassResult {
  std::string name;
  std::optional<double> ap;  // nullopt: excluded (too few ground truths)
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  std::size_t true_positives = 0;
};

struct EvalReport {
  std::vector<ClassResult> classes;
  double map = 0.0;

  std::size_t total_gt() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.num_gt;
    return n;
  }
};

/// Scores detections against ground truth per class at the given IoU.
inline EvalReport evaluate_detections(const std::vector<Detection>& dets,
                                      const std::vector<std::vector<GroundTruthBox>>& gts,
                                      std::size_t num_classes, double iou_thresh = 0.5,
                                      std::size_t min_gt = 1) {
  EvalReport report;
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < num_classes; ++c) {
    ClassResult cr;
    cr.name = class_label(c);
    std::map<std::size_t, std::vector<Box>> by_image;
    for (std::size_t i = 0; i < gts.size(); ++i) {
      for (const auto& g : gts[i]) {
        if (g.class_id == static_cast<int>(c)) {
          by_image[i].push_back(g.box);
          ++cr.num_gt;
        }
      }
    }
    std::vector<Detection> mine;
    for (const auto& d : dets) {
      if (d.class_id == static_cast<int>(c)) mine.push_back(d);
    }
    cr.num_det = mine.size();
    const auto ranked = match_and_score(std::move(mine), by_image, iou_thresh);
    for (const auto& m : ranked) cr.true_positives += m.tp;
    if (cr.num_gt >= std::max<std::size_t>(min_gt, 1)) {
      cr.ap = average_precision(ranked, cr.num_gt);
      sum += *cr.ap;
      ++included;
    }
    report.classes.push_back(cr);
  }
  report.map = included ? sum / static_cast<double>(included) : 0.0;
  return report;
}

inline std::string report_csv(const EvalReport& r) {
  std::ostringstream os;
  char buf[64];
  os << "class,ap\n";
  for (const auto& c : r.classes) {
    if (c.ap) {
      std::snprintf(buf, sizeof buf, "%.6f", *c.ap);
      os << c.name << ',' << buf << '\n';
    } else {
      os << c.name << ",absent\n";
    }
  }
  std::snprintf(buf, sizeof buf, "%.6f", r.map);
  os << "mAP," << buf << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// Detection dumps: `image_id class score x_min y_min x_max y_max`

inline std::string detection_line(const Detection& d) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu %d %.6f %.3f %.3f %.3f %.3f", d.image_id, d.class_id,
                d.score, d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max);
  return buf;
}

inline void write_detections(const fs::path& path, const std::vector<Detection>& dets) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  for (const auto& d : dets) out << detection_line(d) << '\n';
}

inline std::vector<Detection> read_detections(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<Detection> dets;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    Detection d;
    if (!(ls >> d.image_id >> d.class_id >> d.score >> d.box.x_min >> d.box.y_min >>
          d.box.x_max >> d.box.y_max) ||
        !d.box.valid()) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": malformed detection");
    }
    dets.push_back(d);
  }
  return dets;
}

// ---------------------------------------------------------------------------
// Model evaluation

struct EvalOptions {
  double conf_thresh = 0.01;
  double nms_iou = 0.5;
  double iou_thresh = 0.5;
  std::size_t min_gt = 1;
  std::size_t chunk = 50;
};

/// Runs the detector (backbone, neck, head only) over planar 8-bit images.
/// Image ids are positions in `images`.
inline std::vector<Detection> run_detector(const ModelParams& params,
                                           const std::vector<const std::vector<std::uint8_t>*>& images,
                                           double conf_thresh, double nms_iou,
                                           std::size_t chunk = 50) {
  const auto frozen = frozen_copy(params);
  const auto& cfg = frozen.config();
  std::vector<Detection> out;
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    std::vector<const std::vector<std::uint8_t>*> part(images.begin() + begin,
                                                       images.begin() + end);
    Graph g;
    const Tensor x = pixels_to_tensor(part, cfg.input_size);
    const auto head = forward_neck_head(g, frozen, forward_backbone(g, frozen, x));
    auto per_image = decode_predictions(head, conf_thresh, nms_iou, cfg.anchors, cfg.input_size);
    for (std::size_t i = 0; i < per_image.size(); ++i) {
      for (auto d : per_image[i]) {
        d.image_id = begin + i;
        out.push_back(d);
      }
    }
  }
  return out;
}

struct EvalOutcome {
  EvalReport report;
  std::vector<Detection> detections;
};

inline EvalOutcome evaluate(const ModelParams& params, const std::vector<LabeledImage>& test,
                            EvalOptions opt = {}) {
  std::vector<const std::vector<std::uint8_t>*> imgs;
  std::vector<std::vector<GroundTruthBox>> gts;
  for (const auto& t : test) {
    imgs.push_back(&t.pixels);
    gts.push_back(t.boxes);
  }
  EvalOutcome o;
  o.detections = run_detector(params, imgs, opt.conf_thresh, opt.nms_iou, opt.chunk);
  o.report = evaluate_detections(o.detections, gts, params.config().num_classes,
                                 opt.iou_thresh, opt.min_gt);
  return o;
}

inline EvalOutcome evaluate(const Checkpoint& ck, const DatasetManifest& manifest, Split split,
                            EvalOptions opt = {}) {
  if (!split_annotated(split)) {
    throw std::invalid_argument(std::string("evaluate: split ") + split_name(split) +
                                " has no annotations in the manifest");
  }
  return evaluate(ck.params, load_labeled(manifest, split), opt);
}

/// Held-out DAN accuracy: the per-location rule of domain_accuracy (p > 0.5
/// means source, a tie earns half credit), averaged over images and adapted
/// scales.
inline double domain_confusion(const ModelParams& params,
                               const std::vector<const std::vector<std::uint8_t>*>& images,
                               const std::vector<Domain>& tags, std::size_t chunk = 50) {
  const auto& cfg = params.config();
  if (!cfg.adapt || params.count(Group::kDan) == 0) {
    throw std::invalid_argument("domain_confusion: checkpoint has no DAN (stripped?)");
  }
  if (images.size() != tags.size() || images.empty()) {
    throw std::invalid_argument("domain_confusion: need one domain tag per image");
  }
  const auto frozen = frozen_copy(params);
  double weighted = 0.0;
  for (std::size_t begin = 0; begin < images.size(); begin += chunk) {
    const std::size_t end = std::min(images.size(), begin + chunk);
    std::vector<const std::vector<std::uint8_t>*> part(images.begin() + begin,
                                                       images.begin() + end);
    const std::vector<Domain> part_tags(tags.begin() + begin, tags.begin() + end);
    Graph g;
    const auto feats = forward_backbone(g, frozen, pixels_to_tensor(part, cfg.input_size));
    const auto maps = forward_dan(g, frozen, feats, cfg.scales_adapted, cfg.grl_lambda,
                                  DanCoupling::kDetached);
    weighted += domain_accuracy(maps, part_tags, cfg.scales_adapted) *
                static_cast<double>(part.size());
  }
  return weighted / static_cast<double>(images.size());
}

/// Held-out mixed set: source_test images tagged source, target_test tagged
/// target.
inline double domain_confusion(const ModelParams& params, const std::vector<LabeledImage>& source,
                               const std::vector<LabeledImage>& target) {
  std::vector<const std::vector<std::uint8_t>*> imgs;
  std::vector<Domain> tags;
  for (const auto& s : source) {
    imgs.push_back(&s.pixels);
    tags.push_back(Domain::kSource);
  }
  for (const auto& t : target) {
    imgs.push_back(&t.pixels);
    tags.push_back(Domain::kTarget);
  }
  return domain_confusion(params, imgs, tags);
}

// ---------------------------------------------------------------------------
// Scale ablation

inline std::vector<ScaleSet> default_ablation_subsets() {
  return {ScaleSet::parse("F3"),    ScaleSet::parse("F2"),    ScaleSet::parse("F1"),
          ScaleSet::parse("F2,F3"), ScaleSet::parse("F1,F2"), ScaleSet::parse("F1,F3"),
          ScaleSet::all()};
}

struct AblationRun {
  std::optional<ScaleSet> subset;  // nullopt: no-adaptation baseline
  std::uint64_t seed = 0;
  EvalReport report;
  double seconds = 0.0;
};

struct AblationRow {
  std::string label;
  std::vector<std::optional<double>> ap;
  double map = 0.0;
};

struct AblationResult {
  std::vector<AblationRun> runs;
  std::vector<AblationRow> rows;  // baseline first, then subsets in order
};

inline std::string subset_label(const std::optional<ScaleSet>& s) {
  return s ? s->str('+') : "baseline";
}

/// Median run by mAP; with an even count the two middle runs are averaged,
/// so the row's mAP stays the mean of its class columns.
inline AblationRow median_row(const std::string& label, std::vector<const AblationRun*> runs) {
  std::sort(runs.begin(), runs.end(), [](const AblationRun* a, const AblationRun* b) {
    if (a->report.map != b->report.map) return a->report.map < b->report.map;
    return a->seed < b->seed;
  });
  std::vector<const AblationRun*> mid;
  const std::size_t n = runs.size();
  if (n % 2) mid = {runs[n / 2]};
  else mid = {runs[n / 2 - 1], runs[n / 2]};
  AblationRow row;
  row.label = label;
  const std::size_t classes = mid[0]->report.classes.size();
  double sum = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::optional<double> v;
    if (mid[0]->report.classes[c].ap) {
      double acc = 0.0;
      for (const auto* r : mid) acc += r->report.classes[c].ap.value_or(0.0);
      v = acc / static_cast<double>(mid.size());
      sum += *v;
      ++included;
    }
    row.ap.push_back(v);
  }
  row.map = included ? sum / static_cast<double>(included) : 0.0;
  return row;
}

inline std::string ablation_csv(const AblationResult& r, std::size_t num_classes) {
  std::ostringstream os;
  os << "subset";
  for (std::size_t c = 0; c < num_classes; ++c) os << ",ap_" << class_label(c);
  os << ",map\n";
  char buf[64];
  for (const auto& row : r.rows) {
    os << row.label;
    for (const auto& ap : row.ap) {
      if (ap) {
        std::snprintf(buf, sizeof buf, "%.6f", *ap);
        os << ',' << buf;
      } else {
        os << ",absent";
      }
    }
    std::snprintf(buf, sizeof buf, "%.6f", row.map);
    os << ',' << buf << '\n';
  }
  return os.str();
}

/// Worker count from MSDA_THREADS (default 1).
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("MSDA_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return 1;
}

struct AblationOptions {
  std::vector<ScaleSet> subsets = default_ablation_subsets();
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  EvalOptions eval;
  std::size_t threads = 1;
  bool write_files = true;
  std::function<void(const AblationRun&)> on_run;
};

/// Trains the baseline and every subset for every seed, then evaluates each
/// on `test`. Run directories live under base.out_dir.
inline AblationResult ablate(const TrainConfig& base, const TrainingData& data,
                             const std::vector<LabeledImage>& test, AblationOptions opt = {}) {
  if (opt.seeds.empty()) throw std::invalid_argument("ablate: no seeds");
  struct Job {
    std::optional<ScaleSet> subset;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto seed : opt.seeds) {
    jobs.push_back({std::nullopt, seed});
    for (auto s : opt.subsets) jobs.push_back({s, seed});
  }
  AblationResult result;
  result.runs.resize(jobs.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr failure;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next++;
      if (i >= jobs.size()) return;
      const auto& job = jobs[i];
      TrainConfig cfg = base;
      cfg.seed = job.seed;
      cfg.model.adapt = job.subset.has_value();
      if (job.subset) cfg.model.scales_adapted = *job.subset;
      cfg.out_dir = (fs::path(base.out_dir) /
                     (subset_label(job.subset) + "_seed" + std::to_string(job.seed)))
                        .string();
      try {
        auto trained = train(fresh_checkpoint(cfg), data, {.write_files = opt.write_files});
        AblationRun run{job.subset, job.seed, evaluate(trained.final.params, test, opt.eval).report,
                        trained.seconds};
        std::lock_guard lock(mu);
        result.runs[i] = run;
        if (opt.on_run) opt.on_run(run);
      } catch (const std::exception& e) {
        std::lock_guard lock(mu);
        if (!failure) {
          failure = std::make_exception_ptr(std::runtime_error(
              "ablation run " + subset_label(job.subset) + " seed " + std::to_string(job.seed) +
              " failed: " + e.what()));
        }
        next = jobs.size();
        return;
      }
    }
  };
  const std::size_t n_threads = std::max<std::size_t>(1, std::min(opt.threads, jobs.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  std::vector<std::optional<ScaleSet>> order = {std::nullopt};
  for (auto s : opt.subsets) order.push_back(s);
  for (const auto& subset : order) {
    std::vector<const AblationRun*> mine;
    for (const auto& r : result.runs) {
      if (r.subset == subset) mine.push_back(&r);
    }
    result.rows.push_back(median_row(subset_label(subset), mine));
  }
  return result;
}

}  // namespace msda
