#include "poisonforge/defenses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "poisonforge/errors.hpp"
#include "poisonforge/ops.hpp"
#include "poisonforge/optim.hpp"
#include "poisonforge/random.hpp"

namespace poisonforge {

std::string to_string(DefenseMethod method) {
  switch (method) {
    case DefenseMethod::none: return "none";
    case DefenseMethod::autoencoder: return "autoencoder";
    case DefenseMethod::dbscan: return "dbscan";
  }
  return "unknown";
}

DefenseMethod defense_method_from_string(const std::string& text) {
  if (text == "none") return DefenseMethod::none;
  if (text == "autoencoder") return DefenseMethod::autoencoder;
  if (text == "dbscan") return DefenseMethod::dbscan;
  throw ConfigError("unknown defense '" + text + "'");
}

std::size_t AnomalyReport::flagged_count() const {
  return static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), true));
}

void to_json(nlohmann::json& j, const AnomalyReport& r) {
  j = nlohmann::json{{"method", to_string(r.method)},
                     {"threshold", r.threshold},
                     {"flagged_count", r.flagged_count()},
                     {"scores", r.scores},
                     {"flagged", r.flagged}};
}

std::vector<bool> apply_threshold(const std::vector<double>& scores, const ThresholdSpec& spec,
                                  double& threshold) {
  const std::size_t n = scores.size();
  std::vector<bool> flagged(n, false);
  threshold = 0.0;
  if (n == 0) return flagged;
  if (spec.rule == ThresholdRule::quantile) {
    if (!(spec.fraction >= 0.0 && spec.fraction <= 1.0)) {
      throw ConfigError("threshold: quantile fraction must lie in [0,1]");
    }
    const auto m = static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n)));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    for (std::size_t i = 0; i < m; ++i) flagged[order[i]] = true;
    threshold = m < n ? scores[order[m]] : std::numeric_limits<double>::lowest();
    return flagged;
  }
  double mean = 0.0;
  for (double s : scores) mean += s;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double s : scores) var += (s - mean) * (s - mean);
  var /= static_cast<double>(n);
  threshold = mean + spec.k * std::sqrt(var);
  // Rounding in mean and sd must not push a score that equals the threshold
  // analytically to the wrong side.
  const double slack = 1e-12 * std::max(1.0, std::abs(threshold));
  for (std::size_t i = 0; i < n; ++i) flagged[i] = scores[i] >= threshold - slack;
  return flagged;
}

AnomalyReport autoencoder_scan(const LabeledDataset& data, const AutoencoderScanSpec& spec,
                               std::uint64_t seed) {
  if (data.size() == 0) throw DataError("autoencoder_scan: empty dataset");
  if (spec.batch_size == 0) throw ConfigError("autoencoder_scan: batch_size must be positive");
  Rng init(seed, "ae-init");
  AutoencoderModel ae(AutoencoderConfig{spec.bottleneck}, init);
  Rng shuffle(seed, "ae-shuffle");
  Adam optimizer(spec.learning_rate);
  try {
    for (std::size_t epoch = 0; epoch < spec.epochs; ++epoch) {
      const auto order = shuffle.permutation(data.size());
      for (std::size_t start = 0; start < order.size(); start += spec.batch_size) {
        const std::size_t count = std::min(spec.batch_size, order.size() - start);
        const Tensor x = data.gather(std::span<const std::size_t>(order.data() + start, count));
        Tape tape;
        const Tensor loss = ops::l2_loss(ae.forward(x), x, ops::Reduction::mean);
        tape.backward(loss);
        optimizer.step(ae.parameters());
      }
    }
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("autoencoder_scan: training diverged: ") + e.what());
  }

  AnomalyReport report;
  report.method = DefenseMethod::autoencoder;
  report.scores.resize(data.size());
  const std::size_t pixels = data.pixels_per_image();
  NoGrad guard;
  for (std::size_t start = 0; start < data.size(); start += 500) {
    const std::size_t count = std::min<std::size_t>(500, data.size() - start);
    const Tensor x = slice_rows(data.images, start, count);
    const auto recon = ae.forward(x).values();
    const auto orig = x.values();
    for (std::size_t i = 0; i < count; ++i) {
      double err = 0.0;
      for (std::size_t p = 0; p < pixels; ++p) {
        const double d = static_cast<double>(recon[i * pixels + p]) - orig[i * pixels + p];
        err += d * d;
      }
      report.scores[start + i] = err / static_cast<double>(pixels);
    }
  }
  report.flagged = apply_threshold(report.scores, spec.threshold, report.threshold);
  return report;
}

namespace {

double squared_distance(const double* a, const double* b, std::size_t dim) {
  double s = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s;
}

std::size_t point_count(const std::vector<double>& points, std::size_t dim, const char* who) {
  if (dim == 0) throw ShapeError(std::string(who) + ": dimension must be positive");
  if (points.size() % dim != 0) {
    throw ShapeError(std::string(who) + ": coordinate count is not a multiple of the dimension");
  }
  return points.size() / dim;
}

}  // namespace

ClusterLabels dbscan_cluster(const std::vector<double>& points, std::size_t dim, double eps,
                             std::size_t min_pts) {
  if (!(eps > 0.0)) throw ConfigError("dbscan: eps must be > 0");
  if (min_pts == 0) throw ConfigError("dbscan: min_pts must be >= 1");
  const std::size_t n = point_count(points, dim, "dbscan");
  constexpr int kUnvisited = -2;
  ClusterLabels out;
  out.eps = eps;
  out.min_pts = min_pts;
  out.labels.assign(n, kUnvisited);
  const double eps2 = eps * eps;
  auto region = [&](std::size_t i) {
    std::vector<std::size_t> hits;
    for (std::size_t j = 0; j < n; ++j) {
      if (squared_distance(&points[i * dim], &points[j * dim], dim) <= eps2) hits.push_back(j);
    }
    return hits;
  };
  int cluster = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (out.labels[i] != kUnvisited) continue;
    auto seeds = region(i);
    if (seeds.size() < min_pts) {
      out.labels[i] = kNoise;
      continue;
    }
    out.labels[i] = cluster;
    std::vector<bool> queued(n, false);
    for (std::size_t j : seeds) queued[j] = true;
    for (std::size_t q = 0; q < seeds.size(); ++q) {
      const std::size_t j = seeds[q];
      if (out.labels[j] == kNoise) out.labels[j] = cluster;
      if (out.labels[j] != kUnvisited) continue;
      out.labels[j] = cluster;
      const auto more = region(j);
      if (more.size() < min_pts) continue;
      for (std::size_t m : more) {
        if (!queued[m]) {
          queued[m] = true;
          seeds.push_back(m);
        }
      }
    }
    ++cluster;
  }
  out.cluster_count = static_cast<std::size_t>(cluster);
  return out;
}

std::vector<double> k_distances(const std::vector<double>& points, std::size_t dim,
                                std::size_t k) {
  const std::size_t n = point_count(points, dim, "k_distances");
  if (k == 0) throw ConfigError("k_distances: k must be >= 1");
  std::vector<double> out(n, 0.0);
  if (n == 0) return out;
  const std::size_t kk = std::min(k, n) - 1;
  std::vector<double> row(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      row[j] = squared_distance(&points[i * dim], &points[j * dim], dim);
    }
    std::nth_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(kk), row.end());
    out[i] = std::sqrt(row[kk]);
  }
  return out;
}

AnomalyReport cluster_scan(const LabeledDataset& data, const ClassifierModel& classifier,
                           const ClusterScanSpec& spec) {
  if (spec.min_pts == 0) throw ConfigError("cluster_scan: min_pts must be >= 1");
  if (!(spec.min_cluster_fraction >= 0.0 && spec.min_cluster_fraction <= 1.0)) {
    throw ConfigError("cluster_scan: min_cluster_fraction must lie in [0,1]");
  }
  AnomalyReport report;
  report.method = DefenseMethod::dbscan;
  report.scores.assign(data.size(), 0.0);
  report.flagged.assign(data.size(), false);
  report.threshold = 1.0;
  if (data.size() == 0) return report;
  const Tensor features = extract_features_batched(classifier, data.images);
  const std::size_t dim = features.dim(1);
  const auto fv = features.values();
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    const auto rows = data.indices_of_class(static_cast<int>(c));
    if (rows.empty()) continue;
    std::vector<double> points(rows.size() * dim);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      std::copy_n(fv.begin() + static_cast<std::ptrdiff_t>(rows[i] * dim), dim,
                  points.begin() + static_cast<std::ptrdiff_t>(i * dim));
    }
    const auto kd = k_distances(points, dim, spec.min_pts);
    double eps = spec.eps;
    if (!(eps > 0.0)) {
      std::vector<double> sorted = kd;
      std::sort(sorted.begin(), sorted.end());
      const auto at = static_cast<std::size_t>(
          std::ceil(spec.eps_quantile * static_cast<double>(sorted.size())));
      eps = sorted[std::min(sorted.size() - 1, at == 0 ? 0 : at - 1)];
      // A class of identical points has zero k-distance everywhere.
      if (!(eps > 0.0)) eps = 1e-9;
    }
    const auto labels = dbscan_cluster(points, dim, eps, spec.min_pts);
    std::vector<std::size_t> sizes(labels.cluster_count, 0);
    for (int l : labels.labels) {
      if (l >= 0) ++sizes[static_cast<std::size_t>(l)];
    }
    const double min_size = spec.min_cluster_fraction * static_cast<double>(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const int l = labels.labels[i];
      const bool small = l >= 0 && static_cast<double>(sizes[static_cast<std::size_t>(l)]) < min_size;
      report.flagged[rows[i]] = l == kNoise || small;
      report.scores[rows[i]] = kd[i] / eps;
    }
  }
  return report;
}

DetectionScore detection_score(const std::vector<bool>& flagged, const std::vector<bool>& truth) {
  if (flagged.size() != truth.size()) {
    throw ShapeError("detection_score: flag and mask lengths differ");
  }
  std::size_t tp = 0, fl = 0, pos = 0;
  for (std::size_t i = 0; i < flagged.size(); ++i) {
    fl += flagged[i];
    pos += truth[i];
    tp += flagged[i] && truth[i];
  }
  DetectionScore s;
  if (fl > 0) s.precision = static_cast<double>(tp) / static_cast<double>(fl);
  if (pos > 0) s.recall = static_cast<double>(tp) / static_cast<double>(pos);
  return s;
}

void to_json(nlohmann::json& j, const DefenseOutcome& d) {
  j = nlohmann::json{{"method", to_string(d.method)},
                     {"asr_before", d.asr_before},
                     {"asr_after", d.asr_after},
                     {"acc_before", d.acc_before},
                     {"acc_after", d.acc_after},
                     {"detection_precision", d.detection_precision},
                     {"detection_recall", d.detection_recall},
                     {"removed_count", d.removed_count},
                     {"acc_report_after", d.acc_report_after},
                     {"asr_report_after", d.asr_report_after}};
}

DefenseOutcome filter_retrain_evaluate(const PoisonedDataset& train, const AnomalyReport& report,
                                       const EvalBundle& bundle) {
  if (!bundle.test || !bundle.clean_reference) {
    throw ConfigError("filter_retrain_evaluate: evaluation bundle is incomplete");
  }
  if (report.flagged.size() != train.data.size()) {
    throw DataError("filter_retrain_evaluate: report covers " +
                    std::to_string(report.flagged.size()) + " samples, training set has " +
                    std::to_string(train.data.size()));
  }
  DefenseOutcome out;
  out.method = report.method;
  out.removed_count = report.flagged_count();
  if (out.removed_count == train.data.size()) {
    throw DataError("filter_retrain_evaluate: every training sample was flagged");
  }
  const auto score = detection_score(report.flagged, train.poison_mask);
  out.detection_precision = score.precision;
  out.detection_recall = score.recall;
  out.acc_before = bundle.acc_before.acc;
  out.asr_before = bundle.asr_before.asr;

  const PoisonedDataset kept = remove_flagged(train, report.flagged);
  const ClassifierModel model = fit_classifier(kept.data, bundle.recipe, bundle.train_seed);
  out.acc_report_after = compute_acc(model, *bundle.test);
  out.acc_report_after.context = "poisoned_model";
  out.asr_report_after = compute_asr(model, *bundle.clean_reference, bundle.triggers,
                                     bundle.trigger_class, bundle.target_class,
                                     bundle.trigger_description);
  out.acc_after = out.acc_report_after.acc;
  out.asr_after = out.asr_report_after.asr;
  return out;
}

}  // namespace poisonforge
