#include "poisonforge/evaluation.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include <boost/math/distributions/students_t.hpp>

#include "poisonforge/errors.hpp"
#include "poisonforge/random.hpp"

namespace poisonforge {

std::vector<double> box_downscale(std::span<const float> pixels, std::size_t height,
                                  std::size_t width, std::size_t out_height,
                                  std::size_t out_width) {
  if (pixels.size() != height * width || height == 0 || width == 0) {
    throw ShapeError("box_downscale: pixel count does not match " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  if (out_height == 0 || out_width == 0) throw ShapeError("box_downscale: empty output");
  // Cell (r, c) covers source rows [r*H/oh, (r+1)*H/oh) with fractional
  // edges. Weights are overlaps measured in units of 1/oh (1/ow), which are
  // integers, so equal pixels give bit-identical cell averages.
  auto weights = [](std::size_t in, std::size_t out, std::size_t cell) {
    std::vector<double> w(in, 0.0);
    const std::size_t lo = cell * in, hi = (cell + 1) * in;
    for (std::size_t k = lo / out; k < in && k * out < hi; ++k) {
      w[k] = static_cast<double>(std::min(hi, (k + 1) * out) - std::max(lo, k * out));
    }
    return w;
  };
  std::vector<double> out(out_height * out_width, 0.0);
  for (std::size_t r = 0; r < out_height; ++r) {
    const auto wr = weights(height, out_height, r);
    for (std::size_t c = 0; c < out_width; ++c) {
      const auto wc = weights(width, out_width, c);
      double sum = 0.0;
      for (std::size_t y = 0; y < height; ++y) {
        if (wr[y] == 0.0) continue;
        for (std::size_t x = 0; x < width; ++x) {
          if (wc[x] == 0.0) continue;
          sum += wr[y] * wc[x] * pixels[y * width + x];
        }
      }
      out[r * out_width + c] = sum / static_cast<double>(height * width);
    }
  }
  return out;
}

std::uint64_t dhash64(std::span<const float> pixels, std::size_t height, std::size_t width) {
  const auto cells = box_downscale(pixels, height, width, 8, 9);
  std::uint64_t hash = 0;
  for (std::size_t r = 0; r < 8; ++r) {
    for (std::size_t c = 0; c < 8; ++c) {
      if (cells[r * 9 + c] < cells[r * 9 + c + 1]) hash |= std::uint64_t{1} << (r * 8 + c);
    }
  }
  return hash;
}

int hamming(std::uint64_t a, std::uint64_t b) { return std::popcount(a ^ b); }

namespace {

std::vector<float> mean_image(const LabeledDataset& data, int label) {
  const auto rows = data.indices_of_class(label);
  if (rows.empty()) throw DataError("class_similarity: no samples of class " + std::to_string(label));
  const std::size_t p = data.pixels_per_image();
  std::vector<double> acc(p, 0.0);
  for (auto i : rows) {
    const auto img = data.image(i);
    for (std::size_t k = 0; k < p; ++k) acc[k] += img[k];
  }
  std::vector<float> out(p);
  for (std::size_t k = 0; k < p; ++k) out[k] = static_cast<float>(acc[k] / rows.size());
  return out;
}

}  // namespace

double class_similarity(const LabeledDataset& data, int c1, int c2, SimilarityMode mode,
                        std::size_t sample, std::uint64_t seed) {
  if (c1 == c2) return 0.0;
  const std::size_t h = data.images.dim(2), w = data.images.dim(3);
  if (mode == SimilarityMode::mean_image) {
    const auto a = mean_image(data, c1), b = mean_image(data, c2);
    return 1.0 - hamming(dhash64(a, h, w), dhash64(b, h, w)) / 64.0;
  }
  auto hashes = [&](int label, std::string_view stream) {
    auto rows = data.indices_of_class(label);
    if (rows.empty()) {
      throw DataError("class_similarity: no samples of class " + std::to_string(label));
    }
    Rng rng(seed, stream);
    const auto pick = rng.sample_without_replacement(rows.size(), std::min(sample, rows.size()));
    std::vector<std::uint64_t> out;
    for (auto k : pick) out.push_back(dhash64(data.image(rows[k]), h, w));
    return out;
  };
  const auto ha = hashes(c1, "similarity-" + std::to_string(c1));
  const auto hb = hashes(c2, "similarity-" + std::to_string(c2));
  double total = 0.0;
  for (auto x : ha)
    for (auto y : hb) total += 1.0 - hamming(x, y) / 64.0;
  return total / static_cast<double>(ha.size() * hb.size());
}

SimilarityMatrix similarity_matrix(const LabeledDataset& data, SimilarityMode mode) {
  SimilarityMatrix m;
  m.num_classes = data.num_classes;
  m.values.assign(m.num_classes * m.num_classes, 0.0);
  for (std::size_t a = 0; a < m.num_classes; ++a) {
    for (std::size_t b = a + 1; b < m.num_classes; ++b) {
      const double s = class_similarity(data, static_cast<int>(a), static_cast<int>(b), mode);
      m.values[a * m.num_classes + b] = m.values[b * m.num_classes + a] = s;
    }
  }
  return m;
}

void to_json(nlohmann::json& j, const TTestResult& r) {
  j = nlohmann::json{{"t", r.t_statistic}, {"df", r.degrees_of_freedom}, {"p", r.p_value},
                     {"n_a", r.n_a},       {"n_b", r.n_b},               {"sidedness", r.sidedness}};
}

TTestResult ttest_two_sample(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) {
    throw DataError("ttest: each sample needs at least 2 values (got " + std::to_string(a.size()) +
                    " and " + std::to_string(b.size()) + ")");
  }
  auto moments = [](std::span<const double> x) {
    const double n = static_cast<double>(x.size());
    const double mean = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : x) ss += (v - mean) * (v - mean);
    return std::pair{mean, ss / (n - 1.0)};
  };
  const auto [ma, va] = moments(a);
  const auto [mb, vb] = moments(b);
  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  const double sa = va / na, sb = vb / nb;
  if (sa + sb == 0.0) throw ZeroDenominatorError("ttest: both samples have zero variance");
  TTestResult r;
  r.n_a = a.size();
  r.n_b = b.size();
  r.t_statistic = (ma - mb) / std::sqrt(sa + sb);
  r.degrees_of_freedom = (sa + sb) * (sa + sb) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
  const boost::math::students_t dist(r.degrees_of_freedom);
  r.p_value = std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(
                                      dist, std::abs(r.t_statistic))));
  return r;
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return x[i] < x[j]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

std::optional<double> spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ShapeError("spearman: samples differ in length");
  if (x.size() < 2) return std::nullopt;
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return sxy / std::sqrt(sxx * syy);
}

namespace {

// Runs task(i) for i in [0, n) on up to `parallel` threads.
void run_indexed(std::size_t n, std::size_t parallel, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::max<std::size_t>(1, std::min(parallel, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) task(i);
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

SweepResult run_sweep(const std::string& attack, const std::vector<double>& ratios,
                      const std::vector<std::uint64_t>& seeds, const SweepCell& cell,
                      std::size_t parallel) {
  if (!std::is_sorted(ratios.begin(), ratios.end())) {
    throw ConfigError("sweep: ratios must be sorted ascending");
  }
  SweepResult result;
  const std::size_t n = ratios.size() * seeds.size();
  result.rows.resize(n);
  run_indexed(n, parallel, [&](std::size_t k) {
    const double ratio = ratios[k / seeds.size()];
    const std::uint64_t seed = seeds[k % seeds.size()];
    const auto start = std::chrono::steady_clock::now();
    SweepRow row;
    try {
      row = cell(ratio, seed);
      row.ok = true;
    } catch (const std::exception& e) {
      row = SweepRow{};
      row.ok = false;
      row.error = e.what();
    }
    row.attack = attack;
    row.ratio = ratio;
    row.seed = seed;
    row.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.rows[k] = std::move(row);
  });
  for (std::size_t r = 0; r < ratios.size(); ++r) {
    SweepSummaryRow s;
    s.ratio = ratios[r];
    for (std::size_t k = r * seeds.size(); k < (r + 1) * seeds.size(); ++k) {
      const auto& row = result.rows[k];
      if (!row.ok) continue;
      ++s.cells_ok;
      s.mean_acc_clean += row.acc_clean;
      s.mean_acc_poisoned += row.acc_poisoned;
      s.mean_asr += row.asr;
    }
    if (s.cells_ok > 0) {
      const double c = static_cast<double>(s.cells_ok);
      s.mean_acc_clean /= c;
      s.mean_acc_poisoned /= c;
      s.mean_asr /= c;
    }
    result.summary.push_back(s);
  }
  return result;
}

std::vector<StudyRow> interclass_study(const LabeledDataset& data, int target_class,
                                       const std::vector<int>& donor_classes,
                                       const std::function<double(int donor)>& attack,
                                       SimilarityMode mode, std::size_t parallel) {
  if (donor_classes.size() < 3) throw ConfigError("study: needs at least 3 donor classes");
  for (int s : donor_classes) {
    if (s == target_class) {
      throw ConfigError("study: donor class " + std::to_string(s) + " equals the target class");
    }
  }
  std::vector<StudyRow> rows(donor_classes.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].donor_class = donor_classes[i];
    rows[i].similarity = class_similarity(data, target_class, donor_classes[i], mode);
  }
  run_indexed(rows.size(), parallel, [&](std::size_t i) {
    try {
      rows[i].asr = attack(rows[i].donor_class);
    } catch (const std::exception& e) {
      rows[i].ok = false;
      rows[i].error = e.what();
    }
  });
  return rows;
}

namespace {

std::string csv_field(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) {
    if (c == '"') out += '"';
    out += c == '\n' ? ' ' : c;
  }
  return out + "\"";
}

std::string num(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

}  // namespace

std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = "attack,ratio,seed,acc_clean,acc_poisoned,asr,wall_seconds,status\n";
  for (const auto& r : rows) {
    out += csv_field(r.attack) + "," + num(r.ratio) + "," + std::to_string(r.seed) + ",";
    if (r.ok) {
      out += num(r.acc_clean) + "," + num(r.acc_poisoned) + "," + num(r.asr) + ",";
    } else {
      out += ",,,";
    }
    out += num(r.wall_seconds) + "," + (r.ok ? std::string("ok") : csv_field("error: " + r.error)) +
           "\n";
  }
  return out;
}

std::string sweep_summary_csv(const std::vector<SweepSummaryRow>& rows) {
  std::string out = "ratio,mean_acc_clean,mean_acc_poisoned,mean_asr,cells_ok\n";
  for (const auto& r : rows) {
    out += num(r.ratio) + "," + num(r.mean_acc_clean) + "," + num(r.mean_acc_poisoned) + "," +
           num(r.mean_asr) + "," + std::to_string(r.cells_ok) + "\n";
  }
  return out;
}

std::string study_csv(const std::vector<StudyRow>& rows) {
  std::string out = "donor_class,similarity,asr,status\n";
  for (const auto& r : rows) {
    out += std::to_string(r.donor_class) + "," + num(r.similarity) + "," +
           (r.ok ? num(r.asr) : std::string()) + "," +
           (r.ok ? std::string("ok") : csv_field("error: " + r.error)) + "\n";
  }
  return out;
}

}  // namespace poisonforge
