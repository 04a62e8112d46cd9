// Acceptance suite: runs criteria 1-10 on MNIST and prints one line per
// criterion. Exit status: 0 all hard criteria pass, 1 some failed, 77 no data.
//
//   poisonforge_acceptance [--out DIR] [--only 1,3,8] [--data DIR]
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "poisonforge/evaluation.hpp"
#include "poisonforge/experiment.hpp"
#include "poisonforge/image_io.hpp"
#include "poisonforge/random.hpp"

namespace pf = poisonforge;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(digits);
  os << v;
  return os.str();
}

enum class Verdict { pass, fail, soft_fail };

struct Outcome {
  int id = 0;
  std::string name;
  Verdict verdict = Verdict::fail;
  std::string detail;
  double seconds = 0.0;
  json metrics = json::object();
};

class Suite {
 public:
  Suite(pf::Workspace ws, pf::ExperimentConfig base, fs::path out)
      : ws_(std::move(ws)), base_(std::move(base)), out_(std::move(out)) {}

  const pf::ClassifierModel& clean(std::uint64_t seed) {
    auto it = clean_.find(seed);
    if (it == clean_.end()) {
      auto c = base_;
      c.seed = seed;
      auto run = pf::train_clean(c, ws_);
      run.model.set_frozen(true);
      clean_acc_[seed] = run.acc.acc;
      it = clean_.emplace(seed, std::make_unique<pf::ClassifierModel>(std::move(run.model))).first;
    }
    return *it->second;
  }
  double clean_acc(std::uint64_t seed) {
    clean(seed);
    return clean_acc_.at(seed);
  }

  pf::ExperimentConfig config(pf::AttackKind kind, double ratio, std::uint64_t seed) const {
    auto c = base_;
    c.attack.kind = kind;
    c.ratio = ratio;
    c.seed = seed;
    return c;
  }

  const pf::AttackRun& attack(pf::AttackKind kind, double ratio, std::uint64_t seed,
                              int donor = 9) {
    const auto key = std::make_tuple(static_cast<int>(kind), ratio, seed, donor);
    auto it = attacks_.find(key);
    if (it == attacks_.end()) {
      auto c = config(kind, ratio, seed);
      c.donor_class = donor;
      auto run = pf::run_attack(c, ws_, clean(seed), &generators_);
      it = attacks_.emplace(key, std::make_unique<pf::AttackRun>(std::move(run))).first;
    }
    return *it->second;
  }

  const pf::Workspace& ws() const { return ws_; }
  const fs::path& out() const { return out_; }

 private:
  pf::Workspace ws_;
  pf::ExperimentConfig base_;
  fs::path out_;
  std::map<std::uint64_t, std::unique_ptr<pf::ClassifierModel>> clean_;
  std::map<std::uint64_t, double> clean_acc_;
  std::map<std::tuple<int, double, std::uint64_t, int>, std::unique_ptr<pf::AttackRun>> attacks_;
  pf::GeneratorCache generators_;
};

constexpr double kEps = 1e-12;

// ---- 1: gradient check ----
Outcome criterion1() {
  Outcome o{1, "engine finite-difference gradient check"};
  const auto t0 = Clock::now();
  const auto results = pftest::check_all_ops(100, 20241016);
  o.seconds = seconds_since(t0);
  double worst = 0.0;
  std::string worst_op;
  bool all_sampled = true;
  for (const auto& r : results) {
    o.metrics[r.op] = {{"checked", r.checked}, {"max_rel_error", r.max_rel_error}};
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_op = r.op;
    }
    // Ops with fewer than 100 parameters check all of them.
    all_sampled = all_sampled && r.checked > 0;
  }
  const bool ok = worst < 1e-3 && all_sampled && o.seconds < 60.0;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = std::to_string(results.size()) + " op kinds, max rel error " + num(worst * 1e6, 3) +
             "e-6 (" + worst_op + "), " + num(o.seconds, 1) + " s";
  return o;
}

// ---- 2: clean baseline ----
Outcome criterion2(Suite& s) {
  Outcome o{2, "clean baseline accuracy"};
  const auto t0 = Clock::now();
  const double full = s.clean_acc(0);
  const double t_full = seconds_since(t0);
  const auto t1 = Clock::now();
  const auto sub = pf::random_subset(s.ws().train, 10000, pf::derive_seed(0, "data-split"));
  pf::TrainRecipe recipe{5, 64, 1e-3};
  const auto model = pf::fit_classifier(sub, recipe, pf::derive_seed(0, "train"));
  const double sub_acc = pf::compute_acc(model, s.ws().test).acc;
  const double t_sub = seconds_since(t1);
  o.seconds = t_full + t_sub;
  o.metrics = {{"full_acc", full}, {"full_epochs", 2}, {"subset_acc", sub_acc},
               {"subset_epochs", 5}, {"seconds_full", t_full}, {"seconds_subset", t_sub}};
  const bool ok = full >= 0.97 && sub_acc >= 0.95 && t_full < 600 && t_sub < 600;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "full MNIST acc " + num(full) + " (>= 0.97), 10k subset acc " + num(sub_acc) +
             " (>= 0.95), " + num(t_full, 0) + " s + " + num(t_sub, 0) + " s";
  return o;
}

// ---- 3: patch attack ----
Outcome criterion3(Suite& s) {
  Outcome o{3, "patch attack sanity"};
  const auto t0 = Clock::now();
  const auto& run = s.attack(pf::AttackKind::patch, 0.10, 0);
  o.seconds = seconds_since(t0);
  const double drop = run.acc_clean.acc - run.acc_poisoned.acc;
  o.metrics = {{"asr", run.asr}, {"acc_clean", run.acc_clean.acc},
               {"acc_poisoned", run.acc_poisoned.acc}, {"acc_drop", drop},
               {"poison_count", run.plan.selected_indices.size()}};
  const bool ok = run.asr.asr >= 0.90 && drop <= 0.02 + kEps;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "ASR " + num(run.asr.asr) + " (>= 0.90), acc drop " + num(drop) + " (<= 0.02), " +
             std::to_string(run.plan.selected_indices.size()) + " relabeled patched 9s";
  return o;
}

// ---- 4: DeepPoison headline ----
Outcome criterion4(Suite& s) {
  Outcome o{4, "DeepPoison headline (t=4, s=9, r=0.07, benign triggers)"};
  const auto t0 = Clock::now();
  const auto& run = s.attack(pf::AttackKind::deep_poison, 0.07, 0);
  o.seconds = seconds_since(t0);
  const double drop = run.acc_clean.acc - run.acc_poisoned.acc;
  const double ratio = run.clean_confusion > 0 ? run.asr.asr / run.clean_confusion
                                               : (run.asr.asr > 0 ? INFINITY : 0.0);
  o.metrics = {{"asr", run.asr}, {"clean_confusion", run.clean_confusion},
               {"asr_over_confusion", ratio}, {"acc_drop", drop},
               {"poison_count", run.plan.selected_indices.size()},
               {"mean_abs_delta", run.mean_abs_delta}, {"seconds", o.seconds}};
  const bool ok = run.asr.asr >= 0.40 && run.asr.asr >= 10.0 * run.clean_confusion &&
                  drop <= 0.02 + kEps && o.seconds < 1800;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "ASR " + num(run.asr.asr) + " (>= 0.40), clean 9->4 rate " +
             num(run.clean_confusion) + " (ASR/rate " + num(ratio, 2) + ", >= 10), acc drop " +
             num(drop) + " (<= 0.02), " + num(o.seconds, 0) + " s";
  return o;
}

// ---- 5: ratio trend ----
Outcome criterion5(Suite& s) {
  Outcome o{5, "DeepPoison ratio trend"};
  const std::vector<double> ratios{0.01, 0.03, 0.05, 0.07, 0.10};
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const auto t0 = Clock::now();
  const auto result = pf::run_sweep("deep_poison", ratios, seeds, [&](double r, std::uint64_t seed) {
    const auto& run = s.attack(pf::AttackKind::deep_poison, r, seed);
    pf::SweepRow row;
    row.acc_clean = run.acc_clean.acc;
    row.acc_poisoned = run.acc_poisoned.acc;
    row.asr = run.asr.asr;
    return row;
  });
  o.seconds = seconds_since(t0);
  pf::write_text_file(s.out() / "criterion5_sweep.csv", pf::sweep_csv(result.rows));
  pf::write_text_file(s.out() / "criterion5_summary.csv", pf::sweep_summary_csv(result.summary));
  std::vector<double> xs, ys;
  std::string means;
  bool complete = true;
  for (const auto& row : result.summary) {
    complete = complete && row.cells_ok == seeds.size();
    xs.push_back(row.ratio);
    ys.push_back(row.mean_asr);
    means += (means.empty() ? "" : " ") + num(row.mean_asr);
  }
  pf::write_text_file(s.out() / "criterion5_sweep.svg",
                      pf::svg_line_chart("DeepPoison ASR vs ratio", "poison ratio", "mean ASR",
                                         {{"mean ASR", xs, ys}}));
  const auto rho = pf::spearman(xs, ys);
  o.metrics = {{"ratios", ratios}, {"mean_asr", ys}, {"spearman", rho ? json(*rho) : json(nullptr)},
               {"cells_ok", complete}};
  const bool ok = complete && rho && *rho >= 0.8;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "mean ASR by ratio [" + means + "], Spearman " +
             (rho ? num(*rho, 3) : std::string("undefined (constant ASR)")) + " (>= 0.8)" +
             (complete ? "" : ", some cells failed");
  return o;
}

// ---- 6: stealth differential ----
Outcome criterion6(Suite& s) {
  Outcome o{6, "stealth differential under autoencoder scan"};
  const auto t0 = Clock::now();
  struct Agg {
    double recall = 0, asr_before = 0, asr_after = 0;
  };
  std::map<std::string, Agg> agg;
  json cells = json::array();
  const std::vector<std::uint64_t> seeds{0, 1};
  for (auto kind : {pf::AttackKind::patch, pf::AttackKind::deep_poison}) {
    for (auto seed : seeds) {
      const auto& run = s.attack(kind, 0.10, seed);
      const auto c = s.config(kind, 0.10, seed);  // identical defense parameters for both
      const auto d = pf::run_defense(c, s.ws(), s.clean(seed), run);
      auto& a = agg[pf::to_string(kind)];
      a.recall += d.outcome.detection_recall / seeds.size();
      a.asr_before += d.outcome.asr_before / seeds.size();
      a.asr_after += d.outcome.asr_after / seeds.size();
      json cell = d.outcome;
      cell["attack"] = pf::to_string(kind);
      cell["seed"] = seed;
      cells.push_back(cell);
    }
  }
  o.seconds = seconds_since(t0);
  auto rel_drop = [](const Agg& a) {
    return a.asr_before > 0 ? (a.asr_before - a.asr_after) / a.asr_before : 0.0;
  };
  const Agg& bn = agg["patch"];
  const Agg& dp = agg["deep_poison"];
  const double bn_drop = rel_drop(bn), dp_drop = rel_drop(dp);
  o.metrics = {{"cells", cells},
               {"badnets", {{"recall", bn.recall}, {"asr_before", bn.asr_before},
                            {"asr_after", bn.asr_after}, {"relative_drop", bn_drop}}},
               {"deep_poison", {{"recall", dp.recall}, {"asr_before", dp.asr_before},
                                {"asr_after", dp.asr_after}, {"relative_drop", dp_drop}}}};
  const bool a_ok = dp.recall < bn.recall;
  const bool b_ok = bn_drop >= 0.5 && dp_drop < 0.5;
  o.verdict = a_ok && b_ok ? Verdict::pass : Verdict::fail;
  o.detail = "(a) recall DeepPoison " + num(dp.recall) + " < BadNets " + num(bn.recall) +
             (a_ok ? " ok" : " NOT MET") + "; (b) ASR drop BadNets " + num(bn.asr_before) + "->" +
             num(bn.asr_after) + " (" + num(100 * bn_drop, 1) + "%, >= 50%), DeepPoison " +
             num(dp.asr_before) + "->" + num(dp.asr_after) + " (" + num(100 * dp_drop, 1) +
             "%, < 50%)" + (b_ok ? " ok" : " NOT MET") + "; means over 2 seeds";
  return o;
}

// ---- 7: feature transfer ----
Outcome criterion7(Suite& s) {
  Outcome o{7, "DeepPoison feature transfer and epsilon budget"};
  const auto t0 = Clock::now();
  const auto& run = s.attack(pf::AttackKind::deep_poison, 0.07, 0);
  const auto& fe = s.clean(0);
  const auto& train = s.ws().train;
  const auto x_be = train.gather(run.craft.source_indices);
  const auto x_poi = train.gather(run.craft.donor_indices);
  const auto f_p = pf::extract_features_batched(fe, run.craft.crafted_images);
  const auto f_be = pf::extract_features_batched(fe, x_be);
  const auto f_poi = pf::extract_features_batched(fe, x_poi);
  const std::size_t n = f_p.dim(0), d = f_p.dim(1);
  double dist_p = 0, dist_be = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double a = 0, b = 0;
    for (std::size_t k = 0; k < d; ++k) {
      const double t = f_poi.values()[i * d + k];
      a += std::pow(f_p.values()[i * d + k] - t, 2);
      b += std::pow(f_be.values()[i * d + k] - t, 2);
    }
    dist_p += std::sqrt(a) / n;
    dist_be += std::sqrt(b) / n;
  }
  const double eps = s.config(pf::AttackKind::deep_poison, 0.07, 0).attack.epsilon;
  o.seconds = seconds_since(t0);
  const bool final_fe_lower = !run.craft.loss_history.empty() &&
                              run.craft.loss_history.back().l_fe < run.craft.loss_history.front().l_fe;
  o.metrics = {{"pairs", n}, {"mean_dist_poisoned", dist_p}, {"mean_dist_benign", dist_be},
               {"max_abs_delta", run.max_abs_delta}, {"epsilon", eps},
               {"l_fe_decreased", final_fe_lower}};
  const bool ok = n > 0 && dist_p < dist_be && run.max_abs_delta <= eps + 1e-6;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "mean ||FE(x_p)-FE(x_poi)|| " + num(dist_p) + " < mean ||FE(x_be)-FE(x_poi)|| " +
             num(dist_be) + " over " + std::to_string(n) + " pairs; max |delta| " +
             num(run.max_abs_delta) + " <= eps " + num(eps, 2);
  return o;
}

// ---- 8: oracle equivalence ----
Outcome criterion8() {
  Outcome o{8, "oracle equivalence (DBSCAN, t-test, dHash)"};
  const auto t0 = Clock::now();
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> count(1, 200), dims(1, 4), pts(1, 8);
  std::uniform_real_distribution<double> eps(0.2, 2.0);
  std::size_t dbscan_ok = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = count(rng), dim = dims(rng), min_pts = pts(rng);
    const double e = eps(rng);
    const auto points = pftest::random_blobs(n, dim, rng);
    const auto got = pf::dbscan_cluster(points, dim, e, min_pts);
    dbscan_ok += pftest::same_partition(got.labels, pftest::dbscan_reference(points, dim, e, min_pts));
  }
  double t_err = 0, p_err = 0;
  for (const auto& c : pftest::frozen_welch_cases()) {
    const auto r = pf::ttest_two_sample(c.a, c.b);
    const auto ref = pftest::welch_reference(c.a, c.b);
    t_err = std::max({t_err, std::abs(r.t_statistic - c.t), std::abs(r.t_statistic - ref.t)});
    p_err = std::max({p_err, std::abs(r.p_value - c.p), std::abs(r.p_value - ref.p)});
  }
  std::mt19937_64 trng(88);
  std::normal_distribution<double> normal;
  for (int k = 0; k < 50; ++k) {
    std::vector<double> a(5 + k % 17), b(3 + k % 23);
    for (auto& v : a) v = normal(trng);
    for (auto& v : b) v = 0.5 + 2.0 * normal(trng);
    const auto r = pf::ttest_two_sample(a, b);
    const auto ref = pftest::welch_reference(a, b);
    t_err = std::max(t_err, std::abs(r.t_statistic - ref.t));
    p_err = std::max(p_err, std::abs(r.p_value - ref.p));
  }
  std::vector<float> flat(784, 0.37f), ramp(784);
  for (std::size_t i = 0; i < 784; ++i) ramp[i] = static_cast<float>(i % 28) / 27.0f;
  const bool dhash_ok =
      pf::dhash64(flat, 28, 28) == 0 && pf::dhash64(ramp, 28, 28) == ~std::uint64_t{0};
  o.seconds = seconds_since(t0);
  o.metrics = {{"dbscan_matches", dbscan_ok}, {"ttest_max_t_error", t_err},
               {"ttest_max_p_error", p_err}, {"dhash_fixtures", dhash_ok}};
  const bool ok = dbscan_ok == 100 && t_err < 1e-6 && p_err < 1e-6 && dhash_ok;
  o.verdict = ok ? Verdict::pass : Verdict::fail;
  o.detail = "DBSCAN " + std::to_string(dbscan_ok) + "/100 exact, t-test max |dt| " +
             num(t_err * 1e9, 3) + "e-9 |dp| " + num(p_err * 1e9, 3) + "e-9, dHash fixtures " +
             (dhash_ok ? "exact" : "WRONG");
  return o;
}

// ---- 9: inter-class study ----
Outcome criterion9(Suite& s) {
  Outcome o{9, "inter-class similarity vs ASR (t=4)"};
  const auto t0 = Clock::now();
  const std::vector<int> donors{0, 1, 7, 9, 5};
  const auto rows = pf::interclass_study(s.ws().train, 4, donors, [&](int donor) {
    return s.attack(pf::AttackKind::deep_poison, 0.07, 0, donor).asr.asr;
  });
  o.seconds = seconds_since(t0);
  pf::write_text_file(s.out() / "criterion9_study.csv", pf::study_csv(rows));
  std::vector<double> sim, asr;
  std::string table;
  for (const auto& r : rows) {
    if (!r.ok) continue;
    sim.push_back(r.similarity);
    asr.push_back(r.asr);
    table += (table.empty() ? "" : " ") + std::to_string(r.donor_class) + ":" + num(r.similarity, 3) +
             "/" + num(r.asr, 4);
  }
  const auto rho = pf::spearman(sim, asr);
  o.metrics = {{"rows", json::array()}, {"spearman", rho ? json(*rho) : json(nullptr)}};
  for (const auto& r : rows) {
    o.metrics["rows"].push_back({{"donor", r.donor_class}, {"similarity", r.similarity},
                                 {"asr", r.asr}, {"ok", r.ok}, {"error", r.error}});
  }
  const bool ok = sim.size() >= 5 && rho && *rho > 0.0;
  o.verdict = ok ? Verdict::pass : Verdict::soft_fail;
  std::string failed;
  for (const auto& r : rows)
    if (!r.ok) failed += (failed.empty() ? "" : ", ") + std::to_string(r.donor_class) + ": " + r.error;
  o.detail = std::to_string(sim.size()) + "/" + std::to_string(rows.size()) +
             " donors completed (>= 5)" + (failed.empty() ? "" : " [failed " + failed + "]") +
             ", donor:similarity/ASR [" + table + "], Spearman " +
             (rho ? num(*rho, 3) : std::string("undefined")) + " (> 0)";
  return o;
}

// ---- 10: reproducibility ----
Outcome criterion10(Suite& s) {
  Outcome o{10, "reproducibility of reported metrics"};
  const auto t0 = Clock::now();
  // Fresh clean model and a fresh generator (no cache) for the DeepPoison run.
  auto c = s.config(pf::AttackKind::deep_poison, 0.07, 0);
  auto clean = pf::train_clean(c, s.ws());
  clean.model.set_frozen(true);
  const auto again = pf::run_attack(c, s.ws(), clean.model, nullptr);
  const auto& first = s.attack(pf::AttackKind::deep_poison, 0.07, 0);
  const auto patch_cfg = s.config(pf::AttackKind::patch, 0.10, 0);
  const auto patch_again = pf::run_attack(patch_cfg, s.ws(), clean.model, nullptr);
  const auto& patch_first = s.attack(pf::AttackKind::patch, 0.10, 0);
  o.seconds = seconds_since(t0);
  auto same_tensor = [](const pf::Tensor& a, const pf::Tensor& b) {
    if (!a.defined() || !b.defined()) return a.defined() == b.defined();
    return a.shape() == b.shape() &&
           std::equal(a.values().begin(), a.values().end(), b.values().begin());
  };
  auto same_params = [](const pf::Module& a, const pf::Module& b) {
    for (std::size_t i = 0; i < a.parameters().size(); ++i) {
      const auto x = a.parameters()[i].values(), y = b.parameters()[i].values();
      if (!std::equal(x.begin(), x.end(), y.begin())) return false;
    }
    return true;
  };
  auto metrics = [](const pf::AttackRun& r) {
    return json{{"acc_clean", r.acc_clean}, {"acc_poisoned", r.acc_poisoned}, {"asr", r.asr},
                {"clean_confusion", r.clean_confusion}, {"mean_abs_delta", r.mean_abs_delta}};
  };
  const bool clean_same = clean.acc.acc == s.clean_acc(0) && same_params(clean.model, s.clean(0));
  const bool dp_same = metrics(again) == metrics(first) &&
                       same_tensor(again.craft.crafted_images, first.craft.crafted_images) &&
                       same_params(again.victim, first.victim);
  const bool patch_same = metrics(patch_again) == metrics(patch_first) &&
                          same_params(patch_again.victim, patch_first.victim);
  o.metrics = {{"clean_identical", clean_same}, {"deep_poison_identical", dp_same},
               {"patch_identical", patch_same}};
  o.verdict = clean_same && dp_same && patch_same ? Verdict::pass : Verdict::fail;
  o.detail = std::string("clean model ") + (clean_same ? "identical" : "DIFFERS") +
             ", DeepPoison metrics/poisons/victim " + (dp_same ? "identical" : "DIFFER") +
             ", patch metrics/victim " + (patch_same ? "identical" : "DIFFER");
  return o;
}

const char* label(Verdict v) {
  switch (v) {
    case Verdict::pass: return "PASS";
    case Verdict::soft_fail: return "SOFT-FAIL";
    default: return "FAIL";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"poisonforge acceptance suite"};
  std::string out = "acceptance-artifacts";
  std::vector<int> only;
  std::string data;
  app.add_option("--out", out, "artifact directory");
  app.add_option("--only", only, "criteria to run")->delimiter(',');
  app.add_option("--data", data, "MNIST IDX directory");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto want = [&](int id) { return selected.empty() || selected.count(id) > 0; };

  std::vector<Outcome> results;
  auto report = [&](Outcome o) {
    std::printf("[%s] criterion %d: %s: %s\n", label(o.verdict), o.id, o.name.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
    results.push_back(std::move(o));
  };
  auto guarded = [&](int id, const char* name, const std::function<Outcome()>& fn) {
    if (!want(id)) return;
    try {
      report(fn());
    } catch (const std::exception& e) {
      report(Outcome{id, name, Verdict::fail, std::string("error: ") + e.what()});
    }
  };

  guarded(1, "engine finite-difference gradient check", criterion1);
  guarded(8, "oracle equivalence", criterion8);

  const bool needs_data = selected.empty() ||
                          std::any_of(selected.begin(), selected.end(),
                                      [](int id) { return id != 1 && id != 8; });
  if (needs_data) {
    fs::path dir = data.empty() ? pftest::mnist_dir() : fs::path(data);
    if (dir.empty() || !fs::exists(dir / "train-images-idx3-ubyte")) {
      std::printf("MNIST not found (set POISONFORGE_DATA); data criteria skipped\n");
      return 77;
    }
    pf::ExperimentConfig base;
    base.data_dir = dir.string();
    base.output_dir = out;
    const auto t0 = Clock::now();
    Suite suite(pf::load_workspace(base), base, out);
    std::printf("loaded MNIST from %s in %.1f s\n", dir.c_str(), seconds_since(t0));
    guarded(2, "clean baseline accuracy", [&] { return criterion2(suite); });
    guarded(3, "patch attack sanity", [&] { return criterion3(suite); });
    guarded(4, "DeepPoison headline", [&] { return criterion4(suite); });
    guarded(7, "DeepPoison feature transfer", [&] { return criterion7(suite); });
    guarded(5, "DeepPoison ratio trend", [&] { return criterion5(suite); });
    guarded(6, "stealth differential", [&] { return criterion6(suite); });
    guarded(9, "inter-class study", [&] { return criterion9(suite); });
    guarded(10, "reproducibility", [&] { return criterion10(suite); });
  }

  std::sort(results.begin(), results.end(), [](auto& a, auto& b) { return a.id < b.id; });
  json summary = json::array();
  int hard_failures = 0;
  std::printf("\nsummary\n");
  for (const auto& r : results) {
    std::printf("  criterion %2d  %-9s %6.1f s  %s\n", r.id, label(r.verdict), r.seconds,
                r.name.c_str());
    hard_failures += r.verdict == Verdict::fail;
    summary.push_back({{"criterion", r.id}, {"name", r.name}, {"verdict", label(r.verdict)},
                       {"detail", r.detail}, {"seconds", r.seconds}, {"metrics", r.metrics}});
  }
  pf::write_text_file(fs::path(out) / "acceptance.json", summary.dump(2) + "\n");
  return hard_failures == 0 ? 0 : 1;
}
