#include "poisonforge/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <openssl/evp.h>

#include "poisonforge/checkpoint.hpp"
#include "poisonforge/errors.hpp"
#include "poisonforge/image_io.hpp"
#include "poisonforge/random.hpp"

namespace poisonforge {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------- config

LabelMode ExperimentConfig::effective_label_mode() const {
  if (label_mode == "auto") {
    return attack.kind == AttackKind::patch ? LabelMode::relabel : LabelMode::clean_label;
  }
  return label_mode_from_string(label_mode);
}

void ExperimentConfig::validate() const {
  if (target_class == donor_class) throw ConfigError("config: target and donor class must differ");
  if (target_class < 0 || target_class > 9 || donor_class < 0 || donor_class > 9) {
    throw ConfigError("config: classes must lie in [0, 9]");
  }
  if (!(ratio >= 0.0 && ratio <= 1.0)) throw ConfigError("config: ratio must lie in [0,1]");
  if (recipe.batch_size == 0) throw ConfigError("config: recipe batch_size must be positive");
  if (!(recipe.learning_rate > 0.0)) throw ConfigError("config: recipe learning_rate must be > 0");
  if (parallel == 0) throw ConfigError("config: parallel must be >= 1");
  (void)effective_label_mode();
  attack.validate();
}

void to_json(json& j, const ExperimentConfig& c) {
  json attack = c.attack;
  attack.erase("seed");  // derived from the root seed
  j = json{
      {"schema", kConfigSchema},
      {"data_dir", c.data_dir},
      {"train_subset", c.train_subset},
      {"recipe",
       {{"epochs", c.recipe.epochs},
        {"batch_size", c.recipe.batch_size},
        {"learning_rate", c.recipe.learning_rate}}},
      {"plan",
       {{"target_class", c.target_class},
        {"donor_class", c.donor_class},
        {"ratio", c.ratio},
        {"basis", to_string(c.basis)},
        {"label_mode", c.label_mode}}},
      {"attack", attack},
      {"defense",
       {{"method", to_string(c.defense.method)},
        {"autoencoder",
         {{"epochs", c.defense.autoencoder.epochs},
          {"batch_size", c.defense.autoencoder.batch_size},
          {"learning_rate", c.defense.autoencoder.learning_rate},
          {"bottleneck", c.defense.autoencoder.bottleneck},
          {"threshold",
           {{"rule", c.defense.autoencoder.threshold.rule == ThresholdRule::quantile
                         ? "quantile"
                         : "mean_k_sigma"},
            {"fraction", c.defense.autoencoder.threshold.fraction},
            {"k", c.defense.autoencoder.threshold.k}}}}},
        {"cluster",
         {{"min_pts", c.defense.cluster.min_pts},
          {"eps", c.defense.cluster.eps},
          {"eps_quantile", c.defense.cluster.eps_quantile},
          {"min_cluster_fraction", c.defense.cluster.min_cluster_fraction}}}}},
      {"evaluation",
       {{"ratios", c.evaluation.ratios},
        {"seeds", c.evaluation.seeds},
        {"donor_classes", c.evaluation.donor_classes},
        {"similarity", c.evaluation.similarity == SimilarityMode::mean_image ? "mean_image"
                                                                             : "pairwise_average"},
        {"ttest_samples", c.evaluation.ttest_samples},
        {"grid_samples", c.evaluation.grid_samples}}},
      {"seed", c.seed},
      {"output_dir", c.output_dir},
      {"parallel", c.parallel}};
}

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string("config: '") + where + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(std::string("config: unknown key '") + key + "' in " + where);
    }
  }
}

}  // namespace

void from_json(const json& j, ExperimentConfig& c) {
  reject_unknown(j,
                 {"schema", "data_dir", "train_subset", "recipe", "plan", "attack", "defense",
                  "evaluation", "seed", "output_dir", "parallel"},
                 "top level");
  const ExperimentConfig d;
  c = d;
  if (j.contains("schema") && j.at("schema").get<int>() != kConfigSchema) {
    throw ConfigError("config: unsupported schema " + j.at("schema").dump());
  }
  c.data_dir = j.value("data_dir", d.data_dir);
  c.train_subset = j.value("train_subset", d.train_subset);
  if (j.contains("recipe")) {
    const auto& r = j.at("recipe");
    reject_unknown(r, {"epochs", "batch_size", "learning_rate"}, "recipe");
    c.recipe.epochs = r.value("epochs", d.recipe.epochs);
    c.recipe.batch_size = r.value("batch_size", d.recipe.batch_size);
    c.recipe.learning_rate = r.value("learning_rate", d.recipe.learning_rate);
  }
  if (j.contains("plan")) {
    const auto& p = j.at("plan");
    reject_unknown(p, {"target_class", "donor_class", "ratio", "basis", "label_mode"}, "plan");
    c.target_class = p.value("target_class", d.target_class);
    c.donor_class = p.value("donor_class", d.donor_class);
    c.ratio = p.value("ratio", d.ratio);
    c.basis = ratio_basis_from_string(p.value("basis", to_string(d.basis)));
    c.label_mode = p.value("label_mode", d.label_mode);
  }
  if (j.contains("attack")) c.attack = j.at("attack").get<AttackConfig>();
  if (j.contains("defense")) {
    const auto& df = j.at("defense");
    reject_unknown(df, {"method", "autoencoder", "cluster"}, "defense");
    c.defense.method = defense_method_from_string(df.value("method", to_string(d.defense.method)));
    if (df.contains("autoencoder")) {
      const auto& a = df.at("autoencoder");
      auto& ae = c.defense.autoencoder;
      ae.epochs = a.value("epochs", ae.epochs);
      ae.batch_size = a.value("batch_size", ae.batch_size);
      ae.learning_rate = a.value("learning_rate", ae.learning_rate);
      ae.bottleneck = a.value("bottleneck", ae.bottleneck);
      if (a.contains("threshold")) {
        const auto& t = a.at("threshold");
        const auto rule = t.value("rule", std::string("quantile"));
        if (rule == "quantile") ae.threshold.rule = ThresholdRule::quantile;
        else if (rule == "mean_k_sigma") ae.threshold.rule = ThresholdRule::mean_k_sigma;
        else throw ConfigError("config: unknown threshold rule '" + rule + "'");
        ae.threshold.fraction = t.value("fraction", ae.threshold.fraction);
        ae.threshold.k = t.value("k", ae.threshold.k);
      }
    }
    if (df.contains("cluster")) {
      const auto& cl = df.at("cluster");
      auto& cs = c.defense.cluster;
      cs.min_pts = cl.value("min_pts", cs.min_pts);
      cs.eps = cl.value("eps", cs.eps);
      cs.eps_quantile = cl.value("eps_quantile", cs.eps_quantile);
      cs.min_cluster_fraction = cl.value("min_cluster_fraction", cs.min_cluster_fraction);
    }
  }
  if (j.contains("evaluation")) {
    const auto& e = j.at("evaluation");
    reject_unknown(e,
                   {"ratios", "seeds", "donor_classes", "similarity", "ttest_samples",
                    "grid_samples"},
                   "evaluation");
    auto& ev = c.evaluation;
    ev.ratios = e.value("ratios", ev.ratios);
    ev.seeds = e.value("seeds", ev.seeds);
    ev.donor_classes = e.value("donor_classes", ev.donor_classes);
    const auto sim = e.value("similarity", std::string("mean_image"));
    if (sim == "mean_image") ev.similarity = SimilarityMode::mean_image;
    else if (sim == "pairwise_average") ev.similarity = SimilarityMode::pairwise_average;
    else throw ConfigError("config: unknown similarity mode '" + sim + "'");
    ev.ttest_samples = e.value("ttest_samples", ev.ttest_samples);
    ev.grid_samples = e.value("grid_samples", ev.grid_samples);
  }
  c.seed = j.value("seed", d.seed);
  c.output_dir = j.value("output_dir", d.output_dir);
  c.parallel = j.value("parallel", d.parallel);
  c.validate();
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path.string() + "'");
  try {
    return json::parse(in).get<ExperimentConfig>();
  } catch (const json::exception& e) {
    throw ConfigError("config '" + path.string() + "': " + e.what());
  }
}

std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 failed");
  }
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) {
    os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string config_hash(const ExperimentConfig& config) {
  json j = config;
  j.erase("output_dir");
  j.erase("parallel");
  return sha256_hex(j.dump());
}

// -------------------------------------------------------------- manifest

RunManifest::RunManifest(std::string command, const ExperimentConfig& config)
    : command_(std::move(command)), hash_(config_hash(config)), seed_(config.seed) {}

void RunManifest::add_file(const fs::path& path) {
  std::lock_guard lock(mutex_);
  const auto p = path.lexically_normal().string();
  if (std::find(files_.begin(), files_.end(), p) == files_.end()) files_.push_back(p);
}

void RunManifest::add_stage(const std::string& stage, double seconds) {
  std::lock_guard lock(mutex_);
  stages_.emplace_back(stage, seconds);
}

void RunManifest::set_metrics(const std::string& key, json value) {
  std::lock_guard lock(mutex_);
  metrics_[key] = std::move(value);
}

json RunManifest::to_json() const {
  std::lock_guard lock(mutex_);
  json stages = json::array();
  for (const auto& [name, seconds] : stages_) stages.push_back({{"stage", name}, {"seconds", seconds}});
  return json{{"command", command_},
              {"config_hash", hash_},
              {"seed", seed_},
              {"versions",
               {{"poisonforge", kVersion}, {"config_schema", kConfigSchema}, {"checkpoint", "PFW1"}}},
              {"stages", stages},
              {"files", files_},
              {"metrics", metrics_}};
}

fs::path RunManifest::write(const fs::path& dir) {
  const fs::path path = dir / ("manifest-" + command_ + ".json");
  add_file(path);
  write_text_file(path, to_json().dump(2) + "\n");
  return path;
}

namespace {

class StageTimer {
 public:
  StageTimer(RunManifest& manifest, std::string stage)
      : manifest_(manifest), stage_(std::move(stage)), start_(std::chrono::steady_clock::now()) {}
  ~StageTimer() {
    manifest_.add_stage(stage_, std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                                              start_).count());
  }

 private:
  RunManifest& manifest_;
  std::string stage_;
  std::chrono::steady_clock::time_point start_;
};

void write_json(RunManifest& manifest, const fs::path& path, const json& value) {
  write_text_file(path, value.dump(2) + "\n");
  manifest.add_file(path);
}

void write_text(RunManifest& manifest, const fs::path& path, const std::string& text) {
  write_text_file(path, text);
  manifest.add_file(path);
}

void write_model(RunManifest& manifest, const Module& model, const fs::path& stem) {
  save_model(model, stem);
  manifest.add_file(fs::path(stem.string() + ".pfw"));
  manifest.add_file(fs::path(stem.string() + ".json"));
}

void write_grid(RunManifest& manifest, const fs::path& path, const Tensor& images,
                std::size_t limit) {
  if (!images.defined() || images.dim(0) == 0 || limit == 0) return;
  const std::size_t n = std::min(limit, images.dim(0));
  write_pgm_grid(path, slice_rows(images, 0, n), std::min<std::size_t>(n, 10));
  manifest.add_file(path);
}

std::uint64_t train_seed(const ExperimentConfig& c) { return derive_seed(c.seed, "train"); }

}  // namespace

// ------------------------------------------------------------- pipelines

Workspace load_workspace(const ExperimentConfig& config) {
  const fs::path dir = resolve_data_dir(config.data_dir);
  auto splits = load_mnist(dir);
  Workspace ws;
  ws.data_manifest = json{
      {"train", dataset_manifest(splits.train, {dir / "train-images-idx3-ubyte",
                                                dir / "train-labels-idx1-ubyte"})},
      {"test", dataset_manifest(splits.test, {dir / "t10k-images-idx3-ubyte",
                                              dir / "t10k-labels-idx1-ubyte"})}};
  if (config.train_subset > 0 && config.train_subset < splits.train.size()) {
    ws.train = random_subset(splits.train, config.train_subset,
                             derive_seed(config.seed, "data-split"));
    ws.data_manifest["train_subset"] = {{"size", ws.train.size()},
                                        {"counts", ws.train.class_counts()}};
  } else {
    ws.train = std::move(splits.train);
  }
  ws.test = std::move(splits.test);
  return ws;
}

Tensor make_triggers(const ExperimentConfig& config, const LabeledDataset& test) {
  const auto rows = test.indices_of_class(config.donor_class);
  if (rows.empty()) {
    throw DataError("no test samples of trigger class " + std::to_string(config.donor_class));
  }
  const Tensor benign = test.gather(rows);
  switch (config.attack.kind) {
    case AttackKind::patch: return craft_patch(benign, config.attack.patch);
    case AttackKind::blend: return craft_blend(benign, config.attack.blend);
    default: return benign;
  }
}

std::string trigger_description(const ExperimentConfig& config) {
  const std::string cls = "class-" + std::to_string(config.donor_class) + " test images";
  switch (config.attack.kind) {
    case AttackKind::patch: return "patched " + cls;
    case AttackKind::blend: return "watermarked " + cls;
    default: return "benign " + cls;
  }
}

CleanRun train_clean(const ExperimentConfig& config, const Workspace& ws) {
  ClassifierModel model = fit_classifier(ws.train, config.recipe, train_seed(config));
  MetricsReport acc = compute_acc(model, ws.test);
  acc.context = "clean_model";
  return CleanRun{std::move(model), acc};
}

std::shared_ptr<const DeepPoisonModels> GeneratorCache::get_or_train(
    const std::string& key, const std::function<DeepPoisonModels()>& train) {
  std::shared_ptr<std::once_flag> flag;
  {
    std::lock_guard lock(mutex_);
    auto& slot = once_[key];
    if (!slot) slot = std::make_shared<std::once_flag>();
    flag = slot;
  }
  std::call_once(*flag, [&] {
    auto models = std::make_shared<const DeepPoisonModels>(train());
    std::lock_guard lock(mutex_);
    models_[key] = std::move(models);
  });
  std::lock_guard lock(mutex_);
  return models_.at(key);
}

namespace {

std::vector<std::size_t> positions_in(const std::vector<std::size_t>& pool,
                                      const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> out;
  out.reserve(rows.size());
  for (auto r : rows) {
    const auto it = std::lower_bound(pool.begin(), pool.end(), r);
    if (it == pool.end() || *it != r) throw DataError("selected row is outside the source pool");
    out.push_back(static_cast<std::size_t>(it - pool.begin()));
  }
  return out;
}

std::string generator_key(const ExperimentConfig& config) {
  ExperimentConfig k = config;
  k.ratio = 0.0;
  k.defense = DefenseConfig{};
  k.evaluation = EvaluationConfig{};
  return config_hash(k);
}

}  // namespace

AttackRun run_attack(const ExperimentConfig& config, const Workspace& ws,
                     const ClassifierModel& clean, GeneratorCache* cache) {
  config.validate();
  AttackConfig attack = config.attack;
  attack.seed = derive_seed(config.seed, "craft");
  const LabelMode mode = config.effective_label_mode();
  const int t = config.target_class, s = config.donor_class;

  AttackRun run{make_poison_plan(ws.train, t, s, config.ratio, config.basis,
                                 derive_seed(config.seed, "data-split"), mode),
                {}, {}, ClassifierModel(ClassifierConfig{}, *std::make_unique<Rng>(0)), {}, {}, {},
                0.0, 0.0, 0.0};
  const auto& selected = run.plan.selected_indices;
  run.craft.source_indices = selected;
  Tensor bases;
  if (!selected.empty()) {
    bases = ws.train.gather(selected);
    switch (attack.kind) {
      case AttackKind::patch:
        run.craft.crafted_images = craft_patch(bases, attack.patch);
        break;
      case AttackKind::blend:
        run.craft.crafted_images = craft_blend(bases, attack.blend);
        break;
      case AttackKind::feature_collision: {
        const auto donors = ws.train.indices_of_class(s);
        const Tensor donor_features = extract_features_batched(clean, ws.train.gather(donors));
        std::vector<float> target(donor_features.dim(1), 0.0f);
        const auto fv = donor_features.values();
        for (std::size_t i = 0; i < donors.size(); ++i)
          for (std::size_t k = 0; k < target.size(); ++k) target[k] += fv[i * target.size() + k];
        for (auto& v : target) v /= static_cast<float>(donors.size());
        Rng rng(attack.seed, "collision-donors");
        std::vector<std::size_t> picks(selected.size());
        for (auto& p : picks) p = donors[rng.index(donors.size())];
        run.craft.donor_indices = picks;
        std::optional<FeatureCollisionInit> init;
        if (attack.collision.opacity > 0.0) {
          init = FeatureCollisionInit{ws.train.gather(picks), attack.collision.opacity};
        }
        run.craft.crafted_images =
            craft_feature_collision(bases, target, clean, attack.collision, attack.epsilon, init);
        break;
      }
      case AttackKind::deep_poison: {
        const int source = mode == LabelMode::clean_label ? t : s;
        const auto base_rows = ws.train.indices_of_class(source);
        const auto donor_rows = ws.train.indices_of_class(s);
        const Tensor base_pool = ws.train.gather(base_rows);
        const Tensor donor_pool = ws.train.gather(donor_rows);
        auto train = [&] { return train_deep_poison_models(attack, base_pool, donor_pool, clean); };
        std::shared_ptr<const DeepPoisonModels> models =
            cache ? cache->get_or_train(generator_key(config), train)
                  : std::make_shared<const DeepPoisonModels>(train());
        CraftResult craft = craft_deep_poison(models->generator, attack, base_pool, donor_pool,
                                              clean, positions_in(base_rows, selected));
        run.craft.crafted_images = craft.crafted_images;
        run.craft.donor_indices.clear();
        for (auto d : craft.donor_indices) run.craft.donor_indices.push_back(donor_rows[d]);
        run.craft.loss_history = models->loss_history;
        break;
      }
    }
    const auto b = bases.values();
    const auto c = run.craft.crafted_images.values();
    double sum = 0.0, mx = 0.0;
    for (std::size_t i = 0; i < b.size(); ++i) {
      const double d = std::abs(static_cast<double>(c[i]) - b[i]);
      sum += d;
      mx = std::max(mx, d);
    }
    run.mean_abs_delta = sum / static_cast<double>(b.size());
    run.max_abs_delta = mx;
  }
  run.poisoned = apply_poison(ws.train, run.plan, run.craft.crafted_images);
  run.victim = fit_classifier(run.poisoned.data, config.recipe, train_seed(config));

  run.acc_clean = compute_acc(clean, ws.test);
  run.acc_clean.context = "clean_model";
  run.acc_poisoned = compute_acc(run.victim, ws.test);
  run.acc_poisoned.context = "poisoned_model";
  const Tensor triggers = make_triggers(config, ws.test);
  run.asr = compute_asr(run.victim, clean, triggers, s, t, trigger_description(config));
  const auto clean_pred = predict_labels(clean, triggers);
  run.clean_confusion =
      static_cast<double>(std::count(clean_pred.begin(), clean_pred.end(), t)) /
      static_cast<double>(clean_pred.size());
  return run;
}

DefenseRun run_defense(const ExperimentConfig& config, const Workspace& ws,
                       const ClassifierModel& clean, const AttackRun& attack) {
  DefenseRun out;
  switch (config.defense.method) {
    case DefenseMethod::autoencoder:
      out.report = autoencoder_scan(attack.poisoned.data, config.defense.autoencoder,
                                    derive_seed(config.seed, "defense"));
      break;
    case DefenseMethod::dbscan:
      out.report = cluster_scan(attack.poisoned.data, attack.victim, config.defense.cluster);
      break;
    case DefenseMethod::none:
      out.report.method = DefenseMethod::none;
      out.report.scores.assign(attack.poisoned.data.size(), 0.0);
      out.report.flagged.assign(attack.poisoned.data.size(), false);
      break;
  }
  EvalBundle bundle;
  bundle.test = &ws.test;
  bundle.triggers = make_triggers(config, ws.test);
  bundle.trigger_description = trigger_description(config);
  bundle.trigger_class = config.donor_class;
  bundle.target_class = config.target_class;
  bundle.clean_reference = &clean;
  bundle.recipe = config.recipe;
  bundle.train_seed = train_seed(config);
  bundle.acc_before = attack.acc_poisoned;
  bundle.asr_before = attack.asr;
  out.outcome = filter_retrain_evaluate(attack.poisoned, out.report, bundle);
  return out;
}

// -------------------------------------------------------------- commands

namespace {

json clean_key(const ExperimentConfig& c) {
  return json{{"data_dir", c.data_dir},
              {"train_subset", c.train_subset},
              {"recipe", json(c)["recipe"]},
              {"seed", c.seed}};
}

// Loads <out>/clean if it was trained for the same data, recipe and seed;
// otherwise trains it and writes the checkpoint.
ClassifierModel ensure_clean(const ExperimentConfig& config, const Workspace& ws,
                             RunManifest& manifest, MetricsReport* acc_out = nullptr) {
  const fs::path dir = fs::path(config.output_dir) / "clean";
  const fs::path meta = dir / "metrics.json";
  if (fs::exists(meta) && fs::exists(dir / "model.pfw")) {
    std::ifstream in(meta);
    const json m = json::parse(in, nullptr, false);
    if (!m.is_discarded() && m.value("key", json()) == clean_key(config)) {
      Rng unused(0);
      ClassifierModel model(ClassifierConfig{}, unused);
      load_model_parameters(model, dir / "model");
      if (acc_out) *acc_out = m.at("acc").get<MetricsReport>();
      manifest.add_file(dir / "model.pfw");
      return model;
    }
  }
  StageTimer timer(manifest, "train-clean");
  CleanRun run = train_clean(config, ws);
  write_model(manifest, run.model, dir / "model");
  write_json(manifest, meta, json{{"key", clean_key(config)}, {"acc", run.acc}});
  if (acc_out) *acc_out = run.acc;
  return std::move(run.model);
}

json attack_metrics(const AttackRun& run) {
  return json{{"acc_clean", run.acc_clean},
              {"acc_poisoned", run.acc_poisoned},
              {"acc_drop", run.acc_clean.acc - run.acc_poisoned.acc},
              {"asr", run.asr},
              {"clean_confusion", run.clean_confusion},
              {"poison_count", run.plan.selected_indices.size()},
              {"mean_abs_delta", run.mean_abs_delta},
              {"max_abs_delta", run.max_abs_delta}};
}

void write_attack_artifacts(const ExperimentConfig& config, const Workspace& ws,
                            const AttackRun& run, RunManifest& manifest) {
  const fs::path dir = fs::path(config.output_dir) / "attack";
  if (run.craft.crafted_images.defined()) {
    save_checkpoint(dir / "crafted.pfw", {NamedTensor{"crafted_images", run.craft.crafted_images}});
    manifest.add_file(dir / "crafted.pfw");
  }
  write_json(manifest, dir / "crafted.json",
             json{{"attack_kind", to_string(config.attack.kind)},
                  {"config_hash", config_hash(config)},
                  {"seed", config.seed},
                  {"craft_seed", derive_seed(config.seed, "craft")},
                  {"label_mode", to_string(run.plan.label_mode)},
                  {"ratio", config.ratio},
                  {"source_indices", run.craft.source_indices},
                  {"donor_indices", run.craft.donor_indices}});
  if (!run.craft.loss_history.empty()) {
    write_json(manifest, dir / "loss_history.json", run.craft.loss_history);
  }
  write_model(manifest, run.victim, dir / "victim");
  json metrics = attack_metrics(run);
  metrics["config_hash"] = config_hash(config);
  write_json(manifest, dir / "metrics.json", metrics);
  const std::size_t g = config.evaluation.grid_samples;
  if (!run.plan.selected_indices.empty()) {
    write_grid(manifest, dir / "grid_benign.pgm", ws.train.gather(run.plan.selected_indices), g);
    write_grid(manifest, dir / "grid_poisoned.pgm", run.craft.crafted_images, g);
  }
  write_grid(manifest, dir / "grid_triggers.pgm", make_triggers(config, ws.test), g);
}

// Rebuilds a finished attack from <out>/attack when its config hash matches.
std::optional<AttackRun> load_attack(const ExperimentConfig& config, const Workspace& ws,
                                     const ClassifierModel& clean) {
  const fs::path dir = fs::path(config.output_dir) / "attack";
  if (!fs::exists(dir / "metrics.json") || !fs::exists(dir / "victim.pfw")) return std::nullopt;
  std::ifstream in(dir / "metrics.json");
  const json m = json::parse(in, nullptr, false);
  if (m.is_discarded() || m.value("config_hash", std::string()) != config_hash(config)) {
    return std::nullopt;
  }
  std::ifstream cin(dir / "crafted.json");
  const json crafted_meta = json::parse(cin);
  Rng unused(0);
  AttackRun run{make_poison_plan(ws.train, config.target_class, config.donor_class, config.ratio,
                                 config.basis, derive_seed(config.seed, "data-split"),
                                 config.effective_label_mode()),
                {}, {}, ClassifierModel(ClassifierConfig{}, unused), {}, {}, {}, 0.0, 0.0, 0.0};
  run.craft.source_indices = crafted_meta.at("source_indices").get<std::vector<std::size_t>>();
  run.craft.donor_indices = crafted_meta.at("donor_indices").get<std::vector<std::size_t>>();
  if (fs::exists(dir / "crafted.pfw")) {
    run.craft.crafted_images = load_checkpoint(dir / "crafted.pfw").at(0).tensor;
  }
  if (fs::exists(dir / "loss_history.json")) {
    std::ifstream lin(dir / "loss_history.json");
    for (const auto& e : json::parse(lin)) {
      run.craft.loss_history.push_back(LossBreakdown{e.at("l_gan"), e.at("l_fe"), e.at("l_pert"),
                                                     e.at("total"), e.at("step")});
    }
  }
  run.poisoned = apply_poison(ws.train, run.plan, run.craft.crafted_images);
  load_model_parameters(run.victim, dir / "victim");
  run.acc_clean = m.at("acc_clean").get<MetricsReport>();
  run.acc_poisoned = m.at("acc_poisoned").get<MetricsReport>();
  run.asr = m.at("asr").get<MetricsReport>();
  run.clean_confusion = m.at("clean_confusion");
  run.mean_abs_delta = m.at("mean_abs_delta");
  run.max_abs_delta = m.at("max_abs_delta");
  (void)clean;
  return run;
}

AttackRun ensure_attack(const ExperimentConfig& config, const Workspace& ws,
                        const ClassifierModel& clean, RunManifest& manifest) {
  if (auto loaded = load_attack(config, ws, clean)) return std::move(*loaded);
  AttackRun run = [&] {
    StageTimer timer(manifest, "attack");
    return run_attack(config, ws, clean);
  }();
  write_attack_artifacts(config, ws, run, manifest);
  return run;
}

std::string fixed(double v, int digits = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(digits) << v;
  return os.str();
}

Workspace timed_workspace(const ExperimentConfig& config, RunManifest& manifest) {
  StageTimer timer(manifest, "load-data");
  return load_workspace(config);
}

}  // namespace

CommandResult cmd_train_clean(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("train-clean", config);
  const Workspace ws = timed_workspace(config, manifest);
  const fs::path dir = fs::path(config.output_dir) / "clean";
  CleanRun run = [&] {
    StageTimer timer(manifest, "train-clean");
    return train_clean(config, ws);
  }();
  write_model(manifest, run.model, dir / "model");
  write_json(manifest, dir / "metrics.json", json{{"key", clean_key(config)}, {"acc", run.acc}});
  write_json(manifest, fs::path(config.output_dir) / "data_manifest.json", ws.data_manifest);
  json summary{{"acc", run.acc}};
  manifest.set_metrics("clean", summary);
  std::printf("clean model: acc %s (%zu/%zu)\n", fixed(run.acc.acc).c_str(), run.acc.n_correct,
              run.acc.n_total);
  return CommandResult{summary, manifest.write(config.output_dir)};
}

CommandResult cmd_attack(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("attack", config);
  const Workspace ws = timed_workspace(config, manifest);
  ClassifierModel clean = ensure_clean(config, ws, manifest);
  clean.set_frozen(true);
  AttackRun run = [&] {
    StageTimer timer(manifest, "attack");
    return run_attack(config, ws, clean);
  }();
  write_attack_artifacts(config, ws, run, manifest);
  const json summary = attack_metrics(run);
  manifest.set_metrics("attack", summary);
  std::printf("attack %s r=%g: acc clean %s poisoned %s, asr %s (%zu/%zu), clean %d->%d rate %s\n",
              to_string(config.attack.kind).c_str(), config.ratio, fixed(run.acc_clean.acc).c_str(),
              fixed(run.acc_poisoned.acc).c_str(), fixed(run.asr.asr).c_str(), run.asr.n_att,
              run.asr.n_correct, config.donor_class, config.target_class,
              fixed(run.clean_confusion).c_str());
  return CommandResult{summary, manifest.write(config.output_dir)};
}

CommandResult cmd_defend(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("defend", config);
  const Workspace ws = timed_workspace(config, manifest);
  ClassifierModel clean = ensure_clean(config, ws, manifest);
  clean.set_frozen(true);
  const AttackRun attack = ensure_attack(config, ws, clean, manifest);
  DefenseRun run = [&] {
    StageTimer timer(manifest, "defend");
    return run_defense(config, ws, clean, attack);
  }();
  const fs::path dir = fs::path(config.output_dir) / "defense";
  write_json(manifest, dir / "anomaly_report.json", run.report);
  write_json(manifest, dir / "outcome.json", run.outcome);
  const auto& o = run.outcome;
  const std::string table = "metric,before,after\nacc," + fixed(o.acc_before, 6) + "," +
                            fixed(o.acc_after, 6) + "\nasr," + fixed(o.asr_before, 6) + "," +
                            fixed(o.asr_after, 6) + "\n";
  write_text(manifest, dir / "before_after.csv", table);
  std::vector<std::size_t> flagged_rows;
  for (std::size_t i = 0; i < run.report.flagged.size(); ++i)
    if (run.report.flagged[i]) flagged_rows.push_back(i);
  if (!flagged_rows.empty()) {
    write_grid(manifest, dir / "grid_flagged.pgm", attack.poisoned.data.gather(flagged_rows),
               config.evaluation.grid_samples * 2);
  }
  const json summary = run.outcome;
  manifest.set_metrics("defense", summary);
  std::printf("defense %s: removed %zu, precision %s recall %s\n",
              to_string(o.method).c_str(), o.removed_count, fixed(o.detection_precision).c_str(),
              fixed(o.detection_recall).c_str());
  std::printf("          before   after\n  acc    %s  %s\n  asr    %s  %s\n",
              fixed(o.acc_before).c_str(), fixed(o.acc_after).c_str(), fixed(o.asr_before).c_str(),
              fixed(o.asr_after).c_str());
  return CommandResult{summary, manifest.write(config.output_dir)};
}

namespace {

/// Per-seed workspaces and clean models shared by sweep and study cells.
class SeedContext {
 public:
  explicit SeedContext(const ExperimentConfig& base) : base_(base) {}

  struct Entry {
    Workspace ws;
    std::unique_ptr<ClassifierModel> clean;
  };

  const Entry& get(std::uint64_t seed, RunManifest& manifest) {
    std::shared_ptr<std::once_flag> flag;
    {
      std::lock_guard lock(mutex_);
      auto& f = flags_[seed];
      if (!f) f = std::make_shared<std::once_flag>();
      flag = f;
    }
    std::call_once(*flag, [&] {
      ExperimentConfig c = base_;
      c.seed = seed;
      auto entry = std::make_unique<Entry>();
      {
        std::lock_guard lock(mutex_);
        if (!splits_) {
          StageTimer timer(manifest, "load-data");
          ExperimentConfig full = c;
          full.train_subset = 0;
          splits_ = std::make_unique<Workspace>(load_workspace(full));
        }
      }
      entry->ws.test = splits_->test;
      entry->ws.data_manifest = splits_->data_manifest;
      entry->ws.train = c.train_subset > 0 && c.train_subset < splits_->train.size()
                            ? random_subset(splits_->train, c.train_subset,
                                            derive_seed(seed, "data-split"))
                            : splits_->train;
      {
        StageTimer timer(manifest, "train-clean seed " + std::to_string(seed));
        entry->clean = std::make_unique<ClassifierModel>(train_clean(c, entry->ws).model);
      }
      entry->clean->set_frozen(true);
      std::lock_guard lock(mutex_);
      entries_[seed] = std::move(entry);
    });
    std::lock_guard lock(mutex_);
    return *entries_.at(seed);
  }

 private:
  ExperimentConfig base_;
  std::mutex mutex_;
  std::unique_ptr<Workspace> splits_;
  std::map<std::uint64_t, std::shared_ptr<std::once_flag>> flags_;
  std::map<std::uint64_t, std::unique_ptr<Entry>> entries_;
};

std::string ratio_tag(double r) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << r;
  return os.str();
}

}  // namespace

CommandResult cmd_sweep(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("sweep", config);
  const fs::path dir = fs::path(config.output_dir) / "sweep";
  const auto& ev = config.evaluation;
  SeedContext seeds(config);
  GeneratorCache cache;
  const std::string attack = to_string(config.attack.kind);
  SweepResult result;
  {
    StageTimer timer(manifest, "sweep");
    result = run_sweep(attack, ev.ratios, ev.seeds,
                       [&](double ratio, std::uint64_t seed) {
                         ExperimentConfig c = config;
                         c.ratio = ratio;
                         c.seed = seed;
                         const auto& entry = seeds.get(seed, manifest);
                         const AttackRun run = run_attack(c, entry.ws, *entry.clean, &cache);
                         SweepRow row;
                         row.acc_clean = run.acc_clean.acc;
                         row.acc_poisoned = run.acc_poisoned.acc;
                         row.asr = run.asr.asr;
                         write_json(manifest,
                                    dir / "cells" /
                                        ("ratio" + ratio_tag(ratio) + "_seed" +
                                         std::to_string(seed) + ".json"),
                                    attack_metrics(run));
                         return row;
                       },
                       config.parallel);
  }
  write_text(manifest, dir / "sweep.csv", sweep_csv(result.rows));
  write_text(manifest, dir / "sweep_summary.csv", sweep_summary_csv(result.summary));
  std::vector<double> xs, asr, acc;
  for (const auto& s : result.summary) {
    if (s.cells_ok == 0) continue;
    xs.push_back(s.ratio);
    asr.push_back(s.mean_asr);
    acc.push_back(s.mean_acc_poisoned);
  }
  write_text(manifest, dir / "sweep.svg",
             svg_line_chart("ASR vs poison ratio (" + attack + ")", "poison ratio", "rate",
                            {{"mean ASR", xs, asr}, {"poisoned acc", xs, acc}}));
  const auto rho = spearman(xs, asr);
  json summary{{"cells", result.rows.size()},
               {"failed", std::count_if(result.rows.begin(), result.rows.end(),
                                        [](const SweepRow& r) { return !r.ok; })},
               {"spearman_ratio_asr", rho ? json(*rho) : json(nullptr)}};
  write_json(manifest, dir / "summary.json", summary);
  manifest.set_metrics("sweep", summary);
  std::fputs(sweep_summary_csv(result.summary).c_str(), stdout);
  std::printf("spearman(ratio, mean asr) = %s\n", rho ? fixed(*rho).c_str() : "undefined");
  return CommandResult{summary, manifest.write(config.output_dir)};
}

CommandResult cmd_study(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("study", config);
  const fs::path dir = fs::path(config.output_dir) / "study";
  SeedContext seeds(config);
  GeneratorCache cache;
  const auto& entry = seeds.get(config.seed, manifest);
  std::vector<StudyRow> rows;
  {
    StageTimer timer(manifest, "study");
    rows = interclass_study(
        entry.ws.train, config.target_class, config.evaluation.donor_classes,
        [&](int donor) {
          ExperimentConfig c = config;
          c.donor_class = donor;
          const AttackRun run = run_attack(c, entry.ws, *entry.clean, &cache);
          write_json(manifest, dir / "cells" / ("donor" + std::to_string(donor) + ".json"),
                     attack_metrics(run));
          return run.asr.asr;
        },
        config.evaluation.similarity, config.parallel);
  }
  write_text(manifest, dir / "study.csv", study_csv(rows));
  const auto matrix = similarity_matrix(entry.ws.train, config.evaluation.similarity);
  write_json(manifest, dir / "similarity_matrix.json",
             json{{"num_classes", matrix.num_classes}, {"values", matrix.values}});
  std::vector<StudyRow> ok;
  std::copy_if(rows.begin(), rows.end(), std::back_inserter(ok), [](auto& r) { return r.ok; });
  std::sort(ok.begin(), ok.end(), [](auto& a, auto& b) { return a.similarity < b.similarity; });
  std::vector<double> sim, asr;
  for (const auto& r : ok) {
    sim.push_back(r.similarity);
    asr.push_back(r.asr);
  }
  write_text(manifest, dir / "study.svg",
             svg_line_chart("ASR vs inter-class similarity (target " +
                                std::to_string(config.target_class) + ")",
                            "dHash similarity", "ASR", {{"ASR", sim, asr}}));
  const auto rho = spearman(sim, asr);
  json summary{{"rows", rows.size()}, {"spearman_similarity_asr", rho ? json(*rho) : json(nullptr)}};
  write_json(manifest, dir / "summary.json", summary);
  manifest.set_metrics("study", summary);
  std::fputs(study_csv(rows).c_str(), stdout);
  std::printf("spearman(similarity, asr) = %s\n", rho ? fixed(*rho).c_str() : "undefined");
  return CommandResult{summary, manifest.write(config.output_dir)};
}

CommandResult cmd_report(const ExperimentConfig& config) {
  config.validate();
  RunManifest manifest("report", config);
  const Workspace ws = timed_workspace(config, manifest);
  ClassifierModel clean = ensure_clean(config, ws, manifest);
  clean.set_frozen(true);
  const AttackRun attack = ensure_attack(config, ws, clean, manifest);
  const fs::path dir = fs::path(config.output_dir) / "report";
  const std::size_t g = config.evaluation.grid_samples;

  const Tensor triggers = make_triggers(config, ws.test);
  if (!attack.plan.selected_indices.empty()) {
    const Tensor bases = ws.train.gather(attack.plan.selected_indices);
    const std::size_t n = std::min(g, bases.dim(0));
    // Row 1 benign bases, row 2 their poisoned versions, row 3 triggers.
    std::vector<float> tiles;
    auto append = [&](const Tensor& t, std::size_t count) {
      const auto v = t.values();
      tiles.insert(tiles.end(), v.begin(), v.begin() + static_cast<std::ptrdiff_t>(count * 784));
    };
    const std::size_t tn = std::min(n, triggers.dim(0));
    append(bases, n);
    append(attack.craft.crafted_images, n);
    append(triggers, tn);
    tiles.resize(3 * n * 784, 0.5f);
    write_pgm_grid(dir / "samples.pgm", Tensor({3 * n, 1, 28, 28}, std::move(tiles)), n);
    manifest.add_file(dir / "samples.pgm");
    write_grid(manifest, dir / "benign.pgm", bases, g);
    write_grid(manifest, dir / "poisoned.pgm", attack.craft.crafted_images, g);
  }
  write_grid(manifest, dir / "triggers.pgm", triggers, g);

  // Target-class logits of the poisoned model: triggers vs benign target-class samples.
  Rng rng(config.seed, "report");
  auto sample_rows = [&](std::size_t n) {
    auto idx = rng.sample_without_replacement(n, std::min(n, config.evaluation.ttest_samples));
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  const auto target_rows = ws.test.indices_of_class(config.target_class);
  std::vector<std::size_t> pick_t;
  for (auto k : sample_rows(target_rows.size())) pick_t.push_back(target_rows[k]);
  const auto pick_trig = sample_rows(triggers.dim(0));
  std::vector<float> trig_rows;
  for (auto k : pick_trig) {
    const auto v = triggers.values();
    trig_rows.insert(trig_rows.end(), v.begin() + static_cast<std::ptrdiff_t>(k * 784),
                     v.begin() + static_cast<std::ptrdiff_t>((k + 1) * 784));
  }
  const Tensor trig_sample({pick_trig.size(), 1, 28, 28}, std::move(trig_rows));
  auto target_logits = [&](const Tensor& images) {
    const Tensor logits = predict_logits(attack.victim, images);
    std::vector<double> out;
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < logits.dim(0); ++i) {
      out.push_back(logits.values()[i * c + static_cast<std::size_t>(config.target_class)]);
    }
    return out;
  };
  const auto a = target_logits(trig_sample);
  const auto b = target_logits(ws.test.gather(pick_t));
  const TTestResult tt = ttest_two_sample(a, b);
  write_json(manifest, dir / "ttest.json", tt);

  if (!attack.craft.loss_history.empty()) {
    ChartSeries gan{"l_gan", {}, {}}, fe{"l_fe", {}, {}}, pert{"l_pert", {}, {}};
    for (const auto& l : attack.craft.loss_history) {
      const double s = static_cast<double>(l.step);
      gan.x.push_back(s);
      gan.y.push_back(l.l_gan);
      fe.x.push_back(s);
      fe.y.push_back(l.l_fe);
      pert.x.push_back(s);
      pert.y.push_back(l.l_pert);
    }
    write_text(manifest, dir / "losses.svg",
               svg_line_chart("DeepPoison training losses", "step", "loss", {gan, fe, pert}));
  }
  json summary = attack_metrics(attack);
  summary["attack_kind"] = to_string(config.attack.kind);
  summary["epsilon"] = config.attack.epsilon;
  summary["ttest"] = tt;
  write_json(manifest, dir / "summary.json", summary);
  manifest.set_metrics("report", summary);
  std::printf("report %s: mean per-pixel |delta| %s (max %s, epsilon %s)\n",
              to_string(config.attack.kind).c_str(), fixed(attack.mean_abs_delta, 5).c_str(),
              fixed(attack.max_abs_delta, 5).c_str(), fixed(config.attack.epsilon, 3).c_str());
  std::printf("asr %s, acc %s; target-logit t-test t=%s df=%s p=%.3g\n",
              fixed(attack.asr.asr).c_str(), fixed(attack.acc_poisoned.acc).c_str(),
              fixed(tt.t_statistic, 3).c_str(), fixed(tt.degrees_of_freedom, 1).c_str(), tt.p_value);
  return CommandResult{summary, manifest.write(config.output_dir)};
}

}  // namespace poisonforge
