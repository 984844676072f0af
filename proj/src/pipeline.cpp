#include "dra/pipeline.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

#include "dra/analysis.hpp"
#include "dra/errors.hpp"
#include "dra/synthetic_pool.hpp"

namespace dra::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;

bool arm_uses_dra(const std::string& arm) { return arm == "AT+DRA" || arm == "DM-AT+DRA"; }
bool arm_uses_synth(const std::string& arm) { return arm == "DM-AT" || arm == "DM-AT+DRA"; }

json EvalSettings::to_json() const {
  return {{"preset", preset}, {"epsilon", epsilon}, {"n_test", n_test}, {"seed", seed}, {"weights", weights}, {"pgd", pgd.to_json()}};
}

EvalSettings EvalSettings::from_json(const json& j) {
  EvalSettings e;
  e.preset = j.value("preset", e.preset);
  e.epsilon = j.value("epsilon", e.epsilon);
  e.n_test = j.value("n_test", e.n_test);
  e.seed = j.value("seed", e.seed);
  e.weights = j.value("weights", e.weights);
  if (j.contains("pgd")) e.pgd = attacks::AttackConfig::from_json(j.at("pgd"));
  if (e.preset != attacks::kStrongPgdPreset && e.preset != "pgd") throw ConfigError("unknown eval preset '" + e.preset + "'");
  if (e.weights != "ema" && e.weights != "live") throw ConfigError("eval.weights must be 'ema' or 'live'");
  return e;
}

json AnalysisSettings::to_json() const {
  return {{"enabled", enabled},       {"n", n},
          {"cknna_k", cknna_k},       {"sae_k", sae_k},
          {"sae_latent_multiplier", sae_latent_multiplier}, {"sae_epochs", sae_epochs},
          {"pair_with_strong_pgd", pair_with_strong_pgd}};
}

AnalysisSettings AnalysisSettings::from_json(const json& j) {
  AnalysisSettings a;
  a.enabled = j.value("enabled", a.enabled);
  a.n = j.value("n", a.n);
  a.cknna_k = j.value("cknna_k", a.cknna_k);
  a.sae_k = j.value("sae_k", a.sae_k);
  a.sae_latent_multiplier = j.value("sae_latent_multiplier", a.sae_latent_multiplier);
  a.sae_epochs = j.value("sae_epochs", a.sae_epochs);
  a.pair_with_strong_pgd = j.value("pair_with_strong_pgd", a.pair_with_strong_pgd);
  return a;
}

json SweepSettings::to_json() const { return {{"enabled", enabled}, {"arm", arm}, {"lambdas", lambdas}}; }

SweepSettings SweepSettings::from_json(const json& j) {
  SweepSettings s;
  s.enabled = j.value("enabled", s.enabled);
  s.arm = j.value("arm", s.arm);
  s.lambdas = j.value("lambdas", s.lambdas);
  return s;
}

json SyntheticSettings::to_json() const { return {{"count", count}, {"class_balanced", class_balanced}, {"seed", seed}}; }

SyntheticSettings SyntheticSettings::from_json(const json& j) {
  SyntheticSettings s;
  s.count = j.value("count", s.count);
  s.class_balanced = j.value("class_balanced", s.class_balanced);
  s.seed = j.value("seed", s.seed);
  return s;
}

void RunConfig::validate() const {
  if (run_id.empty() || run_id.find('/') != std::string::npos) throw ConfigError("run_id must be a nonempty name without '/'");
  if (arms.empty() && !sweep.enabled) throw ConfigError("no arms configured");
  std::set<std::string> seen;
  for (const auto& a : arms) {
    if (std::find(arm_names().begin(), arm_names().end(), a) == arm_names().end()) throw ConfigError("unknown arm '" + a + "'");
    if (!seen.insert(a).second) throw ConfigError("duplicate arm '" + a + "'");
  }
  if (sweep.enabled && std::find(arm_names().begin(), arm_names().end(), sweep.arm) == arm_names().end()) {
    throw ConfigError("unknown sweep arm '" + sweep.arm + "'");
  }
  if (seeds.empty()) throw ConfigError("seed list is empty");
  if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) throw ConfigError("duplicate seeds");
  if (dra_target != "diffusion" && dra_target != "noisy-discriminative") throw ConfigError("unknown dra_target '" + dra_target + "'");
  if (needs_synthetic() && synthetic.count <= 0) throw ConfigError("synthetic pool count must be positive for DM-AT arms");
  if (eval.n_test <= 0) throw ConfigError("eval.n_test must be positive");
  if (analysis.enabled && analysis.n < 2) throw ConfigError("analysis.n must be at least 2");
  recipe.validate();
  diffusion.schedule.validate();
}

bool RunConfig::needs_diffusion() const {
  auto any = [&](auto pred) {
    return std::any_of(arms.begin(), arms.end(), pred) || (sweep.enabled && pred(sweep.arm));
  };
  return any([](const std::string& a) { return arm_uses_synth(a); }) ||
         (dra_target == "diffusion" && any([](const std::string& a) { return arm_uses_dra(a); }));
}

bool RunConfig::needs_synthetic() const {
  return std::any_of(arms.begin(), arms.end(), arm_uses_synth) || (sweep.enabled && arm_uses_synth(sweep.arm));
}

json RunConfig::to_json() const {
  return {{"run_id", run_id},
          {"dataset", dataset},
          {"toy", toy.to_json()},
          {"benchmark_root", benchmark_root},
          {"data_seed", data_seed},
          {"arms", arms},
          {"seeds", seeds},
          {"recipe", recipe.to_json()},
          {"diffusion", diffusion.to_json()},
          {"synthetic", synthetic.to_json()},
          {"dra_target", dra_target},
          {"pretrain", pretrain.to_json()},
          {"eval", eval.to_json()},
          {"analysis", analysis.to_json()},
          {"sweep", sweep.to_json()},
          {"output_dir", output_dir.string()}};
}

RunConfig RunConfig::from_json(const json& j) {
  static const std::set<std::string> known{"run_id", "dataset", "toy", "benchmark_root", "data_seed", "arms",
                                           "seeds", "recipe", "diffusion", "synthetic", "dra_target", "pretrain",
                                           "eval", "analysis", "sweep", "output_dir"};
  if (!j.is_object()) throw ConfigError("run configuration must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!known.count(k)) throw ConfigError("unknown run configuration field '" + k + "'");
  try {
    RunConfig c;
    c.run_id = j.value("run_id", c.run_id);
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("toy")) c.toy = data::ToyConfig::from_json(j.at("toy"));
    c.benchmark_root = j.value("benchmark_root", c.benchmark_root);
    c.data_seed = j.value("data_seed", c.data_seed);
    c.arms = j.value("arms", c.arms);
    c.seeds = j.value("seeds", c.seeds);
    if (j.contains("recipe")) c.recipe = robust::TrainRecipe::from_json(j.at("recipe"));
    if (j.contains("diffusion")) c.diffusion = diffusion::DiffusionTrainConfig::from_json(j.at("diffusion"));
    if (j.contains("synthetic")) c.synthetic = SyntheticSettings::from_json(j.at("synthetic"));
    c.dra_target = j.value("dra_target", c.dra_target);
    if (j.contains("pretrain")) c.pretrain = robust::PretrainConfig::from_json(j.at("pretrain"));
    if (j.contains("eval")) c.eval = EvalSettings::from_json(j.at("eval"));
    if (j.contains("analysis")) c.analysis = AnalysisSettings::from_json(j.at("analysis"));
    if (j.contains("sweep")) c.sweep = SweepSettings::from_json(j.at("sweep"));
    c.output_dir = j.value("output_dir", std::string());
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed run configuration: ") + e.what());
  }
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return from_json(j);
}

void apply_overrides(json& config, const std::vector<std::string>& overrides) {
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw ArgumentError("override '" + o + "' must look like path.to.field=value");
    const std::string path = o.substr(0, eq), raw = o.substr(eq + 1);
    json value;
    try {
      value = json::parse(raw);
    } catch (const json::exception&) {
      value = raw;
    }
    json* node = &config;
    std::stringstream ss(path);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
      if (!node->is_object() && !node->is_null()) throw ArgumentError("override path '" + path + "' crosses a non-object");
      if (i + 1 < parts.size()) node = &(*node)[parts[i]];
    }
    (*node)[parts.back()] = value;
  }
}

std::vector<std::string> json_diff(const json& a, const json& b, const std::string& prefix) {
  std::vector<std::string> out;
  if (a.is_object() && b.is_object()) {
    std::set<std::string> keys;
    for (const auto& [k, v] : a.items()) keys.insert(k);
    for (const auto& [k, v] : b.items()) keys.insert(k);
    for (const auto& k : keys) {
      const std::string p = prefix.empty() ? k : prefix + "." + k;
      if (!a.contains(k)) {
        out.push_back(p + ": (absent) -> " + b.at(k).dump());
      } else if (!b.contains(k)) {
        out.push_back(p + ": " + a.at(k).dump() + " -> (absent)");
      } else {
        auto sub = json_diff(a.at(k), b.at(k), p);
        out.insert(out.end(), sub.begin(), sub.end());
      }
    }
  } else if (a != b) {
    out.push_back((prefix.empty() ? "<root>" : prefix) + ": " + a.dump() + " -> " + b.dump());
  }
  return out;
}

fs::path run_root() {
  const char* env = std::getenv("DRA_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output_dir(const RunConfig& config) {
  return config.output_dir.empty() ? run_root() / config.run_id : config.output_dir;
}

Ledger::Ledger(fs::path jsonl_path) : path_(std::move(jsonl_path)) {}

fs::path Ledger::csv_path() const {
  fs::path p = path_;
  return p.replace_extension(".csv");
}

void Ledger::append(const json& row) {
  if (!path_.parent_path().empty()) fs::create_directories(path_.parent_path());
  {
    std::ofstream out(path_, std::ios::app | std::ios::binary);
    if (!out) throw Error("cannot append to ledger " + path_.string());
    out << row.dump() << '\n';
  }
  write_csv(rows());
}

std::vector<json> Ledger::rows() const {
  std::vector<json> rows;
  std::ifstream in(path_, std::ios::binary);
  if (!in) return rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw IngestionError(path_.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

namespace {

void flatten(const json& j, const std::string& prefix, std::map<std::string, std::string>& out) {
  if (j.is_object()) {
    for (const auto& [k, v] : j.items()) flatten(v, prefix.empty() ? k : prefix + "." + k, out);
  } else if (j.is_string()) {
    out[prefix] = j.get<std::string>();
  } else {
    out[prefix] = j.dump();
  }
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += c == '"' ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
  if (!path.parent_path().empty()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

}  // namespace

std::string to_csv(const std::vector<json>& rows) {
  std::vector<std::map<std::string, std::string>> flat(rows.size());
  std::set<std::string> header;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    flatten(rows[i], "", flat[i]);
    for (const auto& [k, v] : flat[i]) header.insert(k);
  }
  std::ostringstream out;
  bool first = true;
  for (const auto& h : header) out << (first ? "" : ",") << csv_field(h), first = false;
  out << '\n';
  for (const auto& r : flat) {
    first = true;
    for (const auto& h : header) {
      auto it = r.find(h);
      out << (first ? "" : ",") << (it == r.end() ? "" : csv_field(it->second));
      first = false;
    }
    out << '\n';
  }
  return out.str();
}

void Ledger::write_csv(const std::vector<json>& rows) const { write_text(csv_path(), to_csv(rows)); }

int PipelineResult::executed() const {
  return static_cast<int>(std::count_if(events.begin(), events.end(), [](const auto& e) { return e.executed; }));
}
int PipelineResult::skipped() const {
  return static_cast<int>(std::count_if(events.begin(), events.end(), [](const auto& e) { return !e.executed && !e.pending; }));
}

namespace {

std::string hash_json(const json& j) { return sha256_hex(j.dump()).substr(0, 16); }

std::string seed_tag(std::uint64_t seed) { return "s" + std::to_string(seed); }

std::string arm_file(const std::string& arm) {
  std::string s = arm;
  std::replace(s.begin(), s.end(), '+', '_');
  return s;
}

std::string lambda_tag(double l) {
  std::ostringstream ss;
  ss << l;
  return ss.str();
}

json read_json_file(const fs::path& p, const json& fallback) {
  std::ifstream in(p);
  if (!in) return fallback;
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw IngestionError(p.string() + ": " + e.what());
  }
}

data::DatasetOptions dataset_options(const RunConfig& c, const fs::path& run_dir) {
  data::DatasetOptions o;
  o.cache_dir = run_dir / "dataset-cache";
  o.benchmark_root = c.benchmark_root;
  o.toy = c.toy;
  return o;
}

json data_key(const RunConfig& c) {
  return {{"dataset", c.dataset}, {"toy", c.toy.to_json()}, {"benchmark_root", c.benchmark_root}, {"data_seed", c.data_seed}};
}

// Persistent stage bookkeeping for one run directory.
class StageBook {
 public:
  StageBook(fs::path dir, const PipelineOptions& options) : dir_(std::move(dir)), options_(options) {
    state_ = read_json_file(dir_ / "stages.json", json::object());
  }

  bool done(const std::string& stage, const std::string& hash) const {
    return state_.contains(stage) && state_[stage].value("hash", "") == hash && state_[stage].value("status", "") == "complete";
  }

  bool allowed(const std::string& stage) const {
    return options_.stage_kinds.empty() || options_.stage_kinds.count(stage.substr(0, stage.find('/')));
  }

  // Runs fn unless (stage, hash) is complete. Stages outside the allowed
  // kinds are left pending.
  void run(const std::string& stage, const std::string& hash, const std::function<void()>& fn, PipelineResult& result) {
    if (done(stage, hash)) {
      note(stage + ": skipped (hash " + hash + ")");
      result.events.push_back({stage, false, hash, false});
      return;
    }
    if (!allowed(stage)) {
      pending_.insert(stage);
      result.events.push_back({stage, false, hash, true});
      return;
    }
    note(stage + ": running (hash " + hash + ")");
    fn();
    state_[stage] = {{"hash", hash}, {"status", "complete"}};
    save();
    note(stage + ": executed");
    result.events.push_back({stage, true, hash, false});
  }

  // Throws if a stage this one depends on has not been run.
  void require(const std::string& stage) const {
    if (pending_.count(stage)) {
      const std::string kind = stage.substr(0, stage.find('/'));
      throw ConfigError("stage '" + stage + "' is not complete for this configuration; run the '" + verb_for(kind) +
                        "' command first");
    }
  }

  void note(const std::string& line) {
    std::ofstream(dir_ / "pipeline.log", std::ios::app) << line << '\n';
    if (options_.log) options_.log(line);
  }

 private:
  static std::string verb_for(const std::string& kind) {
    if (kind == "diffusion") return "train-diffusion";
    if (kind == "synthetic") return "gen-synth";
    if (kind == "pretrain" || kind == "train") return "train-robust";
    if (kind == "eval") return "eval";
    if (kind == "analysis") return "analyze";
    return "run";
  }
  void save() const { write_text(dir_ / "stages.json", state_.dump(2) + "\n"); }

  fs::path dir_;
  const PipelineOptions& options_;
  json state_;
  std::set<std::string> pending_;
};

struct Context {
  const RunConfig& config;
  fs::path dir;
  const StageBook& book;
  data::LabeledImageBatch train, test;
  std::string diffusion_hash, synth_hash, pretrain_hash;
  std::optional<diffusion::DiffusionModel> dm;
  std::optional<data::LabeledImageBatch> pool;
  std::optional<robust::NoisyEncoder> noisy;

  const diffusion::DiffusionModel& diffusion_model() {
    book.require("diffusion");
    if (!dm) dm = diffusion::DiffusionModel::load(dir / "diffusion" / "model.dra");
    return *dm;
  }
  const data::LabeledImageBatch& synthetic_pool() {
    book.require("synthetic");
    if (!pool) pool = data::SyntheticPool::open(dir / "synthetic" / "pool.dra").load();
    return *pool;
  }
  const robust::NoisyEncoder& noisy_encoder() {
    book.require("pretrain");
    if (!noisy) {
      const fs::path p = dir / "pretrain" / "noisy_encoder.dra";
      noisy = robust::NoisyEncoder::from_archive(TensorArchive::load(p), p.string());
    }
    return *noisy;
  }
  data::LabeledImageBatch test_subset(int n) const {
    std::vector<int> idx(std::min(n, test.size()));
    std::iota(idx.begin(), idx.end(), 0);
    return test.select(idx);
  }
};

std::string target_hash(const RunConfig& c, const Context& ctx) {
  return c.dra_target == "diffusion" ? ctx.diffusion_hash : ctx.pretrain_hash;
}

json train_key(const RunConfig& c, const Context& ctx, const std::string& arm, const robust::TrainRecipe& recipe) {
  json r = recipe.to_json();
  if (!arm_uses_dra(arm)) {
    for (const char* f : {"lambda", "dra_sigma", "dra_conditional", "dra_tap"}) r.erase(f);
  }
  if (!arm_uses_synth(arm)) r.erase("real_fraction");
  json k = {{"data", data_key(c)}, {"arm", arm}, {"recipe", r}};
  if (arm_uses_dra(arm)) k["target"] = {{"kind", c.dra_target}, {"hash", target_hash(c, ctx)}};
  if (arm_uses_synth(arm)) k["synthetic"] = ctx.synth_hash;
  return k;
}

robust::RobustCheckpoint train_cell(Context& ctx, const std::string& arm, const robust::TrainRecipe& recipe) {
  std::optional<robust::DiffusionTarget> dtarget;
  std::optional<robust::NoisyDiscriminativeTarget> ntarget;
  robust::TrainInputs in;
  in.real = &ctx.train;
  if (arm_uses_synth(arm)) in.synthetic = &ctx.synthetic_pool();
  if (arm_uses_dra(arm)) {
    if (ctx.config.dra_target == "diffusion") {
      dtarget.emplace(ctx.diffusion_model(), recipe.dra_sigma, recipe.dra_conditional, recipe.dra_tap);
      in.target = &*dtarget;
    } else {
      ntarget.emplace(ctx.noisy_encoder(), recipe.dra_sigma);
      in.target = &*ntarget;
    }
  }
  return robust::train_robust(recipe, in, arm_uses_dra(arm), arm_uses_synth(arm));
}

attacks::RobustEval evaluate_cell(const Context& ctx, const RobustClassifier& model) {
  const auto& e = ctx.config.eval;
  const auto test = ctx.test_subset(e.n_test);
  if (e.preset == "pgd") {
    attacks::AttackConfig a = e.pgd;
    a.epsilon = e.epsilon;
    a.seed = e.seed;
    return attacks::evaluate_robust(model, test.images, test.labels, a);
  }
  return attacks::evaluate_strong_pgd(model, test.images, test.labels, e.epsilon, e.seed);
}

json result_row(const Context& ctx, const std::string& stage_hash, const std::string& arm, std::uint64_t seed,
                const robust::RobustCheckpoint& ck, const attacks::RobustEval& ev) {
  json r = {{"row_id", stage_hash},
            {"run_id", ctx.config.run_id},
            {"arm", arm},
            {"seed", seed},
            {"checkpoint_id", ck.checkpoint_id()},
            {"preset", ev.preset},
            {"preset_note", ev.preset == attacks::kStrongPgdPreset ? "AutoAttack proxy (CE PGD-50x10 + KL PGD-50)" : ""},
            {"noise", ev.noise},
            {"weights", ctx.config.eval.weights},
            {"epsilon", ctx.config.eval.epsilon},
            {"n", ev.n},
            {"clean", 100.0 * ev.clean_accuracy},
            {"robust", 100.0 * ev.robust_accuracy},
            {"lambda", ck.recipe.lambda},
            {"warnings", ev.warnings}};
  return r;
}

json analysis_record(Context& ctx, const std::string& stage_hash, const std::string& arm, std::uint64_t seed,
                     const robust::RobustCheckpoint& ck) {
  const auto& s = ctx.config.analysis;
  const RobustClassifier model = ck.evaluated_model(ctx.config.eval.weights == "ema");
  const auto test = ctx.test_subset(s.n);
  auto attack_cfg = attacks::strong_pgd_attacks(ctx.config.eval.epsilon, ctx.config.eval.seed).front();
  if (!s.pair_with_strong_pgd) {
    attack_cfg.steps = ck.recipe.pgd_steps;
    attack_cfg.restarts = 1;
    attack_cfg.alpha = ck.recipe.alpha;
  }
  const Tensor adv = attacks::pgd_attack(model, test.images, test.labels, attack_cfg).adversarial;
  Tape tape(false);
  const Tensor clean_f = model.features(tape, tape.constant(test.images)).value();
  const Tensor adv_f = model.features(tape, tape.constant(adv)).value();

  json rec = {{"row_id", stage_hash}, {"run_id", ctx.config.run_id}, {"arm", arm}, {"seed", seed},
              {"checkpoint_id", ck.checkpoint_id()}, {"n", test.size()}, {"weights", ctx.config.eval.weights},
              {"pair_attack", attack_cfg.to_json()}};
  rec["alignment"] = analysis::alignment_metric(clean_f, adv_f);
  rec["uniformity"] = analysis::uniformity_metric(clean_f, 2.0);
  rec["uniformity_adversarial"] = analysis::uniformity_metric(adv_f, 2.0);
  if (ctx.config.needs_diffusion() && fs::exists(ctx.dir / "diffusion" / "model.dra")) {
    diffusion::ExtractOptions o;
    o.noise = diffusion::NoiseMode::seeded(ctx.config.eval.seed);
    const auto rep = diffusion::extract_representation(ctx.diffusion_model(), test.images, diffusion::Condition::unconditional(), o);
    const int k = std::min(s.cknna_k, test.size() - 1);
    rec["cknna_vs_diffusion"] = analysis::cknna(clean_f, rep.features, k);
    rec["cknna_formula"] = analysis::kCknnaFormula;
    rec["cknna_k"] = k;
  }
  rec["cls_dim"] = analysis::classification_dimension(clean_f, adv_f, test.labels, model.head()).to_json();

  json sae = json::object();
  const int m = s.sae_latent_multiplier * clean_f.dim(1);
  Tensor centered = clean_f;
  const Eigen::RowVectorXd mu = centered.matrix().colwise().mean();
  centered.matrix().rowwise() -= mu;
  for (int k : s.sae_k) {
    if (k > m) continue;
    analysis::SaeConfig cfg;
    cfg.epochs = s.sae_epochs;
    cfg.seed = seed;
    const auto sae_model = analysis::train_topk_sae(centered, m, k, cfg);
    sae[std::to_string(k)] = analysis::normalized_sae_loss(sae_model, centered);
  }
  rec["sae_normalized_loss"] = sae;
  rec["sae_latent"] = m;

  const Tensor freq = analysis::frequency_saliency(model, test.images, test.labels);
  TensorArchive far;
  far.put("map", freq);
  far.meta()["kind"] = "frequency-saliency";
  far.meta()["arm"] = arm;
  far.meta()["seed"] = seed;
  const fs::path rel = fs::path("analysis") / ("freq_" + arm_file(arm) + "_" + seed_tag(seed) + ".dra");
  fs::create_directories(ctx.dir / "analysis");
  far.save(ctx.dir / rel);
  rec["frequency_map"] = rel.generic_string();

  analysis::RepresentationBatch dump{clean_f, {ck.checkpoint_id(), "features", std::nullopt, "test", std::nullopt}};
  const fs::path drel = fs::path("analysis") / ("features_" + arm_file(arm) + "_" + seed_tag(seed) + ".dra");
  dump.to_archive().save(ctx.dir / drel);
  rec["feature_dump"] = drel.generic_string();
  return rec;
}

}  // namespace

diffusion::DiffusionModel train_diffusion_stage(const RunConfig& config, const fs::path& out) {
  const fs::path cache = out.parent_path().empty() ? fs::path("dataset-cache") : out.parent_path() / "dataset-cache";
  data::DatasetOptions o;
  o.cache_dir = cache;
  o.benchmark_root = config.benchmark_root;
  o.toy = config.toy;
  const auto train = data::load_dataset(config.dataset, data::Split::kTrain, config.data_seed, o).examples;
  auto model = diffusion::train_diffusion(train, config.diffusion);
  if (!out.parent_path().empty()) fs::create_directories(out.parent_path());
  model.save(out);
  return model;
}

data::SyntheticPool gen_synth_stage(const RunConfig& config, const fs::path& diffusion_path, const fs::path& out) {
  const auto model = diffusion::DiffusionModel::load(diffusion_path);
  return data::build_synthetic_pool(model, config.synthetic.count, config.synthetic.class_balanced, config.synthetic.seed, out);
}

PipelineResult run_pipeline(const RunConfig& config, const PipelineOptions& options) {
  config.validate();
  const fs::path dir = resolve_output_dir(config);
  fs::create_directories(dir);
  const json cfg_json = config.to_json();
  const std::string cfg_hash = hash_json(cfg_json);

  const json status = read_json_file(dir / "run_status.json", json::object());
  if (!status.empty()) {
    const json old_cfg = read_json_file(dir / "config.json", json::object());
    const bool complete = status.value("complete", false);
    if (!complete && status.value("config_hash", "") != cfg_hash && !options.force) {
      std::string msg = "refusing to continue partial run in " + dir.string() + " with a changed configuration:";
      for (const auto& d : json_diff(old_cfg, cfg_json)) msg += "\n  " + d;
      throw ConfigError(msg);
    }
  }
  write_text(dir / "config.json", cfg_json.dump(2) + "\n");
  write_text(dir / "run_status.json", json{{"complete", false}, {"config_hash", cfg_hash}}.dump(2) + "\n");

  PipelineResult result;
  result.run_dir = dir;
  StageBook book(dir, options);
  Context ctx{config, dir, book, {}, {}, {}, {}, {}, {}, {}, {}};
  const auto dopt = dataset_options(config, dir);
  ctx.train = data::load_dataset(config.dataset, data::Split::kTrain, config.data_seed, dopt).examples;
  ctx.test = data::load_dataset(config.dataset, data::Split::kTest, config.data_seed, dopt).examples;

  if (config.needs_diffusion()) {
    ctx.diffusion_hash = hash_json({{"data", data_key(config)}, {"diffusion", config.diffusion.to_json()}});
    book.run("diffusion", ctx.diffusion_hash, [&] {
      fs::create_directories(dir / "diffusion");
      ctx.dm = diffusion::train_diffusion(ctx.train, config.diffusion);
      ctx.dm->save(dir / "diffusion" / "model.dra");
    }, result);
  }
  if (config.needs_synthetic()) {
    ctx.synth_hash = hash_json({{"diffusion", ctx.diffusion_hash}, {"synthetic", config.synthetic.to_json()}});
    book.run("synthetic", ctx.synth_hash, [&] {
      const auto info = data::build_synthetic_pool(ctx.diffusion_model(), config.synthetic.count, config.synthetic.class_balanced,
                                                   config.synthetic.seed, dir / "synthetic" / "pool.dra");
      ctx.pool = info.load();
    }, result);
  }
  const bool any_dra = std::any_of(config.arms.begin(), config.arms.end(), arm_uses_dra) ||
                       (config.sweep.enabled && arm_uses_dra(config.sweep.arm));
  if (any_dra && config.dra_target == "noisy-discriminative") {
    ctx.pretrain_hash = hash_json({{"data", data_key(config)}, {"pretrain", config.pretrain.to_json()},
                                   {"unet", config.diffusion.unet.to_json()}, {"schedule", config.diffusion.schedule.to_json()}});
    book.run("pretrain", ctx.pretrain_hash, [&] {
      ctx.noisy = robust::noisy_discriminative_pretrain(config.diffusion.unet, ctx.train, config.diffusion.schedule, config.pretrain);
      fs::create_directories(dir / "pretrain");
      ctx.noisy->to_archive().save(dir / "pretrain" / "noisy_encoder.dra");
    }, result);
  }

  Ledger results(dir / "results.jsonl");
  Ledger analyses(dir / "analysis.jsonl");
  for (const auto& arm : config.arms) {
    for (std::uint64_t seed : config.seeds) {
      robust::TrainRecipe recipe = config.recipe;
      recipe.seed = seed;
      const std::string cell = arm + "/" + seed_tag(seed);
      const fs::path ck_path = dir / "checkpoints" / (arm_file(arm) + "_" + seed_tag(seed) + ".dra");
      const std::string th = hash_json(train_key(config, ctx, arm, recipe));
      std::optional<robust::RobustCheckpoint> ck;
      book.run("train/" + cell, th, [&] {
        ck = train_cell(ctx, arm, recipe);
        fs::create_directories(ck_path.parent_path());
        ck->save(ck_path);
      }, result);
      auto checkpoint = [&]() -> const robust::RobustCheckpoint& {
        book.require("train/" + cell);
        if (!ck) ck = robust::RobustCheckpoint::load(ck_path);
        return *ck;
      };
      const std::string eh = hash_json({{"train", th}, {"eval", config.eval.to_json()}});
      book.run("eval/" + cell, eh, [&] {
        const auto& c = checkpoint();
        const auto ev = evaluate_cell(ctx, c.evaluated_model(config.eval.weights == "ema"));
        results.append(result_row(ctx, eh, arm, seed, c, ev));
      }, result);
      if (config.analysis.enabled) {
        const std::string ah = hash_json({{"train", th}, {"analysis", config.analysis.to_json()},
                                          {"epsilon", config.eval.epsilon}, {"eval_seed", config.eval.seed},
                                          {"weights", config.eval.weights}, {"diffusion", ctx.diffusion_hash}});
        book.run("analysis/" + cell, ah, [&] { analyses.append(analysis_record(ctx, ah, arm, seed, checkpoint())); }, result);
      }
    }
  }

  if (config.sweep.enabled) {
    Ledger sweep(dir / "sweep.jsonl");
    for (double lambda : config.sweep.lambdas) {
      for (std::uint64_t seed : config.seeds) {
        robust::TrainRecipe recipe = config.recipe;
        recipe.seed = seed;
        recipe.lambda = lambda;
        const std::string th = hash_json(train_key(config, ctx, config.sweep.arm, recipe));
        const std::string sh = hash_json({{"train", th}, {"eval", config.eval.to_json()}});
        book.run("sweep/lambda=" + lambda_tag(lambda) + "/" + seed_tag(seed), sh, [&] {
          const auto ck = train_cell(ctx, config.sweep.arm, recipe);
          const auto ev = evaluate_cell(ctx, ck.evaluated_model(config.eval.weights == "ema"));
          json row = result_row(ctx, sh, config.sweep.arm, seed, ck, ev);
          sweep.append(row);
        }, result);
      }
    }
  }

  json stage_list = json::array();
  bool complete = true;
  for (const auto& e : result.events) {
    if (e.pending) {
      complete = false;
      continue;
    }
    stage_list.push_back({{"stage", e.stage}, {"hash", e.hash}});
  }
  write_text(dir / "run_status.json",
             json{{"complete", complete}, {"config_hash", cfg_hash}, {"current_stages", stage_list}}.dump(2) + "\n");
  return result;
}

namespace {

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string base_method(const std::string& method) {
  const std::string suffix = "+DRA";
  if (method.size() > suffix.size() && method.compare(method.size() - suffix.size(), suffix.size(), suffix) == 0) {
    return method.substr(0, method.size() - suffix.size());
  }
  return {};
}

std::map<std::string, std::map<std::string, double>> desk_medians(const std::vector<json>& rows,
                                                                  const std::vector<std::string>& fields) {
  std::map<std::string, std::map<std::string, std::vector<double>>> acc;
  for (const auto& r : rows) {
    for (const auto& f : fields) {
      const json* node = &r;
      std::stringstream ss(f);
      std::string part;
      bool ok = true;
      while (std::getline(ss, part, '.')) {
        if (!node->is_object() || !node->contains(part)) {
          ok = false;
          break;
        }
        node = &node->at(part);
      }
      if (ok && node->is_number()) acc[r.value("arm", "")][f].push_back(node->get<double>());
    }
  }
  std::map<std::string, std::map<std::string, double>> out;
  for (const auto& [arm, m] : acc)
    for (const auto& [f, v] : m) out[arm][f] = median(v);
  return out;
}

}  // namespace

json ComparisonTable::to_json() const {
  json j = {{"table_id", table_id}, {"warnings", warnings},
            {"desk_scale_note", "desk-scale results are NOT comparable in magnitude to the published numbers"}};
  j["rows"] = json::array();
  for (const auto& r : rows) {
    json row = {{"keys", r.keys}, {"reference", r.reference}, {"desk", r.desk}, {"note", r.note}};
    row["reference_dra_improves"] = r.reference_dra_improves ? json(*r.reference_dra_improves) : json(nullptr);
    row["desk_dra_improves"] = r.desk_dra_improves ? json(*r.desk_dra_improves) : json(nullptr);
    j["rows"].push_back(row);
  }
  return j;
}

std::string ComparisonTable::to_csv() const {
  std::vector<json> flat;
  for (const auto& r : rows) {
    json row = {{"table_id", r.table_id}, {"note", r.note}, {"desk_comparable_in_magnitude", false}};
    for (const auto& [k, v] : r.keys) row[k] = v;
    for (const auto& [k, v] : r.reference) row["reference_" + k] = v;
    for (const auto& [k, v] : r.desk) row["desk_" + k] = v;
    row["reference_dra_improves"] = r.reference_dra_improves ? json(*r.reference_dra_improves ? "yes" : "no") : json("");
    row["desk_dra_improves"] = r.desk_dra_improves ? json(*r.desk_dra_improves ? "yes" : "no") : json("");
    flat.push_back(row);
  }
  return pipeline::to_csv(flat);
}

ComparisonTable compare_to_reference(const std::vector<json>& results, const std::vector<json>& analyses,
                                     const report::ReferenceFixture& fixture) {
  ComparisonTable t;
  t.table_id = fixture.table_id;
  const bool dims = !fixture.dimension_rows.empty();
  const auto& ledger = dims ? analyses : results;
  if (ledger.empty()) t.warnings.push_back("empty ledger: fixture columns only");
  const auto desk = dims ? desk_medians(ledger, {"cls_dim.cls95", "cls_dim.cls99", "cls_dim.robust_dim"})
                         : desk_medians(ledger, {"clean", "robust"});
  std::set<std::string> fixture_methods;

  if (dims) {
    for (const auto& f : fixture.dimension_rows) {
      ComparisonRow r;
      r.table_id = fixture.table_id;
      r.keys = {{"method", f.method}};
      r.reference = {{"cls95", f.cls95}, {"cls99", f.cls99}, {"robust_dim", f.robust_dim}};
      if (auto it = desk.find(f.method); it != desk.end()) {
        for (const auto& [k, v] : it->second) r.desk[k.substr(k.find('.') + 1)] = v;
      } else {
        r.note = "no desk-scale run for this method";
      }
      fixture_methods.insert(f.method);
      t.rows.push_back(r);
    }
  } else {
    for (const auto& f : fixture.accuracy_rows) {
      ComparisonRow r;
      r.table_id = fixture.table_id;
      r.keys = {{"dataset", f.dataset}, {"model", f.model}, {"method", f.method}, {"synthetic", f.synthetic}};
      r.reference = {{"clean", f.clean}, {"robust", f.robust}};
      if (auto it = desk.find(f.method); it != desk.end()) {
        r.desk = {{"clean", it->second.at("clean")}, {"robust", it->second.at("robust")}};
      } else {
        r.note = "no desk-scale run for this method";
      }
      const std::string base = base_method(f.method);
      if (!base.empty()) {
        for (const auto& g : fixture.accuracy_rows) {
          if (g.dataset == f.dataset && g.model == f.model && g.method == base) {
            r.reference_dra_improves = f.robust > g.robust;
          }
        }
        auto a = desk.find(f.method), b = desk.find(base);
        if (a != desk.end() && b != desk.end()) r.desk_dra_improves = a->second.at("robust") >= b->second.at("robust");
      }
      fixture_methods.insert(f.method);
      t.rows.push_back(r);
    }
  }
  for (const auto& [arm, v] : desk) {
    if (!fixture_methods.count(arm)) {
      ComparisonRow w;
      w.table_id = fixture.table_id;
      w.keys = {{"method", arm}};
      w.desk = v;
      w.note = "warning: desk arm has no fixture counterpart";
      t.warnings.push_back("unmapped method '" + arm + "'");
      t.rows.push_back(w);
    }
  }
  return t;
}

void write_pgm(const fs::path& path, const Tensor& map, bool signed_map) {
  if (map.rank() != 2) throw ArgumentError("write_pgm expects a 2D map");
  const int h = map.dim(0), w = map.dim(1);
  double scale = 0.0;
  for (double v : map.values()) scale = std::max(scale, std::abs(v));
  std::string bytes = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : map.values()) {
    double g = 0.0;
    if (scale > 0.0) g = signed_map ? 127.5 + 127.5 * v / scale : 255.0 * v / scale;
    bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(std::lround(g), 0L, 255L))));
  }
  write_text(path, bytes);
}

namespace {

std::string map_csv(const Tensor& map) {
  std::ostringstream out;
  for (int i = 0; i < map.dim(0); ++i) {
    for (int j = 0; j < map.dim(1); ++j) out << (j ? "," : "") << json(map.at(i, j)).dump();
    out << '\n';
  }
  return out.str();
}

// Rows whose row_id is among the stages recorded as current, latest first wins.
std::vector<json> current_rows(const std::vector<json>& rows, const std::set<std::string>& current) {
  std::map<std::pair<std::string, std::uint64_t>, json> latest;
  std::vector<std::pair<std::string, std::uint64_t>> order;
  for (const auto& r : rows) {
    if (!current.empty() && !current.count(r.value("row_id", ""))) continue;
    auto key = std::make_pair(r.value("arm", "") + "|" + json(r.value("lambda", 0.0)).dump(), r.value("seed", std::uint64_t{0}));
    if (!latest.count(key)) order.push_back(key);
    latest[key] = r;
  }
  std::vector<json> out;
  for (const auto& k : order) out.push_back(latest[k]);
  std::stable_sort(out.begin(), out.end(), [](const json& a, const json& b) {
    auto rank = [](const json& r) {
      const auto& arms = arm_names();
      return std::find(arms.begin(), arms.end(), r.value("arm", "")) - arms.begin();
    };
    if (rank(a) != rank(b)) return rank(a) < rank(b);
    if (a.value("lambda", 0.0) != b.value("lambda", 0.0)) return a.value("lambda", 0.0) < b.value("lambda", 0.0);
    return a.value("seed", std::uint64_t{0}) < b.value("seed", std::uint64_t{0});
  });
  return out;
}

}  // namespace

ReportSummary emit_report(const fs::path& run_dir) {
  if (!fs::exists(run_dir / "config.json")) throw ConfigError("not a run directory: " + run_dir.string());
  ReportSummary s;
  const fs::path out = run_dir / "report";
  fs::remove_all(out);
  fs::create_directories(out);
  auto emit = [&](const std::string& rel, const std::string& text) {
    write_text(out / rel, text);
    s.files.push_back(out / rel);
  };

  const json stages = read_json_file(run_dir / "stages.json", json::object());
  const json status = read_json_file(run_dir / "run_status.json", json::object());
  std::set<std::string> current;
  if (status.contains("current_stages")) {
    for (const auto& e : status.at("current_stages")) current.insert(e.at("hash").get<std::string>());
  }
  const auto results = current_rows(Ledger(run_dir / "results.jsonl").rows(), current);
  const auto analyses = current_rows(Ledger(run_dir / "analysis.jsonl").rows(), current);
  const auto sweep = current_rows(Ledger(run_dir / "sweep.jsonl").rows(), current);

  if (results.empty()) {
    s.notices.push_back("results: no result rows; section omitted");
  } else {
    emit("results.csv", to_csv(results));
    emit("results.json", json(results).dump(2) + "\n");
  }

  json comparisons = json::array();
  for (const auto* f : report::all_fixtures()) {
    const auto table = compare_to_reference(results, analyses, *f);
    emit("comparison_" + f->table_id + ".csv", table.to_csv());
    comparisons.push_back(table.to_json());
  }
  emit("comparison.json", comparisons.dump(2) + "\n");

  if (analyses.empty()) {
    s.notices.push_back("analysis: no analysis records; scatter, classification-dimension, SAE and frequency sections omitted");
  } else {
    std::vector<json> scatter, dims, sae;
    for (const auto& a : analyses) {
      json row = {{"arm", a.at("arm")}, {"seed", a.at("seed")}, {"analysis_row_id", a.at("row_id")},
                  {"alignment", a.at("alignment")}, {"uniformity", a.at("uniformity")}};
      for (const auto& r : results) {
        if (r.at("arm") == a.at("arm") && r.at("seed") == a.at("seed")) {
          row["clean"] = r.at("clean");
          row["robust"] = r.at("robust");
          row["results_row_id"] = r.at("row_id");
        }
      }
      scatter.push_back(row);
      const auto& cd = a.at("cls_dim");
      dims.push_back({{"arm", a.at("arm")}, {"seed", a.at("seed")}, {"analysis_row_id", a.at("row_id")},
                      {"cls95", cd.at("cls95")}, {"cls99", cd.at("cls99")}, {"robust_dim", cd.at("robust_dim")},
                      {"full_accuracy", cd.at("full_accuracy")}, {"covariance_rank", cd.at("covariance_rank")}});
      json srow = {{"arm", a.at("arm")}, {"seed", a.at("seed")}, {"analysis_row_id", a.at("row_id")}};
      for (const auto& [k, v] : a.at("sae_normalized_loss").items()) srow["K=" + k] = v;
      sae.push_back(srow);
    }
    emit("scatter.csv", to_csv(scatter));
    emit("scatter.json", json(scatter).dump(2) + "\n");
    emit("cls_dim.csv", to_csv(dims));
    emit("sae.csv", to_csv(sae));

    // Frequency maps: per arm (mean over seeds) and DRA-minus-baseline differences.
    std::map<std::string, std::vector<Tensor>> maps;
    for (const auto& a : analyses) {
      const fs::path p = run_dir / a.at("frequency_map").get<std::string>();
      if (!fs::exists(p)) {
        s.notices.push_back("frequency: missing map " + p.string());
        continue;
      }
      maps[a.at("arm").get<std::string>()].push_back(TensorArchive::load(p).get("map"));
    }
    std::map<std::string, Tensor> mean_map;
    for (const auto& [arm, v] : maps) {
      Tensor m = Tensor::zeros_like(v.front());
      for (const auto& t : v)
        for (std::size_t i = 0; i < m.size(); ++i) m[i] += t[i] / v.size();
      mean_map[arm] = m;
      write_pgm(out / "frequency" / ("saliency_" + arm_file(arm) + ".pgm"), m, false);
      s.files.push_back(out / "frequency" / ("saliency_" + arm_file(arm) + ".pgm"));
      emit("frequency/saliency_" + arm_file(arm) + ".csv", map_csv(m));
    }
    for (const auto& arm : arm_names()) {
      const std::string base = base_method(arm);
      if (base.empty() || !mean_map.count(arm) || !mean_map.count(base)) continue;
      Tensor d = mean_map[arm];
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= mean_map[base][i];
      const std::string stem = "frequency/diff_" + arm_file(arm) + "_vs_" + arm_file(base);
      write_pgm(out / (stem + ".pgm"), d, true);
      s.files.push_back(out / (stem + ".pgm"));
      emit(stem + ".csv", map_csv(d));
    }
  }

  if (sweep.empty()) {
    s.notices.push_back("lambda-sweep: no sweep rows; section omitted");
  } else {
    std::map<double, std::vector<const json*>> by_lambda;
    for (const auto& r : sweep) by_lambda[r.at("lambda").get<double>()].push_back(&r);
    std::vector<json> curve;
    for (const auto& [l, rows] : by_lambda) {
      std::vector<double> c, r;
      json ids = json::array();
      for (const auto* row : rows) {
        c.push_back(row->at("clean"));
        r.push_back(row->at("robust"));
        ids.push_back(row->at("row_id"));
      }
      curve.push_back({{"lambda", l}, {"clean", median(c)}, {"robust", median(r)}, {"seeds", rows.size()}, {"row_ids", ids}});
    }
    emit("lambda_sweep.csv", to_csv(curve));
    emit("lambda_sweep.json", json(curve).dump(2) + "\n");
    emit("lambda_sweep_rows.csv", to_csv(sweep));
  }

  json index = {{"notices", s.notices}, {"stages", stages}};
  json files = json::array();
  for (auto& f : s.files) files.push_back(fs::relative(f, out).generic_string());
  std::sort(files.begin(), files.end());
  index["files"] = files;
  emit("index.json", index.dump(2) + "\n");
  return s;
}

}  // namespace dra::pipeline
