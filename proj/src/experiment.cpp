#include "rft/experiment.hpp"

#include <charconv>
#include <fstream>
#include <initializer_list>
#include <sstream>
#include <utility>

#include <json.hpp>

#include "rft/dataset.hpp"
#include "rft/errors.hpp"
#include "rft/eval.hpp"

namespace rft {

namespace {

using nlohmann::json;

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& ctx) {
  for (auto it = obj.begin(); it != obj.end(); ++it) {
    bool known = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        known = true;
        break;
      }
    }
    if (!known) {
      throw ConfigError("unknown key \"" + it.key() + "\" in " + ctx);
    }
  }
}

const json& need(const json& obj, const char* key, const std::string& ctx) {
  auto it = obj.find(key);
  if (it == obj.end()) {
    throw ConfigError("missing key \"" + std::string(key) + "\" in " + ctx);
  }
  return *it;
}

std::string fstr(float v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

// Emits the float's shortest decimal form as a JSON number, so snapshots
// stay readable and reload to the identical value.
json float_num(float v) { return json::parse(fstr(v)); }

std::pair<float, float> dataset_scale(const std::string& name) {
  if (name == "mnist") return {0.0f, 1.0f};
  if (name == "cifar10") return {0.0f, 255.0f};
  throw ConfigError("dataset must be \"mnist\" or \"cifar10\", got \"" + name +
                    "\"");
}

AttackConfig parse_attack(const json& j, AttackConfig base,
                          const std::string& ctx) {
  check_keys(j, {"epsilon", "step_size", "steps"}, ctx);
  AttackConfig a = base;
  const bool has_eps = j.contains("epsilon");
  if (has_eps) a.epsilon = j["epsilon"].get<float>();
  if (j.contains("steps")) a.steps = j["steps"].get<int>();
  if (j.contains("step_size")) {
    a.step_size = j["step_size"].get<float>();
  } else if (has_eps && a.steps == 1) {
    // a single-step attack walks the whole budget
    a.step_size = a.epsilon;
  }
  return a;
}

json attack_json(const AttackConfig& a) {
  json j;
  j["epsilon"] = float_num(a.epsilon);
  j["step_size"] = float_num(a.step_size);
  j["steps"] = a.steps;
  return j;
}

void check_units(const AttackConfig& a, float lo, float hi,
                 const std::string& dataset, const std::string& ctx) {
  const float range = hi - lo;
  if (a.epsilon > range) {
    throw ConfigError(ctx + ": epsilon " + fstr(a.epsilon) + " exceeds the " +
                      dataset + " input range " + fstr(range));
  }
  if (a.step_size > range) {
    throw ConfigError(ctx + ": step_size " + fstr(a.step_size) +
                      " exceeds the " + dataset + " input range " +
                      fstr(range));
  }
}

ExperimentConfig parse_config(const json& j, const std::string& base_dir) {
  check_keys(j,
             {"schema_version", "name", "label", "dataset", "subset",
              "network", "objective", "train", "eval_attacks", "out_dir",
              "seed"},
             "experiment config");
  if (need(j, "schema_version", "experiment config").get<int>() != 1) {
    throw ConfigError("unsupported experiment config schema_version");
  }

  ExperimentConfig cfg;
  cfg.name = need(j, "name", "experiment config").get<std::string>();

  const json& ds = need(j, "dataset", "experiment config");
  check_keys(ds, {"name", "dir"}, "dataset");
  cfg.dataset_name = need(ds, "name", "dataset").get<std::string>();
  const auto [lo, hi] = dataset_scale(cfg.dataset_name);
  cfg.dataset_dir = need(ds, "dir", "dataset").get<std::string>();

  const json& net = need(j, "network", "experiment config");
  if (net.is_string()) {
    std::string path = net.get<std::string>();
    if (!path.empty() && path[0] != '/' && !base_dir.empty()) {
      path = base_dir + "/" + path;
    }
    std::ifstream f(path);
    if (!f) throw ConfigError("network spec file not found: " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    cfg.network = NetworkSpec::from_json_text(ss.str());
  } else if (net.is_object()) {
    cfg.network = NetworkSpec::from_json_text(net.dump());
  } else {
    throw ConfigError(
        "\"network\" must be a spec file path or an inline spec object");
  }

  DatasetHandle probe;
  probe.name = cfg.dataset_name;
  probe.clip_min = lo;
  probe.clip_max = hi;

  const json& obj = need(j, "objective", "experiment config");
  check_keys(obj, {"kind", "alpha", "betas", "attack"}, "objective");
  cfg.objective.kind =
      objective_kind_from_name(need(obj, "kind", "objective").get<std::string>());
  if (cfg.objective.kind == ObjectiveKind::kStandard) {
    for (const char* k : {"alpha", "betas", "attack"}) {
      if (obj.contains(k)) {
        throw ConfigError("objective: \"" + std::string(k) +
                          "\" has no effect with kind \"standard\"");
      }
    }
  } else {
    const bool regularized =
        cfg.objective.kind == ObjectiveKind::kDistortionRegularized;
    if (!regularized && obj.contains("betas")) {
      throw ConfigError(
          "objective: \"betas\" requires kind \"distortion-regularized\"");
    }
    cfg.objective.alpha = obj.value("alpha", cfg.objective.alpha);
    cfg.objective.attack = default_fgsm_attack(probe);
    if (obj.contains("attack")) {
      cfg.objective.attack =
          parse_attack(obj["attack"], cfg.objective.attack, "objective.attack");
    }
    if (regularized) {
      const json& betas = need(obj, "betas", "objective");
      if (!betas.is_array()) {
        throw ConfigError("objective: \"betas\" must be an array");
      }
      for (const auto& b : betas) {
        cfg.objective.betas.push_back(b.get<float>());
      }
    }
  }

  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(
        t,
        {"epochs", "batch_size", "learning_rate", "momentum", "checkpoint_every"},
        "train");
    cfg.train.epochs = t.value("epochs", cfg.train.epochs);
    cfg.train.batch_size = t.value("batch_size", cfg.train.batch_size);
    cfg.train.learning_rate = t.value("learning_rate", cfg.train.learning_rate);
    cfg.train.momentum = t.value("momentum", cfg.train.momentum);
    cfg.train.checkpoint_every =
        t.value("checkpoint_every", cfg.train.checkpoint_every);
  }

  cfg.eval_fgsm = default_fgsm_attack(probe);
  cfg.eval_pgd = default_pgd_attack(probe);
  if (j.contains("eval_attacks")) {
    const json& ea = j["eval_attacks"];
    check_keys(ea, {"fgsm", "pgd"}, "eval_attacks");
    if (ea.contains("fgsm")) {
      cfg.eval_fgsm = parse_attack(ea["fgsm"], cfg.eval_fgsm, "eval_attacks.fgsm");
    }
    if (ea.contains("pgd")) {
      cfg.eval_pgd = parse_attack(ea["pgd"], cfg.eval_pgd, "eval_attacks.pgd");
    }
  }

  cfg.label = j.value("label", std::string());
  if (cfg.label.empty()) {
    switch (cfg.objective.kind) {
      case ObjectiveKind::kStandard:
        cfg.label = "standard";
        break;
      case ObjectiveKind::kAdversarial:
        cfg.label = "adversarial";
        break;
      case ObjectiveKind::kDistortionRegularized:
        cfg.label = "ours";
        break;
    }
  }
  cfg.subset = j.value("subset", 0);
  cfg.out_dir = j.value("out_dir", "runs/" + cfg.name);
  cfg.seed = j.value("seed", std::uint64_t{1});
  cfg.train.seed = cfg.seed;
  cfg.train.checkpoint_dir = cfg.out_dir;

  cfg.validate();
  return cfg;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text,
                                                  const std::string& base_dir) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("experiment config is not valid JSON: ") +
                      e.what());
  }
  if (!j.is_object()) {
    throw ConfigError("experiment config must be a JSON object");
  }
  try {
    return parse_config(j, base_dir);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open experiment config " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  std::string dir = ".";
  const auto slash = path.find_last_of('/');
  if (slash != std::string::npos) dir = path.substr(0, slash);
  return from_json_text(ss.str(), dir);
}

void ExperimentConfig::validate() const {
  if (name.empty()) throw ConfigError("experiment config needs a name");
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
  if (subset < 0) {
    throw ConfigError("subset must be non-negative, got " +
                      std::to_string(subset));
  }
  const auto [lo, hi] = dataset_scale(dataset_name);
  network.validate();
  objective.validate(network.normalization_layer_count());
  train.validate();
  eval_fgsm.validate();
  eval_pgd.validate();
  if (objective.kind != ObjectiveKind::kStandard) {
    check_units(objective.attack, lo, hi, dataset_name, "objective.attack");
  }
  check_units(eval_fgsm, lo, hi, dataset_name, "eval_attacks.fgsm");
  check_units(eval_pgd, lo, hi, dataset_name, "eval_attacks.pgd");
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  j["schema_version"] = 1;
  j["name"] = name;
  j["label"] = label;
  j["dataset"] = {{"name", dataset_name}, {"dir", dataset_dir}};
  j["subset"] = subset;
  j["network"] = json::parse(network.to_json_text());

  json obj;
  obj["kind"] = objective_kind_name(objective.kind);
  if (objective.kind != ObjectiveKind::kStandard) {
    obj["alpha"] = float_num(objective.alpha);
    obj["attack"] = attack_json(objective.attack);
    if (objective.kind == ObjectiveKind::kDistortionRegularized) {
      json betas = json::array();
      for (float b : objective.betas) betas.push_back(float_num(b));
      obj["betas"] = betas;
    }
  }
  j["objective"] = obj;

  j["train"] = {{"epochs", train.epochs},
                {"batch_size", train.batch_size},
                {"learning_rate", float_num(train.learning_rate)},
                {"momentum", float_num(train.momentum)},
                {"checkpoint_every", train.checkpoint_every}};
  j["eval_attacks"] = {{"fgsm", attack_json(eval_fgsm)},
                       {"pgd", attack_json(eval_pgd)}};
  j["out_dir"] = out_dir;
  j["seed"] = seed;
  return j.dump(2) + "\n";
}

}  // namespace rft
