#include "advtrain/config.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "advtrain/errors.hpp"

namespace advtrain {

using nlohmann::json;

namespace {

const std::vector<std::pair<Method, std::string>>& method_table() {
  static const std::vector<std::pair<Method, std::string>> table = {
      {Method::AT, "AT"},
      {Method::AT_TE, "AT_TE"},
      {Method::MLCAT_WP, "MLCAT_WP"},
      {Method::MLCAT_WP_TE, "MLCAT_WP_TE"},
      {Method::AT_TE_XEC, "AT_TE_XEC"},
      {Method::MLCAT_WP_XEC, "MLCAT_WP_XEC"},
      {Method::AT_TE_BS, "AT_TE_BS"},
      {Method::MLCAT_WP_TE_BS, "MLCAT_WP_TE_BS"},
      {Method::AT_TE_CS, "AT_TE_CS"},
      {Method::MLCAT_WP_TE_CS, "MLCAT_WP_TE_CS"},
      {Method::MLCAT_WP_XE_BS, "MLCAT_WP_XE_BS"},
  };
  return table;
}

}  // namespace

Method parse_method(const std::string& name) {
  for (auto& [m, n] : method_table())
    if (n == name) return m;
  throw ConfigError("unknown method: " + name);
}

std::string method_name(Method m) {
  for (auto& [mm, n] : method_table())
    if (mm == m) return n;
  return "?";
}

const std::vector<Method>& all_methods() {
  static const std::vector<Method> ms = [] {
    std::vector<Method> v;
    for (auto& [m, n] : method_table()) v.push_back(m);
    return v;
  }();
  return ms;
}

bool method_uses_te(Method m) {
  switch (m) {
    case Method::AT_TE:
    case Method::MLCAT_WP_TE:
    case Method::AT_TE_XEC:
    case Method::AT_TE_BS:
    case Method::MLCAT_WP_TE_BS:
    case Method::AT_TE_CS:
    case Method::MLCAT_WP_TE_CS:
      return true;
    default:
      return false;
  }
}

bool method_uses_wp(Method m) {
  switch (m) {
    case Method::MLCAT_WP:
    case Method::MLCAT_WP_TE:
    case Method::MLCAT_WP_XEC:
    case Method::MLCAT_WP_TE_BS:
    case Method::MLCAT_WP_TE_CS:
    case Method::MLCAT_WP_XE_BS:
      return true;
    default:
      return false;
  }
}

bool method_uses_helper(Method m) {
  return m == Method::AT_TE_BS || m == Method::MLCAT_WP_TE_BS || m == Method::MLCAT_WP_XE_BS;
}

bool method_uses_clean(Method m) {
  return m == Method::AT_TE_XEC || m == Method::MLCAT_WP_XEC || m == Method::AT_TE_CS ||
         m == Method::MLCAT_WP_TE_CS;
}

bool method_uses_boundary_track(Method m) {
  return m == Method::AT_TE_BS || m == Method::MLCAT_WP_TE_BS;
}

void MethodSpec::validate() const {
  attack.validate();
  if (method_uses_te(method) && !te.has_value())
    throw ConfigError(method_name(method) + " requires a te section");
  if (method_uses_wp(method) && !wp.has_value())
    throw ConfigError(method_name(method) + " requires a wp section");
  if (wp) wp->validate();
  if (method_uses_helper(method) && !attack.capture_boundary)
    throw ConfigError(method_name(method) + " requires attack.capture_boundary = true");
  if (!method_uses_helper(method) && attack.capture_boundary)
    throw ConfigError(method_name(method) + " requires attack.capture_boundary = false");
}

float lr_at(const LrSchedule& schedule, int epoch) {
  if (epoch < 1) throw UsageError("epochs are 1-indexed");
  float lr = schedule.base_lr;
  for (int d : schedule.decay_epochs)
    if (epoch >= d) lr *= schedule.decay_factor;
  return lr;
}

void ExperimentConfig::validate() const {
  method.validate();
  eval_attack.validate();
  if (epochs < 0 || batch_size < 1) throw ConfigError("bad epochs/batch_size");
  if (selection_metric != "robust" && selection_metric != "clean")
    throw ConfigError("selection_metric must be robust or clean");
  if (!(bucket_lo < bucket_hi)) throw ConfigError("loss_bucket requires lo < hi");
  if (architecture != "resnet18" && architecture != "small_cnn")
    throw ConfigError("unknown architecture tag: " + architecture);
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
}

namespace {

void check_keys(const json& obj, const std::string& section,
                const std::set<std::string>& allowed) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown config key: " + (section.empty() ? it.key() : section + "." + it.key()));
}

AttackSpec parse_attack(const json& j, const std::string& section, bool allow_capture) {
  std::set<std::string> keys = {"epsilon", "step_size", "steps", "norm", "random_start"};
  if (allow_capture) {
    keys.insert("capture_boundary");
    keys.insert("attack_loss");
  }
  check_keys(j, section, keys);
  AttackSpec a;
  if (j.contains("epsilon")) a.epsilon = j["epsilon"].get<float>();
  if (j.contains("step_size")) a.step_size = j["step_size"].get<float>();
  if (j.contains("steps")) a.steps = j["steps"].get<int>();
  if (j.contains("norm")) a.norm = j["norm"].get<std::string>();
  if (j.contains("random_start")) a.random_start = j["random_start"].get<bool>();
  if (allow_capture && j.contains("capture_boundary"))
    a.capture_boundary = j["capture_boundary"].get<bool>();
  return a;
}

json attack_to_json(const AttackSpec& a, bool with_capture) {
  json j;
  j["epsilon"] = a.epsilon;
  j["step_size"] = a.step_size;
  j["steps"] = a.steps;
  j["norm"] = a.norm;
  j["random_start"] = a.random_start;
  if (with_capture) j["capture_boundary"] = a.capture_boundary;
  return j;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j, "", {"dataset", "model", "method", "attack", "eval_attack", "te", "wp", "optim",
                     "train"});
  ExperimentConfig c;

  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    check_keys(d, "dataset",
               {"name", "root", "augmentation", "n_train", "n_test", "classes", "channels",
                "height", "width", "blob_scale", "noise_std", "label_noise", "gen_seed"});
    c.dataset.name = d.at("name").get<std::string>();
    if (d.contains("root")) c.dataset.root = d["root"].get<std::string>();
    if (d.contains("augmentation")) c.dataset.augmentation = d["augmentation"].get<std::string>();
    if (d.contains("n_train")) c.dataset.n_train = d["n_train"].get<int64_t>();
    if (d.contains("n_test")) c.dataset.n_test = d["n_test"].get<int64_t>();
    if (d.contains("classes")) c.dataset.classes = d["classes"].get<int>();
    if (d.contains("channels")) c.dataset.channels = d["channels"].get<int>();
    if (d.contains("height")) c.dataset.height = d["height"].get<int>();
    if (d.contains("width")) c.dataset.width = d["width"].get<int>();
    if (d.contains("blob_scale")) c.dataset.blob_scale = d["blob_scale"].get<float>();
    if (d.contains("noise_std")) c.dataset.noise_std = d["noise_std"].get<float>();
    if (d.contains("label_noise")) c.dataset.label_noise = d["label_noise"].get<float>();
    if (d.contains("gen_seed")) c.dataset.gen_seed = d["gen_seed"].get<uint64_t>();
  }
  if (c.dataset.name == "cifar100")
    c.classes = 100;
  else if (c.dataset.name == "synthetic")
    c.classes = c.dataset.classes;

  if (j.contains("model")) {
    const json& m = j["model"];
    check_keys(m, "model", {"architecture", "classes"});
    if (m.contains("architecture")) c.architecture = m["architecture"].get<std::string>();
    if (m.contains("classes")) c.classes = m["classes"].get<int64_t>();
  }

  if (j.contains("method")) c.method.method = parse_method(j["method"].get<std::string>());
  if (j.contains("attack")) {
    c.method.attack = parse_attack(j["attack"], "attack", true);
    if (j["attack"].contains("attack_loss")) {
      std::string mode = j["attack"]["attack_loss"].get<std::string>();
      if (mode == "cross_entropy_only")
        c.method.attack_loss = AttackObjective::Mode::cross_entropy_only;
      else if (mode == "composed")
        c.method.attack_loss = AttackObjective::Mode::composed;
      else
        throw ConfigError("unknown attack.attack_loss: " + mode);
    }
  }
  if (j.contains("eval_attack")) c.eval_attack = parse_attack(j["eval_attack"], "eval_attack", false);

  if (j.contains("te")) {
    const json& t = j["te"];
    check_keys(t, "te", {"weight", "activation_epoch", "ramp_length", "momentum"});
    RampSchedule r;
    if (t.contains("weight")) r.base_weight = t["weight"].get<float>();
    if (t.contains("activation_epoch")) r.activation_epoch = t["activation_epoch"].get<int>();
    if (t.contains("ramp_length")) r.ramp_length = t["ramp_length"].get<int>();
    if (t.contains("momentum")) r.te_momentum = t["momentum"].get<float>();
    c.method.te = r;
  }
  if (j.contains("wp")) {
    const json& w = j["wp"];
    check_keys(w, "wp", {"gamma", "lmin", "steps", "step_scale", "exclude"});
    WPSpec s;
    if (w.contains("gamma")) s.gamma = w["gamma"].get<float>();
    if (w.contains("lmin")) s.l_min = w["lmin"].get<float>();
    if (w.contains("steps")) s.steps = w["steps"].get<int>();
    if (w.contains("step_scale")) s.step_scale = w["step_scale"].get<float>();
    if (w.contains("exclude")) s.exclude = w["exclude"].get<std::vector<std::string>>();
    c.method.wp = s;
  }
  if (j.contains("optim")) {
    const json& o = j["optim"];
    check_keys(o, "optim", {"lr", "decay_epochs", "decay_factor", "momentum", "weight_decay"});
    if (o.contains("lr")) c.optim.schedule.base_lr = o["lr"].get<float>();
    if (o.contains("decay_epochs"))
      c.optim.schedule.decay_epochs = o["decay_epochs"].get<std::vector<int>>();
    if (o.contains("decay_factor")) c.optim.schedule.decay_factor = o["decay_factor"].get<float>();
    if (o.contains("momentum")) c.optim.momentum = o["momentum"].get<float>();
    if (o.contains("weight_decay")) c.optim.weight_decay = o["weight_decay"].get<float>();
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_keys(t, "train",
               {"epochs", "batch_size", "seed", "eval_every", "output_dir", "selection_metric",
                "loss_bucket", "dump_attacks", "separate_helper_pass", "resume",
                "full_diagnostics_pass"});
    if (t.contains("epochs")) c.epochs = t["epochs"].get<int>();
    if (t.contains("batch_size")) c.batch_size = t["batch_size"].get<int>();
    if (t.contains("seed")) c.seed = t["seed"].get<uint64_t>();
    if (t.contains("eval_every")) c.eval_every = t["eval_every"].get<int>();
    if (t.contains("output_dir")) c.output_dir = t["output_dir"].get<std::string>();
    if (t.contains("selection_metric")) c.selection_metric = t["selection_metric"].get<std::string>();
    if (t.contains("loss_bucket")) {
      c.bucket_lo = t["loss_bucket"].at(0).get<double>();
      c.bucket_hi = t["loss_bucket"].at(1).get<double>();
    }
    if (t.contains("dump_attacks")) c.dump_attacks = t["dump_attacks"].get<bool>();
    if (t.contains("separate_helper_pass"))
      c.separate_helper_pass = t["separate_helper_pass"].get<bool>();
    if (t.contains("resume")) c.resume = t["resume"].get<bool>();
    if (t.contains("full_diagnostics_pass"))
      c.full_diagnostics_pass = t["full_diagnostics_pass"].get<bool>();
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return from_json_text(ss.str());
}

std::string ExperimentConfig::to_json_text() const {
  json j;
  json d;
  d["name"] = dataset.name;
  d["root"] = dataset.root;
  if (!dataset.augmentation.empty()) d["augmentation"] = dataset.augmentation;
  if (dataset.name == "synthetic") {
    d["n_train"] = dataset.n_train;
    d["n_test"] = dataset.n_test;
    d["classes"] = dataset.classes;
    d["channels"] = dataset.channels;
    d["height"] = dataset.height;
    d["width"] = dataset.width;
    d["blob_scale"] = dataset.blob_scale;
    d["noise_std"] = dataset.noise_std;
    d["label_noise"] = dataset.label_noise;
    d["gen_seed"] = dataset.gen_seed;
  }
  j["dataset"] = d;
  j["model"] = {{"architecture", architecture}, {"classes", classes}};
  j["method"] = method_name(method.method);
  json a = attack_to_json(method.attack, true);
  a["attack_loss"] = method.attack_loss == AttackObjective::Mode::composed
                         ? "composed"
                         : "cross_entropy_only";
  j["attack"] = a;
  j["eval_attack"] = attack_to_json(eval_attack, false);
  if (method.te) {
    j["te"] = {{"weight", method.te->base_weight},
               {"activation_epoch", method.te->activation_epoch},
               {"ramp_length", method.te->ramp_length},
               {"momentum", method.te->te_momentum}};
  }
  if (method.wp) {
    j["wp"] = {{"gamma", method.wp->gamma},
               {"lmin", method.wp->l_min},
               {"steps", method.wp->steps},
               {"step_scale", method.wp->step_scale},
               {"exclude", method.wp->exclude}};
  }
  j["optim"] = {{"lr", optim.schedule.base_lr},
                {"decay_epochs", optim.schedule.decay_epochs},
                {"decay_factor", optim.schedule.decay_factor},
                {"momentum", optim.momentum},
                {"weight_decay", optim.weight_decay}};
  j["train"] = {{"epochs", epochs},
                {"batch_size", batch_size},
                {"seed", seed},
                {"eval_every", eval_every},
                {"output_dir", output_dir},
                {"selection_metric", selection_metric},
                {"loss_bucket", {bucket_lo, bucket_hi}},
                {"dump_attacks", dump_attacks},
                {"separate_helper_pass", separate_helper_pass},
                {"resume", resume},
                {"full_diagnostics_pass", full_diagnostics_pass}};
  return j.dump(2);
}

void ExperimentConfig::apply_override(const std::string& key_eq_value) {
  auto eq = key_eq_value.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override must look like section.key=value: " + key_eq_value);
  std::string path = key_eq_value.substr(0, eq);
  std::string value = key_eq_value.substr(eq + 1);
  json j = json::parse(to_json_text());
  json* node = &j;
  size_t start = 0;
  std::vector<std::string> parts;
  while (true) {
    size_t dot = path.find('.', start);
    parts.push_back(path.substr(start, dot == std::string::npos ? dot : dot - start));
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  for (size_t i = 0; i + 1 < parts.size(); ++i) node = &(*node)[parts[i]];
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare string
  }
  (*node)[parts.back()] = parsed;
  *this = from_json_text(j.dump());
}

}  // namespace advtrain
