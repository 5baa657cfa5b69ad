#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "rft/dataset.hpp"
#include "rft/errors.hpp"
#include "rft/eval.hpp"
#include "rft/experiment.hpp"
#include "rft/model.hpp"
#include "rft/ops.hpp"
#include "rft/tape.hpp"
#include "rft/training.hpp"

namespace fs = std::filesystem;
using namespace rft;

namespace {

std::string num_str(double v) {
  char buf[32];
  auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

nlohmann::json float_num(float v) {
  return nlohmann::json::parse(num_str(static_cast<double>(v)));
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw DataError("cannot open " + path + " for writing");
  f << text;
  if (!f) throw DataError("write failed for " + path);
}

std::string read_text(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

DatasetHandle load_split(const ExperimentConfig& cfg, const std::string& split) {
  if (!fs::exists(cfg.dataset_dir)) {
    throw ConfigError("dataset directory not found: " + cfg.dataset_dir);
  }
  DatasetHandle data = cfg.dataset_name == "mnist"
                           ? load_mnist(cfg.dataset_dir, split)
                           : load_cifar10(cfg.dataset_dir, split);
  if (cfg.subset > 0) {
    RngStream root(cfg.seed);
    auto rng = root.derive("subset");
    data = subset(data, cfg.subset, rng);
  }
  return data;
}

int argmax_row(const TensorPtr& logits) {
  auto d = logits->data();
  const int k = logits->shape().dim(1);
  int best = 0;
  for (int c = 1; c < k; ++c) {
    if (d[static_cast<std::size_t>(c)] > d[static_cast<std::size_t>(best)]) {
      best = c;
    }
  }
  return best;
}

struct CommonFlags {
  std::string config;
  std::string out;
  std::string data_dir;
  std::uint64_t seed = 0;
  int subset = -1;
  int epochs = 0;
  double eps = -1.0;
  double step_size = -1.0;
  int steps = 0;
};

ExperimentConfig resolve_config(const CommonFlags& f, const CLI::App* sub) {
  ExperimentConfig cfg = ExperimentConfig::load(f.config);
  if (sub->count("--out")) {
    cfg.out_dir = f.out;
    cfg.train.checkpoint_dir = f.out;
  }
  if (sub->count("--seed")) {
    cfg.seed = f.seed;
    cfg.train.seed = f.seed;
  }
  if (sub->count("--subset")) cfg.subset = f.subset;
  if (sub->count("--epochs")) cfg.train.epochs = f.epochs;
  if (sub->count("--data-dir")) cfg.dataset_dir = f.data_dir;
  if (sub->count("--eps")) {
    const float e = static_cast<float>(f.eps);
    cfg.eval_fgsm.epsilon = e;
    cfg.eval_fgsm.step_size = e;
    cfg.eval_pgd.epsilon = e;
  }
  if (sub->count("--steps")) cfg.eval_pgd.steps = f.steps;
  if (sub->count("--step-size")) {
    cfg.eval_pgd.step_size = static_cast<float>(f.step_size);
  }
  cfg.validate();
  return cfg;
}

std::string history_csv(const std::vector<MetricRecord>& history) {
  std::string out = "epoch,split,metric,value\n";
  for (const auto& r : history) {
    out += std::to_string(r.epoch) + "," + r.split + "," + r.metric + "," +
           num_str(r.value) + "\n";
  }
  return out;
}

int cmd_train(const CommonFlags& f, const CLI::App* sub) {
  ExperimentConfig cfg = resolve_config(f, sub);
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/config.json", cfg.to_json_text());

  DatasetHandle data = load_split(cfg, "train");
  std::cout << "training " << cfg.name << " on " << data.size() << " "
            << cfg.dataset_name << " examples" << std::endl;

  RngStream root(cfg.seed);
  auto init_rng = root.derive("model-init");
  Model model = Model::build(cfg.network, init_rng);

  auto sink = [](const MetricRecord& r) {
    std::cout << "[epoch " << r.epoch << "] " << r.split << " " << r.metric
              << " " << num_str(r.value) << std::endl;
  };
  auto history = train(model, data, cfg.objective, cfg.train, sink);

  write_text(cfg.out_dir + "/history.csv", history_csv(history));
  model.save_checkpoint(cfg.out_dir + "/model.ckpt",
                        {{"experiment", cfg.name},
                         {"objective", objective_kind_name(cfg.objective.kind)},
                         {"dataset", cfg.dataset_name},
                         {"seed", std::to_string(cfg.seed)},
                         {"epochs", std::to_string(cfg.train.epochs)}});
  std::cout << "wrote " << cfg.out_dir << "/model.ckpt, history.csv, "
            << "config.json" << std::endl;
  return 0;
}

int cmd_eval(const CommonFlags& f, const std::string& checkpoint,
             const CLI::App* sub) {
  ExperimentConfig cfg = resolve_config(f, sub);
  DatasetHandle data = load_split(cfg, "test");
  Model model = Model::load_checkpoint(cfg.network, checkpoint);

  auto accuracy = evaluate_accuracy(model, data, cfg.eval_fgsm, cfg.eval_pgd);
  auto distortion = evaluate_distortions(model, data, cfg.eval_pgd);
  auto tables = compare_runs({RunReport{cfg.label, accuracy, distortion}});

  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/accuracy.csv", tables.accuracy_csv);
  write_text(cfg.out_dir + "/distortion.csv", tables.distortion_csv);
  write_text(cfg.out_dir + "/eval-config.json", cfg.to_json_text());

  std::cout << tables.accuracy_csv;
  std::cout << "wrote " << cfg.out_dir << "/accuracy.csv, distortion.csv, "
            << "eval-config.json" << std::endl;
  return 0;
}

int cmd_attack(const CommonFlags& f, const std::string& checkpoint,
               const std::string& images, const std::string& labels,
               int index, const CLI::App* sub) {
  ExperimentConfig cfg = resolve_config(f, sub);
  DatasetHandle data;
  if (!images.empty()) {
    data = load_idx_pair(images, labels);
    data.name = "idx";
    data.split = "file";
  } else {
    data = load_split(cfg, "test");
  }
  if (data.channels != cfg.network.input_channels ||
      data.height != cfg.network.input_height ||
      data.width != cfg.network.input_width) {
    throw ConfigError(
        "input shape " + std::to_string(data.channels) + "x" +
        std::to_string(data.height) + "x" + std::to_string(data.width) +
        " does not match the network input " +
        std::to_string(cfg.network.input_channels) + "x" +
        std::to_string(cfg.network.input_height) + "x" +
        std::to_string(cfg.network.input_width));
  }
  if (index < 0 || index >= data.size()) {
    throw ConfigError("index " + std::to_string(index) +
                      " out of range, the set has " +
                      std::to_string(data.size()) + " examples");
  }

  AttackConfig atk = cfg.eval_pgd;
  atk.clip_min = data.clip_min;
  atk.clip_max = data.clip_max;

  Model model = Model::load_checkpoint(cfg.network, checkpoint);
  const int numel = data.example_numel();
  auto x = Tensor::zeros(Shape{1, data.channels, data.height, data.width});
  std::copy_n(data.images.data() + static_cast<std::size_t>(index) * numel,
              numel, x->data().data());
  const int label = data.labels[static_cast<std::size_t>(index)];

  const ForwardOptions opts{BnMode::kEval, true};
  double clean_loss = 0.0, adv_loss = 0.0;
  int clean_pred = 0, adv_pred = 0;
  {
    Tape tape;
    auto fr = model.forward(tape, x, opts);
    clean_pred = argmax_row(fr.logits);
    clean_loss = softmax_cross_entropy(tape, fr.logits, {label})->item();
  }
  auto x_adv = pgd(model, x, {label}, atk);
  {
    Tape tape;
    auto fr = model.forward(tape, x_adv, opts);
    adv_pred = argmax_row(fr.logits);
    adv_loss = softmax_cross_entropy(tape, fr.logits, {label})->item();
  }
  float linf = 0.0f;
  {
    auto a = x_adv->data();
    auto c = x->data();
    for (std::size_t i = 0; i < a.size(); ++i) {
      linf = std::max(linf, std::abs(a[i] - c[i]));
    }
  }

  fs::create_directories(cfg.out_dir);
  if (data.channels == 1) {
    DatasetHandle out;
    out.channels = 1;
    out.height = data.height;
    out.width = data.width;
    out.images.assign(x_adv->data().begin(), x_adv->data().end());
    out.labels = {label};
    save_mnist_idx(out, cfg.out_dir + "/adversarial-images-idx3-ubyte",
                   cfg.out_dir + "/adversarial-labels-idx1-ubyte");
  } else {
    std::vector<unsigned char> record;
    record.reserve(1 + static_cast<std::size_t>(numel));
    record.push_back(static_cast<unsigned char>(label));
    for (float v : x_adv->data()) {
      const long q = std::lround(static_cast<double>(v));
      record.push_back(
          static_cast<unsigned char>(std::clamp(q, 0l, 255l)));
    }
    std::ofstream bin(cfg.out_dir + "/adversarial.bin",
                      std::ios::binary | std::ios::trunc);
    if (!bin) {
      throw DataError("cannot open " + cfg.out_dir +
                      "/adversarial.bin for writing");
    }
    bin.write(reinterpret_cast<const char*>(record.data()),
              static_cast<std::streamsize>(record.size()));
  }

  nlohmann::json rec;
  rec["index"] = index;
  rec["true_label"] = label;
  rec["clean_prediction"] = clean_pred;
  rec["adversarial_prediction"] = adv_pred;
  rec["clean_loss"] = clean_loss;
  rec["adversarial_loss"] = adv_loss;
  rec["linf_delta"] = float_num(linf);
  rec["attack"] = {{"epsilon", float_num(atk.epsilon)},
                   {"step_size", float_num(atk.step_size)},
                   {"steps", atk.steps}};
  const std::string text = rec.dump(2) + "\n";
  write_text(cfg.out_dir + "/attack-record.json", text);
  std::cout << text;
  return 0;
}

std::vector<std::string> csv_fields(const std::string& line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    if (comma == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, comma - start));
    start = comma + 1;
  }
  return out;
}

std::vector<std::string> csv_rows(const std::string& text,
                                  const std::string& header,
                                  const std::string& path) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != header) {
    throw DataError(path + ": expected header \"" + header + "\"");
  }
  std::vector<std::string> rows;
  while (std::getline(in, line)) {
    if (!line.empty()) rows.push_back(line);
  }
  return rows;
}

double parse_num(const std::string& s, const std::string& path) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw DataError(path + ": malformed number \"" + s + "\"");
  }
}

RunReport read_run_dir(const std::string& dir) {
  const std::string acc_path = dir + "/accuracy.csv";
  const std::string dist_path = dir + "/distortion.csv";
  if (!fs::exists(acc_path) || !fs::exists(dist_path)) {
    throw ConfigError(dir +
                      " is not a run directory (needs accuracy.csv and "
                      "distortion.csv)");
  }
  RunReport run;
  auto acc_rows =
      csv_rows(read_text(acc_path), "model,dataset,clean,fgsm,pgd", acc_path);
  if (acc_rows.size() != 1) {
    throw DataError(acc_path + ": expected exactly one accuracy row, found " +
                    std::to_string(acc_rows.size()));
  }
  auto fields = csv_fields(acc_rows[0]);
  if (fields.size() != 5) {
    throw DataError(acc_path + ": malformed row \"" + acc_rows[0] + "\"");
  }
  run.label = fields[0];
  run.accuracy.dataset_name = fields[1];
  run.distortion.dataset_name = fields[1];
  run.accuracy.clean = parse_num(fields[2], acc_path);
  run.accuracy.fgsm = parse_num(fields[3], acc_path);
  run.accuracy.pgd = parse_num(fields[4], acc_path);

  auto dist_rows = csv_rows(read_text(dist_path),
                            "model,layer_index,mean_distortion", dist_path);
  for (std::size_t i = 0; i < dist_rows.size(); ++i) {
    auto df = csv_fields(dist_rows[i]);
    if (df.size() != 3) {
      throw DataError(dist_path + ": malformed row \"" + dist_rows[i] + "\"");
    }
    if (df[0] != run.label) {
      throw DataError(dist_path + ": label \"" + df[0] +
                      "\" does not match accuracy label \"" + run.label +
                      "\"");
    }
    if (parse_num(df[1], dist_path) != static_cast<double>(i)) {
      throw DataError(dist_path + ": layer_index " + df[1] +
                      " out of order, expected " + std::to_string(i));
    }
    run.distortion.layer_means.push_back(parse_num(df[2], dist_path));
  }
  return run;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<RunReport> runs;
  runs.reserve(dirs.size());
  for (const auto& dir : dirs) runs.push_back(read_run_dir(dir));
  auto tables = compare_runs(runs);
  if (out.empty()) {
    std::cout << tables.accuracy_csv << tables.distortion_csv;
  } else {
    fs::create_directories(out);
    write_text(out + "/accuracy.csv", tables.accuracy_csv);
    write_text(out + "/distortion.csv", tables.distortion_csv);
    std::cout << "wrote " << out << "/accuracy.csv, distortion.csv"
              << std::endl;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"train and evaluate adversarially robust image classifiers"};
  app.footer(
      "exit codes: 0 success, 2 invalid configuration or usage, 3 runtime "
      "failure");
  app.require_subcommand(1);

  CommonFlags f;
  std::string checkpoint, images, labels, report_out;
  int index = 0;
  std::vector<std::string> run_dirs;

  auto add_common = [&](CLI::App* sub, bool training) {
    sub->add_option("--config", f.config, "experiment config path")
        ->required();
    sub->add_option("--out", f.out, "output directory override");
    sub->add_option("--seed", f.seed, "seed override");
    sub->add_option("--subset", f.subset,
                    "draw this many examples from the split");
    sub->add_option("--data-dir", f.data_dir, "dataset directory override");
    if (training) {
      sub->add_option("--epochs", f.epochs, "epoch count override");
    } else {
      sub->add_option("--eps", f.eps, "attack epsilon override");
      sub->add_option("--steps", f.steps, "pgd step count override");
      sub->add_option("--step-size", f.step_size, "pgd step size override");
    }
  };

  auto* train_cmd = app.add_subcommand(
      "train", "train a model and write checkpoint, history, and snapshot");
  add_common(train_cmd, true);

  auto* eval_cmd = app.add_subcommand(
      "eval", "measure clean/fgsm/pgd accuracy and per-layer distortion");
  add_common(eval_cmd, false);
  eval_cmd->add_option("--checkpoint", checkpoint, "model checkpoint path")
      ->required();

  auto* attack_cmd = app.add_subcommand(
      "attack", "perturb one example and record the prediction delta");
  add_common(attack_cmd, false);
  attack_cmd->add_option("--checkpoint", checkpoint, "model checkpoint path")
      ->required();
  auto* images_opt = attack_cmd->add_option(
      "--images", images, "idx image file (defaults to the test split)");
  auto* labels_opt =
      attack_cmd->add_option("--labels", labels, "idx label file");
  images_opt->needs(labels_opt);
  labels_opt->needs(images_opt);
  attack_cmd->add_option("--index", index, "example index");

  auto* report_cmd = app.add_subcommand(
      "report", "merge run directories into comparison tables");
  report_cmd->add_option("dirs", run_dirs, "run directories")->required();
  report_cmd->add_option("--out", report_out,
                         "write merged tables here instead of stdout");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (train_cmd->parsed()) return cmd_train(f, train_cmd);
    if (eval_cmd->parsed()) return cmd_eval(f, checkpoint, eval_cmd);
    if (attack_cmd->parsed()) {
      return cmd_attack(f, checkpoint, images, labels, index, attack_cmd);
    }
    return cmd_report(run_dirs, report_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
}
