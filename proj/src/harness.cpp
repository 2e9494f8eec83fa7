#include "advtrain/harness.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "advtrain/attack.hpp"
#include "advtrain/checkpoint.hpp"
#include "advtrain/errors.hpp"
#include "advtrain/rng.hpp"

namespace advtrain {

using nlohmann::json;

std::vector<EpochMetrics> read_metrics_log(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open metrics log: " + path);
  std::vector<EpochMetrics> out;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(EpochMetrics::from_json_line(line));
  return out;
}

EvalResult evaluate_checkpoint(const ExperimentConfig& config,
                               const std::string& checkpoint_path) {
  TensorArchive ar = TensorArchive::load(checkpoint_path);
  ModelState model = unpack_model(ar);
  DatasetPair data = load_dataset(config.dataset);
  uint64_t seed = mix_seed(config.seed, static_cast<uint64_t>(ar.num("epoch")), 0xE7A1);
  return evaluate(model, data.test, config.eval_attack, config.batch_size, seed);
}

std::string DiagnoseReport::to_json_text() const {
  json j;
  j["epoch"] = epoch;
  j["train_avg_tcp"] = train_avg_tcp;
  j["train_avg_tcp_small_loss"] = train_avg_tcp_small_loss;
  j["small_loss_proportion"] = small_loss_proportion;
  j["train_adv_loss"] = train_adv_loss;
  j["train_robust_acc"] = train_robust_acc;
  j["clean_acc"] = clean_acc;
  j["robust_acc"] = robust_acc;
  return j.dump(2);
}

DiagnoseReport diagnose_checkpoint(const ExperimentConfig& config,
                                   const std::string& checkpoint_path) {
  TensorArchive ar = TensorArchive::load(checkpoint_path);
  ModelState model = unpack_model(ar);
  DatasetPair data = load_dataset(config.dataset);

  DiagnoseReport rep;
  rep.epoch = static_cast<int64_t>(ar.num("epoch"));

  ModelClassifier clf(model);
  AttackSpec spec = config.method.attack;
  spec.capture_boundary = false;
  DiagnosticsAccumulator acc(config.bucket_lo, config.bucket_hi);
  int64_t n = data.train.count;
  int64_t batch_index = 0;
  for (int64_t start = 0; start < n; start += config.batch_size, ++batch_index) {
    std::vector<int64_t> ids;
    for (int64_t i = start; i < std::min<int64_t>(n, start + config.batch_size); ++i)
      ids.push_back(i);
    LabeledBatch b = data.train.batch(ids);
    AttackOutcome atk = pgd_attack(clf, b, spec,
                                   mix_seed(config.seed, static_cast<uint64_t>(rep.epoch),
                                            static_cast<uint64_t>(batch_index), 0xD1A6));
    PredictionBatch pred = clf.predict(atk.adversarial);
    std::vector<float> losses = cross_entropy_per_sample(pred, b.labels);
    TcpResult tcp = true_class_prob(pred, b.labels);
    std::vector<int> correct(ids.size());
    for (size_t i = 0; i < ids.size(); ++i)
      correct[i] = pred.argmax_row(static_cast<int64_t>(i)) == b.labels[i] ? 1 : 0;
    acc.add(losses, tcp.per_sample, correct);
  }
  EpochMetrics m;
  acc.fill(m);
  rep.train_avg_tcp = m.train_avg_tcp;
  rep.train_avg_tcp_small_loss = m.train_avg_tcp_small_loss;
  rep.small_loss_proportion = m.small_loss_proportion;
  rep.train_adv_loss = m.train_adv_loss;
  rep.train_robust_acc = m.train_robust_acc;

  EvalResult ev = evaluate(model, data.test, config.eval_attack, config.batch_size,
                           mix_seed(config.seed, static_cast<uint64_t>(rep.epoch), 0xE7A1));
  rep.clean_acc = ev.clean_acc;
  rep.robust_acc = ev.robust_acc;
  return rep;
}

// ---------------------------------------------------------------------------
// plotting
// ---------------------------------------------------------------------------

namespace {

std::string svg_polyline(const std::vector<EpochMetrics>& ms, double (*get)(const EpochMetrics&),
                         int x0, int y0, int w, int h, int e_min, int e_max,
                         const std::string& color) {
  std::ostringstream os;
  os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
  double span = std::max(1, e_max - e_min);
  for (auto& m : ms) {
    double x = x0 + (m.epoch - e_min) / span * w;
    double y = y0 + h - get(m) * h;
    os << x << "," << y << " ";
  }
  os << "\"/>\n";
  return os.str();
}

}  // namespace

void plot_metrics(const std::vector<EpochMetrics>& metrics, const std::string& out_prefix) {
  if (metrics.empty()) throw InputError("plot: metrics log is empty");

  {
    std::ofstream csv(out_prefix + ".csv", std::ios::trunc);
    csv << "epoch,clean_acc,robust_acc,train_avg_tcp,train_avg_tcp_small_loss,"
           "small_loss_proportion,lr,te_weight_effective,train_adv_loss,train_robust_acc\n";
    for (auto& m : metrics)
      csv << m.epoch << "," << m.clean_acc << "," << m.robust_acc << "," << m.train_avg_tcp << ","
          << m.train_avg_tcp_small_loss << "," << m.small_loss_proportion << "," << m.lr << ","
          << m.te_weight_effective << "," << m.train_adv_loss << "," << m.train_robust_acc
          << "\n";
  }

  int e_min = metrics.front().epoch, e_max = metrics.back().epoch;
  const int W = 640, H = 400, x0 = 50, y0 = 20, pw = W - 80, ph = H - 70;
  std::ofstream svg(out_prefix + ".svg", std::ios::trunc);
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H
      << "\" viewBox=\"0 0 " << W << " " << H << "\">\n"
      << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
      << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << pw << "\" height=\"" << ph
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    double frac = i / 4.0;
    double y = y0 + ph - frac * ph;
    svg << "<line x1=\"" << x0 << "\" y1=\"" << y << "\" x2=\"" << x0 + pw << "\" y2=\"" << y
        << "\" stroke=\"#ddd\"/>\n"
        << "<text x=\"" << x0 - 8 << "\" y=\"" << y + 4
        << "\" font-size=\"11\" text-anchor=\"end\">" << frac << "</text>\n";
  }
  svg << svg_polyline(metrics, [](const EpochMetrics& m) { return m.clean_acc; }, x0, y0, pw, ph,
                      e_min, e_max, "#1f77b4")
      << svg_polyline(metrics, [](const EpochMetrics& m) { return m.robust_acc; }, x0, y0, pw, ph,
                      e_min, e_max, "#d62728")
      << svg_polyline(metrics, [](const EpochMetrics& m) { return m.train_robust_acc; }, x0, y0,
                      pw, ph, e_min, e_max, "#2ca02c");
  svg << "<text x=\"" << x0 << "\" y=\"" << H - 28
      << "\" font-size=\"12\" fill=\"#1f77b4\">clean (test)</text>\n"
      << "<text x=\"" << x0 + 120 << "\" y=\"" << H - 28
      << "\" font-size=\"12\" fill=\"#d62728\">robust (test)</text>\n"
      << "<text x=\"" << x0 + 250 << "\" y=\"" << H - 28
      << "\" font-size=\"12\" fill=\"#2ca02c\">robust (train)</text>\n"
      << "<text x=\"" << x0 + pw / 2 << "\" y=\"" << H - 8
      << "\" font-size=\"12\" text-anchor=\"middle\">epoch (" << e_min << ".." << e_max
      << ")</text>\n</svg>\n";
}

// ---------------------------------------------------------------------------
// flat weight export
// ---------------------------------------------------------------------------

namespace {
constexpr char kExportMagic[8] = {'A', 'T', 'W', 'X', '0', '0', '0', '1'};
}

void export_weights(const std::string& checkpoint_path, const std::string& out_path) {
  TensorArchive ar = TensorArchive::load(checkpoint_path);
  ModelState model = unpack_model(ar);

  json header;
  header["architecture"] = model.architecture;
  header["classes"] = model.num_classes;
  json tensors = json::array();
  std::vector<const Tensor*> payload;
  uint64_t offset = 0;
  auto add = [&](const std::string& name, const std::string& kind, const Tensor& t) {
    json e;
    e["name"] = name;
    e["kind"] = kind;
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["count"] = t.numel();
    tensors.push_back(e);
    payload.push_back(&t);
    offset += static_cast<uint64_t>(t.numel());
  };
  for (auto& p : model.parameters()) add(p.name, "param", *p.value);
  for (auto& b : model.buffers()) add(b.name, "buffer", *b.value);
  header["tensors"] = std::move(tensors);
  std::string htext = header.dump();

  std::ofstream os(out_path, std::ios::binary | std::ios::trunc);
  if (!os) throw InputError("cannot open for write: " + out_path);
  os.write(kExportMagic, 8);
  uint64_t hlen = htext.size();
  os.write(reinterpret_cast<const char*>(&hlen), 8);
  os.write(htext.data(), static_cast<std::streamsize>(hlen));
  for (const Tensor* t : payload)
    os.write(reinterpret_cast<const char*>(t->data.data()),
             static_cast<std::streamsize>(t->data.size() * sizeof(float)));
  if (!os) throw InputError("write failed: " + out_path);
}

ModelState import_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw InputError("cannot open export: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kExportMagic, 8) != 0)
    throw InputError("bad export magic in " + path);
  uint64_t hlen = 0;
  is.read(reinterpret_cast<char*>(&hlen), 8);
  std::string htext(hlen, '\0');
  is.read(htext.data(), static_cast<std::streamsize>(hlen));
  json header = json::parse(htext);

  ModelState model =
      build_model(header.at("architecture").get<std::string>(), header.at("classes").get<int64_t>(), 0);
  std::map<std::string, Tensor*> slots;
  for (auto& p : model.parameters()) slots["param/" + p.name] = p.value;
  for (auto& b : model.buffers()) slots["buffer/" + b.name] = b.value;

  std::streampos payload_start = is.tellg();
  for (auto& e : header.at("tensors")) {
    std::string key = e.at("kind").get<std::string>() + "/" + e.at("name").get<std::string>();
    auto it = slots.find(key);
    if (it == slots.end()) throw InputError("export names unknown tensor " + key);
    uint64_t count = e.at("count").get<uint64_t>();
    if (static_cast<int64_t>(count) != it->second->numel())
      throw InputError("export size mismatch for " + key);
    is.seekg(payload_start + static_cast<std::streamoff>(e.at("offset").get<uint64_t>() * 4));
    is.read(reinterpret_cast<char*>(it->second->data.data()),
            static_cast<std::streamsize>(count * sizeof(float)));
  }
  if (!is) throw InputError("truncated export: " + path);
  return model;
}

}  // namespace advtrain
