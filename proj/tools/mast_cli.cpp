// mast: command-line front end for the multiscale audio transformer library.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "mast/analyzer.hpp"
#include "mast/frontend.hpp"
#include "mast/io.hpp"
#include "mast/metrics.hpp"
#include "mast/model.hpp"
#include "mast/schedule.hpp"
#include "mast/training.hpp"

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;
constexpr double kGradTolerance = 1e-4;

struct SummarizeArgs {
  std::string schedule;
  std::string mode = "projections-only";
  std::string compare;
  std::string format = "text";
};

int run_summarize(const SummarizeArgs& a) {
  const auto s = mast::load_schedule(a.schedule);
  const auto report = mast::analyze(s, mast::mac_mode_from_string(a.mode));
  std::optional<mast::Comparison> cmp;
  if (!a.compare.empty()) cmp = mast::compare(s, mast::load_schedule(a.compare));

  if (a.format == "json") {
    nlohmann::json j = mast::to_json(report);
    j["shape_trace"] = mast::shape_trace(s);
    if (cmp) j["comparison"] = mast::to_json(*cmp);
    std::cout << j.dump(2) << "\n";
  } else if (a.format == "csv") {
    std::cout << mast::format_csv(report);
  } else {
    std::cout << "schedule: " << s.name << "  (macs: " << a.mode << ")\n\nshape trace:\n";
    for (const auto& f : mast::shape_trace(s)) std::cout << "  " << f << "\n";
    std::cout << "\n" << mast::format_table(report);
    if (cmp) std::cout << "\n" << mast::format_comparison(*cmp);
  }
  return 0;
}

int run_spectrogram(const std::string& in, const std::string& out, const std::string& config) {
  mast::SpectrogramConfig cfg;
  if (!config.empty()) {
    std::ifstream f(config);
    if (!f) throw mast::ConfigError("cannot open config '" + config + "'");
    try {
      cfg = nlohmann::json::parse(f).get<mast::SpectrogramConfig>();
    } catch (const nlohmann::json::exception& e) {
      throw mast::ConfigError("config '" + config + "': " + e.what());
    }
  }
  const auto wav = mast::read_wav(in);
  if (wav.sample_rate != cfg.sample_rate)
    throw mast::InputError("'" + in + "' has sample rate " + std::to_string(wav.sample_rate) +
                           ", config expects " +
                           std::to_string(static_cast<long long>(cfg.sample_rate)));
  const auto spec = mast::log_mel(wav.samples, cfg);
  mast::write_tensor(out, spec.values);
  std::cout << "wrote " << out << " " << mast::shape_str(spec.values.shape()) << "\n";
  return 0;
}

struct TrainArgs {
  std::string manifest, schedule, out, log;
  std::size_t epochs = 10, batch_size = 8;
  double lr = 1e-5, weight_decay = 0.01;
  std::uint64_t seed = 0;
  std::string loss = "bce";
};

int run_train(const TrainArgs& a) {
  const auto s = mast::load_schedule(a.schedule);
  mast::TrainConfig cfg;
  cfg.base_lr = a.lr;
  cfg.weight_decay = a.weight_decay;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.seed = a.seed;
  cfg.loss = mast::loss_kind_from_string(a.loss);
  cfg.validate();
  const auto data = mast::load_examples(mast::load_manifest(a.manifest), s);

  const std::string log_path = a.log.empty() ? a.out + ".log.jsonl" : a.log;
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) throw mast::InputError("cannot open log '" + log_path + "'");
  const auto result = mast::train_loop(data, s, cfg, [&](const mast::EpochLog& e) {
    const std::string line = mast::to_json(e).dump();
    log << line << "\n" << std::flush;
    std::cout << line << "\n" << std::flush;
  });
  mast::save_checkpoint(a.out, mast::Checkpoint{s, cfg, result.params});
  std::cout << "wrote " << a.out << "\n";
  return 0;
}

// Scores for head 0 over every manifest entry, in manifest order.
std::vector<std::vector<double>> predict(const std::vector<mast::Example>& data,
                                         const mast::Checkpoint& c) {
  std::vector<std::vector<double>> scores;
  scores.reserve(data.size());
  for (const auto& ex : data) {
    const auto out = mast::forward(ex.spec, c.params, c.schedule);
    scores.emplace_back(out.logits[0].begin(), out.logits[0].end());
  }
  return scores;
}

int run_eval(const std::string& manifest, const std::string& ckpt, const std::string& metric) {
  const auto c = mast::load_checkpoint(ckpt);
  const auto data = mast::load_examples(mast::load_manifest(manifest), c.schedule);
  const auto scores = predict(data, c);
  double value = 0;
  if (metric == "map") {
    std::vector<std::vector<int>> targets(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      targets[i].assign(c.schedule.head_sizes[0], 0);
      for (auto l : data[i].labels) targets[i][l] = 1;
    }
    value = mast::mean_average_precision(scores, targets);
  } else {
    const std::size_t k = metric == "top1" ? 1 : 5;
    std::vector<std::size_t> labels;
    for (const auto& ex : data) labels.push_back(ex.labels.front());
    value = mast::topk_accuracy(scores, labels, k);
  }
  std::cout << nlohmann::json{{"metric", metric}, {"value", value}, {"samples", data.size()}}.dump()
            << "\n";
  return 0;
}

int run_embed(const std::string& manifest, const std::string& ckpt, const std::string& out) {
  const auto c = mast::load_checkpoint(ckpt);
  const auto data = mast::load_examples(mast::load_manifest(manifest), c.schedule);
  std::vector<float> rows;
  std::size_t d = 0;
  for (const auto& ex : data) {
    const auto o = mast::forward(ex.spec, c.params, c.schedule);
    d = o.embedding.size();
    rows.insert(rows.end(), o.embedding.begin(), o.embedding.end());
  }
  const mast::Tensor<float> emb({data.size(), d}, std::move(rows));
  mast::write_tensor(out, emb);
  std::cout << "wrote " << out << " " << mast::shape_str(emb.shape()) << "\n";
  return 0;
}

std::vector<std::size_t> read_label_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw mast::InputError("cannot open labels '" + path + "'");
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ss(line);
    long long v = -1;
    std::string rest;
    if (!(ss >> v) || v < 0 || (ss >> rest))
      throw mast::InputError(path + ":" + std::to_string(lineno) +
                             ": expected one non-negative integer");
    labels.push_back(static_cast<std::size_t>(v));
  }
  return labels;
}

int run_cluster_metrics(const std::string& embeddings, const std::string& labels_path,
                        std::uint64_t seed) {
  const auto t = mast::read_tensor<double>(embeddings);
  if (t.rank() != 2) throw mast::InputError("embeddings must be a 2-D tensor");
  mast::Matrix x(t.dim(0));
  for (std::size_t i = 0; i < t.dim(0); ++i) x[i].assign(t.row(i).begin(), t.row(i).end());
  const auto labels = read_label_file(labels_path);
  const auto r = mast::cluster_metrics(x, labels, seed);
  std::cout << nlohmann::json{{"samples", x.size()},
                              {"clusters", r.clusters},
                              {"silhouette", r.silhouette},
                              {"adjusted_rand_index", r.ari},
                              {"homogeneity", r.homogeneity}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_gradcheck(const std::string& schedule, std::uint64_t seed, std::size_t samples,
                  bool corrupt) {
  const auto s = mast::load_schedule(schedule);
  mast::GradCheckOptions opt;
  opt.samples = samples;
  if (corrupt) opt.corrupt = s.blocks.empty() ? "patch.weight" : "blocks.0.attn.q.weight";
  const auto r = mast::grad_check(s, seed, opt);
  nlohmann::json j = mast::to_json(r);
  j["schedule"] = s.name;
  j["tolerance"] = kGradTolerance;
  j["passed"] = r.max_rel_error < kGradTolerance;
  std::cout << j.dump(2) << "\n";
  return r.max_rel_error < kGradTolerance ? 0 : kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscale audio spectrogram transformer toolkit"};
  app.require_subcommand(1);

  SummarizeArgs sum;
  auto* summarize = app.add_subcommand("summarize", "Shape trace and parameter/MAC report");
  summarize->add_option("--schedule", sum.schedule, "Preset name or schedule JSON")->required();
  summarize->add_option("--mode", sum.mode, "MAC accounting")
      ->check(CLI::IsMember({"projections-only", "full"}));
  summarize->add_option("--compare", sum.compare, "Second schedule for ratio lines");
  summarize->add_option("--format", sum.format)->check(CLI::IsMember({"text", "csv", "json"}));

  std::string wav_in, spec_out, spec_cfg;
  auto* spectrogram = app.add_subcommand("spectrogram", "16-bit PCM WAV to log-mel MTSR");
  spectrogram->add_option("--in", wav_in)->required();
  spectrogram->add_option("--out", spec_out)->required();
  spectrogram->add_option("--config", spec_cfg, "Spectrogram config JSON");

  mast::SynthOptions synth_opt;
  std::string synth_dir;
  auto* synth = app.add_subcommand("synth", "Write a synthetic class-conditional dataset");
  synth->add_option("--out-dir", synth_dir)->required();
  synth->add_option("--samples", synth_opt.n_samples);
  synth->add_option("--classes", synth_opt.n_classes);
  synth->add_option("--seed", synth_opt.seed);
  synth->add_option("--freq", synth_opt.freq);
  synth->add_option("--time", synth_opt.time);

  TrainArgs tr;
  auto* train = app.add_subcommand("train", "Train from a manifest and write a checkpoint");
  train->add_option("--manifest", tr.manifest)->required();
  train->add_option("--schedule", tr.schedule)->required();
  train->add_option("--out", tr.out)->required();
  train->add_option("--log", tr.log, "JSON-lines log (default: <out>.log.jsonl)");
  train->add_option("--epochs", tr.epochs);
  train->add_option("--batch-size", tr.batch_size);
  train->add_option("--lr", tr.lr);
  train->add_option("--weight-decay", tr.weight_decay);
  train->add_option("--seed", tr.seed);
  train->add_option("--loss", tr.loss)->check(CLI::IsMember({"bce", "ce"}));

  std::string ev_manifest, ev_ckpt, ev_metric = "map";
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  eval->add_option("--manifest", ev_manifest)->required();
  eval->add_option("--ckpt", ev_ckpt)->required();
  eval->add_option("--metric", ev_metric)->check(CLI::IsMember({"map", "top1", "top5"}));

  std::string em_manifest, em_ckpt, em_out;
  auto* embed = app.add_subcommand("embed", "Dump class-token embeddings as MTSR");
  embed->add_option("--manifest", em_manifest)->required();
  embed->add_option("--ckpt", em_ckpt)->required();
  embed->add_option("--out", em_out)->required();

  std::string cm_emb, cm_labels;
  std::uint64_t cm_seed = 0;
  auto* cluster = app.add_subcommand("cluster-metrics", "Silhouette, ARI and homogeneity");
  cluster->add_option("--embeddings", cm_emb)->required();
  cluster->add_option("--labels", cm_labels, "One integer label per line")->required();
  cluster->add_option("--seed", cm_seed);

  std::string gc_schedule = "gradcheck-tiny";
  std::uint64_t gc_seed = 0;
  std::size_t gc_samples = 256;
  bool gc_corrupt = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Analytic vs finite-difference gradients");
  gradcheck->add_option("--schedule", gc_schedule);
  gradcheck->add_option("--seed", gc_seed);
  gradcheck->add_option("--samples", gc_samples);
  gradcheck->add_flag("--corrupt", gc_corrupt, "Negate one gradient tensor before comparing");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitUsage;
  }

  try {
    if (*summarize) return run_summarize(sum);
    if (*spectrogram) return run_spectrogram(wav_in, spec_out, spec_cfg);
    if (*synth) {
      const auto entries = mast::synth_dataset(synth_dir, synth_opt);
      std::cout << "wrote " << entries.size() << " samples to " << synth_dir << "\n";
      return 0;
    }
    if (*train) return run_train(tr);
    if (*eval) return run_eval(ev_manifest, ev_ckpt, ev_metric);
    if (*embed) return run_embed(em_manifest, em_ckpt, em_out);
    if (*cluster) return run_cluster_metrics(cm_emb, cm_labels, cm_seed);
    if (*gradcheck) return run_gradcheck(gc_schedule, gc_seed, gc_samples, gc_corrupt);
  } catch (const mast::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}
