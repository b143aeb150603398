// civiclens command-line front end.
#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <random>
#include <thread>

#include <unistd.h>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "civiclens/bench.hpp"
#include "civiclens/corpus.hpp"
#include "civiclens/error.hpp"
#include "civiclens/metrics.hpp"
#include "civiclens/model.hpp"
#include "civiclens/rng.hpp"
#include "civiclens/service.hpp"

namespace fs = std::filesystem;
using namespace civiclens;

namespace {

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

// Up to `limit` raw image files from a manifest, picked with a seeded shuffle.
std::vector<std::vector<std::uint8_t>> sample_images(const fs::path& manifest_path, std::size_t limit,
                                                     std::uint64_t seed) {
  const auto m = corpus::load_manifest(manifest_path, false);
  std::vector<std::size_t> order(m.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), std::mt19937_64(seed));
  order.resize(std::min(limit, order.size()));
  std::vector<std::vector<std::uint8_t>> out;
  for (auto i : order) out.push_back(read_bytes(m.image_file(m.records[i])));
  if (out.empty()) throw Error(ErrorCode::EmptyManifest, manifest_path.string() + " has no records");
  return out;
}

std::vector<std::string> class_names() {
  std::vector<std::string> names;
  for (IssueClass c : kAllClasses) names.emplace_back(class_token(c));
  return names;
}

service::ServiceConfig load_config(const std::string& path, const std::string& data_dir) {
  auto c = path.empty() ? service::ServiceConfig{} : service::ServiceConfig::load(path);
  if (path.empty()) c.apply_environment();
  if (!data_dir.empty()) c.data_dir = data_dir;
  c.validate();
  return c;
}

std::atomic<bool> g_stop{false};
extern "C" void on_signal(int) { g_stop = true; }

// A service plus HTTP front end on a background thread.
struct RunningServer {
  service::Service svc;
  service::HttpApi api;
  int port = 0;
  std::thread thread;

  RunningServer(service::ServiceConfig cfg, service::Pipeline pipe, const std::string& host, int want_port)
      : svc(std::move(cfg), std::move(pipe)), api(svc) {
    svc.start();
    port = api.bind(host, want_port);
    thread = std::thread([this] { api.run(); });
  }
  ~RunningServer() {
    api.stop();
    if (thread.joinable()) thread.join();
    svc.stop();
  }
};

// ---------------------------------------------------------------------------

int corpus_generate(const corpus::CorpusConfig& cfg, const fs::path& out, double train_fraction,
                    std::uint64_t split_seed) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto m = corpus::generate_corpus(cfg, out);
  const auto [train, val] = corpus::split_train_val(m, train_fraction, split_seed);
  corpus::save_manifest(train, out / "train.jsonl");
  corpus::save_manifest(val, out / "val.jsonl");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << corpus::format_stats(corpus::compute_stats(m));
  std::printf("train %zu, validation %zu, written to %s in %.1f s\n", train.size(), val.size(), out.c_str(), secs);
  return 0;
}

int model_train(const fs::path& train_manifest, const fs::path& out, const model::TrainConfig& cfg, int input_size,
                double blur) {
  const auto spec = model::NetworkSpec::reference(input_size);
  const auto m = corpus::load_manifest(train_manifest);
  const auto examples = model::build_training_examples(m, spec, blur);
  const auto result = model::train(spec, examples, cfg, [](const model::EpochStats& s, const auto&) {
    std::printf("epoch %3d  loss %.4f  train accuracy %.4f\n", s.epoch, s.loss, s.accuracy);
    std::fflush(stdout);
  });
  model::checkpoint_save(spec, result.params, out);
  std::printf("checkpoint written to %s\n", out.c_str());
  return 0;
}

int model_eval(const fs::path& checkpoint, const fs::path& manifest, const std::string& jsonl_out, double blur) {
  const auto [spec, params] = model::checkpoint_load(checkpoint);
  const auto m = corpus::load_manifest(manifest);
  const auto examples = model::build_eval_examples(m, spec, {}, blur);
  const auto preds = model::predict_all(spec, params, examples);
  std::vector<int> truths, guesses;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    truths.push_back(examples[i].label);
    guesses.push_back(class_index(preds[i].cls));
  }
  const auto cm = metrics::confusion_matrix(truths, guesses, kNumClasses);
  const auto report = metrics::classification_report(cm);
  const auto names = class_names();
  std::cout << metrics::format_report(report, cm, names);
  if (!jsonl_out.empty()) write_text(jsonl_out, metrics::report_to_jsonl(report, cm, names));
  return 0;
}

int model_grid(const fs::path& train_manifest, const fs::path& val_manifest, const fs::path& out,
               const model::GridSpace& space, const model::TrainConfig& base, int input_size, double blur,
               const std::string& table_out) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto spec = model::NetworkSpec::reference(input_size);
  const auto train = model::build_training_examples(corpus::load_manifest(train_manifest), spec, blur);
  const auto val = model::build_eval_examples(corpus::load_manifest(val_manifest), spec, {}, blur);
  const auto result = model::grid_search(space, spec, train, val, base, [](const model::GridCell& c) {
    if (c.failed) {
      std::printf("lr %-6g batch %-3d epochs %-3d FAILED: %s\n", c.config.learning_rate, c.config.batch_size,
                  c.config.epochs, c.failure.c_str());
    } else {
      std::printf("lr %-6g batch %-3d epochs %-3d val accuracy %.4f\n", c.config.learning_rate, c.config.batch_size,
                  c.config.epochs, c.val_accuracy);
    }
    std::fflush(stdout);
  });
  model::checkpoint_save(spec, result.best_params, out);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& best = result.table[result.best_index];
  std::printf("best: lr %g batch %d epochs %d val accuracy %.4f; %.1f s total; checkpoint %s\n",
              best.config.learning_rate, best.config.batch_size, best.config.epochs, best.val_accuracy, secs,
              out.c_str());
  if (!table_out.empty()) {
    std::string text;
    for (const auto& c : result.table) {
      text += nlohmann::json{{"learning_rate", c.config.learning_rate},
                             {"batch_size", c.config.batch_size},
                             {"epochs", c.config.epochs},
                             {"val_accuracy", c.val_accuracy},
                             {"failed", c.failed},
                             {"failure", c.failure}}
                  .dump() +
              "\n";
    }
    write_text(table_out, text);
  }
  return 0;
}

int serve(const service::ServiceConfig& cfg) {
  auto pipeline = service::Pipeline::load(cfg);
  RunningServer server(cfg, std::move(pipeline), cfg.host, cfg.port);
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  // Scripts wait for this line before talking to the server.
  std::printf("listening on %s:%d\n", cfg.host.c_str(), server.port);
  std::fflush(stdout);
  while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(100));
  spdlog::info("shutting down");
  return 0;
}

int replay_cmd(const fs::path& log, bool verify) {
  const auto r = service::replay(log);
  std::map<std::string, std::size_t> counts;
  for (const auto& [id, c] : r.cases) ++counts[std::string(workflow::token(c.status))];
  std::printf("%zu events, last seq %llu, %zu cases%s\n", r.events, static_cast<unsigned long long>(r.last_seq),
              r.cases.size(), r.torn_tail ? " (torn final line discarded)" : "");
  for (const auto& [status, n] : counts) std::printf("  %-14s %zu\n", status.c_str(), n);
  if (!verify) return 0;
  std::size_t problems = 0;
  for (const auto& [id, c] : r.cases) {
    const bool dispatched = c.status == workflow::CaseStatus::Dispatched || c.status == workflow::CaseStatus::Notified;
    if (dispatched && !c.report) {
      std::printf("case %s: %s without a dispatch report\n", id.c_str(), std::string(workflow::token(c.status)).c_str());
      ++problems;
    }
    if (c.status == workflow::CaseStatus::Notified && !c.message) {
      std::printf("case %s: Notified without a citizen message\n", id.c_str());
      ++problems;
    }
    if (c.failure) std::printf("case %s: parked after failure (%s)\n", id.c_str(), c.failure->c_str());
  }
  std::printf("verify: %s\n", problems == 0 ? "ok" : "FAILED");
  return problems == 0 ? 0 : 1;
}

int export_cmd(const service::ServiceConfig& cfg, const std::string& since, const fs::path& out) {
  service::Service svc(cfg, service::Pipeline{});
  const Timestamp from = since.empty() ? Timestamp{} : parse_iso8601(since);
  const auto n = svc.export_corrections(from, out);
  std::printf("%zu correction(s) written to %s\n", n, out.c_str());
  return 0;
}

fs::path fresh_bench_dir(const std::string& requested) {
  fs::path dir = requested.empty() ? fs::temp_directory_path() / ("civiclens-bench-" + std::to_string(::getpid()))
                                   : fs::path(requested);
  if (fs::exists(dir / service::kEventLogFile)) {
    throw Error(ErrorCode::InvalidParameter, dir.string() + " already holds an event log; use an empty directory");
  }
  fs::create_directories(dir);
  return dir;
}

void emit(const std::string& jsonl, const std::string& table, const std::string& jsonl_out) {
  std::cout << table;
  if (jsonl_out.empty()) {
    std::cout << jsonl;
  } else {
    write_text(jsonl_out, jsonl);
  }
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_default_logger(spdlog::stderr_color_mt("civiclens"));
  spdlog::set_level(spdlog::level::info);

  CLI::App app{"civiclens: image petition pipeline"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only log warnings and errors");

  // corpus ------------------------------------------------------------------
  auto* corpus_cmd = app.add_subcommand("corpus", "Synthetic corpus tools");
  corpus_cmd->require_subcommand(1);
  corpus::CorpusConfig ccfg;
  std::string corpus_out;
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  auto* gen = corpus_cmd->add_subcommand("generate", "Render a labeled corpus and its train/validation split");
  gen->add_option("--out", corpus_out, "Output directory")->required();
  gen->add_option("--n", ccfg.n_images, "Number of images")->capture_default_str();
  gen->add_option("--seed", ccfg.seed, "Corpus seed")->capture_default_str();
  gen->add_option("--size", ccfg.image_size, "Image side in pixels")->capture_default_str();
  gen->add_option("--low-light", ccfg.low_light_rate, "Low-light rate")->capture_default_str();
  gen->add_option("--adverse-weather", ccfg.adverse_weather_rate, "Adverse weather rate")->capture_default_str();
  gen->add_option("--clutter", ccfg.clutter_rate, "Clutter rate")->capture_default_str();
  gen->add_option("--train-fraction", train_fraction, "Training share of the split")->capture_default_str();
  gen->add_option("--split-seed", split_seed, "Split seed")->capture_default_str();
  std::string stats_manifest;
  auto* stats = corpus_cmd->add_subcommand("stats", "Summarize a manifest");
  stats->add_option("manifest", stats_manifest, "Manifest path")->required();

  // model -------------------------------------------------------------------
  auto* model_cmd = app.add_subcommand("model", "Train, evaluate and tune the classifier");
  model_cmd->require_subcommand(1);
  model::TrainConfig tcfg;
  std::string train_manifest, val_manifest, ckpt_out, eval_manifest, ckpt_in, jsonl_out, table_out;
  int input_size = 64;
  double blur = 1.0;
  bool no_augment = false;
  auto* mtrain = model_cmd->add_subcommand("train", "Train one configuration");
  mtrain->add_option("--train", train_manifest, "Training manifest")->required();
  mtrain->add_option("--out", ckpt_out, "Checkpoint path")->required();
  mtrain->add_option("--lr", tcfg.learning_rate, "Learning rate")->capture_default_str();
  mtrain->add_option("--batch", tcfg.batch_size, "Batch size")->capture_default_str();
  mtrain->add_option("--epochs", tcfg.epochs, "Epochs")->capture_default_str();
  mtrain->add_option("--seed", tcfg.seed, "Seed")->capture_default_str();
  mtrain->add_option("--input-size", input_size, "Network input side")->capture_default_str();
  mtrain->add_option("--blur", blur, "Gaussian sigma")->capture_default_str();
  mtrain->add_flag("--no-augment", no_augment, "Disable augmentation");
  auto* meval = model_cmd->add_subcommand("eval", "Per-class report on a labeled manifest");
  meval->add_option("--checkpoint", ckpt_in, "Checkpoint")->required();
  meval->add_option("--manifest", eval_manifest, "Manifest")->required();
  meval->add_option("--jsonl", jsonl_out, "Also write the report as JSON lines");
  meval->add_option("--blur", blur, "Gaussian sigma")->capture_default_str();
  auto space = model::GridSpace::defaults();
  auto* mgrid = model_cmd->add_subcommand("grid", "Grid search, keeping the best checkpoint");
  mgrid->add_option("--train", train_manifest, "Training manifest")->required();
  mgrid->add_option("--val", val_manifest, "Validation manifest")->required();
  mgrid->add_option("--out", ckpt_out, "Checkpoint path")->required();
  mgrid->add_option("--lr", space.learning_rates, "Learning rates")->capture_default_str();
  mgrid->add_option("--batch", space.batch_sizes, "Batch sizes")->capture_default_str();
  mgrid->add_option("--epochs", space.epoch_counts, "Epoch counts")->capture_default_str();
  mgrid->add_option("--seed", tcfg.seed, "Base seed")->capture_default_str();
  mgrid->add_option("--input-size", input_size, "Network input side")->capture_default_str();
  mgrid->add_option("--blur", blur, "Gaussian sigma")->capture_default_str();
  mgrid->add_option("--table", table_out, "Write every cell as JSON lines");

  // service -----------------------------------------------------------------
  std::string config_path, data_dir;
  int port_override = -1;
  auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
  serve_cmd->add_option("--config", config_path, "Service config file");
  serve_cmd->add_option("--data-dir", data_dir, "Override the data directory");
  serve_cmd->add_option("--port", port_override, "Override the port (0 picks one)");
  int workers_override = 0;
  serve_cmd->add_option("--workers", workers_override, "Override the worker count");

  std::string log_path;
  bool verify = false;
  auto* replay = app.add_subcommand("replay", "Rebuild the case store from an event log");
  replay->add_option("--log", log_path, "Event log (default: <data dir>/events.jsonl)");
  replay->add_option("--data-dir", data_dir, "Data directory");
  replay->add_option("--config", config_path, "Service config file");
  replay->add_flag("--verify", verify, "Check report/message invariants; exit 1 on problems");

  std::string since, export_out;
  auto* exp = app.add_subcommand("export-corrections", "Write operator corrections as a corpus manifest");
  exp->add_option("--config", config_path, "Service config file");
  exp->add_option("--data-dir", data_dir, "Data directory");
  exp->add_option("--since", since, "ISO-8601 UTC lower bound (inclusive)");
  exp->add_option("--out", export_out, "Output manifest path")->required();

  // bench -------------------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "Latency and throughput harness");
  bench_cmd->require_subcommand(1);
  std::string bench_manifest, bench_dir;
  std::size_t n_cases = 50;
  std::uint64_t bench_seed = 7;
  double rate = 500.0, minutes = 10.0, drain = 7.0;
  std::string host = "127.0.0.1";
  int port = 0;
  bench::LoadModelConfig lcfg;
  double round_minutes = 1.0;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "Service config (checkpoint, rules, templates)");
    sub->add_option("--manifest", bench_manifest, "Manifest whose images are submitted")->required();
    sub->add_option("--data-dir", bench_dir, "Empty directory for the bench service's data");
    sub->add_option("--seed", bench_seed, "Seed")->capture_default_str();
    sub->add_option("--jsonl", jsonl_out, "Write JSON lines here instead of stdout");
  };
  auto* bstages = bench_cmd->add_subcommand("stages", "Per-stage latencies, closed loop, in process");
  add_common(bstages);
  bstages->add_option("--n", n_cases, "Cases")->capture_default_str();
  auto* bthru = bench_cmd->add_subcommand("throughput", "Open-loop Poisson load over HTTP");
  add_common(bthru);
  bthru->add_option("--rate", rate, "Offered cases per hour")->capture_default_str();
  bthru->add_option("--minutes", minutes, "Duration")->capture_default_str();
  bthru->add_option("--drain", drain, "Seconds allowed after the last arrival")->capture_default_str();
  bthru->add_option("--host", host, "Target an already running service instead of starting one");
  bthru->add_option("--port", port, "Port of the running service");
  auto* bjev = bench_cmd->add_subcommand("jevons", "Elastic-demand rounds");
  add_common(bjev);
  bjev->add_option("--elasticity", lcfg.elasticity, "Demand elasticity")->capture_default_str();
  bjev->add_option("--rounds", lcfg.rounds, "Rounds")->capture_default_str();
  bjev->add_option("--base-rate", lcfg.base_rate, "Round 0 cases per hour")->capture_default_str();
  bjev->add_option("--baseline", lcfg.manual_baseline_seconds, "Manual handling seconds")->capture_default_str();
  bjev->add_option("--round-minutes", round_minutes, "Duration of each round")->capture_default_str();

  CLI11_PARSE(app, argc, argv);
  if (quiet) spdlog::set_level(spdlog::level::warn);

  try {
    if (gen->parsed()) return corpus_generate(ccfg, corpus_out, train_fraction, split_seed);
    if (stats->parsed()) {
      std::cout << corpus::format_stats(corpus::compute_stats(corpus::load_manifest(stats_manifest)));
      return 0;
    }
    if (mtrain->parsed()) {
      if (no_augment) tcfg.augment = model::AugmentPolicy::none();
      return model_train(train_manifest, ckpt_out, tcfg, input_size, blur);
    }
    if (meval->parsed()) return model_eval(ckpt_in, eval_manifest, jsonl_out, blur);
    if (mgrid->parsed()) return model_grid(train_manifest, val_manifest, ckpt_out, space, tcfg, input_size, blur, table_out);
    if (serve_cmd->parsed()) {
      auto cfg = load_config(config_path, data_dir);
      if (port_override >= 0) cfg.port = port_override;
      if (workers_override > 0) cfg.workers = workers_override;
      cfg.validate();
      return serve(cfg);
    }
    if (replay->parsed()) {
      const fs::path log = !log_path.empty() ? fs::path(log_path)
                                             : load_config(config_path, data_dir).data_dir / service::kEventLogFile;
      return replay_cmd(log, verify);
    }
    if (exp->parsed()) return export_cmd(load_config(config_path, data_dir), since, export_out);

    if (bstages->parsed() || bthru->parsed() || bjev->parsed()) {
      const auto images = sample_images(bench_manifest, 200, bench_seed);
      auto cfg = load_config(config_path, "");
      const bool external = bthru->parsed() && port > 0;
      if (!external) {
        cfg.data_dir = fresh_bench_dir(bench_dir);
        spdlog::info("bench service data in {}", cfg.data_dir.string());
      }
      if (bstages->parsed()) {
        service::Service svc(cfg, service::Pipeline::load(cfg));
        const auto s = bench::measure_stage_latencies(svc, images, n_cases, bench_seed);
        emit(bench::to_jsonl(s), bench::format_table(s), jsonl_out);
        return 0;
      }
      bench::ThroughputConfig tc;
      tc.seed = bench_seed;
      tc.drain = std::chrono::duration<double>(drain);
      if (bthru->parsed()) {
        tc.offered_rate = rate;
        tc.duration = std::chrono::duration<double>(minutes * 60.0);
        if (external) {
          tc.host = host;
          tc.port = port;
          const auto r = bench::run_throughput(tc, images);
          emit(bench::to_jsonl(r), bench::format_table(r), jsonl_out);
          return 0;
        }
        RunningServer server(cfg, service::Pipeline::load(cfg), "127.0.0.1", 0);
        tc.port = server.port;
        tc.event_log = cfg.data_dir / service::kEventLogFile;
        const auto r = bench::run_throughput(tc, images);
        emit(bench::to_jsonl(r), bench::format_table(r), jsonl_out);
        return 0;
      }
      RunningServer server(cfg, service::Pipeline::load(cfg), "127.0.0.1", 0);
      tc.port = server.port;
      tc.event_log = cfg.data_dir / service::kEventLogFile;
      tc.duration = std::chrono::duration<double>(round_minutes * 60.0);
      const auto rounds = bench::jevons_rounds(lcfg, [&](int round, double offered) {
        tc.offered_rate = offered;
        tc.seed = derive_seed(bench_seed, static_cast<std::uint64_t>(round));
        const auto r = bench::run_throughput(tc, images);
        spdlog::info("round {}: offered {:.1f}/h, completed {:.1f}/h, mean {:.1f} ms", round, r.offered_rate,
                     r.completed_rate, r.mean_total_ms);
        return bench::RoundMeasurement{r.mean_total_ms, r.saturated};
      });
      emit(bench::to_jsonl(rounds), bench::format_table(rounds), jsonl_out);
      return 0;
    }
  } catch (const Error& e) {
    spdlog::error("{} ({})", e.what(), to_string(e.code()));
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
