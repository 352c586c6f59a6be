// miencap command line: corpus synthesis, pair building, training, replay,
// live serving and evaluation.

#include <csignal>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <pthread.h>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <json.hpp>

#include "miencap/error.hpp"
#include "miencap/features.hpp"
#include "miencap/manifest.hpp"
#include "miencap/net.hpp"
#include "miencap/neural.hpp"
#include "miencap/replay.hpp"
#include "miencap/retarget.hpp"
#include "miencap/retrieval.hpp"
#include "miencap/rig.hpp"
#include "miencap/service.hpp"
#include "miencap/synth.hpp"
#include "miencap/wire.hpp"

using namespace miencap;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;

void emit(const json& doc) {
  std::cout << doc.dump() << std::endl;
}

void fail_line(const std::string& kind, const std::string& message) {
  json doc;
  doc["error"] = kind;
  doc["message"] = message;
  std::cerr << doc.dump() << std::endl;
}

std::vector<size_t> parse_hidden(const std::string& text) {
  std::vector<size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    MIENCAP_THROW_IF(item.empty() || item.find_first_not_of("0123456789") != std::string::npos,
                     ValidationError, "bad hidden layer list '{}'", text);
    out.push_back(std::stoul(item));
    MIENCAP_THROW_IF(out.back() == 0, ValidationError, "hidden layer width must be positive");
  }
  MIENCAP_THROW_IF(out.empty(), ValidationError, "at least one hidden layer is required");
  return out;
}

std::vector<double> parse_values(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    MIENCAP_THROW_IF(used == 0 || used != item.size(), ValidationError, "bad number '{}'", item);
    out.push_back(v);
  }
  return out;
}

struct TrainFlags {
  double lr = 0.01;
  size_t batch = 10;
  int epochs = 100;
  uint64_t seed = 1;
  std::string hidden;
  std::string out;
  std::string report;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--lr", f.lr, "learning rate")->capture_default_str();
  cmd->add_option("--batch", f.batch, "mini-batch size")->capture_default_str();
  cmd->add_option("--epochs", f.epochs, "training epochs")->capture_default_str();
  cmd->add_option("--seed", f.seed, "initialization and shuffle seed")->capture_default_str();
  cmd->add_option("--hidden", f.hidden, "hidden layer widths, comma separated")->capture_default_str();
  cmd->add_option("--out", f.out, "model output path")->required();
  cmd->add_option("--report", f.report, "per-epoch CSV of epoch, mean_loss, wall_ms");
}

void write_report(const TrainResult& r, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  MIENCAP_THROW_IF(!out, IoError, "cannot write '{}'", path);
  out << "epoch,mean_loss,wall_ms\n";
  for (size_t e = 0; e < r.loss_curve.size(); ++e) {
    out << fmt::format("{},{:.17g},{:.3f}\n", e + 1, r.loss_curve[e], r.epoch_ms[e]);
  }
}

json echo(const std::string& command, const TrainFlags& f, const std::vector<size_t>& hidden) {
  json doc;
  doc["command"] = command;
  doc["lr"] = f.lr;
  doc["batch"] = f.batch;
  doc["epochs"] = f.epochs;
  doc["seed"] = f.seed;
  doc["hidden"] = hidden;
  return doc;
}

TrainResult run_training(const std::string& name, const Dataset& data, const TrainFlags& f, const std::vector<size_t>& hidden,
                         std::map<std::string, std::string> metadata) {
  TrainConfig config;
  config.learning_rate = f.lr;
  config.batch_size = f.batch;
  config.epochs = f.epochs;
  config.seed = f.seed;
  auto model = make_mlp(data.inputs.front().size(), hidden, data.targets.front().size(), f.seed, name);
  model.metadata = std::move(metadata);
  auto result = sgd_train(std::move(model), data, config, LossKind::squared_error);
  save_model(result.model, f.out);
  if (!f.report.empty()) {
    write_report(result, f.report);
  }
  json done;
  done["model"] = f.out;
  done["samples"] = data.size();
  done["final_loss"] = result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
  emit(done);
  return result;
}

std::string first_character(std::span<const wire::BroadcastRecord> records) {
  MIENCAP_THROW_IF(records.empty(), ValidationError, "output stream is empty");
  return records.front().character;
}

void wait_for_signal(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"miencap: emotion-aware facial retargeting"};
  app.require_subcommand(1);

  // synth
  std::string synth_out;
  synth::WorkspaceOptions synth_opts;
  auto* synth_cmd = app.add_subcommand("synth", "write a synthetic demo workspace");
  synth_cmd->add_option("--out", synth_out, "workspace directory")->required();
  synth_cmd->add_option("--seed", synth_opts.seed)->capture_default_str();
  synth_cmd->add_option("--frames", synth_opts.stream_frames, "training stream length")->capture_default_str();
  synth_cmd->add_option("--faces", synth_opts.character_faces, "character faces per database")->capture_default_str();
  synth_cmd->add_option("--human-faces", synth_opts.human_faces)->capture_default_str();

  // build-db
  std::string db_landmarks, db_emotions, db_mean, db_map, db_tag = "human", db_out;
  auto* db_cmd = app.add_subcommand("build-db", "register landmarks and build an expression database");
  db_cmd->add_option("--landmarks", db_landmarks)->required()->check(CLI::ExistingFile);
  db_cmd->add_option("--emotions", db_emotions)->required()->check(CLI::ExistingFile);
  db_cmd->add_option("--mean-face", db_mean)->check(CLI::ExistingFile);
  db_cmd->add_option("--semantic-map", db_map)->check(CLI::ExistingFile);
  db_cmd->add_option("--tag", db_tag)->capture_default_str();
  db_cmd->add_option("--out", db_out)->required();

  // build-pairs
  std::string pairs_source, pairs_target, pairs_out;
  size_t pairs_k = kDefaultTopK;
  auto* pairs_cmd = app.add_subcommand("build-pairs", "two-step matching of a source database against a target");
  pairs_cmd->add_option("--source", pairs_source)->required()->check(CLI::ExistingFile);
  pairs_cmd->add_option("--target", pairs_target)->required()->check(CLI::ExistingFile);
  pairs_cmd->add_option("--k", pairs_k, "emotional shortlist size")->capture_default_str();
  pairs_cmd->add_option("--out", pairs_out, "pair CSV (stdout when omitted)");

  // train-adaption
  TrainFlags adapt_flags;
  adapt_flags.hidden = "256,256";
  std::string adapt_weights, adapt_truth, adapt_char, adapt_calib;
  auto* adapt_cmd = app.add_subcommand("train-adaption", "train the blendshape adaption network");
  adapt_cmd->add_option("--weights", adapt_weights, "tracker frame stream")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--truth", adapt_truth, "ground-truth controller stream")->required()->check(CLI::ExistingFile);
  adapt_cmd->add_option("--char", adapt_char, "character id in the truth stream");
  adapt_cmd->add_option("--calibration", adapt_calib)->check(CLI::ExistingFile);
  add_train_flags(adapt_cmd, adapt_flags);

  // train-secondary
  TrainFlags sec_flags;
  sec_flags.hidden = "128,128";
  std::string sec_pairs, sec_src, sec_dst;
  auto* sec_cmd = app.add_subcommand("train-secondary", "train a primary-to-secondary adaptation network");
  sec_cmd->add_option("--pairs", sec_pairs, "pair CSV (primary query -> secondary match)")->required()->check(CLI::ExistingFile);
  sec_cmd->add_option("--source-controllers", sec_src)->required()->check(CLI::ExistingFile);
  sec_cmd->add_option("--target-controllers", sec_dst)->required()->check(CLI::ExistingFile);
  add_train_flags(sec_cmd, sec_flags);

  // replay
  std::string replay_manifest, replay_input, replay_out, replay_send;
  double replay_fps = 24.0;
  bool replay_primary_only = false;
  auto* replay_cmd = app.add_subcommand("replay", "pace a frame stream through the pipeline");
  replay_cmd->add_option("--manifest", replay_manifest)->check(CLI::ExistingFile);
  replay_cmd->add_option("--input", replay_input)->required()->check(CLI::ExistingFile);
  replay_cmd->add_option("--fps", replay_fps, "0 replays as fast as possible")->capture_default_str();
  replay_cmd->add_option("--out", replay_out, "output stream (stdout when omitted)");
  replay_cmd->add_option("--send", replay_send, "send raw frames to a service frame socket instead");
  replay_cmd->add_flag("--primary-only", replay_primary_only);

  // serve
  std::string serve_manifest, serve_listen = "127.0.0.1:9100", serve_control = "127.0.0.1:9101";
  auto* serve_cmd = app.add_subcommand("serve", "run the live retargeting service");
  serve_cmd->add_option("--manifest", serve_manifest)->required()->check(CLI::ExistingFile);
  serve_cmd->add_option("--listen", serve_listen, "frame ingestion endpoint")->capture_default_str();
  serve_cmd->add_option("--control-listen", serve_control, "control/broadcast endpoint")->capture_default_str();

  // eval
  std::string eval_pred, eval_truth, eval_char;
  auto* eval_cmd = app.add_subcommand("eval", "compare a predicted output stream with ground truth");
  eval_cmd->add_option("--pred", eval_pred)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--truth", eval_truth)->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--char", eval_char, "character id (first record's when omitted)");

  // compose
  std::string compose_bank, compose_weights, compose_out;
  auto* compose_cmd = app.add_subcommand("compose", "compose a blendshape mesh");
  compose_cmd->add_option("--bank", compose_bank)->required()->check(CLI::ExistingFile);
  compose_cmd->add_option("--weights", compose_weights, "comma separated weights")->required();
  compose_cmd->add_option("--out", compose_out, "OBJ-style vertex file")->required();

  // calibrate
  std::string calib_input, calib_out;
  size_t calib_frames = 30;
  auto* calib_cmd = app.add_subcommand("calibrate", "fit a neutral calibration profile");
  calib_cmd->add_option("--input", calib_input, "neutral-pose frame stream")->required()->check(CLI::ExistingFile);
  calib_cmd->add_option("--frames", calib_frames, "window length; 0 uses every frame")->capture_default_str();
  calib_cmd->add_option("--out", calib_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return kExitUsage;
  }

  try {
    if (*synth_cmd) {
      synth::write_workspace(synth_out, synth_opts);
      emit(json{{"workspace", synth_out}});
    } else if (*db_cmd) {
      const auto mean = db_mean.empty() ? default_mean_face() : load_mean_face(db_mean);
      const auto map = db_map.empty() ? default_semantic_map() : load_semantic_map(db_map);
      const auto db = build_database(load_landmarks(db_landmarks), load_emotions(db_emotions), mean, map, db_tag);
      save_database(db, db_out);
      emit(json{{"database", db_out}, {"records", db.records.size()}});
    } else if (*pairs_cmd) {
      MIENCAP_THROW_IF(pairs_k == 0, ValidationError, "--k must be positive");
      const auto pairs = build_pair_database(load_database(pairs_source), load_database(pairs_target), pairs_k);
      if (pairs_out.empty()) {
        std::cout << format_pairs_csv(pairs);
      } else {
        save_pairs(pairs, pairs_out);
        emit(json{{"pairs", pairs_out}, {"count", pairs.size()}, {"k", pairs_k}});
      }
    } else if (*adapt_cmd) {
      const auto hidden = parse_hidden(adapt_flags.hidden);
      emit(echo("train-adaption", adapt_flags, hidden));
      auto frames = wire::read_frame_stream(adapt_weights);
      MIENCAP_THROW_IF(frames.empty(), ValidationError, "'{}' holds no frames", adapt_weights);
      if (!adapt_calib.empty()) {
        const auto profile = load_calibration(adapt_calib);
        for (auto& f : frames) {
          f = apply_calibration(f, profile);
        }
      }
      const auto records = wire::read_output_stream(adapt_truth);
      const auto character = adapt_char.empty() ? first_character(records) : adapt_char;
      const auto truth = wire::controller_frames(records, character);
      const auto tuples = build_training_tuples(frames, truth);
      MIENCAP_THROW_IF(tuples.empty(), ValidationError, "stream too short to form training tuples");
      const size_t channels = frames.front().weights.size();
      const size_t controllers = truth.front().values.size();
      run_training("adaption", to_dataset(tuples), adapt_flags, hidden,
                   {{kLayoutKey, adaption_layout(channels, controllers)}, {"character", character}});
    } else if (*sec_cmd) {
      const auto hidden = parse_hidden(sec_flags.hidden);
      emit(echo("train-secondary", sec_flags, hidden));
      std::map<std::string, std::vector<double>> src, dst;
      for (auto& e : synth::load_controller_table(sec_src)) {
        src[e.id] = std::move(e.values);
      }
      for (auto& e : synth::load_controller_table(sec_dst)) {
        dst[e.id] = std::move(e.values);
      }
      Dataset data;
      for (const auto& p : load_pairs(sec_pairs)) {
        const auto s = src.find(p.query_id);
        const auto d = dst.find(p.match_id);
        MIENCAP_THROW_IF(s == src.end(), ValidationError, "no source controllers for '{}'", p.query_id);
        MIENCAP_THROW_IF(d == dst.end(), ValidationError, "no target controllers for '{}'", p.match_id);
        data.inputs.push_back(s->second);
        data.targets.push_back(d->second);
      }
      MIENCAP_THROW_IF(data.size() == 0, ValidationError, "'{}' holds no pairs", sec_pairs);
      run_training("secondary", data, sec_flags, hidden, {});
    } else if (*replay_cmd) {
      MIENCAP_THROW_IF(replay_fps < 0.0, ValidationError, "--fps must be non-negative");
      const auto frames = wire::read_frame_stream(replay_input);
      ReplayStats stats;
      if (!replay_send.empty()) {
        auto stream = net::TcpStream::connect(net::parse_endpoint(replay_send));
        stream.set_no_delay();
        const auto start = std::chrono::steady_clock::now();
        for (size_t i = 0; i < frames.size(); ++i) {
          if (replay_fps > 0.0) {
            std::this_thread::sleep_until(start + std::chrono::duration_cast<std::chrono::steady_clock::duration>(
                                                      std::chrono::duration<double>(static_cast<double>(i) / replay_fps)));
          }
          MIENCAP_THROW_IF(!stream.write_all(wire::encode_frame(frames[i]) + "\n"), IoError, "connection to {} lost", replay_send);
          ++stats.frames;
        }
        stats.elapsed_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      } else {
        MIENCAP_THROW_IF(replay_manifest.empty(), ValidationError, "--manifest is required unless --send is given");
        auto pipeline = load_pipeline(replay_manifest);
        ReplayOptions options;
        options.fps = replay_fps;
        options.include_secondaries = !replay_primary_only;
        std::ofstream file;
        if (!replay_out.empty()) {
          file.open(replay_out, std::ios::binary);
          MIENCAP_THROW_IF(!file, IoError, "cannot write '{}'", replay_out);
        }
        std::ostream& sink_stream = replay_out.empty() ? std::cout : file;
        stats = replay(pipeline, frames, options, [&](std::string_view line) {
          sink_stream << line << '\n';
        });
        sink_stream.flush();
      }
      json doc;
      doc["frames"] = stats.frames;
      doc["mean_latency_ms"] = stats.mean_latency_ms;
      doc["max_latency_ms"] = stats.max_latency_ms;
      doc["elapsed_s"] = stats.elapsed_s;
      std::cerr << doc.dump() << std::endl;
    } else if (*serve_cmd) {
      sigset_t set;
      sigemptyset(&set);
      sigaddset(&set, SIGINT);
      sigaddset(&set, SIGTERM);
      pthread_sigmask(SIG_BLOCK, &set, nullptr);
      ServiceConfig config;
      config.manifest = serve_manifest;
      config.frame_listen = net::parse_endpoint(serve_listen);
      config.control_listen = net::parse_endpoint(serve_control);
      Service service(config);
      service.start();
      emit(json{{"listening", true}, {"frame_port", service.frame_port()}, {"control_port", service.control_port()}});
      wait_for_signal(set);
      service.stop();
      const auto m = service.metrics();
      emit(json{{"stopped", true}, {"frames_in", m.frames_in}, {"frames_out", m.frames_out}});
    } else if (*eval_cmd) {
      const auto pred_records = wire::read_output_stream(eval_pred);
      const auto truth_records = wire::read_output_stream(eval_truth);
      const auto character = eval_char.empty() ? first_character(pred_records) : eval_char;
      const auto pred = wire::controller_frames(pred_records, character);
      const auto truth = wire::controller_frames(truth_records, character);
      MIENCAP_THROW_IF(pred.size() != truth.size(), DimensionError, "frame counts differ: {} vs {}", pred.size(), truth.size());
      MIENCAP_THROW_IF(pred.empty(), ValidationError, "no frames for character '{}'", character);
      const size_t dims = truth.front().values.size();
      std::vector<double> per_dim(dims, 0.0);
      double total = 0.0;
      for (size_t i = 0; i < pred.size(); ++i) {
        MIENCAP_THROW_IF(pred[i].values.size() != dims || truth[i].values.size() != dims, DimensionError,
                         "frame {} has inconsistent width", i);
        for (size_t d = 0; d < dims; ++d) {
          const double e = pred[i].values[d] - truth[i].values[d];
          per_dim[d] += e * e;
          total += e * e;
        }
      }
      const double n = static_cast<double>(pred.size());
      double max_dim = 0.0;
      for (double s : per_dim) {
        max_dim = std::max(max_dim, std::sqrt(s / n));
      }
      const double jp = jitter_metric(pred);
      const double jt = jitter_metric(truth);
      json doc;
      doc["char"] = character;
      doc["frames"] = pred.size();
      doc["rmse"] = std::sqrt(total / (n * static_cast<double>(dims)));
      doc["max_dim_rmse"] = max_dim;
      doc["jitter_pred"] = jp;
      doc["jitter_truth"] = jt;
      doc["jitter_delta"] = jp - jt;
      emit(doc);
    } else if (*compose_cmd) {
      const auto bank = load_bank(compose_bank);
      const auto weights = parse_values(compose_weights);
      export_mesh(compose_blendshapes(bank, weights), compose_out);
      emit(json{{"mesh", compose_out}, {"vertices", bank.neutral.vertex_count()}});
    } else if (*calib_cmd) {
      auto frames = wire::read_frame_stream(calib_input);
      if (calib_frames > 0 && frames.size() > calib_frames) {
        frames.resize(calib_frames);
      }
      const auto profile = calibrate(frames);
      save_calibration(profile, calib_out);
      emit(json{{"calibration", calib_out}, {"samples", profile.sample_count}});
    }
  } catch (const IoError& e) {
    fail_line(e.kind(), e.what());
    return kExitUsage;
  } catch (const Error& e) {
    fail_line(e.kind(), e.what());
    return kExitFailure;
  } catch (const std::exception& e) {
    fail_line("internal", e.what());
    return kExitFailure;
  }
  return 0;
}
