#include "cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include <CLI11.hpp>

#include "keydyn/checkpoint.hpp"
#include "keydyn/dataset.hpp"
#include "keydyn/errors.hpp"
#include "keydyn/evaluation.hpp"
#include "keydyn/features.hpp"
#include "keydyn/service.hpp"
#include "keydyn/training.hpp"

namespace keydyn {

namespace {

namespace fs = std::filesystem;

std::string one_line(std::string text) {
  for (auto& c : text) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return text;
}

int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Argument:
    case ErrorKind::Config: return 1;
    case ErrorKind::Numeric: return 3;
    default: return 2;
  }
}

void write_text(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << text;
    return;
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << text;
  if (!f) throw IoError("write failed for " + path);
}

struct SplitArgs {
  std::size_t train_subjects = 0;  // 0: use every subject
  std::uint64_t seed = 1;

  void add(CLI::App* cmd) {
    cmd->add_option("--split", train_subjects,
                    "Number of training subjects in a seeded subject split (0 = no split)");
    cmd->add_option("--split-seed", seed, "Seed of the subject split");
  }

  std::vector<KeystrokeSession> pick(const std::vector<KeystrokeSession>& all, bool train_side) const {
    if (train_subjects == 0) return all;
    const auto split = split_subjects(all, train_subjects, seed);
    return select_subjects(all, train_side ? split.train_subjects : split.eval_subjects);
  }
};

struct ScorerArgs {
  std::string kind = "avg_distance";
  std::string metric;  // empty: the checkpoint's training metric
  std::size_t lof_k = 3;
  double nu = 0.1;
  std::string gamma = "scale";

  void add(CLI::App* cmd, bool with_kind = true) {
    if (with_kind) {
      cmd->add_option("--scorer", kind, "avg_distance | abod | lof | ocsvm");
    }
    cmd->add_option("--scorer-metric", metric,
                    "Distance for avg_distance (default: the checkpoint's training metric)");
    cmd->add_option("--lof-k", lof_k, "LOF neighbours (capped at E-1)");
    cmd->add_option("--nu", nu, "One-class SVM nu");
    cmd->add_option("--gamma", gamma, "One-class SVM RBF gamma, or 'scale'");
  }

  ScorerConfig build(const std::string& kind_text, const nlohmann::json& manifest) const {
    ScorerConfig c;
    c.kind = parse_scorer_kind(kind_text);
    if (!metric.empty()) {
      c.metric = parse_metric(metric);
    } else {
      const auto m = manifest.value(nlohmann::json::json_pointer("/metadata/train/metric"), std::string("cosine"));
      c.metric = parse_metric(m);
    }
    c.lof_k = lof_k;
    c.ocsvm_nu = nu;
    if (gamma != "scale") {
      try {
        c.ocsvm_gamma = std::stod(gamma);
      } catch (const std::exception&) {
        throw ConfigError("--gamma must be a number or 'scale'");
      }
      if (!(c.ocsvm_gamma > 0.0)) throw ConfigError("--gamma must be positive");
    }
    c.validate();
    return c;
  }
};

std::vector<KeyEvent> read_events_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  const auto text = ss.str();
  // Accept either a request body {"events": [...]} or a session record.
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.is_object() && j.contains("subject_id")) return session_from_json(j).events;
  } catch (const nlohmann::json::parse_error& ex) {
    throw ParseError(path + ": " + ex.what());
  }
  try {
    return parse_events_body(text);
  } catch (const ServiceFailure& ex) {
    throw ParseError(path + ": " + ex.what());
  }
}

std::optional<double> threshold_from_report(const std::string& path) {
  if (path.empty()) return std::nullopt;
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    const auto j = nlohmann::json::parse(in);
    return j.at("global_threshold").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ParseError(path + ": no global_threshold (" + ex.what() + ")");
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Keystroke-dynamics authentication toolkit", "keydyn"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // import
  std::string import_in, import_out;
  ColumnMap columns;
  auto* cmd_import = app.add_subcommand("import", "Convert a delimited keystroke log to session JSONL");
  cmd_import->add_option("--input", import_in, "Tab or comma separated log with a header row")->required();
  cmd_import->add_option("--out", import_out, "Output session JSONL")->required();
  cmd_import->add_option("--subject-col", columns.subject, "Subject column");
  cmd_import->add_option("--session-col", columns.session, "Session column");
  cmd_import->add_option("--keycode-col", columns.keycode, "Keycode column");
  cmd_import->add_option("--press-col", columns.press, "Press timestamp column (ms)");
  cmd_import->add_option("--release-col", columns.release, "Release timestamp column (ms)");

  // synth
  std::size_t synth_subjects = 40, synth_sessions = 15, synth_keys = 60;
  std::uint64_t synth_seed = 1;
  std::string synth_out;
  auto* cmd_synth = app.add_subcommand("synth", "Generate synthetic typists");
  cmd_synth->add_option("--subjects", synth_subjects, "Number of subjects");
  cmd_synth->add_option("--sessions", synth_sessions, "Sessions per subject");
  cmd_synth->add_option("--keys", synth_keys, "Keystrokes per session");
  cmd_synth->add_option("--seed", synth_seed, "Generator seed");
  cmd_synth->add_option("--out", synth_out, "Output session JSONL")->required();

  // train
  std::string profile_name = "desk", train_data, train_out, telemetry_path;
  std::string loss_name = "batch_all", metric_name = "cosine", mode_name, norm_name = "post";
  std::string reduction_name = "mean_active";
  std::optional<std::size_t> steps, batch_size, subjects_per_batch, samples_per_subject, decay_every,
      seq_len;
  std::optional<double> lr, margin;
  double wdcl_k = 1.0, clip_norm = 0.0;
  bool wdcl_plain_weight = false, dcl_literature = false, deterministic = false;
  std::uint64_t train_seed = 1;
  std::size_t checkpoint_every = 0;
  SplitArgs train_split;
  auto* cmd_train = app.add_subcommand("train", "Train an encoder and write a checkpoint directory");
  cmd_train->add_option("--profile", profile_name, "Hyperparameter bundle: desk | paper");
  cmd_train->add_option("--data", train_data, "Session JSONL")->required();
  cmd_train->add_option("--out", train_out, "Checkpoint directory")->required();
  cmd_train->add_option("--loss", loss_name, "triplet | batch_all | wdcl | softmax");
  cmd_train->add_option("--metric", metric_name, "euclidean | manhattan | cosine");
  cmd_train->add_option("--mode", mode_name, "bi | cross (default: cross for softmax, else bi)");
  cmd_train->add_option("--norm", norm_name, "Layer-norm placement: post | pre");
  cmd_train->add_option("--steps", steps, "Optimizer steps (default: profile)");
  cmd_train->add_option("--lr", lr, "Initial learning rate (default: profile)");
  cmd_train->add_option("--batch-size", batch_size, "Triples / pairs per batch (default: profile)");
  cmd_train->add_option("--subjects-per-batch", subjects_per_batch, "Batch-all subjects (default: profile)");
  cmd_train->add_option("--samples-per-subject", samples_per_subject, "Batch-all samples (default: profile)");
  cmd_train->add_option("--decay-every", decay_every, "Steps between x0.1 decays (default: profile)");
  cmd_train->add_option("--seq-len", seq_len, "Training keystroke length (default: profile)");
  cmd_train->add_option("--margin", margin, "Triplet margin (default: 0.25 cosine, 1.0 otherwise)");
  cmd_train->add_option("--reduction", reduction_name, "Batch-all reduction: sum | mean_active");
  cmd_train->add_option("--wdcl-k", wdcl_k, "WDCL weighting temperature");
  cmd_train->add_flag("--wdcl-plain-weight", wdcl_plain_weight, "Use w instead of 2-w for the WDCL weight");
  cmd_train->add_flag("--dcl-literature-form", dcl_literature, "Linear positive term in WDCL");
  cmd_train->add_option("--clip-norm", clip_norm, "Global gradient-norm clip (0 = off)");
  cmd_train->add_option("--checkpoint-every", checkpoint_every, "Intermediate checkpoint period (0 = end only)");
  cmd_train->add_option("--seed", train_seed, "Seed for initialization, sampling and dropout");
  cmd_train->add_option("--telemetry", telemetry_path, "JSON-lines telemetry file (default: none)");
  cmd_train->add_flag("--deterministic", deterministic, "Write wall_ms as 0 so telemetry is byte-stable");
  train_split.add(cmd_train);

  // eval
  std::string eval_ckpt, eval_data, eval_out, eval_roc;
  ProtocolConfig protocol;
  ScorerArgs eval_scorer;
  SplitArgs eval_split;
  auto* cmd_eval = app.add_subcommand("eval", "Run the enrollment/query protocol and report EERs");
  cmd_eval->add_option("--ckpt", eval_ckpt, "Checkpoint directory")->required();
  cmd_eval->add_option("--data", eval_data, "Session JSONL")->required();
  cmd_eval->add_option("--E", protocol.enrollment, "Enrollment sessions per subject (1-10)");
  cmd_eval->add_option("--L", protocol.length, "Keystroke length");
  cmd_eval->add_option("--impostors", protocol.impostors_per_subject,
                       "Impostor queries per subject (0 = one per other subject)");
  cmd_eval->add_option("--seed", protocol.seed, "Protocol sampling seed");
  cmd_eval->add_option("--out", eval_out, "Report JSON (default: stdout)");
  cmd_eval->add_option("--roc", eval_roc, "ROC CSV of the global threshold sweep (default: none)");
  eval_scorer.add(cmd_eval);
  eval_split.add(cmd_eval);

  // sweep
  std::string sweep_ckpt, sweep_data, sweep_out, sweep_csv;
  std::vector<std::size_t> sweep_e{1, 2, 3, 5, 7, 10}, sweep_l{50};
  std::vector<std::string> sweep_scorers{"avg_distance", "abod", "lof", "ocsvm"};
  ProtocolConfig sweep_base;
  ScorerArgs sweep_scorer_args;
  SplitArgs sweep_split;
  auto* cmd_sweep = app.add_subcommand("sweep", "EER table over enrollment counts, lengths and scorers");
  cmd_sweep->add_option("--ckpt", sweep_ckpt, "Checkpoint directory")->required();
  cmd_sweep->add_option("--data", sweep_data, "Session JSONL")->required();
  cmd_sweep->add_option("--E", sweep_e, "Enrollment counts")->delimiter(',');
  cmd_sweep->add_option("--L", sweep_l, "Keystroke lengths")->delimiter(',');
  cmd_sweep->add_option("--scorers", sweep_scorers, "Scorers")->delimiter(',');
  cmd_sweep->add_option("--impostors", sweep_base.impostors_per_subject,
                        "Impostor queries per subject (0 = one per other subject)");
  cmd_sweep->add_option("--seed", sweep_base.seed, "Protocol sampling seed");
  cmd_sweep->add_option("--out", sweep_out, "Table JSON (default: stdout)");
  cmd_sweep->add_option("--csv", sweep_csv, "Table CSV (default: none)");
  sweep_scorer_args.add(cmd_sweep, false);
  sweep_split.add(cmd_sweep);

  // embed
  std::string embed_ckpt, embed_data, embed_out;
  std::size_t embed_l = 0;
  auto* cmd_embed = app.add_subcommand("embed", "Write one embedding per session as JSONL");
  cmd_embed->add_option("--ckpt", embed_ckpt, "Bi-encoder checkpoint directory")->required();
  cmd_embed->add_option("--data", embed_data, "Session JSONL")->required();
  cmd_embed->add_option("--L", embed_l, "Keystroke length (0 = checkpoint length)");
  cmd_embed->add_option("--out", embed_out, "Output JSONL (default: stdout)");

  // enroll / verify against a journal-backed store
  std::string store_ckpt, store_path, store_subject, store_events, store_scorer = "avg_distance",
                                                                   store_report, store_policy = "evict";
  std::optional<double> store_threshold;
  ScorerArgs store_scorer_args;
  auto add_store_options = [&](CLI::App* cmd) {
    cmd->add_option("--ckpt", store_ckpt, "Bi-encoder checkpoint directory")->required();
    cmd->add_option("--store", store_path, "Subject store journal (JSONL)")->required();
    cmd->add_option("--subject", store_subject, "Subject id")->required();
    cmd->add_option("--events", store_events, "JSON file with {\"events\": [...]} or a session record")
        ->required();
    cmd->add_option("--scorer", store_scorer, "avg_distance | abod | lof | ocsvm");
    cmd->add_option("--cap-policy", store_policy, "At 10 enrollments: evict | reject");
    store_scorer_args.add(cmd, false);
  };
  auto* cmd_enroll = app.add_subcommand("enroll", "Add one session to a subject's enrollment set");
  add_store_options(cmd_enroll);
  auto* cmd_verify = app.add_subcommand("verify", "Score a session against a subject's enrollment set");
  add_store_options(cmd_verify);
  cmd_verify->add_option("--threshold", store_threshold, "Accept threshold (default: report or 0)");
  cmd_verify->add_option("--report", store_report, "Eval report whose global_threshold is used (default: none)");

  // serve
  std::string serve_ckpt, serve_host = "0.0.0.0", serve_scorer = "avg_distance", serve_report,
                          serve_store = "keydyn-store.jsonl", serve_policy = "evict";
  int serve_port = 8080;
  std::optional<double> serve_threshold;
  ScorerArgs serve_scorer_args;
  auto* cmd_serve = app.add_subcommand("serve", "Run the HTTP verification service");
  cmd_serve->add_option("--ckpt", serve_ckpt, "Bi-encoder checkpoint directory")->envname("KEYDYN_CKPT")->required();
  cmd_serve->add_option("--port", serve_port, "Listen port")->envname("KEYDYN_PORT");
  cmd_serve->add_option("--host", serve_host, "Listen address");
  cmd_serve->add_option("--scorer", serve_scorer, "avg_distance | abod | lof | ocsvm")->envname("KEYDYN_SCORER");
  cmd_serve->add_option("--threshold", serve_threshold, "Accept threshold (default: report or 0)")
      ->envname("KEYDYN_THRESHOLD");
  cmd_serve->add_option("--report", serve_report, "Eval report whose global_threshold is used (default: none)");
  cmd_serve->add_option("--store", serve_store, "Subject store journal (JSONL)");
  cmd_serve->add_option("--cap-policy", serve_policy, "At 10 enrollments: evict | reject");
  serve_scorer_args.add(cmd_serve, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& ex) {
    if (ex.get_exit_code() == 0) {
      out << app.help();
      return 0;
    }
    err << "error: usage: " << one_line(ex.what()) << '\n';
    return 1;
  }

  try {
    if (*cmd_import) {
      const auto result = import_sessions(import_in, columns);
      write_sessions(fs::path(import_out), result.sessions);
      err << "imported " << result.sessions.size() << " sessions (" << result.dropped_sessions
          << " dropped, " << result.skipped_rows << " rows skipped)\n";
      return 0;
    }

    if (*cmd_synth) {
      const auto sessions = generate_synthetic(synth_subjects, synth_sessions, synth_keys, synth_seed);
      write_sessions(fs::path(synth_out), sessions);
      return 0;
    }

    if (*cmd_train) {
      auto profile = profile_by_name(profile_name);
      auto& tc = profile.train;
      tc.loss.kind = parse_loss_kind(loss_name);
      tc.metric = parse_metric(metric_name);
      tc.loss.reduction = parse_reduction(reduction_name);
      tc.loss.margin = margin ? *margin : LossConfig::default_margin(tc.metric);
      tc.loss.wdcl_k = wdcl_k;
      tc.loss.wdcl_negative_variant = !wdcl_plain_weight;
      tc.loss.dcl_literature_form = dcl_literature;
      tc.seed = train_seed;
      tc.clip_norm = clip_norm;
      tc.checkpoint_every = checkpoint_every;
      if (steps) tc.steps = *steps;
      if (lr) tc.lr = *lr;
      if (batch_size) tc.batch_size = *batch_size;
      if (subjects_per_batch) tc.subjects_per_batch = *subjects_per_batch;
      if (samples_per_subject) tc.samples_per_subject = *samples_per_subject;
      if (decay_every) tc.decay_every = *decay_every;
      if (seq_len) tc.sequence_length = *seq_len;
      const bool softmax = tc.loss.kind == LossKind::Softmax;
      profile.encoder.mode = mode_name.empty() ? (softmax ? EncoderMode::Cross : EncoderMode::Bi)
                                               : parse_encoder_mode(mode_name);
      profile.encoder.norm = parse_norm_placement(norm_name);
      if (softmax != (profile.encoder.mode == EncoderMode::Cross)) {
        throw ConfigError("the softmax loss and the cross-encoder go together");
      }
      tc.validate();
      profile.encoder.validate();

      const auto sessions = train_split.pick(read_sessions(fs::path(train_data)), true);
      std::ofstream telemetry;
      TrainOptions options;
      options.out_dir = train_out;
      options.deterministic_telemetry = deterministic;
      if (!telemetry_path.empty()) {
        telemetry.open(telemetry_path, std::ios::trunc);
        if (!telemetry) throw IoError("cannot write " + telemetry_path);
        options.telemetry = &telemetry;
      }
      const auto result = train(sessions, profile.encoder, tc, options);
      err << "trained " << tc.steps << " steps, final loss " << result.report.losses.back() << ", "
          << checkpoint_hash(train_out) << '\n';
      return 0;
    }

    if (*cmd_eval) {
      const auto manifest = read_manifest(eval_ckpt);
      protocol.scorer = eval_scorer.build(eval_scorer.kind, manifest);
      protocol.validate();
      const auto model = load_checkpoint(eval_ckpt);
      if (protocol.length > model.config.max_len) {
        throw ConfigError("--L exceeds the checkpoint's max_len " + std::to_string(model.config.max_len));
      }
      const auto sessions = eval_split.pick(read_sessions(fs::path(eval_data)), false);
      std::vector<std::string> warnings;
      const auto sets = run_protocol(sessions, model, protocol, &warnings);
      auto config = protocol_config_to_json(protocol);
      config["checkpoint"] = checkpoint_hash(eval_ckpt);
      config["mode"] = to_string(model.config.mode);
      if (model.config.mode == EncoderMode::Cross) config["scorer"] = "mean_p_similar";
      const auto report = make_report(sets, config, warnings);
      for (const auto& w : report.warnings) err << "warning: " << w << '\n';
      write_text(eval_out, report.to_json().dump(2) + "\n", out);
      if (!eval_roc.empty()) write_text(eval_roc, report.roc_csv(), out);
      return 0;
    }

    if (*cmd_sweep) {
      const auto manifest = read_manifest(sweep_ckpt);
      std::vector<ScorerConfig> scorers;
      for (const auto& s : sweep_scorers) scorers.push_back(sweep_scorer_args.build(s, manifest));
      const auto model = load_checkpoint(sweep_ckpt);
      const auto sessions = sweep_split.pick(read_sessions(fs::path(sweep_data)), false);
      const auto table = sweep(sessions, model, sweep_e, sweep_l, scorers, sweep_base,
                               checkpoint_hash(sweep_ckpt));
      for (const auto& w : table.warnings) err << "warning: " << w << '\n';
      write_text(sweep_out, table.to_json().dump(2) + "\n", out);
      if (!sweep_csv.empty()) write_text(sweep_csv, table.to_csv(), out);
      return 0;
    }

    if (*cmd_embed) {
      const auto model = load_checkpoint(embed_ckpt);
      if (model.config.mode != EncoderMode::Bi) throw ConfigError("embed needs a bi-encoder checkpoint");
      const std::size_t length = embed_l ? embed_l : model.sequence_length;
      if (length > model.config.max_len) throw ConfigError("--L exceeds the checkpoint's max_len");
      std::ostringstream lines;
      for (const auto& s : read_sessions(fs::path(embed_data))) {
        const auto e = encode(vectorize(s, model.norm, length), model);
        lines << nlohmann::json{{"subject_id", s.subject_id},
                                {"session_id", s.session_id},
                                {"embedding", std::vector<double>(e.data(), e.data() + e.size())}}
                     .dump()
              << '\n';
      }
      write_text(embed_out, lines.str(), out);
      return 0;
    }

    if (*cmd_enroll || *cmd_verify) {
      const auto manifest = read_manifest(store_ckpt);
      ServiceConfig sc;
      sc.scorer = store_scorer_args.build(store_scorer, manifest);
      sc.cap_policy = parse_cap_policy(store_policy);
      sc.journal = store_path;
      if (store_threshold) {
        sc.threshold = *store_threshold;
      } else if (auto t = threshold_from_report(store_report)) {
        sc.threshold = *t;
      }
      const auto events = read_events_file(store_events);
      VerificationService service(load_checkpoint(store_ckpt), checkpoint_hash(store_ckpt), sc);
      try {
        if (*cmd_enroll) {
          out << nlohmann::json{{"enrollments", service.enroll(store_subject, events)}}.dump() << '\n';
        } else {
          out << service.verify(store_subject, events).to_json().dump() << '\n';
        }
      } catch (const ServiceFailure& ex) {
        if (ex.status() == 422) throw ParseError(ex.what());
        throw ProtocolError(ex.what());
      }
      return 0;
    }

    if (*cmd_serve) {
      const auto manifest = read_manifest(serve_ckpt);
      ServiceConfig sc;
      sc.scorer = serve_scorer_args.build(serve_scorer, manifest);
      sc.cap_policy = parse_cap_policy(serve_policy);
      sc.journal = serve_store;
      if (serve_threshold) {
        sc.threshold = *serve_threshold;
      } else if (auto t = threshold_from_report(serve_report)) {
        sc.threshold = *t;
      } else {
        err << "warning: no threshold configured, accepting scores >= 0\n";
      }
      VerificationService service(load_checkpoint(serve_ckpt), checkpoint_hash(serve_ckpt), sc);
      HttpFrontend http(service);
      err << "listening on " << serve_host << ':' << serve_port << '\n';
      if (!http.listen(serve_host, serve_port)) {
        throw IoError("cannot listen on " + serve_host + ":" + std::to_string(serve_port));
      }
      return 0;
    }
  } catch (const Error& ex) {
    err << "error: " << to_string(ex.kind()) << ": " << one_line(ex.what()) << '\n';
    return exit_code(ex.kind());
  } catch (const std::exception& ex) {
    err << "error: io: " << one_line(ex.what()) << '\n';
    return 2;
  }
  return 1;
}

}  // namespace keydyn
