#include "flashkit/cli.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "flashkit/bench.hpp"
#include "flashkit/decode.hpp"
#include "flashkit/ops.hpp"
#include "flashkit/train.hpp"
#include "flashkit/verify.hpp"

namespace flashkit {
namespace {

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// Model flags shared by train and bench. Each applies only when given, so
// values from a config document survive unless a flag overrides them.
struct ModelFlags {
  std::string kind, kernel, aggregation, norm, linear_form;
  std::size_t d = 0, layers = 0, length = 0, chunk = 0;
  CLI::Option* kind_opt = nullptr;
  CLI::Option* length_opt = nullptr;
  CLI::Option *d_opt, *layers_opt, *chunk_opt, *kernel_opt, *aggregation_opt, *norm_opt, *linear_form_opt;

  void add(CLI::App& app, bool with_kind_and_length) {
    if (with_kind_and_length) {
      kind_opt = app.add_option("--kind", kind, "flash, flash_quad, linear, transformer_pp or mhsa_mlp");
      length_opt = app.add_option("--length", length, "context length T");
    }
    d_opt = app.add_option("--d", d, "model width");
    layers_opt = app.add_option("--layers", layers, "gated-unit layers");
    chunk_opt = app.add_option("--chunk", chunk, "chunk size C of the mixed kind");
    kernel_opt = app.add_option("--kernel", kernel, "relu2 or softmax");
    aggregation_opt = app.add_option("--aggregation", aggregation, "mean or sum");
    norm_opt = app.add_option("--norm", norm, "layer or scale");
    linear_form_opt = app.add_option("--linear-form", linear_form, "cumsum or scan (linear kind)");
  }

  void apply(ModelConfig& cfg) const {
    auto given = [](const CLI::Option* o) { return o != nullptr && o->count() > 0; };
    if (given(kind_opt)) cfg.kind = parse_model_kind(kind);
    if (given(length_opt)) cfg.length = length;
    if (given(d_opt)) cfg.d = d;
    if (given(layers_opt)) cfg.layers = layers;
    if (given(chunk_opt)) cfg.chunk = chunk;
    if (given(kernel_opt)) cfg.kernel = parse_kernel_kind(kernel);
    if (given(aggregation_opt)) cfg.aggregation = parse_aggregation(aggregation);
    if (given(norm_opt)) cfg.norm = parse_norm_kind(norm);
    if (given(linear_form_opt)) cfg.linear_form = parse_linear_form(linear_form);
  }
};

template <typename T>
void override_if(const CLI::Option* option, T& target, const T& value) {
  if (option->count() > 0) target = value;
}

// ---------------------------------------------------------------------------

struct TrainCommand {
  std::string config_path, corpus_path = FLASHKIT_DEFAULT_CORPUS, objective, checkpoint, resume;
  ModelFlags model;
  std::size_t batch = 0, steps = 0, warmup = 0, eval_batches = 0, checkpoint_every = 0, log_every = 100;
  double lr = 0.0, clip = 0.0, weight_decay = 0.0;
  std::uint64_t seed = 0;
  CLI::Option *batch_opt, *steps_opt, *warmup_opt, *eval_opt, *every_opt, *lr_opt, *clip_opt, *wd_opt, *seed_opt,
      *objective_opt, *checkpoint_opt;

  void add(CLI::App& app) {
    app.add_option("--config", config_path, "JSON training config; flags override its values");
    app.add_option("--corpus", corpus_path, "corpus file (documents separated by 0x00)");
    model.add(app, true);
    objective_opt = app.add_option("--objective", objective, "lm or mlm (mlm makes the model bidirectional)");
    batch_opt = app.add_option("--batch", batch, "sequences per step");
    steps_opt = app.add_option("--steps", steps, "optimization steps");
    warmup_opt = app.add_option("--warmup", warmup, "warmup steps");
    lr_opt = app.add_option("--lr", lr, "peak learning rate");
    clip_opt = app.add_option("--clip", clip, "per-tensor gradient norm bound (0 disables)");
    wd_opt = app.add_option("--weight-decay", weight_decay, "decoupled weight decay");
    eval_opt = app.add_option("--eval-batches", eval_batches, "held-out batches per evaluation");
    seed_opt = app.add_option("--seed", seed, "seed of initialization, data order and masking");
    checkpoint_opt = app.add_option("--checkpoint", checkpoint, "checkpoint written at the end of the run");
    every_opt = app.add_option("--checkpoint-every", checkpoint_every, "also checkpoint every N steps");
    app.add_option("--resume", resume, "continue from this checkpoint (its config is used)");
    app.add_option("--log-every", log_every, "print the loss every N steps (0 = never)");
  }

  TrainConfig config() const {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = train_config_from_json(read_text_file(config_path));
    model.apply(cfg.model);
    if (objective_opt->count() > 0) {
      cfg.objective = parse_objective(objective);
      const bool mlm = cfg.objective == Objective::mlm;
      cfg.model.causal = !mlm;
      cfg.model.vocab = mlm ? kByteVocab + 1 : kByteVocab;
    }
    override_if(batch_opt, cfg.batch, batch);
    override_if(steps_opt, cfg.steps, steps);
    override_if(warmup_opt, cfg.optimizer.warmup, warmup);
    override_if(lr_opt, cfg.optimizer.peak_lr, lr);
    override_if(clip_opt, cfg.optimizer.clip, clip);
    override_if(wd_opt, cfg.optimizer.weight_decay, weight_decay);
    override_if(eval_opt, cfg.eval_batches, eval_batches);
    override_if(seed_opt, cfg.seed, seed);
    override_if(every_opt, cfg.checkpoint_every, checkpoint_every);
    if (checkpoint_opt->count() > 0) cfg.checkpoint_path = checkpoint;
    cfg.validate();
    return cfg;
  }

  int run(std::ostream& out) const {
    const auto corpus = load_corpus(corpus_path);
    Trainer trainer = resume.empty() ? Trainer(config(), corpus) : Trainer::resume(resume, corpus);
    const auto& cfg = trainer.config();
    out << std::setprecision(10);
    out << "config " << train_config_to_json(cfg) << '\n';
    const auto result = train_run(trainer, [&](const Trainer::StepResult& s) {
      if (log_every != 0 && (s.step + 1) % log_every == 0) {
        out << "step " << s.step + 1 << " loss " << s.loss << " lr " << s.lr << '\n';
      }
    });
    if (!cfg.checkpoint_path.empty()) trainer.save(cfg.checkpoint_path);
    if (!result.losses.empty()) out << "final train loss " << result.losses.back() << '\n';
    if (cfg.eval_batches > 0) {
      out << "initial held-out loss " << result.initial_eval << '\n';
      out << "final held-out loss " << result.final_eval << '\n';
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------

struct BenchCommand {
  std::string config_path, csv_path;
  std::vector<std::string> kinds{"flash", "flash_quad"};
  std::vector<std::size_t> lengths{256, 512, 1024, 2048, 4096};
  ModelFlags model;
  std::size_t tokens = 4096, repeats = 5, warmups = 2;
  bool forward_only = false, fit = false;
  std::uint64_t seed = 0;
  CLI::Option* seed_opt;

  void add(CLI::App& app) {
    app.add_option("--config", config_path, "JSON training config; its model section and seed are used");
    app.add_option("--kinds", kinds, "comma-separated model kinds")->delimiter(',');
    app.add_option("--lengths", lengths, "comma-separated context lengths")->delimiter(',');
    model.add(app, false);
    app.add_option("--tokens", tokens, "tokens per step; batch = tokens / T");
    app.add_option("--repeats", repeats, "timed iterations per length (>= 5)");
    app.add_option("--warmups", warmups, "discarded iterations per length (>= 2)");
    app.add_flag("--forward-only", forward_only, "time the forward pass without the tape");
    app.add_flag("--fit", fit, "report log-log slopes on stderr");
    seed_opt = app.add_option("--seed", seed, "seed of the model and token draws");
    app.add_option("--out", csv_path, "CSV destination (default: stdout)");
  }

  int run(std::ostream& out, std::ostream& err) const {
    BenchOptions options;
    options.model.d = 64;
    options.model.layers = 2;
    if (!config_path.empty()) {
      const auto cfg = train_config_from_json(read_text_file(config_path));
      options.model = cfg.model;
      options.seed = cfg.seed;
    }
    model.apply(options.model);
    if (seed_opt->count() > 0) options.seed = seed;
    options.tokens_per_step = tokens;
    options.repeats = repeats;
    options.warmups = warmups;
    options.forward_only = forward_only;

    std::vector<BenchRecord> records;
    for (const auto& name : kinds) {
      const auto kind = parse_model_kind(name);
      const auto report = bench_latency(kind, lengths, options);
      for (const auto& s : report.skipped) err << "skipped " << s.kind << " T=" << s.length << ": " << s.reason << '\n';
      if (fit && report.records.size() >= 3) {
        const auto f = fit_exponent(report.records);
        err << name << " slope " << f.slope << " r2 " << f.r2 << '\n';
      }
      records.insert(records.end(), report.records.begin(), report.records.end());
    }
    if (csv_path.empty()) {
      write_bench_csv(out, records);
    } else {
      std::ofstream file(csv_path);
      if (!file) throw std::runtime_error("cannot write '" + csv_path + "'");
      write_bench_csv(file, records);
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------

struct DecodeCommand {
  std::string checkpoint, prompt_file, timing_csv;
  std::size_t max_new = 64;
  bool greedy = false;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    app.add_option("--checkpoint", checkpoint, "trained causal flash or flash_quad checkpoint")->required();
    app.add_option("--prompt-file", prompt_file, "prompt bytes")->required();
    app.add_option("--max-new-tokens", max_new, "bytes to generate");
    app.add_flag("--greedy", greedy, "take the most likely byte instead of sampling");
    app.add_option("--temperature", temperature, "sampling temperature");
    app.add_option("--seed", seed, "sampling seed");
    app.add_option("--timing-csv", timing_csv, "per-step wall time as CSV");
  }

  int run(std::ostream& out) const {
    const auto loaded = load_model(checkpoint);
    const auto bytes = load_corpus(prompt_file);
    const std::vector<std::int32_t> prompt(bytes.begin(), bytes.end());
    std::mt19937_64 rng(seed);
    const auto result =
        generate(loaded.model, prompt, max_new, [&](std::span<const double> logits) {
          return greedy ? greedy_token(logits) : sample_token(logits, rng, temperature);
        });
    for (auto t : result.tokens) out.put(static_cast<char>(static_cast<unsigned char>(t)));
    out.flush();
    if (!timing_csv.empty()) {
      std::ofstream csv(timing_csv);
      if (!csv) throw std::runtime_error("cannot write '" + timing_csv + "'");
      csv << "position,phase,ms\n" << std::fixed << std::setprecision(4);
      for (std::size_t i = 0; i < result.step_seconds.size(); ++i) {
        csv << i << ',' << (i < prompt.size() ? "prompt" : "generate") << ',' << result.step_seconds[i] * 1e3
            << '\n';
      }
    }
    return 0;
  }
};

// ---------------------------------------------------------------------------

struct VerifyCommand {
  bool include_long = false;
  std::vector<int> criteria;
  std::string corpus_path, bench_csv;
  std::size_t train_steps = 2000, train_batch = 4;
  std::uint64_t seed = 0;

  void add(CLI::App& app) {
    app.add_flag("--long", include_long, "also run the latency (6) and training (7) criteria");
    app.add_option("--criteria", criteria, "comma-separated criteria to run")->delimiter(',')->check(CLI::Range(1, 9));
    app.add_option("--corpus", corpus_path, "corpus of the training criterion");
    app.add_option("--train-steps", train_steps, "steps of the training criterion");
    app.add_option("--train-batch", train_batch, "batch of the training criterion");
    app.add_option("--bench-csv", bench_csv, "write the latency records of criterion 6 here");
    app.add_option("--seed", seed, "seed of the latency and training criteria");
  }

  int run(std::ostream& out, std::ostream& err) const {
    std::vector<int> selected = criteria;
    if (selected.empty()) {
      if (include_long) selected.assign(std::begin(kAllCriteria), std::end(kAllCriteria));
      else selected.assign(std::begin(kQuickCriteria), std::end(kQuickCriteria));
    }
    std::ofstream csv;
    VerifyOptions options;
    options.log = &err;
    options.corpus_path = corpus_path;
    options.train_steps = train_steps;
    options.train_batch = train_batch;
    options.seed = seed;
    if (!bench_csv.empty()) {
      csv.open(bench_csv);
      if (!csv) throw std::runtime_error("cannot write '" + bench_csv + "'");
      options.bench_csv = &csv;
    }
    std::vector<CheckResult> results;
    for (int c : selected) {
      results.push_back(run_criterion(c, options));
      err << format_result(results.back()) << '\n';
    }
    out << std::left << std::setw(4) << "#" << std::setw(34) << "criterion" << std::setw(8) << "result"
        << std::right << std::setw(10) << "seconds" << '\n';
    bool all = true;
    for (const auto& r : results) {
      out << std::left << std::setw(4) << r.criterion << std::setw(34) << r.name << std::setw(8)
          << (r.passed ? "PASS" : "FAIL") << std::right << std::setw(10) << std::fixed << std::setprecision(1)
          << r.seconds << '\n';
      all = all && r.passed;
    }
    out << (all ? "all criteria passed" : "some criteria FAILED") << '\n';
    return all ? 0 : 1;
  }
};

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"flashkit: gated attention units and mixed chunk attention"};
  app.name("flashkit");
  app.require_subcommand(1);

  TrainCommand train;
  BenchCommand bench;
  DecodeCommand decode;
  VerifyCommand verify;
  auto* train_app = app.add_subcommand("train", "train a byte-level language model");
  auto* bench_app = app.add_subcommand("bench", "per-step latency across context lengths, as CSV");
  auto* decode_app = app.add_subcommand("decode", "generate bytes from a checkpoint with the streaming cache");
  auto* verify_app = app.add_subcommand("verify", "run the acceptance checks and print a summary table");
  train.add(*train_app);
  bench.add(*bench_app);
  decode.add(*decode_app);
  verify.add(*verify_app);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const CLI::App* context = &app;
    for (auto* sub : {train_app, bench_app, decode_app, verify_app})
      if (sub->parsed()) context = sub;
    err << context->help();
    return 2;
  }

  try {
    if (const char* threads = std::getenv("FLASHKIT_THREADS")) {
      const long n = std::strtol(threads, nullptr, 10);
      if (n < 1) {
        err << "error: FLASHKIT_THREADS must be a positive integer, got '" << threads << "'\n";
        return 2;
      }
      ops::set_thread_limit(static_cast<std::size_t>(n));
    } else {
      ops::set_thread_limit(1);
    }
    if (train_app->parsed()) return train.run(out);
    if (bench_app->parsed()) return bench.run(out, err);
    if (decode_app->parsed()) return decode.run(out);
    return verify.run(out, err);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace flashkit
