#include "moce/cli.hpp"

#include "moce/analysis.hpp"
#include "moce/bleu.hpp"
#include "moce/checkpoint.hpp"
#include "moce/gradcheck.hpp"
#include "moce/training.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>

namespace moce::cli {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string part; std::getline(in, part, sep);)
    if (!trim(part).empty()) out.push_back(trim(part));
  return out;
}

std::vector<std::string> read_lines(std::istream& in) {
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read '" + path + "'");
  return read_lines(in);
}

/// Writes to `path`, or to `fallback` when the path is empty.
class Sink {
 public:
  Sink(const std::string& path, std::ostream& fallback) : stream_(&fallback) {
    if (!path.empty()) {
      file_.open(path, std::ios::binary);
      if (!file_) throw Error("cannot write '" + path + "'");
      stream_ = &file_;
    }
  }
  std::ostream& get() { return *stream_; }

 private:
  std::ofstream file_;
  std::ostream* stream_;
};

struct ModelFlags {
  ModelConfig config;
  std::string gate_mode = "probabilities";
  std::string fixed_radii;

  ModelConfig resolve() const {
    ModelConfig c = config;
    if (gate_mode == "probabilities") c.gate_mode = GateMode::Probabilities;
    else if (gate_mode == "logits") c.gate_mode = GateMode::Logits;
    else throw UsageError("--gate-mode must be 'probabilities' or 'logits'");
    c.fixed_radii.clear();
    for (const auto& r : split(fixed_radii, ',')) c.fixed_radii.push_back(std::stoi(r));
    return c;
  }
};

void add_model_flags(CLI::App* app, ModelFlags& f) {
  auto& c = f.config;
  app->add_option("--encoder-layers", c.encoder_layers, "Encoder layers")->capture_default_str();
  app->add_option("--decoder-layers", c.decoder_layers, "Decoder layers")->capture_default_str();
  app->add_option("--model-dim", c.model_dim, "Model width")->capture_default_str();
  app->add_option("--heads", c.heads, "Attention heads")->capture_default_str();
  app->add_option("--ffn-dim", c.ffn_dim, "Feed-forward width")->capture_default_str();
  app->add_option("--max-radius", c.max_radius, "Largest contextualization radius (0: plain Transformer)")->capture_default_str();
  app->add_option("--top-k", c.top_k, "Experts mixed per routing site")->capture_default_str();
  app->add_flag("--lid,!--no-lid", c.use_lid, "Condition the router on the source language embedding")->capture_default_str();
  app->add_option("--ada-layer", c.ada_layer, "Encoder layer holding the adaptive attention")->capture_default_str();
  app->add_option("--dropout", c.dropout, "Dropout rate")->capture_default_str();
  app->add_flag("--share-embeddings,!--no-share-embeddings", c.share_embeddings)->capture_default_str();
  app->add_flag("--expert-bias,!--no-expert-bias", c.expert_bias)->capture_default_str();
  app->add_flag("--expert-activation,!--no-expert-activation", c.expert_activation)->capture_default_str();
  app->add_flag("--per-stream-router,!--shared-router", c.per_stream_router)->capture_default_str();
  app->add_option("--gate-mode", f.gate_mode, "probabilities | logits")->capture_default_str();
  app->add_option("--balance-loss", c.balance_loss, "Weight of the load-balancing term")->capture_default_str();
  app->add_option("--fixed-radii", f.fixed_radii, "Comma-separated per-head radii: fixed-scale attention instead of routing");
  app->add_option("--seed", c.seed, "Random seed")->capture_default_str();
}

void apply_config(CLI::App* sub, const std::string& path) {
  for (const auto& [key, value] : read_config_file(path)) {
    if (key == "config") throw UsageError("config file cannot set 'config'");
    auto* opt = sub->get_option_no_throw("--" + key);
    if (opt == nullptr) throw UsageError("unknown config key '" + key + "' for '" + sub->get_name() + "'");
    if (opt->count() > 0) continue;
    opt->add_result(value);
    opt->run_callback();
  }
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(std::string(flag) + " is required");
}

std::vector<SyntheticLangSpec> parse_synthetic(const std::string& text, int alphabet) {
  std::vector<SyntheticLangSpec> specs;
  for (const auto& item : split(text, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw UsageError("--synthetic expects code:bytes[:copy] items, got '" + item + "'");
    SyntheticLangSpec s;
    s.code = item.substr(0, colon);
    s.alphabet_size = alphabet;
    const auto rest = split(item.substr(colon + 1), ':');
    if (rest.empty()) throw UsageError("--synthetic: missing bytes per symbol in '" + item + "'");
    s.bytes_per_symbol = std::stoi(rest[0]);
    if (rest.size() > 1) {
      if (rest[1] != "copy" && rest[1] != "sub") throw UsageError("--synthetic: task must be copy or sub");
      s.task = rest[1] == "copy" ? SyntheticTask::Copy : SyntheticTask::Substitute;
    }
    specs.push_back(s);
  }
  return specs;
}

std::vector<int> parse_ids(const std::string& line) {
  std::vector<int> ids;
  std::istringstream in(line);
  for (std::string tok; in >> tok;) {
    try {
      std::size_t used = 0;
      ids.push_back(std::stoi(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw Error("not a token id: '" + tok + "'");
    }
  }
  return ids;
}

int configure_threads() {
  const char* env = std::getenv("MOCE_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (*end != '\0' || n < 1) throw UsageError("MOCE_THREADS must be a positive integer");
  Eigen::setNbThreads(static_cast<int>(n));
  return static_cast<int>(n);
}

}  // namespace

std::vector<std::pair<std::string, std::string>> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot read config '" + path + "'");
  std::vector<std::pair<std::string, std::string>> out;
  std::size_t n = 0;
  for (std::string line; std::getline(in, line);) {
    ++n;
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(n) + ": expected 'key = value'");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(n) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

int run(const std::vector<std::string>& args, std::istream& in, std::ostream& out, std::ostream& err) {
  CLI::App app{"Byte-level translation with adaptive multiscale attention", "moce"};
  app.require_subcommand(1);
  std::string config_path;

  // tokenize
  auto* tok = app.add_subcommand("tokenize", "Encode text lines to token ids, or decode ids to text");
  std::string tok_lang, tok_input, tok_text, tok_output, tok_langs;
  bool tok_decode = false;
  tok->add_option("--lang", tok_lang, "Language code of the text");
  tok->add_option("--languages", tok_langs, "Comma-separated vocabulary languages (default: --lang)");
  tok->add_option("--input", tok_input, "File with one sentence (or id line) per line (default stdin)");
  tok->add_option("--text", tok_text, "A single sentence (or id line)");
  tok->add_flag("--decode", tok_decode, "Decode id lines instead of encoding text");
  tok->add_option("--output", tok_output, "Output file (default stdout)");

  // conciseness
  auto* con = app.add_subcommand("conciseness", "Average UTF-8 length per language of a multi-parallel TSV");
  std::string con_input, con_pivot = "en", con_output;
  con->add_option("--input", con_input, "TSV with a header row of language codes");
  con->add_option("--pivot", con_pivot, "Pivot language")->capture_default_str();
  con->add_option("--output", con_output, "CSV output (default stdout)");

  // train
  auto* tr = app.add_subcommand("train", "Train a model");
  ModelFlags tr_model;
  TrainConfig tr_cfg;
  std::string tr_train, tr_valid, tr_synthetic, tr_outdir, tr_langs;
  int tr_pairs = 2000, tr_valid_pairs = 200, tr_min = 4, tr_max = 12, tr_alphabet = 20, tr_average = 5;
  double tr_target = 0.0;
  add_model_flags(tr, tr_model);
  tr->add_option("--train", tr_train, "Training corpus TSV (src_lang, tgt_lang, src_text, tgt_text)");
  tr->add_option("--valid", tr_valid, "Validation corpus TSV");
  tr->add_option("--synthetic", tr_synthetic, "Synthetic languages, pivot first, e.g. aa:1,cc:3");
  tr->add_option("--pairs", tr_pairs, "Synthetic training pairs")->capture_default_str();
  tr->add_option("--valid-pairs", tr_valid_pairs, "Synthetic validation pairs")->capture_default_str();
  tr->add_option("--min-symbols", tr_min, "Synthetic sentence length lower bound")->capture_default_str();
  tr->add_option("--max-symbols", tr_max, "Synthetic sentence length upper bound")->capture_default_str();
  tr->add_option("--alphabet", tr_alphabet, "Synthetic alphabet size")->capture_default_str();
  tr->add_option("--languages", tr_langs, "Comma-separated vocabulary languages (default: corpus languages)");
  tr->add_option("--lr", tr_cfg.learning_rate, "Peak learning rate")->capture_default_str();
  tr->add_option("--smoothing", tr_cfg.label_smoothing, "Label smoothing")->capture_default_str();
  tr->add_option("--batch-tokens", tr_cfg.batch_tokens, "Tokens per batch")->capture_default_str();
  tr->add_option("--warmup", tr_cfg.warmup_steps, "Warmup steps (0: constant rate)")->capture_default_str();
  tr->add_option("--patience", tr_cfg.patience, "Validations without improvement before stopping")->capture_default_str();
  tr->add_option("--valid-interval", tr_cfg.valid_interval, "Steps between validations")->capture_default_str();
  tr->add_option("--checkpoint-interval", tr_cfg.checkpoint_interval, "Steps between checkpoints (0: none)")->capture_default_str();
  tr->add_option("--max-steps", tr_cfg.max_steps, "Step limit")->capture_default_str();
  tr->add_option("--average", tr_average, "Average the last N checkpoints into model.bin")->capture_default_str();
  tr->add_option("--target-accuracy", tr_target, "Stop once held-out token accuracy reaches this (0: off)");
  tr->add_option("--output-dir", tr_outdir, "Directory for model.bin, loss_log.tsv and checkpoints");

  // translate
  auto* tl = app.add_subcommand("translate", "Translate text lines with beam search");
  std::string tl_model, tl_input, tl_src, tl_tgt, tl_output, tl_override;
  DecodeOptions tl_opts;
  bool tl_greedy = false;
  tl->add_option("--model", tl_model, "Checkpoint file");
  tl->add_option("--input", tl_input, "Source sentences, one per line");
  tl->add_option("--src-lang", tl_src, "Source language");
  tl->add_option("--tgt-lang", tl_tgt, "Target language");
  tl->add_option("--beam", tl_opts.beam, "Beam size")->capture_default_str();
  tl->add_option("--length-penalty", tl_opts.length_penalty, "Length penalty exponent")->capture_default_str();
  tl->add_option("--max-len", tl_opts.max_len, "Maximum generated tokens")->capture_default_str();
  tl->add_flag("--greedy", tl_greedy, "Arg-max decoding");
  tl->add_option("--override-lid", tl_override, "Router language: a vocabulary code or 'none'");
  tl->add_option("--output", tl_output, "Output file (default stdout)");

  // route-stats
  auto* rs = app.add_subcommand("route-stats", "Expert selection statistics of the adaptive layer");
  std::string rs_model, rs_input, rs_src, rs_tgt, rs_output, rs_override;
  rs->add_option("--model", rs_model, "Checkpoint file");
  rs->add_option("--input", rs_input, "Corpus TSV (src_lang, tgt_lang, src_text, tgt_text)");
  rs->add_option("--src-lang", rs_src, "Source language of the direction");
  rs->add_option("--tgt-lang", rs_tgt, "Target language of the direction");
  rs->add_option("--override-lid", rs_override, "Router language: a vocabulary code or 'none'");
  rs->add_option("--output", rs_output, "CSV output (default stdout)");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check of the full model gradient");
  std::uint64_t gc_seed = 7;
  double gc_tolerance = 1e-4;
  gc->add_option("--seed", gc_seed, "Random seed")->capture_default_str();
  gc->add_option("--tolerance", gc_tolerance, "Maximum relative error")->capture_default_str();

  // params
  auto* pa = app.add_subcommand("params", "Parameter counts of a configuration");
  ModelFlags pa_model;
  std::string pa_langs = "en";
  add_model_flags(pa, pa_model);
  pa->add_option("--languages", pa_langs, "Comma-separated vocabulary languages")->capture_default_str();

  for (auto* sub : {tok, con, tr, tl, rs, gc, pa})
    sub->add_option("--config", config_path, "File of 'key = value' lines mirroring the flags");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
    configure_threads();
    CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) apply_config(sub, config_path);

    if (sub == tok) {
      require(tok_lang, "--lang");
      if (!tok_input.empty() && !tok_text.empty()) throw UsageError("give at most one of --input and --text");
      const auto codes = tok_langs.empty() ? std::vector<std::string>{tok_lang} : split(tok_langs, ',');
      const auto vocab = build_vocab(std::span<const std::string>(codes));
      vocab.language_id(tok_lang);
      std::vector<std::string> lines;
      if (!tok_text.empty()) lines.push_back(tok_text);
      else if (!tok_input.empty()) lines = read_lines(tok_input);
      else lines = read_lines(in);
      Sink sink(tok_output, out);
      for (const auto& line : lines) {
        if (tok_decode) {
          sink.get() << decode(parse_ids(line), vocab) << '\n';
        } else {
          const auto seq = encode(line, tok_lang, vocab);
          for (std::size_t i = 0; i < seq.ids.size(); ++i) sink.get() << (i ? " " : "") << seq.ids[i];
          sink.get() << '\n';
        }
      }
    } else if (sub == con) {
      require(con_input, "--input");
      const auto report = conciseness_report(read_multi_parallel_tsv(con_input), con_pivot);
      Sink sink(con_output, out);
      sink.get().precision(10);
      write_conciseness_csv(report, sink.get());
    } else if (sub == tr) {
      require(tr_outdir, "--output-dir");
      if (tr_synthetic.empty() == tr_train.empty()) throw UsageError("give exactly one of --train and --synthetic");
      if (!tr_train.empty()) require(tr_valid, "--valid");
      if (tr_average < 1) throw UsageError("--average must be >= 1");
      std::filesystem::create_directories(tr_outdir);
      const auto dir = std::filesystem::path(tr_outdir);
      ModelConfig mc = tr_model.resolve();
      tr_cfg.seed = mc.seed;
      tr_cfg.dropout = mc.dropout;
      if (tr_target > 0.0) tr_cfg.target_accuracy = tr_target;
      if (tr_cfg.checkpoint_interval > 0) tr_cfg.checkpoint_dir = (dir / "checkpoints").string();
      tr_cfg.keep_checkpoints = tr_average;

      ParallelCorpus train_set, valid_set;
      if (!tr_synthetic.empty()) {
        const auto specs = parse_synthetic(tr_synthetic, tr_alphabet);
        train_set = make_synthetic_corpus(specs, {tr_pairs, tr_min, tr_max, mc.seed * 2 + 1});
        valid_set = make_synthetic_corpus(specs, {tr_valid_pairs, tr_min, tr_max, mc.seed * 2 + 2});
        write_corpus_tsv(train_set, (dir / "train.tsv").string());
        write_corpus_tsv(valid_set, (dir / "valid.tsv").string());
      } else {
        train_set = read_corpus_tsv(tr_train);
        valid_set = read_corpus_tsv(tr_valid);
      }
      std::vector<std::string> codes = tr_langs.empty() ? train_set.languages() : split(tr_langs, ',');
      if (tr_langs.empty())
        for (const auto& c : valid_set.languages())
          if (std::find(codes.begin(), codes.end(), c) == codes.end()) codes.push_back(c);
      auto model = build_model<float>(mc, build_vocab(std::span<const std::string>(codes)));
      const auto result = train(model, train_set, valid_set, tr_cfg);
      write_loss_log(result.log, (dir / "loss_log.tsv").string());
      const auto model_path = (dir / "model.bin").string();
      if (result.checkpoints.empty()) save_checkpoint(model, model_path);
      else save_checkpoint(average_checkpoints(result.checkpoints), model_path);
      out << "steps " << result.steps << "\nbest_valid_loss " << result.best_valid_loss << "\nvalid_accuracy "
          << result.final_valid_accuracy << "\nstopped "
          << (result.reached_target ? "target" : result.early_stopped ? "patience" : "max-steps") << "\nmodel " << model_path
          << '\n';
    } else if (sub == tl) {
      require(tl_model, "--model");
      require(tl_input, "--input");
      require(tl_src, "--src-lang");
      require(tl_tgt, "--tgt-lang");
      if (tl_opts.beam < 1) throw UsageError("--beam must be >= 1");
      if (tl_opts.max_len < 1) throw UsageError("--max-len must be >= 1");
      auto model = load_checkpoint(tl_model);
      model.vocab.language_id(tl_tgt);
      if (!tl_override.empty()) tl_opts.lid_override = override_lid(model.vocab, tl_override);
      Sink sink(tl_output, out);
      for (const auto& line : read_lines(tl_input)) {
        const auto src = encode(line, tl_src, model.vocab);
        const auto hyp = tl_greedy ? greedy_decode(model, src, tl_tgt, tl_opts) : beam_search(model, src, tl_tgt, tl_opts);
        sink.get() << decode(hyp, model.vocab) << '\n';
      }
    } else if (sub == rs) {
      require(rs_model, "--model");
      require(rs_input, "--input");
      require(rs_src, "--src-lang");
      require(rs_tgt, "--tgt-lang");
      auto model = load_checkpoint(rs_model);
      std::optional<LidOverride> lid;
      if (!rs_override.empty()) lid = override_lid(model.vocab, rs_override);
      const auto stats = record_expert_ratios(model, read_corpus_tsv(rs_input), rs_src, rs_tgt, lid);
      if (stats.empty()) throw Error("route-stats: no " + rs_src + "->" + rs_tgt + " records in '" + rs_input + "'");
      Sink sink(rs_output, out);
      sink.get().precision(10);
      write_stats_csv(stats, sink.get());
      if (!rs_output.empty())
        out << "avg_delta " << avg_delta(stats) << "\navg_delta_weighted " << avg_delta(stats, true) << '\n';
    } else if (sub == gc) {
      ModelConfig mc;
      mc.model_dim = 16;
      mc.heads = 2;
      mc.ffn_dim = 32;
      mc.max_radius = 3;
      mc.top_k = 2;
      mc.use_lid = true;
      mc.dropout = 0.0;
      mc.seed = gc_seed;
      const auto vocab = build_vocab({"aa", "cc"});
      auto model = build_model<double>(mc, vocab);
      const auto corpus = make_synthetic_corpus({{"aa", 20, 1}, {"cc", 20, 3}}, {2, 2, 4, gc_seed});
      const auto data = encode_corpus(corpus, vocab);
      auto params = model.parameters();
      const auto report = grad_check_parameters(
          [&](Tape<double>& tape) {
            return forward_loss(tape, model, std::span<const TokenSeq>(data.sources), std::span<const TokenSeq>(data.targets), 0.1);
          },
          std::span<Parameter<double>* const>(params));
      out << "max_relative_error " << report.max_rel_error << "\nworst " << report.worst_parameter << '['
          << report.worst_index << "]\nprobes " << report.probes << "\nskipped_unstable " << report.unstable_probes << '\n';
      if (!(report.max_rel_error < gc_tolerance)) {
        err << "moce: gradient check failed: max relative error " << report.max_rel_error << " >= " << gc_tolerance << '\n';
        return kExitFailure;
      }
    } else if (sub == pa) {
      const ModelConfig mc = pa_model.resolve();
      const auto codes = split(pa_langs, ',');
      const auto model = build_model<float>(mc, build_vocab(std::span<const std::string>(codes)));
      const std::int64_t pool = mc.has_adaptive_layer() ? pool_param_count(mc.max_radius, mc.head_dim(), mc.expert_bias) : 0;
      const std::int64_t overhead = adaptive_overhead(mc);
      out << "total_parameters " << model.parameter_count() << "\nadaptive_overhead " << overhead << "\npool_parameters "
          << pool << "\nrouter_parameters " << overhead - pool << '\n';
    }
    return kExitOk;
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "moce: " << e.what() << '\n';
    return kExitUsage;
  } catch (const UsageError& e) {
    err << "moce: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "moce: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace moce::cli
