#include "hat/cli.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "hat/attention_viz.hpp"
#include "hat/evaluation.hpp"
#include "hat/generation.hpp"
#include "hat/text_pipeline.hpp"
#include "hat/training.hpp"

namespace hat {
namespace {

namespace fs = std::filesystem;

std::string hex_sha1(std::string_view prefix, std::string_view content) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx, prefix.data(), prefix.size()) != 1 ||
      EVP_DigestUpdate(ctx, content.data(), content.size()) != 1 || EVP_DigestFinal_ex(ctx, digest, &len) != 1) {
    EVP_MD_CTX_free(ctx);
    throw std::runtime_error("SHA-1 computation failed");
  }
  EVP_MD_CTX_free(ctx);
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os || !(os << text)) throw std::runtime_error("cannot write " + path.string());
}

HatConfig preset(std::size_t d, std::size_t ffn, std::size_t heads, std::size_t layers, std::size_t vocab,
                 std::size_t positions) {
  HatConfig c;
  c.hidden_size = d;
  c.ffn_size = ffn;
  c.num_heads = heads;
  c.num_layers = layers;
  c.num_hier_layers = 1;
  c.vocab_size = vocab;
  c.max_positions = positions;
  c.mode = ModelMode::hat;
  return c;
}

std::string join_lines(const std::vector<std::string>& lines) {
  std::string s;
  for (const auto& l : lines) s += l + '\n';
  return s;
}

std::string render(std::span<const int> ids, const Vocabulary* vocab) {
  if (vocab) return vocab->decode(ids);
  std::string s;
  for (int id : ids) {
    if (id == kEosId || id == kBosId || id == kPadId) continue;
    if (!s.empty()) s += ' ';
    s += std::to_string(id);
  }
  return s;
}

// Fills vocab_size from the vocabulary when the config leaves it at zero.
HatConfig resolve_model_config(const fs::path& path, const std::optional<Vocabulary>& vocab) {
  auto j = read_json(path);
  if (vocab && j.value("vocab_size", std::size_t{0}) == 0) j["vocab_size"] = vocab->size();
  try {
    return config_from_json(j);
  } catch (const std::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

struct Options {
  // preprocess
  fs::path input, vocab_path, out;
  std::string mode = "document";
  std::size_t vocab_size = 50000, min_freq = 1;
  std::vector<std::string> specials;
  PipelineOptions pipeline;
  // train
  fs::path model_cfg, train_cfg, train_data, valid_data, init_from;
  std::string objective = "seq2seq";
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  // generate
  fs::path checkpoint, data, gen_cfg;
  bool trace = false;
  std::optional<std::size_t> beam, min_len, max_len;
  std::optional<double> length_penalty;
  // evaluate
  fs::path candidates, references;
  std::string metric = "rouge";
  // heatmap
  fs::path trace_file;
  std::optional<std::size_t> layer;
  std::size_t top_k = 16;
  std::string format = "csv";
  std::string prefix;
  // paramcount
  std::string preset_name;
};

int cmd_preprocess(const Options& o, std::ostream& out) {
  const auto mode = parse_mode(o.mode);
  const auto records = read_records(o.input);
  fs::create_directories(o.out);
  RunManifest manifest{"preprocess", {o.input}, {}, o.out};
  Vocabulary vocab;
  if (!o.vocab_path.empty()) {
    vocab = Vocabulary::load(o.vocab_path);
    manifest.inputs.push_back(o.vocab_path);
  } else {
    auto texts = corpus_texts(records);
    if (o.pipeline.lowercase)
      for (auto& t : texts) std::transform(t.begin(), t.end(), t.begin(), [](unsigned char c) { return std::tolower(c); });
    vocab = Vocabulary::build(texts, o.vocab_size, o.min_freq, o.specials);
  }
  vocab.save(o.out / "vocab.txt");
  std::vector<EncodedExample> encoded;
  for (std::size_t i = 0; i < records.size(); ++i) {
    try {
      for (auto& ex : encode_record(records[i], static_cast<int>(i), mode, vocab, o.pipeline)) {
        validate(ex, o.pipeline.max_source_len, o.pipeline.max_target_len);
        encoded.push_back(std::move(ex));
      }
    } catch (const std::exception& e) {
      throw std::runtime_error(o.input.string() + ": record " + std::to_string(i + 1) + ": " + e.what());
    }
  }
  write_encoded(o.out / "encoded.jsonl", encoded);
  manifest.settings = {{"mode", o.mode},
                       {"vocab_size", o.vocab_size},
                       {"min_freq", o.min_freq},
                       {"specials", o.specials},
                       {"max_source_len", o.pipeline.max_source_len},
                       {"max_target_len", o.pipeline.max_target_len},
                       {"max_segments", o.pipeline.max_segments},
                       {"chunk_tokens", o.pipeline.chunk_tokens},
                       {"lowercase", o.pipeline.lowercase}};
  manifest.write(o.out / "manifest.json");
  out << "wrote " << encoded.size() << " examples (" << records.size() << " records, vocabulary " << vocab.size()
      << ") to " << o.out.string() << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out) {
  std::optional<Vocabulary> vocab;
  if (!o.vocab_path.empty()) vocab = Vocabulary::load(o.vocab_path);
  const HatConfig model = resolve_model_config(o.model_cfg, vocab);
  OptimizerConfig opt = load_optimizer_config(o.train_cfg);
  if (o.seed) opt.seed = *o.seed;
  if (o.steps) {
    opt.total_steps = *o.steps;
    opt.warmup_steps = std::min(opt.warmup_steps, opt.total_steps);
  }
  opt.validate();
  const auto train_set = read_encoded(o.train_data);
  std::vector<EncodedExample> valid_set;
  if (!o.valid_data.empty()) valid_set = read_encoded(o.valid_data);

  RunManifest manifest{"train", {o.model_cfg, o.train_cfg, o.train_data}, {}, o.out};
  if (!o.valid_data.empty()) manifest.inputs.push_back(o.valid_data);
  if (!o.vocab_path.empty()) manifest.inputs.push_back(o.vocab_path);
  if (!o.init_from.empty()) manifest.inputs.push_back(o.init_from);
  manifest.settings = {{"model", to_json(model)}, {"optimizer", to_json(opt)}, {"objective", o.objective}};
  fs::create_directories(o.out);

  TrainOptions options;
  options.out_dir = o.out;
  if (!o.init_from.empty()) options.init_from = o.init_from;
  options.on_log = [&](const LogEntry& e) {
    if (e.valid_loss) out << e.to_json().dump() << '\n';
  };
  if (o.objective == "mlm") {
    if (!vocab) throw std::invalid_argument("--objective mlm needs --vocab to locate the <mask> token");
    if (!vocab->contains("<mask>")) throw std::invalid_argument(o.vocab_path.string() + ": no <mask> token");
    const auto res = mlm_pretrain(model, opt, train_set, valid_set, vocab->id("<mask>"), options);
    out << "checkpoint " << res.checkpoint.string() << '\n';
  } else if (o.objective == "seq2seq") {
    if (valid_set.empty()) throw std::invalid_argument("seq2seq training needs --valid-data");
    const auto res = train(model, opt, train_set, valid_set, options);
    for (const auto& name : res.not_initialized) out << "fresh parameter " << name << '\n';
    out << "best step " << res.best_step << " valid_loss " << res.best_valid_loss << " checkpoint "
        << res.best_checkpoint.string() << '\n';
  } else {
    throw std::invalid_argument("unknown objective '" + o.objective + "'");
  }
  manifest.write(o.out / "manifest.json");
  return 0;
}

int cmd_generate(const Options& o, std::ostream& out) {
  const auto ckpt = load_checkpoint(o.checkpoint);
  GenConfig gen;
  if (!o.gen_cfg.empty()) {
    try {
      gen = gen_config_from_json(read_json(o.gen_cfg));
    } catch (const std::exception& e) {
      throw std::runtime_error(o.gen_cfg.string() + ": " + e.what());
    }
  }
  if (o.beam) gen.beam_width = *o.beam;
  if (o.min_len) gen.min_len = *o.min_len;
  if (o.max_len) gen.max_len = *o.max_len;
  if (o.length_penalty) gen.length_penalty = *o.length_penalty;
  if (o.trace) gen.trace_attention = true;
  gen.validate();
  if (gen.max_len + 1 > ckpt.config.max_positions)
    throw std::invalid_argument("max_len " + std::to_string(gen.max_len) + " needs " + std::to_string(gen.max_len + 1) +
                                " decoder positions; the model has " + std::to_string(ckpt.config.max_positions));
  std::optional<Vocabulary> vocab;
  if (!o.vocab_path.empty()) vocab = Vocabulary::load(o.vocab_path);
  const auto data = read_encoded(o.data);

  fs::create_directories(o.out);
  if (gen.trace_attention) fs::create_directories(o.out / "traces");
  std::vector<std::string> cands, refs;
  int open_doc = -2;  // chunks of one document are concatenated into one line
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& ex = data[i];
    ForwardContext ctx;
    const auto enc = encode(ex, ckpt.params, ckpt.config, ctx);
    const auto hyp = beam_search(enc, ckpt.params, ckpt.config, gen);
    const std::string cand = render(hyp.tokens, vocab ? &*vocab : nullptr);
    const std::string ref = render(ex.target_ids, vocab ? &*vocab : nullptr);
    const bool continues = ex.chunk_index > 0 && ex.doc_index == open_doc;
    if (continues) {
      cands.back() += cands.back().empty() || cand.empty() ? cand : " " + cand;
      refs.back() += refs.back().empty() || ref.empty() ? ref : " " + ref;
    } else {
      cands.push_back(cand);
      refs.push_back(ref);
    }
    open_doc = ex.chunk_index >= 0 ? ex.doc_index : -2;
    if (hyp.trace) write_text(o.out / "traces" / (std::to_string(i) + ".json"), hyp.trace->to_json().dump() + "\n");
  }
  write_text(o.out / "candidates.txt", join_lines(cands));
  write_text(o.out / "references.txt", join_lines(refs));
  RunManifest manifest{"generate", {o.checkpoint, o.data}, {{"generation", to_json(gen)}}, o.out};
  if (!o.gen_cfg.empty()) manifest.inputs.push_back(o.gen_cfg);
  if (!o.vocab_path.empty()) manifest.inputs.push_back(o.vocab_path);
  manifest.write(o.out / "manifest.json");
  out << "decoded " << data.size() << " examples into " << cands.size() << " lines\n";
  return 0;
}

int cmd_evaluate(const Options& o, std::ostream& out) {
  const auto cands = read_lines(o.candidates);
  const auto refs = read_lines(o.references);
  const Metric metric = parse_metric(o.metric);
  EvalReport rep;
  try {
    rep = evaluate(cands, refs);
  } catch (const std::exception& e) {
    throw std::runtime_error(o.candidates.string() + " vs " + o.references.string() + ": " + e.what());
  }
  auto j = rep.to_json();
  j["metric"] = o.metric;
  out << (metric == Metric::bleu ? "BLEU " + std::to_string(rep.bleu.bleu)
                                 : "ROUGE-1 " + std::to_string(rep.rouge1.f1) + " ROUGE-2 " +
                                       std::to_string(rep.rouge2.f1) + " ROUGE-L " + std::to_string(rep.rougeL.f1))
      << '\n';
  if (!o.out.empty()) {
    if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
    write_text(o.out, j.dump(2) + "\n");
    RunManifest manifest{"evaluate", {o.candidates, o.references}, {{"metric", o.metric}}, o.out.parent_path()};
    manifest.write(fs::path(o.out.string() + ".manifest.json"));
  } else {
    out << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_heatmap(const Options& o, std::ostream& out) {
  const auto trace = AttentionTrace::from_json(read_json(o.trace_file));
  trace.check_normalized();
  const auto format = parse_heatmap_format(o.format);
  const std::string prefix = o.prefix.empty() ? o.trace_file.stem().string() : o.prefix;
  if (fs::path(prefix).has_parent_path()) fs::create_directories(fs::path(prefix).parent_path());
  std::vector<fs::path> written;
  if (o.layer) {
    const fs::path p = prefix + ".layer" + std::to_string(*o.layer) + "." + o.format;
    export_heatmap(aggregate(trace, *o.layer, o.top_k), p, format);
    written.push_back(p);
  } else {
    written = export_all_layers(trace, prefix, o.top_k, format);
  }
  RunManifest manifest{"heatmap", {o.trace_file}, {{"top_k", o.top_k}, {"format", o.format}}, fs::path(prefix).parent_path()};
  if (o.layer) manifest.settings["layer"] = *o.layer;
  manifest.write(prefix + ".manifest.json");
  for (const auto& p : written) out << p.string() << '\n';
  return 0;
}

int cmd_paramcount(const Options& o, std::ostream& out) {
  HatConfig config;
  std::optional<ParamPreset> quoted;
  if (!o.preset_name.empty()) {
    for (const auto& p : param_presets())
      if (p.name == o.preset_name) quoted = p;
    if (!quoted) throw std::invalid_argument("unknown preset '" + o.preset_name + "'");
    config = quoted->config;
  } else if (!o.model_cfg.empty()) {
    std::optional<Vocabulary> vocab;
    if (!o.vocab_path.empty()) vocab = Vocabulary::load(o.vocab_path);
    config = resolve_model_config(o.model_cfg, vocab);
  } else {
    throw std::invalid_argument("paramcount needs --model or --preset");
  }
  const auto rep = param_count(config);
  auto j = rep.to_json();
  if (quoted) j["quoted"] = {{"hat", quoted->quoted_hat}, {"plain", quoted->quoted_plain}};
  out << j.dump(2) << '\n';
  if (!o.out.empty()) {
    fs::create_directories(o.out);
    write_text(o.out / "paramcount.json", j.dump(2) + "\n");
    RunManifest manifest{"paramcount", {}, {{"model", to_json(config)}}, o.out};
    if (!o.model_cfg.empty()) manifest.inputs.push_back(o.model_cfg);
    manifest.write(o.out / "manifest.json");
  }
  return 0;
}

}  // namespace

std::string git_blob_sha1(std::string_view content) {
  const std::string header = "blob " + std::to_string(content.size());
  return hex_sha1(std::string_view(header.c_str(), header.size() + 1), content);
}

std::string git_blob_sha1_file(const fs::path& path) { return git_blob_sha1(read_file(path)); }

std::string RunManifest::input_hash() const {
  std::string listing;
  for (const auto& p : inputs) listing += git_blob_sha1_file(p) + "  " + p.filename().string() + "\n";
  listing += settings.dump();
  return git_blob_sha1(listing);
}

nlohmann::json RunManifest::to_json() const {
  nlohmann::json files = nlohmann::json::array();
  for (const auto& p : inputs) files.push_back({{"path", p.string()}, {"sha1", git_blob_sha1_file(p)}});
  return {{"command", command},
          {"inputs", files},
          {"settings", settings},
          {"output_dir", output_dir.string()},
          {"input_hash", input_hash()}};
}

void RunManifest::write(const fs::path& path) const { write_text(path, to_json().dump(2) + "\n"); }

nlohmann::json ParamCountReport::to_json() const {
  auto breakdown = [](const ParameterBreakdown& b) {
    return nlohmann::json{{"token_embedding", b.token_embedding}, {"positions", b.positions},
                          {"segments", b.segments},               {"encoder", b.encoder},
                          {"hier_encoder", b.hier_encoder},       {"decoder", b.decoder},
                          {"decoder_hier", b.decoder_hier},       {"encoder_hier", b.encoder_hier},
                          {"total", b.total()}};
  };
  return {{"hat", breakdown(hat_breakdown)},
          {"plain", breakdown(plain_breakdown)},
          {"hat_total", hat_total},
          {"plain_total", plain_total},
          {"delta", delta},
          {"closed_form_delta", closed_form_delta}};
}

ParamCountReport param_count(const HatConfig& config) {
  ParamCountReport r;
  r.hat = config;
  r.plain = config;
  if (config.encoder_only()) {
    r.hat.mode = ModelMode::encoder_only_hat;
    r.plain.mode = ModelMode::encoder_only_plain;
  } else {
    r.hat.mode = ModelMode::hat;
    r.plain.mode = ModelMode::plain;
    if (r.hat.num_hier_layers == 0) r.hat.num_hier_layers = 1;
  }
  r.plain.num_hier_layers = 0;
  r.hat_breakdown = parameter_breakdown(r.hat);
  r.plain_breakdown = parameter_breakdown(r.plain);
  r.hat_total = r.hat_breakdown.total();
  r.plain_total = r.plain_breakdown.total();
  r.delta = r.hat_total - r.plain_total;
  r.closed_form_delta = hierarchical_delta(r.hat);
  return r;
}

const std::vector<ParamPreset>& param_presets() {
  // Summarization uses the 50265-token byte-level vocabulary and 3072 source
  // positions; the translation presets assume a 44000-entry joint dictionary.
  static const std::vector<ParamPreset> presets{
      {"summarization-large", preset(1024, 4096, 16, 12, 50265, 3072), 471e6, 408e6},
      {"mt-large", preset(1024, 4096, 16, 6, 44000, 1024), 260e6, 222e6},
      {"mt-small", preset(512, 1024, 8, 6, 44000, 1024), 64e6, 55e6},
  };
  return presets;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Hierarchical Attention Transformer toolkit", "hat"};
  app.require_subcommand(1);
  Options o;

  auto* pre = app.add_subcommand("preprocess", "Encode a JSON Lines corpus into model-ready examples");
  pre->add_option("--input", o.input, "Raw records, one JSON object per line")->required()->check(CLI::ExistingFile);
  pre->add_option("--mode", o.mode, "document | conversation | mt")->check(CLI::IsMember({"document", "conversation", "mt"}));
  pre->add_option("--vocab", o.vocab_path, "Existing vocabulary; built from the input when absent")->check(CLI::ExistingFile);
  pre->add_option("--vocab-size", o.vocab_size, "Corpus tokens kept when building");
  pre->add_option("--min-freq", o.min_freq);
  pre->add_option("--special", o.specials, "Extra special tokens, e.g. <mask>");
  pre->add_option("--max-source-len", o.pipeline.max_source_len);
  pre->add_option("--max-target-len", o.pipeline.max_target_len);
  pre->add_option("--max-segments", o.pipeline.max_segments);
  pre->add_option("--chunk-tokens", o.pipeline.chunk_tokens);
  pre->add_flag("--lowercase", o.pipeline.lowercase);
  pre->add_option("--out", o.out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a model");
  tr->add_option("--model", o.model_cfg, "Model config (JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--train-config", o.train_cfg, "Optimizer config (JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--train-data", o.train_data)->required()->check(CLI::ExistingFile);
  tr->add_option("--valid-data", o.valid_data)->check(CLI::ExistingFile);
  tr->add_option("--vocab", o.vocab_path)->check(CLI::ExistingFile);
  tr->add_option("--init-from", o.init_from, "Checkpoint whose matching tensors seed the model")->check(CLI::ExistingFile);
  tr->add_option("--objective", o.objective, "seq2seq | mlm")->check(CLI::IsMember({"seq2seq", "mlm"}));
  tr->add_option("--seed", o.seed);
  tr->add_option("--steps", o.steps, "Override total_steps");
  tr->add_option("--out", o.out)->required();

  auto* ge = app.add_subcommand("generate", "Decode a dataset with beam search");
  ge->add_option("--checkpoint", o.checkpoint)->required()->check(CLI::ExistingFile);
  ge->add_option("--data", o.data)->required()->check(CLI::ExistingFile);
  ge->add_option("--gen-config", o.gen_cfg)->check(CLI::ExistingFile);
  ge->add_option("--vocab", o.vocab_path, "Decode ids to text")->check(CLI::ExistingFile);
  ge->add_option("--beam", o.beam);
  ge->add_option("--min-len", o.min_len);
  ge->add_option("--max-len", o.max_len);
  ge->add_option("--length-penalty", o.length_penalty);
  ge->add_flag("--trace-attention", o.trace, "Write decoder-to-BOS attention traces");
  ge->add_option("--out", o.out)->required();

  auto* ev = app.add_subcommand("evaluate", "Score candidates against references");
  ev->add_option("--candidates", o.candidates)->required()->check(CLI::ExistingFile);
  ev->add_option("--references", o.references)->required()->check(CLI::ExistingFile);
  ev->add_option("--metric", o.metric)->check(CLI::IsMember({"rouge", "bleu"}));
  ev->add_option("--out", o.out, "Report path (JSON)");

  auto* hm = app.add_subcommand("heatmap", "Render attention traces as heatmaps");
  hm->add_option("--trace", o.trace_file)->required()->check(CLI::ExistingFile);
  hm->add_option("--layer", o.layer, "Single layer; every layer when absent");
  hm->add_option("--top-k", o.top_k);
  hm->add_option("--format", o.format)->check(CLI::IsMember({"csv", "pgm"}));
  hm->add_option("--prefix", o.prefix, "Output path prefix");

  auto* pc = app.add_subcommand("paramcount", "Closed-form parameter counts");
  auto* model_opt = pc->add_option("--model", o.model_cfg)->check(CLI::ExistingFile);
  pc->add_option("--preset", o.preset_name, "summarization-large | mt-large | mt-small")->excludes(model_opt);
  pc->add_option("--vocab", o.vocab_path)->check(CLI::ExistingFile);
  pc->add_option("--out", o.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err);
  }
  try {
    if (*pre) return cmd_preprocess(o, out);
    if (*tr) return cmd_train(o, out);
    if (*ge) return cmd_generate(o, out);
    if (*ev) return cmd_evaluate(o, out);
    if (*hm) return cmd_heatmap(o, out);
    if (*pc) return cmd_paramcount(o, out);
  } catch (const std::exception& e) {
    err << "hat: error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace hat
