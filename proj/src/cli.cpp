#include "peva/cli.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "CLI11.hpp"
#include "peva/encoder.hpp"
#include "peva/error.hpp"
#include "peva/gradient_suite.hpp"
#include "peva/synth.hpp"
#include "peva/trainer.hpp"
#include "peva/zeroshot.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace peva {

namespace {

/// Raised for bad flag values or manifest overrides of the wrong type.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void dump_value(const json& v, int indent, int depth, std::string& out) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (v.type()) {
    case json::value_t::number_float:
      if (std::isfinite(v.get<double>())) {
        out += format_real(v.get<double>());
      } else {
        out += "null";
      }
      return;
    case json::value_t::object: {
      if (v.empty()) {
        out += "{}";
        return;
      }
      out += '{';
      bool first = true;
      for (auto it = v.begin(); it != v.end(); ++it) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        out += json(it.key()).dump();
        out += indent < 0 ? ":" : ": ";
        dump_value(it.value(), indent, depth + 1, out);
      }
      newline(depth);
      out += '}';
      return;
    }
    case json::value_t::array: {
      if (v.empty()) {
        out += "[]";
        return;
      }
      out += '[';
      bool first = true;
      for (const auto& item : v) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        dump_value(item, indent, depth + 1, out);
      }
      newline(depth);
      out += ']';
      return;
    }
    default:
      out += v.dump();
  }
}

void write_text(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << text;
  if (!out) throw DataError("failed writing " + path);
}

json per_class_json(const EvalReport& report, const std::vector<std::string>& categories) {
  json per_class = json::object();
  for (std::size_t c = 0; c < categories.size(); ++c) {
    if (auto acc = report.class_accuracy(c)) per_class[categories[c]] = *acc;
  }
  return per_class;
}

// ---- configuration overrides -------------------------------------------------

template <typename T>
T typed(const json& v, const std::string& key) {
  try {
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw json::type_error::create(302, "expected boolean", nullptr);
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_unsigned()) throw json::type_error::create(302, "expected non-negative integer", nullptr);
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw json::type_error::create(302, "expected number", nullptr);
    }
    return v.get<T>();
  } catch (const json::exception&) {
    throw UsageError("manifest config key '" + key + "' has the wrong type (" + v.dump() + ")");
  }
}

/// A named setting that can come from the manifest's config block or from a flag.
struct Setting {
  std::string key;
  std::function<void(const json&)> from_json;
  CLI::Option* flag = nullptr;
  std::function<void()> from_flag;
};

template <typename T>
void add_setting(std::vector<Setting>& settings, CLI::App& app, const std::string& key, const std::string& flag_name,
                 T& target, T& flag_storage, const std::string& help) {
  Setting s;
  s.key = key;
  s.from_json = [&target, key](const json& v) { target = typed<T>(v, key); };
  s.flag = app.add_option(flag_name, flag_storage, help);
  s.from_flag = [&target, &flag_storage] { target = flag_storage; };
  settings.push_back(std::move(s));
}

void apply_settings(std::vector<Setting>& settings, const json& section, const std::string& section_name) {
  if (!section.is_null()) {
    if (!section.is_object()) throw UsageError("manifest config." + section_name + " must be an object");
    for (auto it = section.begin(); it != section.end(); ++it) {
      auto match = std::find_if(settings.begin(), settings.end(), [&](const Setting& s) { return s.key == it.key(); });
      if (match == settings.end()) {
        throw UsageError("unknown key '" + it.key() + "' in manifest config." + section_name);
      }
      match->from_json(it.value());
    }
  }
  for (auto& s : settings) {
    if (s.flag && s.flag->count() > 0) s.from_flag();
  }
}

json train_config_json(const TrainConfig& c) {
  return {{"shots", c.shots},
          {"epochs", c.epochs},
          {"lr", c.adam.learning_rate},
          {"beta1", c.adam.beta1},
          {"beta2", c.adam.beta2},
          {"adam_eps", c.adam.eps},
          {"weight_decay", c.adam.weight_decay},
          {"decoupled_weight_decay", c.adam.decoupled},
          {"batch_size", c.batch_size},
          {"logit_scale", c.logit_scale},
          {"seed", c.seed},
          {"distill", c.distill},
          {"proj_width", c.encoder.proj_width},
          {"heads", c.encoder.heads},
          {"mlp_hidden", c.encoder.mlp_hidden},
          {"layers", c.encoder.layers},
          {"positional_embedding", c.encoder.use_positional_embedding},
          {"max_views", c.encoder.max_views}};
}

json encoder_config_json(const EncoderConfig& c) {
  return {{"dim", c.dim},
          {"proj_width", c.proj_width},
          {"heads", c.heads},
          {"mlp_hidden", c.mlp_hidden},
          {"layers", c.layers},
          {"positional_embedding", c.use_positional_embedding},
          {"max_views", c.max_views}};
}

std::size_t max_views(const FeatureSet& set) {
  std::size_t m = 0;
  for (const auto& s : set.shapes) m = std::max(m, s.views.rows());
  return m;
}

const FeatureSet& split_or_throw(const Dataset& data, const std::string& split) {
  auto it = data.splits.find(split);
  if (it == data.splits.end()) throw DataError("manifest has no '" + split + "' split");
  return it->second;
}

Dataset load_split(const std::string& manifest_path, const std::string& split) {
  const Manifest manifest = read_manifest(manifest_path);
  const std::vector<std::string> wanted = {split};
  return load_dataset(manifest, wanted);
}

// ---- commands ------------------------------------------------------------------

struct ZeroShotArgs {
  std::string manifest, split = "test", agg = "peva", out, report;
  double scale = kDefaultLogitScale;
  std::size_t threads = 1;
  std::uint64_t seed = 0;
};

int cmd_zero_shot(const ZeroShotArgs& a) {
  const Dataset data = load_split(a.manifest, a.split);
  const FeatureSet& test = split_or_throw(data, a.split);
  const EvalMode mode = a.agg == "avg" ? EvalMode::zero_avg : EvalMode::zero_peva;
  EvalOptions opts;
  opts.logit_scale = a.scale;
  opts.threads = a.threads;
  const EvalReport report = evaluate(test, data.prompts, mode, opts);

  json metrics = {{"accuracy", report.accuracy},
                  {"per_class", per_class_json(report, data.prompts.categories)},
                  {"mode", "zero_shot"},
                  {"agg_mode", a.agg},
                  {"seed", a.seed},
                  {"config_echo", {{"manifest", a.manifest}, {"split", a.split}, {"scale", a.scale}}}};
  write_text(dump_json(metrics) + "\n", a.out);

  if (!a.report.empty()) {
    std::ostringstream csv;
    csv << "shape_id,label,predicted,view,score,weight\n";
    for (std::size_t i = 0; i < test.shapes.size(); ++i) {
      const ShapeRecord& s = test.shapes[i];
      const AggregationResult agg = aggregate_peva(data.prompts.features, s.views);
      const double uniform = 1.0 / static_cast<double>(s.views.rows());
      for (std::size_t v = 0; v < s.views.rows(); ++v) {
        csv << s.shape_id << ',' << s.label_index << ',' << report.predictions[i] << ',' << v << ','
            << format_real(agg.scores[v]) << ',' << format_real(mode == EvalMode::zero_avg ? uniform : agg.weights[v])
            << '\n';
      }
    }
    write_text(csv.str(), a.report);
  }
  return kExitOk;
}

struct TrainArgs {
  std::string manifest, out, split = "train", test_split = "test";
  bool no_distill = false, decoupled = false, log_test_acc = false;
  std::size_t threads = 1;
  // flag storage, copied into the config only when the flag was given
  TrainConfig flags;
};

int cmd_train(TrainArgs& a, std::vector<Setting>& settings) {
  const Manifest manifest = read_manifest(a.manifest);
  // The settings write into a.flags, which starts from the defaults.
  const json section =
      manifest.config.is_object() && manifest.config.contains("train") ? manifest.config["train"] : json();
  apply_settings(settings, section, "train");
  TrainConfig config = a.flags;
  if (a.no_distill) config.distill = false;
  if (a.decoupled) config.adam.decoupled = true;

  std::vector<std::string> wanted = {a.split};
  if (a.log_test_acc) wanted.push_back(a.test_split);
  const Dataset data = load_dataset(manifest, wanted);
  const FeatureSet& train_set = split_or_throw(data, a.split);
  const FeatureSet* test_set = a.log_test_acc ? &split_or_throw(data, a.test_split) : nullptr;

  if (config.encoder.use_positional_embedding && config.encoder.max_views == 0) {
    config.encoder.max_views = max_views(train_set);
    if (test_set) config.encoder.max_views = std::max(config.encoder.max_views, max_views(*test_set));
  }

  const fs::path out_dir = a.out;
  fs::create_directories(out_dir);
  std::ofstream log(out_dir / "epochs.jsonl", std::ios::binary);
  if (!log) throw DataError("cannot write " + (out_dir / "epochs.jsonl").string());
  const TrainResult result = train(train_set, data.prompts, config, test_set, [&log](const EpochLog& e) {
    log << e.to_json() << '\n';
    log.flush();
  });
  save_checkpoint(result.params, out_dir / "checkpoint.pevf");

  EvalOptions opts;
  opts.logit_scale = config.logit_scale;
  opts.threads = a.threads;
  opts.encoder = &result.params;
  const EvalReport train_report = evaluate(result.training_set, data.prompts, EvalMode::few, opts);
  json summary = {{"final_train_acc", train_report.accuracy},
                  {"epochs", result.log.size()},
                  {"final_loss_cls", result.log.empty() ? 0.0 : result.log.back().loss_cls},
                  {"final_loss_fd", result.log.empty() ? 0.0 : result.log.back().loss_fd},
                  {"final_loss_total", result.log.empty() ? 0.0 : result.log.back().loss_total},
                  {"training_shapes", result.training_set.size()},
                  {"mode", "train"},
                  {"seed", config.seed},
                  {"config_echo", train_config_json(config)}};
  if (!result.log.empty() && result.log.back().test_acc) summary["final_test_acc"] = *result.log.back().test_acc;
  write_text(dump_json(summary) + "\n", (out_dir / "train_summary.json").string());
  std::cerr << "trained " << result.log.size() << " epochs on " << result.training_set.size()
            << " shapes; train accuracy " << format_real(train_report.accuracy) << "\n";
  return kExitOk;
}

struct EvalArgs {
  std::string manifest, checkpoint, split = "test", out;
  std::size_t threads = 1;
  double scale = kDefaultLogitScale;
  std::uint64_t seed = 0;
};

int cmd_eval(const EvalArgs& a) {
  const Dataset data = load_split(a.manifest, a.split);
  const FeatureSet& test = split_or_throw(data, a.split);
  const EncoderParams params = load_checkpoint(a.checkpoint);
  if (params.config.dim != test.dim) {
    throw DimensionError("checkpoint dimension " + std::to_string(params.config.dim) +
                         " does not match feature dimension " + std::to_string(test.dim));
  }
  EvalOptions opts;
  opts.logit_scale = a.scale;
  opts.threads = a.threads;
  opts.encoder = &params;
  const EvalReport report = evaluate(test, data.prompts, EvalMode::few, opts);
  json metrics = {{"accuracy", report.accuracy},
                  {"per_class", per_class_json(report, data.prompts.categories)},
                  {"mode", "few_shot"},
                  {"seed", a.seed},
                  {"config_echo",
                   {{"manifest", a.manifest},
                    {"checkpoint", a.checkpoint},
                    {"split", a.split},
                    {"scale", a.scale},
                    {"encoder", encoder_config_json(params.config)}}}};
  write_text(dump_json(metrics) + "\n", a.out);
  return kExitOk;
}

struct SynthArgs {
  SynthConfig config;
  std::string out;
};

int cmd_synth(const SynthArgs& a) {
  const SynthData data = generate(a.config);
  const fs::path manifest = write_synth(data, a.config, a.out);
  std::cerr << "wrote " << manifest.string() << "\n";
  return kExitOk;
}

struct GradcheckArgs {
  std::uint64_t seed = 0;
  std::string fault = "none";
};

int cmd_gradcheck(const GradcheckArgs& a) {
  static const std::map<std::string, testing::BackwardFault> faults = {
      {"none", testing::BackwardFault::none},         {"matmul", testing::BackwardFault::matmul},
      {"softmax", testing::BackwardFault::softmax},   {"layer_norm", testing::BackwardFault::layer_norm},
      {"gelu", testing::BackwardFault::gelu},         {"add_bias", testing::BackwardFault::add_bias}};
  testing::inject_backward_fault(faults.at(a.fault));
  const GradSuiteReport report = run_gradient_suite(a.seed);
  testing::inject_backward_fault(testing::BackwardFault::none);
  std::cout << report.to_text();
  return report.passed ? kExitOk : kExitNumeric;
}

struct DumpArgs {
  std::string manifest, checkpoint, split = "test", agg = "peva", out;
  std::size_t threads = 1;
};

int cmd_dump_embeddings(const DumpArgs& a) {
  const Dataset data = load_split(a.manifest, a.split);
  const FeatureSet& set = split_or_throw(data, a.split);
  EvalOptions opts;
  opts.threads = a.threads;
  EncoderParams params;
  EvalMode mode = a.agg == "avg" ? EvalMode::zero_avg : EvalMode::zero_peva;
  if (!a.checkpoint.empty()) {
    params = load_checkpoint(a.checkpoint);
    if (params.config.dim != set.dim) {
      throw DimensionError("checkpoint dimension " + std::to_string(params.config.dim) +
                           " does not match feature dimension " + std::to_string(set.dim));
    }
    opts.encoder = &params;
    mode = EvalMode::few;
  }
  const Tensor desc = descriptors(set, data.prompts, mode, opts);
  std::ostringstream csv;
  for (std::size_t i = 0; i < set.shapes.size(); ++i) {
    csv << set.shapes[i].shape_id << ',' << set.shapes[i].label_index;
    for (double v : desc.row(i)) csv << ',' << format_real(v);
    csv << '\n';
  }
  write_text(csv.str(), a.out);
  return kExitOk;
}

}  // namespace

std::string dump_json(const json& value, int indent) {
  std::string out;
  dump_value(value, indent, 0, out);
  return out;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"peva: multi-view shape recognition with prompt-enhanced view aggregation"};
  app.require_subcommand(1);

  const std::vector<std::string> agg_modes = {"peva", "avg"};

  ZeroShotArgs zs;
  auto* zero = app.add_subcommand("zero-shot", "zero-shot accuracy from view and prompt features");
  zero->add_option("--manifest", zs.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  zero->add_option("--split", zs.split, "split to evaluate")->capture_default_str();
  zero->add_option("--agg", zs.agg, "view aggregation")->check(CLI::IsMember(agg_modes))->capture_default_str();
  zero->add_option("--scale", zs.scale, "logit scale")->capture_default_str()->check(CLI::PositiveNumber);
  zero->add_option("--report", zs.report, "write per-view discriminative scores and weights (CSV)");
  zero->add_option("--out", zs.out, "metrics JSON path (stdout when omitted)");
  zero->add_option("--threads", zs.threads, "evaluation threads")->capture_default_str()->check(CLI::PositiveNumber);
  zero->add_option("--seed", zs.seed, "seed echoed into the metrics")->capture_default_str();

  TrainArgs tr;
  std::vector<Setting> settings;
  TrainConfig& f = tr.flags;
  TrainConfig flag_values;  // raw flag storage
  auto* trn = app.add_subcommand("train", "few-shot training of the view encoder");
  trn->add_option("--manifest", tr.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  trn->add_option("--out", tr.out, "output directory")->required();
  trn->add_option("--split", tr.split, "training split")->capture_default_str();
  trn->add_option("--test-split", tr.test_split, "split for --log-test-acc")->capture_default_str();
  trn->add_flag("--no-distill", tr.no_distill, "train with the classification loss only");
  trn->add_flag("--decoupled-weight-decay", tr.decoupled, "shrink weights after the Adam step instead of L2");
  trn->add_flag("--log-test-acc", tr.log_test_acc, "evaluate the test split after every epoch");
  trn->add_option("--threads", tr.threads, "threads for the final evaluation")->check(CLI::PositiveNumber);
  add_setting(settings, *trn, "shots", "--k", f.shots, flag_values.shots, "shots per class");
  add_setting(settings, *trn, "epochs", "--epochs", f.epochs, flag_values.epochs, "training epochs");
  add_setting(settings, *trn, "seed", "--seed", f.seed, flag_values.seed, "master seed");
  add_setting(settings, *trn, "lr", "--lr", f.adam.learning_rate, flag_values.adam.learning_rate, "Adam learning rate");
  add_setting(settings, *trn, "weight_decay", "--weight-decay", f.adam.weight_decay, flag_values.adam.weight_decay,
              "weight decay coefficient");
  add_setting(settings, *trn, "beta1", "--beta1", f.adam.beta1, flag_values.adam.beta1, "Adam beta1");
  add_setting(settings, *trn, "beta2", "--beta2", f.adam.beta2, flag_values.adam.beta2, "Adam beta2");
  add_setting(settings, *trn, "adam_eps", "--adam-eps", f.adam.eps, flag_values.adam.eps, "Adam epsilon");
  add_setting(settings, *trn, "batch_size", "--batch", f.batch_size, flag_values.batch_size, "batch size");
  add_setting(settings, *trn, "logit_scale", "--scale", f.logit_scale, flag_values.logit_scale, "logit scale");
  add_setting(settings, *trn, "proj_width", "--proj-width", f.encoder.proj_width, flag_values.encoder.proj_width,
              "attention projection width");
  add_setting(settings, *trn, "heads", "--heads", f.encoder.heads, flag_values.encoder.heads, "attention heads");
  add_setting(settings, *trn, "mlp_hidden", "--mlp-hidden", f.encoder.mlp_hidden, flag_values.encoder.mlp_hidden,
              "MLP hidden width");
  add_setting(settings, *trn, "layers", "--layers", f.encoder.layers, flag_values.encoder.layers, "encoder blocks");
  add_setting(settings, *trn, "positional_embedding", "--positional", f.encoder.use_positional_embedding,
              flag_values.encoder.use_positional_embedding, "learned positional embedding (true/false)");
  add_setting(settings, *trn, "max_views", "--max-views", f.encoder.max_views, flag_values.encoder.max_views,
              "positional table length (defaults to the longest shape)");
  settings.push_back({"distill", [&f](const json& v) { f.distill = typed<bool>(v, "distill"); }, nullptr, {}});
  settings.push_back({"decoupled_weight_decay",
                      [&f](const json& v) { f.adam.decoupled = typed<bool>(v, "decoupled_weight_decay"); }, nullptr,
                      {}});

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "few-shot accuracy of a trained checkpoint");
  eval->add_option("--manifest", ev.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  eval->add_option("--checkpoint", ev.checkpoint, "checkpoint container")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", ev.split, "split to evaluate")->capture_default_str();
  eval->add_option("--scale", ev.scale, "logit scale")->capture_default_str()->check(CLI::PositiveNumber);
  eval->add_option("--out", ev.out, "metrics JSON path (stdout when omitted)");
  eval->add_option("--threads", ev.threads, "evaluation threads")->check(CLI::PositiveNumber);
  eval->add_option("--seed", ev.seed, "seed echoed into the metrics");

  SynthArgs sy;
  auto* syn = app.add_subcommand("synth", "generate a synthetic benchmark");
  syn->add_option("--out", sy.out, "output directory")->required();
  syn->add_option("--classes", sy.config.classes, "number of classes")->capture_default_str();
  syn->add_option("--views", sy.config.views, "views per shape")->capture_default_str();
  syn->add_option("--dim", sy.config.dim, "feature dimension")->capture_default_str();
  syn->add_option("--shots", sy.config.shots, "training shapes per class")->capture_default_str();
  syn->add_option("--test-per-class", sy.config.test_per_class, "test shapes per class")->capture_default_str();
  syn->add_option("--alignment", sy.config.prompt_alignment, "prompt/prototype cosine")->capture_default_str();
  syn->add_option("--noise", sy.config.view_noise, "informative view noise")->capture_default_str();
  syn->add_option("--degenerate", sy.config.degenerate_fraction, "probability a view is degenerate")
      ->capture_default_str();
  syn->add_option("--seed", sy.config.seed, "generator seed")->capture_default_str();

  GradcheckArgs gc;
  auto* grad = app.add_subcommand("gradcheck", "finite-difference verification of all gradients");
  grad->add_option("--seed", gc.seed, "instance seed")->capture_default_str();
  grad->add_option("--inject-fault", gc.fault, "flip the sign of one backward rule")
      ->check(CLI::IsMember({"none", "matmul", "softmax", "layer_norm", "gelu", "add_bias"}))
      ->capture_default_str();

  DumpArgs du;
  auto* dump = app.add_subcommand("dump-embeddings", "write one descriptor row per shape as CSV");
  dump->add_option("--manifest", du.manifest, "dataset manifest")->required()->check(CLI::ExistingFile);
  dump->add_option("--checkpoint", du.checkpoint, "few-shot checkpoint (zero-shot descriptors when omitted)")
      ->check(CLI::ExistingFile);
  dump->add_option("--split", du.split, "split to dump")->capture_default_str();
  dump->add_option("--agg", du.agg, "zero-shot aggregation")->check(CLI::IsMember(agg_modes))->capture_default_str();
  dump->add_option("--out", du.out, "CSV path (stdout when omitted)");
  dump->add_option("--threads", du.threads, "threads")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*zero) return cmd_zero_shot(zs);
    if (*trn) return cmd_train(tr, settings);
    if (*eval) return cmd_eval(ev);
    if (*syn) return cmd_synth(sy);
    if (*grad) return cmd_gradcheck(gc);
    if (*dump) return cmd_dump_embeddings(du);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kExitData;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return kExitData;
  } catch (const DegenerateInputError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "file error: " << e.what() << "\n";
    return kExitData;
  } catch (const json::exception& e) {
    std::cerr << "manifest error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid configuration: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace peva
