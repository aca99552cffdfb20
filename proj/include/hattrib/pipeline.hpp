#pragma once

#include <Eigen/Dense>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <variant>
#include <vector>

#include "hattrib/attribution.hpp"
#include "hattrib/backtest.hpp"
#include "hattrib/drl_agents.hpp"
#include "hattrib/error.hpp"
#include "hattrib/features.hpp"
#include "hattrib/hindsight_reference.hpp"
#include "hattrib/market_data.hpp"
#include "hattrib/ml_baselines.hpp"
#include "hattrib/synthetic.hpp"

namespace hattrib {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kSchemaVersion = 1;

/// Inclusive slot range, given either by dates or by slot numbers.
struct RangeSpec {
  std::optional<std::string> start_date;
  std::optional<std::string> end_date;
  std::optional<std::size_t> first_slot;
  std::optional<std::size_t> last_slot;
};

struct SlotRange {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t size() const { return last - first + 1; }
};

struct RunConfig {
  // Relative paths in the config resolve against this directory.
  fs::path base_dir;
  std::optional<fs::path> prices;
  std::optional<fs::path> features;
  std::optional<fs::path> benchmark;
  std::optional<std::vector<std::string>> tickers;
  std::optional<SyntheticConfig> synthetic;
  RangeSpec train;
  RangeSpec trade;
  double lambda = 0.5;
  std::size_t window = 20;
  std::size_t cov_window = 60;
  IndicatorParams indicators;
  AgentConfig agent;
  std::size_t agent_steps = 100000;
  MLParams ml;
  std::vector<std::string> models{"ppo", "a2c", "lr", "dt", "rf", "svm"};
  std::uint64_t seed = 42;
  int ig_steps = 64;
  std::size_t histogram_bins = 20;
  fs::path out_dir = "out";
};

inline const std::set<std::string>& known_models() {
  static const std::set<std::string> m{"ppo", "a2c", "lr", "dt", "rf", "svm"};
  return m;
}

inline bool is_drl_model(const std::string& name) { return name == "ppo" || name == "a2c"; }

namespace detail {

inline RangeSpec range_from_json(const json& j, const char* what) {
  require(j.is_object(), ErrorCode::ConfigError, std::string(what) + " must be an object");
  RangeSpec r;
  if (j.contains("start")) r.start_date = j.at("start").get<std::string>();
  if (j.contains("end")) r.end_date = j.at("end").get<std::string>();
  if (j.contains("first_slot")) r.first_slot = j.at("first_slot").get<std::size_t>();
  if (j.contains("last_slot")) r.last_slot = j.at("last_slot").get<std::size_t>();
  require((r.start_date || r.first_slot) && (r.end_date || r.last_slot), ErrorCode::ConfigError,
          std::string(what) + " needs start/first_slot and end/last_slot");
  for (const auto* d : {&r.start_date, &r.end_date})
    if (*d) require(csv::is_iso_date(**d), ErrorCode::ConfigError, std::string(what) + ": bad date '" + **d + "'");
  return r;
}

inline json range_to_json(const RangeSpec& r) {
  json j = json::object();
  if (r.start_date) j["start"] = *r.start_date;
  if (r.end_date) j["end"] = *r.end_date;
  if (r.first_slot) j["first_slot"] = *r.first_slot;
  if (r.last_slot) j["last_slot"] = *r.last_slot;
  return j;
}

}  // namespace detail

/// Parses a config document; `base_dir` anchors relative paths.
inline RunConfig parse_config(const json& j, const fs::path& base_dir) {
  try {
    require(j.is_object(), ErrorCode::ConfigError, "config must be a JSON object");
    static const std::set<std::string> allowed{
        "schema_version", "data",   "synthetic", "train",  "trade",    "lambda",         "window",
        "cov_window",     "indicators", "agent", "agent_steps", "ml",  "models",         "seed",
        "ig_steps",       "histogram_bins", "out"};
    for (const auto& [key, _] : j.items())
      require(allowed.count(key) > 0, ErrorCode::ConfigError, "unknown config key '" + key + "'");
    require(j.contains("schema_version") && j.at("schema_version").get<int>() == kSchemaVersion,
            ErrorCode::ConfigError, "schema_version must be " + std::to_string(kSchemaVersion));

    RunConfig c;
    c.base_dir = base_dir;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? fs::path(p) : base_dir / p; };
    if (j.contains("data")) {
      const json& d = j.at("data");
      if (d.contains("prices")) c.prices = resolve(d.at("prices").get<std::string>());
      if (d.contains("features")) c.features = resolve(d.at("features").get<std::string>());
      if (d.contains("benchmark")) c.benchmark = resolve(d.at("benchmark").get<std::string>());
      if (d.contains("tickers")) c.tickers = d.at("tickers").get<std::vector<std::string>>();
    }
    if (j.contains("synthetic")) c.synthetic = synthetic_config_from_json(j.at("synthetic"));
    require(c.prices.has_value() != c.synthetic.has_value(), ErrorCode::ConfigError,
            "exactly one of data.prices and synthetic must be given");
    require(j.contains("train") && j.contains("trade"), ErrorCode::ConfigError, "train and trade ranges are required");
    c.train = detail::range_from_json(j.at("train"), "train");
    c.trade = detail::range_from_json(j.at("trade"), "trade");
    c.lambda = j.value("lambda", c.lambda);
    c.window = j.value("window", c.window);
    c.cov_window = j.value("cov_window", c.cov_window);
    require(c.lambda > 0.0, ErrorCode::ConfigError, "lambda must be > 0");
    require(c.window >= 1, ErrorCode::ConfigError, "window must be >= 1");
    require(c.cov_window >= 2, ErrorCode::ConfigError, "cov_window must be >= 2");
    if (j.contains("indicators")) {
      const json& p = j.at("indicators");
      c.indicators.macd_fast = p.value("macd_fast", c.indicators.macd_fast);
      c.indicators.macd_slow = p.value("macd_slow", c.indicators.macd_slow);
      c.indicators.macd_signal = p.value("macd_signal", c.indicators.macd_signal);
      c.indicators.rsi_period = p.value("rsi_period", c.indicators.rsi_period);
      c.indicators.cci_period = p.value("cci_period", c.indicators.cci_period);
      c.indicators.adx_period = p.value("adx_period", c.indicators.adx_period);
    }
    if (j.contains("agent")) c.agent = agent_config_from_json(j.at("agent"));
    c.agent_steps = j.value("agent_steps", c.agent_steps);
    if (j.contains("ml")) c.ml = ml_params_from_json(j.at("ml"));
    if (j.contains("models")) c.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& m : c.models)
      require(known_models().count(m) > 0, ErrorCode::ConfigError, "unknown model '" + m + "'");
    c.seed = j.value("seed", c.seed);
    c.ig_steps = j.value("ig_steps", c.ig_steps);
    require(c.ig_steps >= 1, ErrorCode::ConfigError, "ig_steps must be >= 1");
    c.histogram_bins = j.value("histogram_bins", c.histogram_bins);
    require(c.histogram_bins >= 1, ErrorCode::ConfigError, "histogram_bins must be >= 1");
    if (j.contains("out")) c.out_dir = resolve(j.at("out").get<std::string>());
    else c.out_dir = base_dir / "out";
    return c;
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("malformed config: ") + e.what());
  }
}

inline RunConfig load_config(const fs::path& path) {
  const std::string text = csv::read_file(path.string());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  return parse_config(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

// ---- slot resolution and prepared data ----

/// Earliest slot whose state, covariance estimate and realized covariance
/// are all defined.
inline std::size_t first_usable_slot(const FeatureTensor& ft, std::size_t cov_window) {
  return std::max(ft.first_state_slot(), cov_window + 1);
}

inline SlotRange resolve_range(const PricePanel& panel, const RangeSpec& spec, const char* what) {
  SlotRange r;
  if (spec.first_slot) {
    r.first = *spec.first_slot;
  } else {
    const auto it = std::lower_bound(panel.dates.begin(), panel.dates.end(), *spec.start_date);
    require(it != panel.dates.end(), ErrorCode::SlotOutOfRange, std::string(what) + " starts after the last date");
    r.first = static_cast<std::size_t>(it - panel.dates.begin());
  }
  if (spec.last_slot) {
    r.last = *spec.last_slot;
  } else {
    const auto it = std::upper_bound(panel.dates.begin(), panel.dates.end(), *spec.end_date);
    require(it != panel.dates.begin(), ErrorCode::SlotOutOfRange, std::string(what) + " ends before the first date");
    r.last = static_cast<std::size_t>(it - panel.dates.begin()) - 1;
  }
  require(r.last <= panel.last_slot(), ErrorCode::SlotOutOfRange, std::string(what) + " ends beyond the panel");
  return r;
}

struct PreparedData {
  PricePanel panel;
  FeatureTensor raw;
  FeatureScaler scaler;
  FeatureTensor scaled;
  SlotRange train;
  SlotRange trade;
};

/// Resolves the train/trade ranges (train is clipped forward to the first
/// usable slot) and fits the feature scaler on the training states.
inline PreparedData prepare(const RunConfig& cfg, PricePanel panel, FeatureTensor raw) {
  PreparedData d;
  d.panel = std::move(panel);
  d.raw = std::move(raw);
  d.train = resolve_range(d.panel, cfg.train, "train range");
  d.trade = resolve_range(d.panel, cfg.trade, "trade range");
  const std::size_t usable = first_usable_slot(d.raw, cfg.cov_window);
  d.train.first = std::max(d.train.first, usable);
  require(d.train.first <= d.train.last, ErrorCode::InsufficientHistory,
          "training range has no usable slot (features and covariance need history up to slot " +
              std::to_string(usable) + ")");
  require(d.trade.first <= d.trade.last, ErrorCode::ConfigError, "empty trade range");
  require(d.train.last < d.trade.first, ErrorCode::ConfigError, "train range must end before the trade range starts");
  require(d.trade.first >= usable, ErrorCode::InsufficientHistory, "trade range starts before features are defined");
  require(d.trade.size() >= std::max<std::size_t>(cfg.window, 2), ErrorCode::ConfigError,
          "trade range is shorter than the smoothing window");
  d.scaler = FeatureScaler::fit(d.raw, d.train.first - 1, d.train.last - 1);
  d.scaled = d.scaler.apply(d.raw);
  return d;
}

// ---- models ----

using TrainedModel = std::variant<std::shared_ptr<const AgentBundle>, std::shared_ptr<const RegressorModel>>;

inline std::uint64_t model_seed(std::uint64_t root, const std::string& name) {
  static const std::map<std::string, std::uint64_t> streams{{"a2c", 11}, {"ppo", 12}, {"lr", 21},
                                                            {"dt", 22},  {"rf", 23},  {"svm", 24}};
  return derive_seed(root, streams.at(name));
}

struct TrainOutput {
  TrainedModel model;
  std::vector<double> curve;  // DRL only
};

inline TrainOutput train_model(const RunConfig& cfg, const PreparedData& d, const std::string& name) {
  TrainOutput out;
  const std::uint64_t seed = model_seed(cfg.seed, name);
  if (is_drl_model(name)) {
    auto book = std::make_shared<const StateBook>(
        make_state_book(d.panel, d.scaled, d.train.first, d.train.last, cfg.cov_window));
    TrainResult r = train(PortfolioEnv(book), algo_from_string(name), cfg.agent_steps, seed, cfg.agent);
    out.model = std::make_shared<const AgentBundle>(std::move(r.bundle));
    out.curve = std::move(r.curve);
  } else {
    const TrainingSet ts = make_training_set(d.panel, d.scaled, d.train.first, d.train.last);
    out.model = std::make_shared<const RegressorModel>(fit(model_kind_from_string(name), ts.x, ts.y, cfg.ml, seed));
  }
  return out;
}

inline std::unique_ptr<Strategy> make_strategy(const TrainedModel& m) {
  if (const auto* a = std::get_if<std::shared_ptr<const AgentBundle>>(&m)) return std::make_unique<DrlStrategy>(*a);
  return std::make_unique<MLStrategy>(std::get<std::shared_ptr<const RegressorModel>>(m));
}

inline json model_to_json(const TrainedModel& m) {
  if (const auto* a = std::get_if<std::shared_ptr<const AgentBundle>>(&m)) return agent_to_json(**a);
  return model_to_json(*std::get<std::shared_ptr<const RegressorModel>>(m));
}

inline TrainedModel model_from_json_any(const json& j) {
  const std::string format = j.value("format", "");
  if (format == "hattrib.agent") return std::make_shared<const AgentBundle>(agent_from_json(j));
  return std::make_shared<const RegressorModel>(model_from_json(j));
}

// ---- explanation ----

struct StrategyExplanation {
  std::string name;
  bool lookahead = false;
  BacktestResult backtest;
  Metrics metrics;
  FeatureWeightSeries weights;  // M(t) for DRL, b(t) otherwise
  std::vector<SkippedSlot> skipped;
  PredictionPower single;
  PredictionPower multi;
  std::optional<ZTestResult> z_single;
  std::optional<ZTestResult> z_multi;
  Histogram hist_single;
  Histogram hist_multi;
};

struct ReferenceSeries {
  ReferenceResult result;
  FeatureWeightSeries smoothed;
};

inline ReferenceSeries compute_reference(const RunConfig& cfg, const PreparedData& d) {
  ReferenceSeries r;
  r.result = reference_pipeline(d.panel, d.scaled, d.trade.first, d.trade.last,
                                ReferenceConfig{cfg.lambda, cfg.cov_window, {}});
  require(r.result.beta.size() > 0, ErrorCode::RankDeficient,
          "hindsight reference is undefined at every trade slot (" + std::to_string(r.result.skipped.size()) +
              " skipped); the cross-section needs more than K+1 = " +
              std::to_string(d.scaled.num_features() + 1) + " assets with varying features");
  r.smoothed = smooth_reference(r.result.beta, cfg.window);
  return r;
}

inline std::optional<ZTestResult> try_z(const CorrelationSeries& s) {
  const auto v = defined_values(s.rho);
  try {
    return upper_tail_z(v);
  } catch (const Error&) {
    return std::nullopt;
  }
}

/// Backtests the strategy over the trade range and correlates its feature
/// weights with the hindsight reference.
inline StrategyExplanation explain_strategy(const RunConfig& cfg, const PreparedData& d, const ReferenceSeries& ref,
                                            const Strategy& strategy) {
  StrategyExplanation e;
  e.name = strategy.name();
  e.lookahead = strategy.uses_lookahead();
  const MarketView view{&d.panel, &d.scaled, cfg.cov_window, cfg.lambda};
  e.backtest = run(strategy, view, d.trade.first, d.trade.last);
  e.metrics = metrics(e.backtest);

  const StateLayout layout{static_cast<Eigen::Index>(d.panel.num_assets()),
                           static_cast<Eigen::Index>(d.scaled.num_features())};
  const auto* drl = dynamic_cast<const DrlStrategy*>(&strategy);
  for (std::size_t j = 0; j < e.backtest.slots.size(); ++j) {
    const std::size_t t = e.backtest.slots[j];
    try {
      if (drl != nullptr) {
        const Eigen::VectorXd s = flatten_state(build_state(d.panel, d.scaled, t, cfg.cov_window));
        e.weights.push(t, drl_feature_weights(drl->agent(), s, layout, IGConfig{cfg.ig_steps}));
      } else {
        e.weights.push(t, ml_feature_weights(e.backtest.weights[j], price_relatives(d.panel, t).values,
                                             features_known_at(d.scaled, t)));
      }
    } catch (const Error& err) {
      e.skipped.push_back({t, err.what()});
    }
  }
  e.single = prediction_power(e.weights, ref.result.beta, PowerMode::Single);
  e.multi = prediction_power(e.weights, ref.result.beta, PowerMode::Multi, cfg.window);
  e.z_single = try_z(e.single.series);
  e.z_multi = try_z(e.multi.series);
  e.hist_single = histogram(defined_values(e.single.series.rho), cfg.histogram_bins);
  e.hist_multi = histogram(defined_values(e.multi.series.rho), cfg.histogram_bins);
  return e;
}

// ---- in-memory experiment ----

struct ExperimentResult {
  PreparedData data;
  ReferenceSeries reference;
  std::map<std::string, TrainOutput> models;
  // Baselines first (equal_weight, hindsight), then models in config order.
  std::vector<StrategyExplanation> strategies;

  const StrategyExplanation& strategy(const std::string& name) const {
    for (const auto& s : strategies)
      if (s.name == name) return s;
    fail(ErrorCode::ConfigError, "no strategy named '" + name + "'");
  }
};

inline std::pair<PricePanel, FeatureTensor> load_inputs(const RunConfig& cfg) {
  if (cfg.synthetic) {
    SyntheticMarket m = generate_market(*cfg.synthetic);
    return {std::move(m.panel), std::move(m.features)};
  }
  PricePanel panel = load_panel(cfg.prices->string(), cfg.tickers);
  FeatureTensor ft = cfg.features ? load_features_csv(cfg.features->string(), panel)
                                  : compute_features(panel, cfg.indicators);
  return {std::move(panel), std::move(ft)};
}

/// ingest -> train -> backtest -> explain without touching the filesystem.
inline ExperimentResult run_experiment(const RunConfig& cfg) {
  ExperimentResult r;
  auto [panel, ft] = load_inputs(cfg);
  r.data = prepare(cfg, std::move(panel), std::move(ft));
  r.reference = compute_reference(cfg, r.data);
  r.strategies.push_back(explain_strategy(cfg, r.data, r.reference, EqualWeightStrategy{}));
  r.strategies.push_back(explain_strategy(cfg, r.data, r.reference, HindsightStrategy{}));
  for (const auto& name : cfg.models) {
    r.models[name] = train_model(cfg, r.data, name);
    r.strategies.push_back(explain_strategy(cfg, r.data, r.reference, *make_strategy(r.models[name].model)));
  }
  return r;
}

// ---- artifacts on disk ----

/// 64-bit FNV-1a, hex encoded.
inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

/// Output directory plus manifest.json recording the hash of every artifact.
/// Stages read their inputs through read(), which refuses files whose
/// content no longer matches the manifest.
class ArtifactStore {
 public:
  explicit ArtifactStore(fs::path root) : root_(std::move(root)) {
    fs::create_directories(root_);
    const fs::path m = root_ / "manifest.json";
    if (fs::exists(m)) {
      try {
        manifest_ = json::parse(csv::read_file(m.string()));
      } catch (const json::exception& e) {
        fail(ErrorCode::ArtifactMismatch, "corrupt manifest: " + std::string(e.what()));
      }
    }
    if (!manifest_.is_object()) manifest_ = json::object();
    manifest_["schema_version"] = kSchemaVersion;
    if (!manifest_.contains("files")) manifest_["files"] = json::object();
    if (!manifest_.contains("stages")) manifest_["stages"] = json::object();
  }

  const fs::path& root() const { return root_; }

  void write(const std::string& rel, const std::string& content) {
    const fs::path p = root_ / rel;
    fs::create_directories(p.parent_path());
    csv::write_file(p.string(), content);
    manifest_["files"][rel] = fnv1a_hex(content);
  }

  void write_json(const std::string& rel, const json& j) { write(rel, j.dump(1) + "\n"); }

  std::string read(const std::string& rel) const {
    require(manifest_["files"].contains(rel), ErrorCode::ArtifactMismatch,
            "'" + rel + "' is not in the manifest; run the producing stage first");
    const std::string content = csv::read_file((root_ / rel).string());
    require(fnv1a_hex(content) == manifest_["files"][rel].get<std::string>(), ErrorCode::ArtifactMismatch,
            "'" + rel + "' changed since it was written");
    return content;
  }

  json read_json(const std::string& rel) const {
    try {
      return json::parse(read(rel));
    } catch (const json::exception& e) {
      fail(ErrorCode::ArtifactMismatch, "'" + rel + "': " + e.what());
    }
  }

  std::string hash_of(const std::string& rel) const { return manifest_["files"].value(rel, std::string()); }

  void record_stage(const std::string& stage, const json& info) { manifest_["stages"][stage] = info; }
  const json& stage(const std::string& name) const { return manifest_["stages"].at(name); }

  void save() const { csv::write_file((root_ / "manifest.json").string(), manifest_.dump(1) + "\n"); }

 private:
  fs::path root_;
  json manifest_;
};

// Settings each stage depends on; stored with the artifacts so a later stage
// can refuse inputs produced under different settings.
inline json config_fingerprint(const RunConfig& c) {
  json ingest{{"indicators",
               {{"macd_fast", c.indicators.macd_fast},
                {"macd_slow", c.indicators.macd_slow},
                {"macd_signal", c.indicators.macd_signal},
                {"rsi_period", c.indicators.rsi_period},
                {"cci_period", c.indicators.cci_period},
                {"adx_period", c.indicators.adx_period}}}};
  if (c.synthetic) ingest["synthetic"] = to_json(*c.synthetic);
  if (c.prices) ingest["prices"] = c.prices->filename().string();
  if (c.features) ingest["features"] = c.features->filename().string();
  if (c.tickers) ingest["tickers"] = *c.tickers;
  json train{{"train", detail::range_to_json(c.train)},
             {"cov_window", c.cov_window},
             {"agent", to_json(c.agent)},
             {"agent_steps", c.agent_steps},
             {"ml", to_json(c.ml)},
             {"seed", c.seed}};
  return {{"ingest", ingest}, {"train", train}};
}

inline std::string weights_series_to_csv(const FeatureWeightSeries& s, const PricePanel& panel,
                                         const std::vector<std::string>& names, const std::string& prefix = "") {
  std::string out = "date";
  for (const auto& n : names) out += ',' + prefix + n;
  out += '\n';
  for (std::size_t j = 0; j < s.size(); ++j) {
    out += panel.dates[s.slots[j]];
    for (Eigen::Index k = 0; k < s.weights[j].size(); ++k) out += ',' + csv::format_double(s.weights[j](k));
    out += '\n';
  }
  return out;
}

inline std::string correlations_to_csv(const StrategyExplanation& e, const PricePanel& panel) {
  std::map<std::size_t, std::optional<double>> multi;
  for (std::size_t j = 0; j < e.multi.series.slots.size(); ++j) multi[e.multi.series.slots[j]] = e.multi.series.rho[j];
  std::string out = "date,rho_single,rho_multi\n";
  for (std::size_t j = 0; j < e.single.series.slots.size(); ++j) {
    const std::size_t t = e.single.series.slots[j];
    const auto it = multi.find(t);
    out += panel.dates[t] + ',' + csv::format_optional(e.single.series.rho[j]) + ',' +
           (it == multi.end() ? std::string() : csv::format_optional(it->second)) + '\n';
  }
  return out;
}

inline std::string histogram_to_csv(const StrategyExplanation& e) {
  std::string out = "bin_low,bin_high,count_single,count_multi\n";
  for (std::size_t b = 0; b < e.hist_single.counts.size(); ++b)
    out += csv::format_double(e.hist_single.edges[b]) + ',' + csv::format_double(e.hist_single.edges[b + 1]) + ',' +
           std::to_string(e.hist_single.counts[b]) + ',' + std::to_string(e.hist_multi.counts[b]) + '\n';
  return out;
}

inline json power_to_json(const PredictionPower& p, const std::optional<ZTestResult>& z) {
  json j{{"mean", p.mean ? json(*p.mean) : json(nullptr)}, {"defined", p.defined}, {"undefined", p.undefined}};
  if (z) {
    j["std"] = z->std;
    j["z"] = z->z;
    j["stars"] = z->stars;
  } else {
    j["std"] = nullptr;
    j["z"] = nullptr;
    j["stars"] = "";
  }
  return j;
}

/// One row per metric, one column per strategy. Correlation cells read N/A
/// when `with_correlations` is false and are empty when undefined.
inline std::string summary_table(const std::vector<const StrategyExplanation*>& rows, bool with_correlations,
                                 const std::optional<Metrics>& benchmark = std::nullopt) {
  std::string out = "metric";
  for (const auto* e : rows) out += ',' + e->name;
  if (benchmark) out += ",benchmark";
  out += '\n';
  auto line = [&](const std::string& label, auto get, auto get_bench) {
    out += label;
    for (const auto* e : rows) out += ',' + get(*e);
    if (benchmark) out += ',' + get_bench(*benchmark);
    out += '\n';
  };
  auto fmt = [](double v) { return csv::format_double(v); };
  auto na = [](const Metrics&) { return std::string("N/A"); };
  line("annual_return", [&](const auto& e) { return fmt(e.metrics.annual_return); },
       [&](const Metrics& m) { return fmt(m.annual_return); });
  line("annual_volatility", [&](const auto& e) { return fmt(e.metrics.annual_volatility); },
       [&](const Metrics& m) { return fmt(m.annual_volatility); });
  line("sharpe", [&](const auto& e) { return csv::format_optional(e.metrics.sharpe); },
       [&](const Metrics& m) { return csv::format_optional(m.sharpe); });
  line("calmar", [&](const auto& e) { return fmt(e.metrics.calmar); }, [&](const Metrics& m) { return fmt(m.calmar); });
  line("max_drawdown", [&](const auto& e) { return fmt(e.metrics.max_drawdown); },
       [&](const Metrics& m) { return fmt(m.max_drawdown); });
  line("corr_single",
       [&](const auto& e) { return with_correlations ? csv::format_optional(e.single.mean) : std::string("N/A"); },
       na);
  line("corr_multi",
       [&](const auto& e) { return with_correlations ? csv::format_optional(e.multi.mean) : std::string("N/A"); },
       na);
  return out;
}

/// Benchmark series `date,close`; metrics over the trade dates.
inline Metrics benchmark_metrics(const fs::path& path, const PreparedData& d) {
  const std::string content = csv::read_file(path.string());
  const auto rows = csv::lines(content);
  require(!rows.empty(), ErrorCode::MissingColumn, path.string() + ": empty file");
  const auto header = csv::split(rows[0]);
  require(header.size() >= 2 && csv::trim(header[0]) == "date" && csv::trim(header[1]) == "close",
          ErrorCode::MissingColumn, path.string() + ": expected header 'date,close'");
  std::map<std::string, double> close;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const auto f = csv::split(rows[i]);
    const double v = f.size() >= 2 ? csv::parse_double(f[1]).value_or(0.0) : 0.0;
    require(v > 0.0, ErrorCode::UnparsableRow, path.string() + ":" + std::to_string(i + 1) + ": bad close");
    close[std::string(csv::trim(f[0]))] = v;
  }
  std::vector<double> lr;
  for (std::size_t t = d.trade.first; t <= d.trade.last; ++t) {
    const auto a = close.find(d.panel.dates[t - 1]);
    const auto b = close.find(d.panel.dates[t]);
    require(a != close.end() && b != close.end(), ErrorCode::EmptyIntersection,
            path.string() + ": no benchmark close for " + d.panel.dates[t]);
    lr.push_back(std::log(b->second / a->second));
  }
  return metrics(lr);
}

// ---- stage commands ----

struct CommandOptions {
  std::optional<std::string> model;
  std::optional<std::uint64_t> seed;
  std::optional<fs::path> out;
};

inline RunConfig apply_overrides(RunConfig cfg, const CommandOptions& o) {
  if (o.seed) cfg.seed = *o.seed;
  if (o.out) cfg.out_dir = *o.out;
  if (o.model) {
    require(known_models().count(*o.model) > 0 || *o.model == "equal_weight" || *o.model == "hindsight",
            ErrorCode::ConfigError, "unknown model '" + *o.model + "'");
    if (known_models().count(*o.model) > 0) cfg.models = {*o.model};
    else cfg.models.clear();
  }
  return cfg;
}

namespace detail {

// Reloads the ingested panel and features through the manifest and
// re-derives ranges and scaling exactly as ingest did.
inline PreparedData load_ingested(const RunConfig& cfg, const ArtifactStore& store) {
  store.read("panel.csv");
  store.read("features.csv");
  const json info = store.read_json("ingest.json");
  require(info.at("config") == config_fingerprint(cfg).at("ingest"), ErrorCode::ArtifactMismatch,
          "ingested data was produced from a different data configuration; rerun ingest");
  PricePanel panel = load_panel((store.root() / "panel.csv").string());
  FeatureTensor ft = load_features_csv((store.root() / "features.csv").string(), panel);
  return prepare(cfg, std::move(panel), std::move(ft));
}

inline TrainedModel load_model(const ArtifactStore& store, const std::string& name) {
  const std::string rel = "models/" + name + ".json";
  const json j = store.read_json(rel);
  try {
    return model_from_json_any(j);
  } catch (const json::exception& e) {
    fail(ErrorCode::ArtifactMismatch, rel + ": " + e.what());
  }
}

inline std::vector<std::unique_ptr<Strategy>> strategies_for(const RunConfig& cfg, const ArtifactStore& store,
                                                             const CommandOptions& o) {
  std::vector<std::unique_ptr<Strategy>> out;
  const bool all = !o.model.has_value();
  // Equal weight is the baseline every table is read against.
  out.push_back(std::make_unique<EqualWeightStrategy>());
  if (all || *o.model == "hindsight") out.push_back(std::make_unique<HindsightStrategy>());
  for (const auto& name : cfg.models) out.push_back(make_strategy(load_model(store, name)));
  return out;
}

inline std::string csv_text(std::string s) {
  std::replace(s.begin(), s.end(), '"', '\'');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

inline std::string curve_to_csv(const std::vector<double>& curve) {
  std::string out = "rollout,mean_reward\n";
  for (std::size_t j = 0; j < curve.size(); ++j) out += std::to_string(j) + ',' + csv::format_double(curve[j]) + '\n';
  return out;
}

}  // namespace detail

inline void cmd_ingest(const RunConfig& cfg) {
  ArtifactStore store(cfg.out_dir);
  auto [panel, ft] = load_inputs(cfg);
  // prepare() validates ranges and history before anything is written.
  const PreparedData d = prepare(cfg, panel, ft);
  store.write("panel.csv", panel_to_csv(d.panel));
  store.write("features.csv", features_to_csv(d.raw));
  store.write_json("ingest.json", json{{"config", config_fingerprint(cfg).at("ingest")},
                                       {"tickers", d.panel.tickers},
                                       {"features", d.raw.names},
                                       {"num_slots", d.panel.num_slots()},
                                       {"train", {{"first_slot", d.train.first}, {"last_slot", d.train.last},
                                                  {"start", d.panel.dates[d.train.first]},
                                                  {"end", d.panel.dates[d.train.last]}}},
                                       {"trade", {{"first_slot", d.trade.first}, {"last_slot", d.trade.last},
                                                  {"start", d.panel.dates[d.trade.first]},
                                                  {"end", d.panel.dates[d.trade.last]}}}});
  store.write_json("scaler.json", json{{"features", d.raw.names}, {"divisors", d.scaler.divisors}});
  store.record_stage("ingest", {{"panel", store.hash_of("panel.csv")}, {"features", store.hash_of("features.csv")}});
  store.save();
}

inline void cmd_train(const RunConfig& cfg) {
  ArtifactStore store(cfg.out_dir);
  const PreparedData d = detail::load_ingested(cfg, store);
  for (const auto& name : cfg.models) {
    const TrainOutput t = train_model(cfg, d, name);
    store.write_json("models/" + name + ".json", model_to_json(t.model));
    if (is_drl_model(name)) store.write("curves/" + name + ".csv", detail::curve_to_csv(t.curve));
    store.record_stage("train/" + name, {{"seed", model_seed(cfg.seed, name)},
                                         {"config", config_fingerprint(cfg).at("train")},
                                         {"panel", store.hash_of("panel.csv")}});
  }
  store.save();
}

inline void cmd_backtest(const RunConfig& cfg, const CommandOptions& o = {}) {
  ArtifactStore store(cfg.out_dir);
  const PreparedData d = detail::load_ingested(cfg, store);
  const MarketView view{&d.panel, &d.scaled, cfg.cov_window, cfg.lambda};
  std::vector<StrategyExplanation> rows;
  json all = json::object();
  for (const auto& s : detail::strategies_for(cfg, store, o)) {
    StrategyExplanation e;
    e.name = s->name();
    e.lookahead = s->uses_lookahead();
    e.backtest = run(*s, view, d.trade.first, d.trade.last);
    e.metrics = metrics(e.backtest);
    store.write("backtest/" + e.name + ".csv", backtest_to_csv(e.backtest));
    all[e.name] = to_json(e.metrics);
    all[e.name]["lookahead"] = e.lookahead;
    rows.push_back(std::move(e));
  }
  std::optional<Metrics> bench;
  if (cfg.benchmark) {
    bench = benchmark_metrics(*cfg.benchmark, d);
    all["benchmark"] = to_json(*bench);
  }
  std::vector<const StrategyExplanation*> ptrs;
  for (const auto& e : rows) ptrs.push_back(&e);
  store.write_json("backtest/metrics.json", all);
  store.write("backtest/summary.csv", summary_table(ptrs, false, bench));
  store.record_stage("backtest", {{"strategies", all.size()}});
  store.save();
}

inline json explanation_to_json(const StrategyExplanation& e) {
  json j{{"lookahead", e.lookahead},
         {"metrics", to_json(e.metrics)},
         {"single_step", power_to_json(e.single, e.z_single)},
         {"multi_step", power_to_json(e.multi, e.z_multi)},
         {"skipped", e.skipped.size()}};
  return j;
}

inline void cmd_explain(const RunConfig& cfg, const CommandOptions& o = {}) {
  ArtifactStore store(cfg.out_dir);
  const PreparedData d = detail::load_ingested(cfg, store);
  const ReferenceSeries ref = compute_reference(cfg, d);
  store.write("explain/reference_beta.csv", weights_series_to_csv(ref.result.beta, d.panel, d.scaled.names, "beta_"));
  store.write("explain/reference_beta_w.csv", weights_series_to_csv(ref.smoothed, d.panel, d.scaled.names, "beta_"));

  std::vector<StrategyExplanation> rows;
  std::string skipped = "strategy,date,reason\n";
  for (const auto& s : ref.result.skipped)
    skipped += "reference," + d.panel.dates[s.slot] + ",\"" + detail::csv_text(s.reason) + "\"\n";
  json report{{"schema_version", kSchemaVersion},
              {"window", cfg.window},
              {"lambda", cfg.lambda},
              {"features", d.scaled.names},
              {"trade", {{"start", d.panel.dates[d.trade.first]}, {"end", d.panel.dates[d.trade.last]}}},
              {"reference", {{"slots", ref.result.beta.size()}, {"skipped", ref.result.skipped.size()}}},
              {"strategies", json::object()}};
  for (const auto& s : detail::strategies_for(cfg, store, o)) {
    StrategyExplanation e = explain_strategy(cfg, d, ref, *s);
    store.write("explain/weights_" + e.name + ".csv", weights_series_to_csv(e.weights, d.panel, d.scaled.names));
    store.write("explain/correlations_" + e.name + ".csv", correlations_to_csv(e, d.panel));
    store.write("explain/histogram_" + e.name + ".csv", histogram_to_csv(e));
    for (const auto& sk : e.skipped) skipped += e.name + ',' + d.panel.dates[sk.slot] + ",\"" + detail::csv_text(sk.reason) + "\"\n";
    report["strategies"][e.name] = explanation_to_json(e);
    rows.push_back(std::move(e));
  }
  std::optional<Metrics> bench;
  if (cfg.benchmark) {
    bench = benchmark_metrics(*cfg.benchmark, d);
    report["benchmark"] = to_json(*bench);
  }
  std::vector<const StrategyExplanation*> ptrs;
  for (const auto& e : rows) ptrs.push_back(&e);
  store.write("explain/skipped.csv", skipped);
  store.write_json("explain/report.json", report);
  store.write("explain/table.csv", summary_table(ptrs, true, bench));
  store.record_stage("explain", {{"strategies", rows.size()}});
  store.save();
}

}  // namespace hattrib
