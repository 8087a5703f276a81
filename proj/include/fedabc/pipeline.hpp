#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iostream>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "fedabc/dataprep.hpp"
#include "fedabc/discrepancy.hpp"
#include "fedabc/error.hpp"
#include "fedabc/evaluation.hpp"
#include "fedabc/federation.hpp"
#include "fedabc/moae.hpp"
#include "fedabc/rng.hpp"
#include "fedabc/transport.hpp"

namespace fedabc {

// ---------------------------------------------------------------------------
// Configuration

struct MoaeSettings {
  int latent_dim = 24;
  int epochs = 300;
  int batch_size = 0;
  double lr = 1e-3;
  double alpha = 1.0;
  double beta = 0.5;

  TrainOptions train_options() const {
    TrainOptions t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.adam.lr = lr;
    t.weights = {alpha, beta};
    return t;
  }
};

struct PriorSettings {
  std::optional<int> components;  // default floor(0.9 * total minority training rows)
  double dirichlet_alpha = 1.0;
  double kappa = 1.0;
  std::optional<double> nu;  // default latent_dim + 2
  double psi_scale = 1.0;
  double mean = 0.0;
};

struct FederationSettings {
  std::optional<double> epsilon;  // default: quantile of a pilot run
  std::size_t pilot_trials = 2000;
  double pilot_quantile = 0.05;
  std::size_t target_accepted = 100;
  std::size_t max_trials = 1'000'000;
  std::string transport = "inproc";
  std::string listen = "127.0.0.1:0";
  std::string connect;  // default: the listener's bound address
  int register_timeout_ms = 60'000;
  int reply_timeout_ms = 60'000;
  int retries = 3;
  bool compact_log = true;
};

struct DataSettings {
  std::string csv;  // empty: <out-dir>/data.csv
  std::string label_column = "label";
  SynthSpec synthetic;
};

struct ExperimentConfig {
  DataSettings data;
  SiteProfile profile = reference_site_profile();
  double train_frac = 0.6;
  double correlation_threshold = 0.8;
  MoaeSettings moae;
  PriorSettings prior;
  FederationSettings federation;
  HistogramSpec histogram;
  LogRegOptions classifier;
  std::string feature_space = "latent";
  std::string prepared_dir;  // empty: <out-dir>/prepared
  std::uint64_t seed = 1;

  void validate() const {
    if (profile.empty()) throw ConfigError("profile needs at least one site");
    for (const auto& p : profile) {
      if (p.major < 2 || p.minor < 2) throw ConfigError("every site needs at least 2 rows of each class");
    }
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw ConfigError("train_frac must be in (0, 1)");
    if (!(correlation_threshold > 0.0 && correlation_threshold <= 1.0)) {
      throw ConfigError("correlation_threshold must be in (0, 1]");
    }
    if (moae.latent_dim < 1) throw ConfigError("moae.latent_dim must be at least 1");
    if (moae.epochs < 0) throw ConfigError("moae.epochs must be non-negative");
    if (!(moae.lr > 0.0)) throw ConfigError("moae.lr must be positive");
    if (!(moae.alpha >= 0.0 && moae.beta >= 0.0)) throw ConfigError("moae loss weights must be non-negative");
    if (prior.components && *prior.components < 1) throw ConfigError("prior.components must be at least 1");
    if (!(prior.dirichlet_alpha > 0.0) || !(prior.kappa > 0.0) || !(prior.psi_scale > 0.0)) {
      throw ConfigError("prior.dirichlet_alpha, prior.kappa and prior.psi_scale must be positive");
    }
    if (prior.nu && !(*prior.nu > moae.latent_dim - 1)) throw ConfigError("prior.nu must exceed latent_dim - 1");
    if (federation.epsilon && !(*federation.epsilon > 0.0)) throw ConfigError("federation.epsilon must be positive");
    if (!federation.epsilon) {
      if (federation.pilot_trials < 1) throw ConfigError("federation.pilot_trials must be at least 1");
      if (!(federation.pilot_quantile > 0.0 && federation.pilot_quantile < 1.0)) {
        throw ConfigError("federation.pilot_quantile must be in (0, 1)");
      }
    }
    if (federation.target_accepted < 1) throw ConfigError("federation.target_accepted must be at least 1");
    if (federation.max_trials < federation.target_accepted) {
      throw ConfigError("federation.max_trials is below federation.target_accepted");
    }
    if (federation.transport != "inproc" && federation.transport != "tcp") {
      throw ConfigError("federation.transport must be 'inproc' or 'tcp'");
    }
    if (federation.retries < 0) throw ConfigError("federation.retries must be non-negative");
    if (federation.reply_timeout_ms < 1 || federation.register_timeout_ms < 1) {
      throw ConfigError("federation timeouts must be positive");
    }
    histogram.validate();
    if (classifier.iters < 0 || !(classifier.lr > 0.0) || !(classifier.l2 >= 0.0)) {
      throw ConfigError("classifier settings out of range");
    }
    if (feature_space != "latent" && feature_space != "raw") {
      throw ConfigError("feature_space must be 'latent' or 'raw'");
    }
  }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find_if(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }) == allowed.end()) {
      throw ConfigError("unknown config key '" + (where.empty() ? key : where + "." + key) + "'");
    }
  }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out) {
  if (j.contains(key)) out = j.at(key).is_null() ? std::nullopt : std::optional<T>(j.at(key).get<T>());
}

template <class T>
nlohmann::json opt_json(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace detail

inline nlohmann::json to_json_value(const ExperimentConfig& c) {
  nlohmann::json synth;
  to_json(synth, c.data.synthetic);
  synth.erase("profile");
  nlohmann::json prof = nlohmann::json::array();
  for (const auto& p : c.profile) prof.push_back({p.major, p.minor});
  nlohmann::json hist;
  to_json(hist, c.histogram);
  nlohmann::json cls;
  to_json(cls, c.classifier);
  const auto& f = c.federation;
  return {
      {"data", {{"csv", c.data.csv}, {"label_column", c.data.label_column}, {"synthetic", synth}}},
      {"profile", prof},
      {"train_frac", c.train_frac},
      {"correlation_threshold", c.correlation_threshold},
      {"moae",
       {{"latent_dim", c.moae.latent_dim},
        {"epochs", c.moae.epochs},
        {"batch_size", c.moae.batch_size},
        {"lr", c.moae.lr},
        {"alpha", c.moae.alpha},
        {"beta", c.moae.beta}}},
      {"prior",
       {{"components", detail::opt_json(c.prior.components)},
        {"dirichlet_alpha", c.prior.dirichlet_alpha},
        {"kappa", c.prior.kappa},
        {"nu", detail::opt_json(c.prior.nu)},
        {"psi_scale", c.prior.psi_scale},
        {"mean", c.prior.mean}}},
      {"federation",
       {{"epsilon", detail::opt_json(f.epsilon)},
        {"pilot_trials", f.pilot_trials},
        {"pilot_quantile", f.pilot_quantile},
        {"target_accepted", f.target_accepted},
        {"max_trials", f.max_trials},
        {"transport", f.transport},
        {"listen", f.listen},
        {"connect", f.connect},
        {"register_timeout_ms", f.register_timeout_ms},
        {"reply_timeout_ms", f.reply_timeout_ms},
        {"retries", f.retries},
        {"compact_log", f.compact_log}}},
      {"histogram", hist},
      {"classifier", cls},
      {"feature_space", c.feature_space},
      {"prepared_dir", c.prepared_dir},
      {"seed", c.seed},
  };
}

/// Keys absent from `j` keep their defaults; unknown keys are errors.
inline ExperimentConfig config_from_json(const nlohmann::json& j) {
  using detail::reject_unknown_keys;
  ExperimentConfig c;
  try {
    reject_unknown_keys(j,
                        {"data", "profile", "train_frac", "correlation_threshold", "moae", "prior", "federation",
                         "histogram", "classifier", "feature_space", "prepared_dir", "seed"},
                        "");
    if (j.contains("data")) {
      const auto& d = j["data"];
      reject_unknown_keys(d, {"csv", "label_column", "synthetic"}, "data");
      c.data.csv = d.value("csv", c.data.csv);
      c.data.label_column = d.value("label_column", c.data.label_column);
      if (d.contains("synthetic")) {
        reject_unknown_keys(d["synthetic"], {"features", "margin", "site_shift", "factors", "factor_scale"},
                            "data.synthetic");
        from_json(d["synthetic"], c.data.synthetic);
      }
    }
    if (j.contains("profile")) {
      c.profile.clear();
      for (const auto& p : j["profile"]) {
        if (!p.is_array() || p.size() != 2) throw ConfigError("profile entries must be [major, minor] pairs");
        c.profile.push_back({p[0].get<std::size_t>(), p[1].get<std::size_t>()});
      }
    }
    c.train_frac = j.value("train_frac", c.train_frac);
    c.correlation_threshold = j.value("correlation_threshold", c.correlation_threshold);
    if (j.contains("moae")) {
      const auto& m = j["moae"];
      reject_unknown_keys(m, {"latent_dim", "epochs", "batch_size", "lr", "alpha", "beta"}, "moae");
      c.moae.latent_dim = m.value("latent_dim", c.moae.latent_dim);
      c.moae.epochs = m.value("epochs", c.moae.epochs);
      c.moae.batch_size = m.value("batch_size", c.moae.batch_size);
      c.moae.lr = m.value("lr", c.moae.lr);
      c.moae.alpha = m.value("alpha", c.moae.alpha);
      c.moae.beta = m.value("beta", c.moae.beta);
    }
    if (j.contains("prior")) {
      const auto& p = j["prior"];
      reject_unknown_keys(p, {"components", "dirichlet_alpha", "kappa", "nu", "psi_scale", "mean"}, "prior");
      detail::read_opt(p, "components", c.prior.components);
      c.prior.dirichlet_alpha = p.value("dirichlet_alpha", c.prior.dirichlet_alpha);
      c.prior.kappa = p.value("kappa", c.prior.kappa);
      detail::read_opt(p, "nu", c.prior.nu);
      c.prior.psi_scale = p.value("psi_scale", c.prior.psi_scale);
      c.prior.mean = p.value("mean", c.prior.mean);
    }
    if (j.contains("federation")) {
      const auto& f = j["federation"];
      reject_unknown_keys(f,
                          {"epsilon", "pilot_trials", "pilot_quantile", "target_accepted", "max_trials",
                           "transport", "listen", "connect", "register_timeout_ms", "reply_timeout_ms", "retries",
                           "compact_log"},
                          "federation");
      auto& o = c.federation;
      detail::read_opt(f, "epsilon", o.epsilon);
      o.pilot_trials = f.value("pilot_trials", o.pilot_trials);
      o.pilot_quantile = f.value("pilot_quantile", o.pilot_quantile);
      o.target_accepted = f.value("target_accepted", o.target_accepted);
      o.max_trials = f.value("max_trials", o.max_trials);
      o.transport = f.value("transport", o.transport);
      o.listen = f.value("listen", o.listen);
      o.connect = f.value("connect", o.connect);
      o.register_timeout_ms = f.value("register_timeout_ms", o.register_timeout_ms);
      o.reply_timeout_ms = f.value("reply_timeout_ms", o.reply_timeout_ms);
      o.retries = f.value("retries", o.retries);
      o.compact_log = f.value("compact_log", o.compact_log);
    }
    if (j.contains("histogram")) {
      reject_unknown_keys(j["histogram"], {"bins", "lo", "hi", "epsilon"}, "histogram");
      from_json(j["histogram"], c.histogram);
    }
    if (j.contains("classifier")) {
      reject_unknown_keys(j["classifier"], {"iters", "lr", "l2"}, "classifier");
      from_json(j["classifier"], c.classifier);
    }
    c.feature_space = j.value("feature_space", c.feature_space);
    c.prepared_dir = j.value("prepared_dir", c.prepared_dir);
    c.seed = j.value("seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.data.synthetic.profile = c.profile;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config '" + path + "'");
  try {
    return config_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
}

/// FNV-1a of the resolved config without its seed, so runs that differ only
/// in seed share a hash.
inline std::string config_hash(const ExperimentConfig& c) {
  auto j = to_json_value(c);
  j.erase("seed");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a(j.dump())));
  return buf;
}

/// Named per-component streams fanned out from the master seed.
struct SeedStreams {
  RngHandle master;

  RngHandle data() const { return master.child("data"); }
  RngHandle dataprep() const { return master.child("dataprep"); }
  RngHandle site(std::size_t i) const { return master.child("site").child(i); }
  RngHandle global_model() const { return master.child("global"); }
  RngHandle server() const { return master.child("server"); }
  RngHandle pilot() const { return master.child("pilot"); }
  RngHandle evaluation() const { return master.child("evaluation"); }
};

inline SeedStreams seed_streams(std::uint64_t seed) { return {RngHandle{seed, 0}}; }

// ---------------------------------------------------------------------------
// Data generation and preparation

inline SynthData generate_data(const ExperimentConfig& cfg) {
  SynthSpec spec = cfg.data.synthetic;
  spec.profile = cfg.profile;
  spec.seed = seed_streams(cfg.seed).data();
  return synth_generate(spec);
}

struct PreparedSite {
  Dataset train;  // standardized with this site's training statistics
  Dataset test;
  StandardizationStats stats;
};

struct PreparedData {
  std::vector<std::size_t> kept_columns;
  std::vector<std::string> kept_names;
  std::vector<PreparedSite> sites;
  std::size_t source_rows = 0;
  std::size_t source_columns = 0;

  std::size_t minority_train_total() const {
    std::size_t n = 0;
    for (const auto& s : sites) n += s.train.count(1);
    return n;
  }
};

/// Correlation filter on the full table, then site partition, stratified
/// split and per-site standardization with training statistics.
inline PreparedData prepare_data(const ExperimentConfig& cfg, const Dataset& data) {
  PreparedData out;
  out.source_rows = static_cast<std::size_t>(data.rows());
  out.source_columns = static_cast<std::size_t>(data.cols());
  out.kept_columns = correlation_filter(data.x, cfg.correlation_threshold);
  const Dataset filtered = data.select_columns(out.kept_columns);
  out.kept_names = filtered.feature_names;
  const auto part = partition_sites(filtered, cfg.profile, cfg.train_frac, seed_streams(cfg.seed).dataprep());
  for (const auto& site : part.sites) {
    auto s = standardize(site.train, site.test);
    out.sites.push_back({std::move(s.train), std::move(s.test), std::move(s.stats)});
  }
  return out;
}

inline nlohmann::json prepared_manifest(const ExperimentConfig& cfg, const PreparedData& p) {
  nlohmann::json sites = nlohmann::json::array();
  for (std::size_t s = 0; s < p.sites.size(); ++s) {
    const auto& site = p.sites[s];
    sites.push_back({{"site", s + 1},
                     {"train_csv", "site" + std::to_string(s + 1) + "_train.csv"},
                     {"test_csv", "site" + std::to_string(s + 1) + "_test.csv"},
                     {"train_counts", {site.train.count(0), site.train.count(1)}},
                     {"test_counts", {site.test.count(0), site.test.count(1)}},
                     {"mean", to_json_value(site.stats.mean)},
                     {"scale", to_json_value(site.stats.scale)}});
  }
  return {{"source_rows", p.source_rows},
          {"source_columns", p.source_columns},
          {"kept_columns", p.kept_columns},
          {"kept_names", p.kept_names},
          {"components", mixture_components_for(p.minority_train_total())},
          {"seed", cfg.seed},
          {"config_hash", config_hash(cfg)},
          {"sites", sites}};
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IngestionError("cannot write '" + path.string() + "'");
  out << text;
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestionError("cannot read '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IngestionError("cannot create directory '" + dir.string() + "': " + ec.message());
}

}  // namespace detail

inline std::filesystem::path prepared_dir(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  return cfg.prepared_dir.empty() ? out_dir / "prepared" : std::filesystem::path(cfg.prepared_dir);
}

inline void write_prepared(const ExperimentConfig& cfg, const PreparedData& p, const std::filesystem::path& dir) {
  detail::ensure_dir(dir);
  CsvOptions csv;
  csv.label_column = cfg.data.label_column;
  for (std::size_t s = 0; s < p.sites.size(); ++s) {
    write_csv((dir / ("site" + std::to_string(s + 1) + "_train.csv")).string(), p.sites[s].train, csv);
    write_csv((dir / ("site" + std::to_string(s + 1) + "_test.csv")).string(), p.sites[s].test, csv);
  }
  detail::write_text(dir / "manifest.json", prepared_manifest(cfg, p).dump(2) + "\n");
}

inline PreparedData read_prepared(const ExperimentConfig& cfg, const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) {
    throw IngestionError("prepared partition directory '" + dir.string() + "' does not exist; run 'prepare' first");
  }
  const auto manifest_path = dir / "manifest.json";
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(detail::read_text(manifest_path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestionError("'" + manifest_path.string() + "' is not valid JSON: " + e.what());
  }
  PreparedData p;
  CsvOptions csv;
  csv.label_column = cfg.data.label_column;
  try {
    p.source_rows = manifest.at("source_rows");
    p.source_columns = manifest.at("source_columns");
    p.kept_columns = manifest.at("kept_columns").get<std::vector<std::size_t>>();
    p.kept_names = manifest.at("kept_names").get<std::vector<std::string>>();
    for (const auto& s : manifest.at("sites")) {
      PreparedSite site;
      site.train = load_csv((dir / s.at("train_csv").get<std::string>()).string(), csv);
      site.test = load_csv((dir / s.at("test_csv").get<std::string>()).string(), csv);
      site.stats.mean = vector_from_json(s.at("mean"));
      site.stats.scale = vector_from_json(s.at("scale"));
      p.sites.push_back(std::move(site));
    }
  } catch (const nlohmann::json::exception& e) {
    throw IngestionError("malformed manifest '" + manifest_path.string() + "': " + e.what());
  }
  if (p.sites.empty()) throw IngestionError("manifest '" + manifest_path.string() + "' lists no sites");
  return p;
}

// ---------------------------------------------------------------------------
// Experiment

/// The GMM prior used by the server, with defaults resolved from the data.
inline GmmPrior resolve_prior(const ExperimentConfig& cfg, const PreparedData& p) {
  const int d = cfg.moae.latent_dim;
  const int k = cfg.prior.components.value_or(std::max(1, mixture_components_for(p.minority_train_total())));
  GmmPrior prior;
  prior.alpha = DirichletAlpha::uniform(k, cfg.prior.dirichlet_alpha);
  prior.niw.m = Vector::Constant(d, cfg.prior.mean);
  prior.niw.kappa = cfg.prior.kappa;
  prior.niw.psi = cfg.prior.psi_scale * Matrix::Identity(d, d);
  prior.niw.nu = cfg.prior.nu.value_or(d + 2.0);
  return prior;
}

/// Empirical quantile with linear interpolation between order statistics.
inline double quantile(std::vector<double> v, double q) {
  if (v.empty()) throw EmptyInput("quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct SiteRunResult {
  SiteModel model;
  std::optional<SiteSessionLog> pilot;
  SiteSessionLog main;
};

struct ExperimentResult {
  ServerOutcome outcome;
  std::optional<std::vector<double>> pilot_trace;
  double epsilon = 0.0;
  GmmPrior prior;
  std::vector<SiteRunResult> sites;
  std::vector<LogEntry> log;
  std::vector<LogEntry> pilot_log;
  MetricsReport report;
};

namespace detail {

struct Links {
  std::vector<std::unique_ptr<Channel>> server;
  std::vector<std::unique_ptr<Channel>> site;
};

/// Server and site ends for every site. Over TCP the sites connect from the
/// orchestrator's own threads to a loopback listener.
inline Links open_links(const FederationSettings& f, std::size_t sites) {
  Links links;
  if (f.transport == "inproc") {
    for (std::size_t s = 0; s < sites; ++s) {
      auto [a, b] = in_process_pair();
      links.server.push_back(std::move(a));
      links.site.push_back(std::move(b));
    }
    return links;
  }
  TcpListener listener(Endpoint::parse(f.listen));
  const Endpoint target = f.connect.empty() ? listener.endpoint() : Endpoint::parse(f.connect);
  std::vector<std::future<std::unique_ptr<Channel>>> pending;
  for (std::size_t s = 0; s < sites; ++s) {
    pending.push_back(std::async(std::launch::async, [target] { return tcp_connect(target); }));
  }
  for (std::size_t s = 0; s < sites; ++s) links.server.push_back(listener.accept(Millis{f.register_timeout_ms}));
  for (auto& p : pending) links.site.push_back(p.get());
  return links;
}

inline ServerConfig server_config(const ExperimentConfig& cfg, const GmmPrior& prior, std::size_t sites) {
  ServerConfig sc;
  sc.sites = static_cast<int>(sites);
  sc.prior = prior;
  sc.register_timeout = Millis{cfg.federation.register_timeout_ms};
  sc.reply_timeout = Millis{cfg.federation.reply_timeout_ms};
  sc.retries = cfg.federation.retries;
  return sc;
}

inline Matrix concat_rows(const std::vector<const Matrix*>& parts) {
  Eigen::Index rows = 0, cols = 0;
  for (const auto* m : parts) {
    rows += m->rows();
    cols = m->cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const auto* m : parts) {
    out.middleRows(at, m->rows()) = *m;
    at += m->rows();
  }
  return out;
}

}  // namespace detail

/// Site training, optional pilot calibration, federated inference, posterior
/// delivery and the four evaluation conditions.
inline ExperimentResult run_experiment(const ExperimentConfig& cfg, const PreparedData& data,
                                       std::ostream* progress = nullptr) {
  cfg.validate();
  const auto streams = seed_streams(cfg.seed);
  const std::size_t n_sites = data.sites.size();
  ExperimentResult res;
  res.prior = resolve_prior(cfg, data);

  SiteSettings settings;
  settings.latent_dim = cfg.moae.latent_dim;
  settings.train = cfg.moae.train_options();
  settings.hist = cfg.histogram;
  settings.idle_timeout = Millis{std::max(cfg.federation.reply_timeout_ms, cfg.federation.register_timeout_ms) * 10};

  const bool pilot = !cfg.federation.epsilon.has_value();
  detail::Links links = detail::open_links(cfg.federation, n_sites);

  // Site threads: train locally, then answer the pilot and main sessions.
  std::vector<std::future<SiteRunResult>> site_runs;
  for (std::size_t s = 0; s < n_sites; ++s) {
    site_runs.push_back(std::async(std::launch::async, [&, s] {
      SiteRunResult r;
      const auto& train = data.sites[s].train;
      r.model = train_site(static_cast<int>(s), train.x, train.y, settings, streams.site(s));
      Channel& ch = *links.site[s];
      if (pilot) r.pilot = serve_site(static_cast<int>(s), r.model.encoded_minority, settings.hist, ch,
                                      settings.idle_timeout);
      r.main = serve_site(static_cast<int>(s), r.model.encoded_minority, settings.hist, ch, settings.idle_timeout);
      return r;
    }));
  }

  auto join_sites = [&] {
    for (auto& f : site_runs) res.sites.push_back(f.get());
  };
  try {
    if (pilot) {
      ServerConfig pc = detail::server_config(cfg, res.prior, n_sites);
      pc.seed = streams.pilot();
      pc.target_accepted = cfg.federation.pilot_trials;
      pc.max_trials = cfg.federation.pilot_trials;
      pc.epsilon = std::numeric_limits<double>::denorm_min();  // record discrepancies, accept nothing
      MessageLog plog(cfg.federation.compact_log);
      const auto outcome = run_server(pc, links.server, &plog);
      res.pilot_trace = outcome.result.trace;
      res.pilot_log = plog.entries();
      res.epsilon = quantile(*res.pilot_trace, cfg.federation.pilot_quantile);
      if (progress) *progress << "pilot: " << outcome.result.trials << " trials, epsilon " << res.epsilon << "\n";
    } else {
      res.epsilon = *cfg.federation.epsilon;
    }

    ServerConfig sc = detail::server_config(cfg, res.prior, n_sites);
    sc.seed = streams.server();
    sc.epsilon = res.epsilon;
    sc.target_accepted = cfg.federation.target_accepted;
    sc.max_trials = cfg.federation.max_trials;
    if (progress) {
      sc.on_progress = [progress](const AbcProgress& p) {
        *progress << "abc: " << p.trials << " trials, " << p.accepted << " accepted\n";
      };
    }
    DeliveryPlan plan;
    for (std::size_t s = 0; s < n_sites; ++s) {
      const auto& y = data.sites[s].train;
      plan[static_cast<int>(s)] =
          static_cast<Eigen::Index>(std::max<std::ptrdiff_t>(0, static_cast<std::ptrdiff_t>(y.count(0)) -
                                                                    static_cast<std::ptrdiff_t>(y.count(1))));
    }
    MessageLog log(cfg.federation.compact_log);
    res.outcome = run_server(sc, links.server, &log, &plan);
    res.log = log.entries();
  } catch (...) {
    links.server.clear();  // wakes site threads blocked on receive
    for (auto& f : site_runs) {
      try {
        f.get();
      } catch (...) {
      }
    }
    throw;
  }
  join_sites();
  if (progress) {
    *progress << "abc: " << res.outcome.result.accepted.size() << " accepted in " << res.outcome.result.trials
              << " trials\n";
  }

  // Evaluation artifacts.
  const bool raw = cfg.feature_space == "raw";
  EvaluationArtifacts art;
  art.epsilon = res.epsilon;
  std::vector<const Matrix*> pooled_x;
  std::vector<int> pooled_y;
  for (std::size_t s = 0; s < n_sites; ++s) {
    pooled_x.push_back(&data.sites[s].train.x);
    pooled_y.insert(pooled_y.end(), data.sites[s].train.y.begin(), data.sites[s].train.y.end());
  }
  std::optional<MoaeModel> global_model;
  if (!raw) {
    global_model = init_moae(static_cast<int>(data.sites.front().train.cols()), cfg.moae.latent_dim,
                             streams.global_model().child("init"));
    Rng grng(streams.global_model().child("train"));
    train_moae(*global_model, detail::concat_rows(pooled_x), pooled_y, cfg.moae.train_options(), grng);
  }
  for (std::size_t s = 0; s < n_sites; ++s) {
    const auto& site = data.sites[s];
    const auto& model = res.sites[s].model.model;
    SiteArtifacts a;
    a.train_y = site.train.y;
    a.test_y = site.test.y;
    const auto& delivery = res.sites[s].main.delivery;
    if (raw) {
      a.train_latent = site.train.x;
      a.test_latent = site.test.x;
      a.global_train_latent = site.train.x;
      a.global_test_latent = site.test.x;
      if (delivery) a.abc_oversamples = decode(model, *delivery);
    } else {
      a.train_latent = encode(model, site.train.x);
      a.test_latent = encode(model, site.test.x);
      a.global_train_latent = encode(*global_model, site.train.x);
      a.global_test_latent = encode(*global_model, site.test.x);
      if (delivery) a.abc_oversamples = *delivery;
    }
    art.sites.push_back(std::move(a));
  }

  for (Condition c : kAllConditions) {
    if (c == Condition::Abc && res.outcome.result.accepted.empty()) continue;
    auto rows = run_condition(c, art, cfg.classifier, streams.evaluation().child(condition_name(c)));
    for (auto& r : rows) res.report.columns.push_back(std::move(r));
  }
  sort_columns(res.report.columns);
  res.report.provenance = {{"seed", cfg.seed},
                           {"config_hash", config_hash(cfg)},
                           {"epsilon", res.epsilon},
                           {"epsilon_source", pilot ? "pilot" : "config"},
                           {"accepted", res.outcome.result.accepted.size()},
                           {"trials", res.outcome.result.trials},
                           {"complete", res.outcome.result.complete}};
  return res;
}

// ---------------------------------------------------------------------------
// Commands

inline void write_resolved_config(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  detail::ensure_dir(out_dir);
  detail::write_text(out_dir / "resolved_config.json", to_json_value(cfg).dump(2) + "\n");
}

/// Writes data.csv and data_manifest.json.
inline void cmd_gen_data(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  const auto gen = generate_data(cfg);
  detail::ensure_dir(out_dir);
  CsvOptions csv;
  csv.label_column = cfg.data.label_column;
  write_csv((out_dir / "data.csv").string(), gen.data, csv);
  nlohmann::json sites = nlohmann::json::array();
  for (std::size_t s = 0; s < cfg.profile.size(); ++s) {
    std::size_t major = 0, minor = 0;
    for (std::size_t i = 0; i < gen.site_of_row.size(); ++i) {
      if (gen.site_of_row[i] != static_cast<int>(s)) continue;
      (gen.data.y[i] == 0 ? major : minor)++;
    }
    sites.push_back({major, minor});
  }
  const nlohmann::json manifest = {{"rows", gen.data.rows()},
                                   {"features", gen.data.cols()},
                                   {"generating_site_counts", sites},
                                   {"seed", cfg.seed},
                                   {"config_hash", config_hash(cfg)}};
  detail::write_text(out_dir / "data_manifest.json", manifest.dump(2) + "\n");
  write_resolved_config(cfg, out_dir);
}

inline std::filesystem::path data_path(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  return cfg.data.csv.empty() ? out_dir / "data.csv" : std::filesystem::path(cfg.data.csv);
}

/// Reads the source table and writes per-site standardized partitions plus
/// manifest.json under the prepared directory.
inline PreparedData cmd_prepare(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  CsvOptions csv;
  csv.label_column = cfg.data.label_column;
  const Dataset data = load_csv(data_path(cfg, out_dir).string(), csv);
  PreparedData p = prepare_data(cfg, data);
  write_prepared(cfg, p, prepared_dir(cfg, out_dir));
  write_resolved_config(cfg, out_dir);
  return p;
}

inline nlohmann::json posterior_json(const ExperimentResult& r) {
  nlohmann::json j = abc_result_to_json(r.outcome.result, [](const GmmParams& p) { return to_json_value(p); });
  j["epsilon"] = r.epsilon;
  j["components"] = r.prior.components();
  j["latent_dim"] = r.prior.niw.dim();
  j["rounds"] = r.outcome.rounds;
  j["retried_rounds"] = r.outcome.retried_rounds;
  if (r.pilot_trace) j["pilot_trace"] = *r.pilot_trace;
  return j;
}

inline void write_log(const std::vector<LogEntry>& log, const std::filesystem::path& path) {
  std::ostringstream os;
  for (const auto& e : log) os << MessageLog::entry_to_json(e).dump() << '\n';
  detail::write_text(path, os.str());
}

/// 0 when the target number of parameter sets was accepted, 2 when the trial
/// budget ran out first.
inline int run_exit_code(const ExperimentResult& r) { return r.outcome.result.complete ? 0 : 2; }

/// Runs the experiment on prepared partitions and writes posterior.json,
/// message_log.jsonl (plus pilot_log.jsonl when calibrating), report.txt,
/// report.json and resolved_config.json. Returns the process exit code.
inline int cmd_run(const ExperimentConfig& cfg, const std::filesystem::path& out_dir,
                   std::ostream* progress = nullptr) {
  cfg.validate();
  const PreparedData data = read_prepared(cfg, prepared_dir(cfg, out_dir));
  const ExperimentResult r = run_experiment(cfg, data, progress);
  detail::ensure_dir(out_dir);
  detail::write_text(out_dir / "posterior.json", posterior_json(r).dump() + "\n");
  write_log(r.log, out_dir / "message_log.jsonl");
  if (r.pilot_trace) write_log(r.pilot_log, out_dir / "pilot_log.jsonl");
  detail::write_text(out_dir / "report.txt", render_text(r.report));
  detail::write_text(out_dir / "report.json", to_json_value(r.report).dump(2) + "\n");
  write_resolved_config(cfg, out_dir);
  return run_exit_code(r);
}

/// Accepts run directories or report.json paths; returns the aggregated table
/// and notes config mismatches on `warnings`.
inline AggregateReport cmd_report(const std::vector<std::string>& paths, std::ostream& warnings) {
  std::vector<MetricsReport> reports;
  std::optional<std::string> hash;
  for (const auto& p : paths) {
    std::filesystem::path file = p;
    if (std::filesystem::is_directory(file)) file /= "report.json";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(detail::read_text(file));
    } catch (const nlohmann::json::parse_error& e) {
      throw IngestionError("'" + file.string() + "' is not valid JSON: " + e.what());
    }
    reports.push_back(report_from_json(j));
    const auto h = reports.back().provenance.value("config_hash", std::string{});
    if (!hash) {
      hash = h;
    } else if (h != *hash) {
      warnings << "warning: " << file.string() << " was produced with config " << h << ", expected " << *hash
               << "\n";
    }
  }
  return aggregate_reports(reports);
}

}  // namespace fedabc
