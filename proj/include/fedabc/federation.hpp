#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedabc/abc_engine.hpp"
#include "fedabc/discrepancy.hpp"
#include "fedabc/error.hpp"
#include "fedabc/gmm.hpp"
#include "fedabc/moae.hpp"
#include "fedabc/rng.hpp"
#include "fedabc/stat_samplers.hpp"
#include "fedabc/transport.hpp"
#include "fedabc/wire.hpp"

namespace fedabc {

// ---------------------------------------------------------------------------
// Priors and posterior-predictive sampling

/// pi ~ Dir(alpha); (mu_k, Sigma_k) ~ NIW independently for each component.
struct GmmPrior {
  DirichletAlpha alpha;
  NiwHyper niw;

  static GmmPrior standard(int k, int d) { return {DirichletAlpha::uniform(k), NiwHyper::standard(d)}; }

  int components() const { return static_cast<int>(alpha.alpha.size()); }

  GmmParams sample(Rng& rng) const {
    GmmParams p;
    p.pi = sample_dirichlet(alpha, rng);
    for (int k = 0; k < components(); ++k) {
      auto draw = sample_niw(niw, rng);
      p.mu.push_back(std::move(draw.mu));
      p.sigma.push_back(std::move(draw.sigma));
    }
    return p;
  }
};

/// Each row: theta uniform over the accepted list, then one draw from that GMM.
inline Matrix posterior_oversample(const std::vector<GmmParams>& accepted, Eigen::Index n_needed, Rng& rng) {
  if (accepted.empty()) throw NoPosterior("posterior oversampling needs at least one accepted parameter set");
  const auto d = accepted.front().dim();
  Matrix out(n_needed, d);
  for (Eigen::Index i = 0; i < n_needed; ++i) {
    const auto& theta = accepted[rng.index(accepted.size())];
    out.row(i) = sample_gmm(theta, 1, rng).rows.row(0);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Message log

enum class Direction { ServerToSite, SiteToServer };

struct LogEntry {
  std::size_t seq = 0;
  Direction dir = Direction::ServerToSite;
  int site = -1;
  nlohmann::json msg;
};

/// Server-side record of every message sent or received, in control-loop order.
class MessageLog {
 public:
  /// In compact mode CandidateBatch payloads are replaced by shape + digest.
  explicit MessageLog(bool compact_candidates = false) : compact_(compact_candidates) {}

  void record(Direction dir, int site, const WireMessage& m) {
    nlohmann::json j;
    if (compact_ && std::holds_alternative<CandidateBatch>(m)) {
      const auto& c = std::get<CandidateBatch>(m);
      j = {{"type", "CandidateBatch"},
           {"round", c.round},
           {"shape", {c.rows.rows(), c.rows.cols()}},
           {"digest", digest(c.rows)}};
    } else {
      j = to_json_value(m);
    }
    std::lock_guard lock(mu_);
    entries_.push_back({entries_.size(), dir, site, std::move(j)});
  }

  std::vector<LogEntry> entries() const {
    std::lock_guard lock(mu_);
    return entries_;
  }

  void write_jsonl(std::ostream& os) const {
    std::lock_guard lock(mu_);
    for (const auto& e : entries_) os << entry_to_json(e).dump() << '\n';
  }

  static nlohmann::json entry_to_json(const LogEntry& e) {
    return {{"seq", e.seq},
            {"dir", e.dir == Direction::ServerToSite ? "server->site" : "site->server"},
            {"site", e.site},
            {"msg", e.msg}};
  }

  static std::vector<LogEntry> read_jsonl(std::istream& is) {
    std::vector<LogEntry> out;
    std::string line;
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      const auto dir = j.at("dir").get<std::string>();
      if (dir != "server->site" && dir != "site->server") throw DecodeError("bad log direction '" + dir + "'");
      out.push_back({j.at("seq").get<std::size_t>(),
                     dir == "server->site" ? Direction::ServerToSite : Direction::SiteToServer,
                     j.at("site").get<int>(), j.at("msg")});
    }
    return out;
  }

  static std::string digest(const Matrix& m) {
    std::uint64_t h = 0xCBF29CE484222325ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(m.data());
    for (std::size_t i = 0; i < static_cast<std::size_t>(m.size()) * sizeof(double); ++i) {
      h ^= bytes[i];
      h *= 0x100000001B3ull;
    }
    std::ostringstream os;
    os << std::hex << h;
    return os.str();
  }

 private:
  bool compact_;
  mutable std::mutex mu_;
  std::vector<LogEntry> entries_;
};

/// Site->server messages other than Register / DiscrepancyReply, or carrying
/// any array payload, are privacy violations. Returns one line per violation.
inline std::vector<std::string> audit_privacy(const std::vector<LogEntry>& log) {
  std::vector<std::string> violations;
  for (const auto& e : log) {
    if (e.dir != Direction::SiteToServer) continue;
    const auto type = e.msg.value("type", std::string{"<missing>"});
    bool has_array = false;
    for (const auto& [key, value] : e.msg.items()) {
      if (value.is_array() || value.is_object()) has_array = true;
    }
    if ((type != "Register" && type != "DiscrepancyReply") || has_array) {
      violations.push_back("seq " + std::to_string(e.seq) + ": site " + std::to_string(e.site) + " sent " + type +
                           (has_array ? " with structured payload" : ""));
    }
  }
  return violations;
}

struct RoundRecord {
  std::uint64_t round = 0;
  std::vector<double> phis;  // in site-registration order of arrival
  double mean = 0.0;
  std::optional<bool> accepted;
};

/// Rebuilds per-round replies and decisions from a log.
inline std::vector<RoundRecord> replay_rounds(const std::vector<LogEntry>& log) {
  std::map<std::uint64_t, RoundRecord> rounds;
  for (const auto& e : log) {
    const auto type = e.msg.value("type", std::string{});
    if (type == "DiscrepancyReply") {
      auto& r = rounds[e.msg.at("round").get<std::uint64_t>()];
      r.round = e.msg.at("round").get<std::uint64_t>();
      r.phis.push_back(e.msg.at("phi").get<double>());
    } else if (type == "AcceptNotice") {
      auto& r = rounds[e.msg.at("round").get<std::uint64_t>()];
      r.round = e.msg.at("round").get<std::uint64_t>();
      r.accepted = e.msg.at("accepted").get<bool>();
    }
  }
  std::vector<RoundRecord> out;
  for (auto& [id, r] : rounds) {
    double sum = 0.0;
    for (double p : r.phis) sum += p;
    r.mean = r.phis.empty() ? 0.0 : sum / static_cast<double>(r.phis.size());
    out.push_back(std::move(r));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Server

struct SiteRegistration {
  int site_id = 0;
  int n_rows = 0;
};

struct ServerConfig {
  int sites = 1;
  std::size_t target_accepted = 100;
  double epsilon = 8.0;
  GmmPrior prior;
  std::size_t max_trials = 1'000'000;
  RngHandle seed{};
  Millis register_timeout{60'000};
  Millis reply_timeout{60'000};
  int retries = 3;
  std::size_t progress_every = 10'000;
  std::function<void(const AbcProgress&)> on_progress;

  void validate() const {
    if (sites < 1) throw ConfigError("server needs at least one site");
    if (!(epsilon > 0.0)) throw ConfigError("threshold must be positive");
    if (target_accepted < 1) throw ConfigError("target accepted count must be at least 1");
    if (max_trials < target_accepted) throw ConfigError("max trials below target accepted count");
    if (retries < 0) throw ConfigError("retry budget must be non-negative");
    prior.alpha.validate();
    prior.niw.validate();
  }
};

struct ServerOutcome {
  AbcResult<GmmParams> result;
  std::vector<SiteRegistration> sites;  // registration order
  std::uint64_t rounds = 0;             // round ids issued, retries included
  std::size_t retried_rounds = 0;
};

/// Rows per site for the optional posterior delivery after inference.
using DeliveryPlan = std::map<int, Eigen::Index>;

/// Splits a generated matrix into consecutive per-site blocks.
inline std::vector<Matrix> split_rows(const Matrix& all, const std::vector<SiteRegistration>& sites) {
  std::vector<Matrix> out;
  Eigen::Index at = 0;
  for (const auto& s : sites) {
    if (at + s.n_rows > all.rows()) throw ShapeError("generated matrix smaller than the registered row total");
    out.emplace_back(all.middleRows(at, s.n_rows));
    at += s.n_rows;
  }
  return out;
}

namespace detail {

class ServerSession {
 public:
  ServerSession(const ServerConfig& cfg, std::vector<std::unique_ptr<Channel>>& channels, MessageLog* log)
      : cfg_(cfg), channels_(channels), log_(log) {}

  /// Registration order is ascending site id, independent of connect order.
  std::vector<SiteRegistration> register_sites() {
    if (static_cast<int>(channels_.size()) != cfg_.sites) {
      throw ConfigError("server configured for " + std::to_string(cfg_.sites) + " sites but has " +
                        std::to_string(channels_.size()) + " channels");
    }
    std::vector<std::pair<SiteRegistration, std::size_t>> regs;
    std::set<int> seen;
    for (std::size_t c = 0; c < channels_.size(); ++c) {
      auto m = channels_[c]->receive(cfg_.register_timeout);
      if (!m) throw TransportError("timed out waiting for site registration");
      const auto* reg = std::get_if<Register>(&*m);
      if (!reg) throw ProtocolError("expected Register, got " + std::string(message_type(*m)));
      if (log_) log_->record(Direction::SiteToServer, reg->site_id, *m);
      if (reg->n_rows < 1) throw ProtocolError("site " + std::to_string(reg->site_id) + " registered no rows");
      if (!seen.insert(reg->site_id).second) {
        throw ProtocolError("duplicate site id " + std::to_string(reg->site_id));
      }
      regs.push_back({{reg->site_id, reg->n_rows}, c});
    }
    std::sort(regs.begin(), regs.end(), [](const auto& a, const auto& b) { return a.first.site_id < b.first.site_id; });
    std::vector<SiteRegistration> sites;
    for (const auto& [r, c] : regs) {
      sites.push_back(r);
      order_.push_back(c);
    }
    sites_ = sites;
    return sites;
  }

  void send(std::size_t slot, const WireMessage& m) {
    if (log_) log_->record(Direction::ServerToSite, sites_[slot].site_id, m);
    channels_[order_[slot]]->send(m);
  }

  /// One attempt at a round; nullopt if any site timed out.
  std::optional<std::vector<double>> collect(std::uint64_t round) {
    std::vector<double> phis(sites_.size());
    for (std::size_t s = 0; s < sites_.size(); ++s) {
      for (;;) {
        auto m = channels_[order_[s]]->receive(cfg_.reply_timeout);
        if (!m) return std::nullopt;
        const auto* rep = std::get_if<DiscrepancyReply>(&*m);
        if (log_) log_->record(Direction::SiteToServer, sites_[s].site_id, *m);
        if (!rep) throw ProtocolError("expected DiscrepancyReply, got " + std::string(message_type(*m)));
        if (rep->round < round && aborted_.count(rep->round)) continue;  // late reply to an aborted attempt
        if (rep->round != round) {
          throw ProtocolError("reply for round " + std::to_string(rep->round) + " while round " +
                              std::to_string(round) + " is open");
        }
        if (rep->site_id != sites_[s].site_id) throw ProtocolError("reply carries the wrong site id");
        if (!std::isfinite(rep->phi) || rep->phi < 0.0) throw ProtocolError("discrepancy must be finite and >= 0");
        phis[s] = rep->phi;
        break;
      }
    }
    return phis;
  }

  void abort_round(std::uint64_t round) { aborted_.insert(round); }

 private:
  const ServerConfig& cfg_;
  std::vector<std::unique_ptr<Channel>>& channels_;
  MessageLog* log_;
  std::vector<SiteRegistration> sites_;
  std::vector<std::size_t> order_;
  std::set<std::uint64_t> aborted_;
};

}  // namespace detail

/// Central-server loop: draw theta from the priors, generate N latent rows,
/// send each site its n_i-row block, average the returned phi values and keep
/// theta iff the mean is strictly below epsilon. Trial t draws from
/// trial_stream(seed, t), the same stream layout as abc_rejection.
inline ServerOutcome run_server(const ServerConfig& cfg, std::vector<std::unique_ptr<Channel>>& channels,
                                MessageLog* log = nullptr, const DeliveryPlan* deliveries = nullptr) {
  cfg.validate();
  detail::ServerSession session(cfg, channels, log);
  ServerOutcome out;
  out.sites = session.register_sites();
  Eigen::Index total_rows = 0;
  for (const auto& s : out.sites) total_rows += s.n_rows;

  auto& res = out.result;
  std::uint64_t round = 0;
  while (res.accepted.size() < cfg.target_accepted && res.trials < cfg.max_trials) {
    const std::size_t t = res.trials;
    Rng rng(trial_stream(cfg.seed, t));
    GmmParams theta = cfg.prior.sample(rng);
    const Matrix generated = sample_gmm(theta, total_rows, rng).rows;
    const auto blocks = split_rows(generated, out.sites);

    std::optional<std::vector<double>> phis;
    for (int attempt = 0; attempt <= cfg.retries && !phis; ++attempt) {
      ++round;
      for (std::size_t s = 0; s < blocks.size(); ++s) session.send(s, CandidateBatch{round, blocks[s]});
      phis = session.collect(round);
      if (!phis) {
        session.abort_round(round);
        ++out.retried_rounds;
      }
    }
    if (!phis) {
      throw TransportError("sites did not answer trial " + std::to_string(t) + " after " +
                           std::to_string(cfg.retries) + " retries");
    }
    double sum = 0.0;
    for (double p : *phis) sum += p;
    const double mean = sum / static_cast<double>(phis->size());
    const bool accept = mean < cfg.epsilon;
    for (std::size_t s = 0; s < blocks.size(); ++s) session.send(s, AcceptNotice{round, accept});

    res.trace.push_back(mean);
    ++res.trials;
    if (accept) {
      res.accepted.push_back(std::move(theta));
      res.accepted_trials.push_back(t);
      res.accepted_discrepancy.push_back(mean);
    }
    if (cfg.on_progress && cfg.progress_every > 0 && res.trials % cfg.progress_every == 0) {
      cfg.on_progress({res.trials, res.accepted.size()});
    }
  }
  res.complete = res.accepted.size() >= cfg.target_accepted;
  out.rounds = round;

  if (deliveries) {
    for (std::size_t s = 0; s < out.sites.size(); ++s) {
      const int id = out.sites[s].site_id;
      const auto it = deliveries->find(id);
      if (it == deliveries->end()) continue;
      Rng rng(cfg.seed.child("delivery").child(static_cast<std::uint64_t>(id)));
      Matrix rows = res.accepted.empty() ? Matrix(0, cfg.prior.niw.dim())
                                         : posterior_oversample(res.accepted, it->second, rng);
      session.send(s, SampleDelivery{std::move(rows)});
    }
  }
  for (std::size_t s = 0; s < out.sites.size(); ++s) session.send(s, Shutdown{});
  return out;
}

/// The same inference without the protocol: one process holding every site's
/// encoded rows, with the mean per-site similarity as the discrepancy.
inline AbcProblem<GmmParams, Matrix, Matrix> centralized_problem(const ServerConfig& cfg,
                                                                 const std::vector<Matrix>& site_encodings,
                                                                 const HistogramSpec& hist) {
  std::vector<SiteRegistration> sites;
  Eigen::Index total = 0;
  for (std::size_t s = 0; s < site_encodings.size(); ++s) {
    sites.push_back({static_cast<int>(s), static_cast<int>(site_encodings[s].rows())});
    total += site_encodings[s].rows();
  }
  const auto d = site_encodings.empty() ? 0 : site_encodings.front().cols();
  Matrix observed(total, d);
  Eigen::Index at = 0;
  for (const auto& e : site_encodings) {
    observed.middleRows(at, e.rows()) = e;
    at += e.rows();
  }
  AbcProblem<GmmParams, Matrix, Matrix> p;
  const GmmPrior prior = cfg.prior;
  p.prior = [prior](Rng& rng) { return prior.sample(rng); };
  p.simulator = [total](const GmmParams& theta, Rng& rng) { return sample_gmm(theta, total, rng).rows; };
  p.summary = [](const Matrix& m) { return m; };
  p.discrepancy = [sites, hist](const Matrix& gen, const Matrix& obs) {
    const auto g = split_rows(gen, sites);
    const auto o = split_rows(obs, sites);
    double sum = 0.0;
    for (std::size_t s = 0; s < sites.size(); ++s) sum += site_similarity(o[s], g[s], hist);
    return sum / static_cast<double>(sites.size());
  };
  p.observed = std::move(observed);
  p.epsilon = cfg.epsilon;
  p.target_accepted = cfg.target_accepted;
  p.max_trials = cfg.max_trials;
  return p;
}

// ---------------------------------------------------------------------------
// Site

struct SiteSettings {
  int latent_dim = 24;
  TrainOptions train;
  HistogramSpec hist;
  Millis idle_timeout{600'000};
};

/// A site's trained autoencoder and its encoded minority rows (X_enc).
struct SiteModel {
  int site_id = 0;
  MoaeModel model;
  TrainResult training;
  Matrix encoded_minority;
};

/// Trains the site autoencoder on all local rows, then encodes the minority
/// (label 1) rows.
inline SiteModel train_site(int site_id, const Matrix& x, const std::vector<int>& y, const SiteSettings& settings,
                            RngHandle stream) {
  SiteModel site;
  site.site_id = site_id;
  site.model = init_moae(static_cast<int>(x.cols()), settings.latent_dim, stream.child("init"));
  Rng rng(stream.child("train"));
  site.training = train_moae(site.model, x, y, settings.train, rng);
  std::vector<Eigen::Index> minority;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1) minority.push_back(static_cast<Eigen::Index>(i));
  }
  if (minority.empty()) throw InsufficientData("site " + std::to_string(site_id) + " has no minority rows");
  Matrix rows(static_cast<Eigen::Index>(minority.size()), x.cols());
  for (std::size_t i = 0; i < minority.size(); ++i) rows.row(static_cast<Eigen::Index>(i)) = x.row(minority[i]);
  site.encoded_minority = encode(site.model, rows);
  return site;
}

struct SiteSessionLog {
  std::vector<std::uint64_t> rounds;
  std::vector<double> phis;
  std::vector<AcceptNotice> notices;
  std::optional<Matrix> delivery;
  std::vector<std::string> outbound;  // message types sent to the server
};

/// Registers, then answers every CandidateBatch with phi = sim(X_enc, X_gen)
/// until Shutdown.
inline SiteSessionLog serve_site(int site_id, const Matrix& encoded, const HistogramSpec& hist, Channel& channel,
                                 Millis idle_timeout = Millis{600'000}) {
  SiteSessionLog log;
  auto send = [&](const WireMessage& m) {
    log.outbound.emplace_back(message_type(m));
    channel.send(m);
  };
  send(Register{site_id, static_cast<int>(encoded.rows())});
  for (;;) {
    auto m = channel.receive(idle_timeout);
    if (!m) throw TransportError("site " + std::to_string(site_id) + " timed out waiting for the server");
    if (auto* c = std::get_if<CandidateBatch>(&*m)) {
      if (c->rows.rows() != encoded.rows() || c->rows.cols() != encoded.cols()) {
        throw ProtocolError("site " + std::to_string(site_id) + " received a " + std::to_string(c->rows.rows()) +
                            "x" + std::to_string(c->rows.cols()) + " batch, expected " +
                            std::to_string(encoded.rows()) + "x" + std::to_string(encoded.cols()));
      }
      const double phi = site_similarity(encoded, c->rows, hist);
      log.rounds.push_back(c->round);
      log.phis.push_back(phi);
      send(DiscrepancyReply{c->round, site_id, phi});
    } else if (auto* a = std::get_if<AcceptNotice>(&*m)) {
      log.notices.push_back(*a);
    } else if (auto* s = std::get_if<SampleDelivery>(&*m)) {
      log.delivery = s->rows;
    } else if (std::holds_alternative<Shutdown>(*m)) {
      return log;
    } else {
      throw ProtocolError("site received unexpected " + std::string(message_type(*m)));
    }
  }
}

struct SiteSession {
  SiteModel site;
  SiteSessionLog log;
};

inline SiteSession run_site(int site_id, const Matrix& x, const std::vector<int>& y, const SiteSettings& settings,
                            Channel& channel, RngHandle stream) {
  SiteSession s{train_site(site_id, x, y, settings, stream), {}};
  s.log = serve_site(site_id, s.site.encoded_minority, settings.hist, channel, settings.idle_timeout);
  return s;
}

}  // namespace fedabc
