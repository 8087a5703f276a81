#include <future>
#include <sstream>
#include <thread>

#include <gtest/gtest.h>

#include "fedabc/federation.hpp"

using namespace fedabc;

namespace {

Matrix latent_rows(Eigen::Index n, Eigen::Index d, Rng& rng) {
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::tanh(0.5 * rng.normal());
  return m;
}

ServerConfig small_config(int sites, double eps, std::size_t target, std::size_t max_trials) {
  ServerConfig c;
  c.sites = sites;
  c.epsilon = eps;
  c.target_accepted = target;
  c.max_trials = max_trials;
  c.prior = GmmPrior::standard(2, 2);
  c.seed = {1234, 7};
  c.reply_timeout = Millis{10'000};
  c.register_timeout = Millis{10'000};
  return c;
}

struct InProcessRun {
  ServerOutcome server;
  std::vector<SiteSessionLog> sites;
  std::vector<LogEntry> log;
};

/// Server plus one serve_site thread per encoding, over in-process links.
InProcessRun run_in_process(const ServerConfig& cfg, const std::vector<Matrix>& encodings, const HistogramSpec& hist,
                            const DeliveryPlan* plan = nullptr) {
  std::vector<std::unique_ptr<Channel>> server_side;
  std::vector<std::unique_ptr<Channel>> site_side;
  for (std::size_t s = 0; s < encodings.size(); ++s) {
    auto [a, b] = in_process_pair();
    server_side.push_back(std::move(a));
    site_side.push_back(std::move(b));
  }
  std::vector<std::future<SiteSessionLog>> futures;
  for (std::size_t s = 0; s < encodings.size(); ++s) {
    futures.push_back(std::async(std::launch::async, [&, s] {
      return serve_site(static_cast<int>(s), encodings[s], hist, *site_side[s], Millis{10'000});
    }));
  }
  MessageLog log;
  InProcessRun run;
  run.server = run_server(cfg, server_side, &log, plan);
  for (auto& f : futures) run.sites.push_back(f.get());
  run.log = log.entries();
  return run;
}

/// A stand-in site that answers every batch with a fixed phi.
void scripted_site(Channel& ch, int id, int rows, double phi) {
  ch.send(Register{id, rows});
  for (;;) {
    auto m = ch.receive(Millis{10'000});
    if (!m || std::holds_alternative<Shutdown>(*m)) return;
    if (auto* c = std::get_if<CandidateBatch>(&*m)) ch.send(DiscrepancyReply{c->round, id, phi});
  }
}

ServerOutcome run_scripted(const ServerConfig& cfg, const std::vector<double>& phis, MessageLog* log) {
  std::vector<std::unique_ptr<Channel>> server_side, site_side;
  for (std::size_t s = 0; s < phis.size(); ++s) {
    auto [a, b] = in_process_pair();
    server_side.push_back(std::move(a));
    site_side.push_back(std::move(b));
  }
  std::vector<std::thread> threads;
  for (std::size_t s = 0; s < phis.size(); ++s) {
    threads.emplace_back([&, s] { scripted_site(*site_side[s], static_cast<int>(s), 3, phis[s]); });
  }
  auto out = run_server(cfg, server_side, log);
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace

TEST(Federation, SingleSiteEqualsCentralizedAbc) {
  Rng rng({1, 0});
  const std::vector<Matrix> enc{latent_rows(6, 2, rng)};
  const HistogramSpec hist;
  // Threshold near the lower tail of the discrepancy so some trials reject.
  auto cfg = small_config(1, 30.0, 15, 400);
  const auto fed = run_in_process(cfg, enc, hist);
  const auto central = abc_rejection(centralized_problem(cfg, enc, hist), cfg.seed);
  ASSERT_GT(fed.server.result.accepted.size(), 0u);
  ASSERT_EQ(fed.server.result.accepted.size(), central.accepted.size());
  for (std::size_t i = 0; i < central.accepted.size(); ++i) {
    EXPECT_TRUE(fed.server.result.accepted[i] == central.accepted[i]);
  }
  EXPECT_EQ(fed.server.result.trace, central.trace);
  EXPECT_EQ(fed.server.result.accepted_trials, central.accepted_trials);
  EXPECT_LT(fed.server.result.acceptance_rate(), 1.0);
}

TEST(Federation, ThreeSitesMatchCentralizedMean) {
  Rng rng({2, 0});
  const std::vector<Matrix> enc{latent_rows(4, 2, rng), latent_rows(3, 2, rng), latent_rows(5, 2, rng)};
  auto cfg = small_config(3, 40.0, 5, 200);
  const auto fed = run_in_process(cfg, enc, {});
  const auto central = abc_rejection(centralized_problem(cfg, enc, {}), cfg.seed);
  EXPECT_EQ(fed.server.result.trace, central.trace);
  EXPECT_EQ(fed.server.result.accepted_trials, central.accepted_trials);
}

TEST(Federation, MeanAtThresholdIsRejected) {
  auto cfg = small_config(3, 8.0, 1, 5);
  MessageLog log;
  const auto out = run_scripted(cfg, {2.0, 8.0, 14.0}, &log);
  EXPECT_TRUE(out.result.accepted.empty());
  EXPECT_FALSE(out.result.complete);
  EXPECT_EQ(out.result.trials, 5u);
  for (double m : out.result.trace) EXPECT_EQ(m, 8.0);
}

TEST(Federation, RiggedPairNeverAccepts) {
  auto cfg = small_config(2, 3.0, 1, 20);
  MessageLog log;
  const auto out = run_scripted(cfg, {0.0, 6.0}, &log);
  EXPECT_EQ(out.result.accepted.size(), 0u);
  EXPECT_FALSE(out.result.complete);
  EXPECT_EQ(out.result.trials, 20u);
  for (const auto& r : replay_rounds(log.entries())) {
    EXPECT_EQ(r.mean, 3.0);
    ASSERT_TRUE(r.accepted);
    EXPECT_FALSE(*r.accepted);
  }
}

TEST(Federation, LogReplayAndPrivacyAudit) {
  Rng rng({3, 0});
  const std::vector<Matrix> enc{latent_rows(4, 2, rng), latent_rows(3, 2, rng), latent_rows(5, 2, rng)};
  auto cfg = small_config(3, 40.0, 5, 200);
  const DeliveryPlan plan{{0, 7}, {1, 0}, {2, 3}};
  const auto run = run_in_process(cfg, enc, {}, &plan);

  EXPECT_TRUE(audit_privacy(run.log).empty());
  std::set<std::string> inbound;
  for (const auto& e : run.log) {
    if (e.dir == Direction::SiteToServer) inbound.insert(e.msg.at("type").get<std::string>());
  }
  EXPECT_EQ(inbound, (std::set<std::string>{"Register", "DiscrepancyReply"}));

  const auto rounds = replay_rounds(run.log);
  ASSERT_EQ(rounds.size(), run.server.result.trials);
  for (std::size_t t = 0; t < rounds.size(); ++t) {
    EXPECT_EQ(rounds[t].phis.size(), 3u);
    EXPECT_EQ(rounds[t].mean, run.server.result.trace[t]);
    ASSERT_TRUE(rounds[t].accepted);
    EXPECT_EQ(*rounds[t].accepted, rounds[t].mean < cfg.epsilon);
  }

  ASSERT_TRUE(run.sites[0].delivery);
  EXPECT_EQ(run.sites[0].delivery->rows(), 7);
  EXPECT_EQ(run.sites[1].delivery->rows(), 0);
  EXPECT_EQ(run.sites[2].delivery->rows(), 3);
  for (const auto& s : run.sites) {
    for (const auto& type : s.outbound) EXPECT_TRUE(type == "Register" || type == "DiscrepancyReply");
  }
}

TEST(Federation, AuditFlagsMatrixPayloadFromSite) {
  MessageLog log;
  log.record(Direction::SiteToServer, 0, Register{0, 3});
  log.record(Direction::SiteToServer, 0, SampleDelivery{Matrix::Zero(2, 2)});
  log.record(Direction::ServerToSite, 0, CandidateBatch{1, Matrix::Zero(3, 2)});
  const auto v = audit_privacy(log.entries());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_NE(v[0].find("SampleDelivery"), std::string::npos);
}

TEST(Federation, SplitConcatenationReproducesGeneratedMatrix) {
  Rng rng({4, 0});
  const std::vector<Matrix> enc{latent_rows(4, 2, rng), latent_rows(3, 2, rng)};
  auto cfg = small_config(2, 1e-9, 1, 3);
  const auto run = run_in_process(cfg, enc, {});
  std::map<std::uint64_t, std::vector<Matrix>> per_round;
  for (const auto& e : run.log) {
    if (e.msg.at("type") == "CandidateBatch") {
      const auto m = std::get<CandidateBatch>(message_from_json(e.msg));
      per_round[m.round].push_back(m.rows);
    }
  }
  ASSERT_EQ(per_round.size(), 3u);
  std::size_t t = 0;
  for (const auto& [round, blocks] : per_round) {
    Rng trial(trial_stream(cfg.seed, t++));
    const auto theta = cfg.prior.sample(trial);
    const Matrix all = sample_gmm(theta, 7, trial).rows;
    Matrix joined(7, 2);
    joined << blocks[0], blocks[1];
    EXPECT_EQ(joined, all);
  }
}

TEST(Federation, CompactLogKeepsShapeAndDigest) {
  MessageLog log(true);
  const Matrix m = Matrix::Ones(3, 2);
  log.record(Direction::ServerToSite, 1, CandidateBatch{4, m});
  const auto e = log.entries().at(0);
  EXPECT_EQ(e.msg.at("shape"), nlohmann::json({3, 2}));
  EXPECT_EQ(e.msg.at("digest"), MessageLog::digest(m));
  std::stringstream ss;
  log.write_jsonl(ss);
  const auto back = MessageLog::read_jsonl(ss);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_EQ(back[0].msg, e.msg);
}

TEST(Federation, SilentSiteExhaustsRetries) {
  auto cfg = small_config(1, 10.0, 1, 10);
  cfg.reply_timeout = Millis{30};
  cfg.retries = 3;
  auto [server_side, site_side] = in_process_pair();
  std::vector<std::unique_ptr<Channel>> channels;
  channels.push_back(std::move(server_side));
  site_side->send(Register{0, 2});
  EXPECT_THROW(run_server(cfg, channels), TransportError);
  int batches = 0;
  while (auto m = site_side->receive(Millis{0})) batches += std::holds_alternative<CandidateBatch>(*m);
  EXPECT_EQ(batches, 4);
}

TEST(Federation, RetryReusesCandidateAfterTimeout) {
  auto cfg = small_config(1, 1e9, 1, 1);
  cfg.reply_timeout = Millis{200};
  auto [server_side, site_side] = in_process_pair();
  std::vector<std::unique_ptr<Channel>> channels;
  channels.push_back(std::move(server_side));
  std::thread site([ch = site_side.get()] {
    ch->send(Register{0, 2});
    auto first = ch->receive(Millis{5000});
    auto second = ch->receive(Millis{5000});  // ignore the first attempt
    const auto& a = std::get<CandidateBatch>(*first);
    const auto& b = std::get<CandidateBatch>(*second);
    EXPECT_EQ(a.rows, b.rows);
    EXPECT_LT(a.round, b.round);
    ch->send(DiscrepancyReply{a.round, 0, 1.0});  // late reply, ignored
    ch->send(DiscrepancyReply{b.round, 0, 1.0});
    while (auto m = ch->receive(Millis{5000})) {
      if (std::holds_alternative<Shutdown>(*m)) break;
    }
  });
  const auto out = run_server(cfg, channels);
  site.join();
  EXPECT_EQ(out.result.accepted.size(), 1u);
  EXPECT_EQ(out.retried_rounds, 1u);
}

TEST(Federation, WrongRoundIdIsProtocolError) {
  auto cfg = small_config(1, 10.0, 1, 10);
  auto [server_side, site_side] = in_process_pair();
  std::vector<std::unique_ptr<Channel>> channels;
  channels.push_back(std::move(server_side));
  std::thread site([ch = site_side.get()] {
    ch->send(Register{0, 2});
    auto m = ch->receive(Millis{5000});
    ch->send(DiscrepancyReply{std::get<CandidateBatch>(*m).round + 5, 0, 1.0});
  });
  EXPECT_THROW(run_server(cfg, channels), ProtocolError);
  site.join();
}

TEST(Federation, DuplicateSiteIdIsProtocolError) {
  auto cfg = small_config(2, 10.0, 1, 10);
  std::vector<std::unique_ptr<Channel>> channels;
  std::vector<std::unique_ptr<Channel>> sites;
  for (int i = 0; i < 2; ++i) {
    auto [a, b] = in_process_pair();
    b->send(Register{3, 2});
    channels.push_back(std::move(a));
    sites.push_back(std::move(b));
  }
  EXPECT_THROW(run_server(cfg, channels), ProtocolError);
}

TEST(Site, ExactCandidateGivesZeroPhi) {
  Rng rng({5, 0});
  const Matrix enc = latent_rows(4, 3, rng);
  auto [server, site] = in_process_pair();
  auto fut = std::async(std::launch::async, [&, ch = site.get()] { return serve_site(9, enc, {}, *ch); });
  auto reg = server->receive(Millis{5000});
  EXPECT_TRUE((*reg == WireMessage{Register{9, 4}}));
  server->send(CandidateBatch{1, enc});
  auto rep = server->receive(Millis{5000});
  EXPECT_EQ(std::get<DiscrepancyReply>(*rep).phi, 0.0);
  server->send(Shutdown{});
  EXPECT_EQ(fut.get().phis, std::vector<double>{0.0});
}

TEST(Site, DeterministicPhiSequence) {
  Rng data({6, 0});
  const Matrix enc = latent_rows(5, 2, data);
  std::vector<Matrix> candidates;
  for (int i = 0; i < 4; ++i) candidates.push_back(latent_rows(5, 2, data));
  auto session = [&] {
    auto [server, site] = in_process_pair();
    auto fut = std::async(std::launch::async, [&, ch = site.get()] { return serve_site(0, enc, {}, *ch); });
    server->receive(Millis{5000});
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      server->send(CandidateBatch{i + 1, candidates[i]});
      server->receive(Millis{5000});
    }
    server->send(Shutdown{});
    return fut.get().phis;
  };
  EXPECT_EQ(session(), session());
}

TEST(Site, WrongBatchShapeIsProtocolError) {
  auto [server, site] = in_process_pair();
  auto fut = std::async(std::launch::async,
                        [ch = site.get()] { return serve_site(0, Matrix::Zero(3, 2), {}, *ch); });
  server->receive(Millis{5000});
  server->send(CandidateBatch{1, Matrix::Zero(4, 2)});
  EXPECT_THROW(fut.get(), ProtocolError);
}

TEST(Site, TrainSiteEncodesMinorityRows) {
  Rng rng({7, 0});
  Matrix x(12, 6);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
  std::vector<int> y{0, 1, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0};
  SiteSettings s;
  s.latent_dim = 2;
  s.train.epochs = 3;
  const auto site = train_site(4, x, y, s, {7, 1});
  EXPECT_EQ(site.encoded_minority.rows(), 3);
  EXPECT_EQ(site.encoded_minority.cols(), 2);
  Matrix minority(3, 6);
  minority << x.row(1), x.row(4), x.row(8);
  EXPECT_EQ(site.encoded_minority, encode(site.model, minority));
}

TEST(PosteriorOversample, SinglePosteriorMatchesGmmMoments) {
  GmmParams p;
  p.pi = Vector::Ones(1);
  p.mu.push_back(Vector::Constant(1, 2.0));
  p.sigma.push_back(Matrix::Constant(1, 1, 0.25));
  Rng rng({8, 0});
  const Matrix x = posterior_oversample({p}, 100000, rng);
  EXPECT_NEAR(x.mean(), 2.0, 0.01);
  EXPECT_NEAR((x.array() - x.mean()).square().mean(), 0.25, 0.01);
}

TEST(PosteriorOversample, UniformOverAcceptedList) {
  auto single = [](double m) {
    GmmParams p;
    p.pi = Vector::Ones(1);
    p.mu.push_back(Vector::Constant(1, m));
    p.sigma.push_back(Matrix::Identity(1, 1));
    return p;
  };
  Rng rng({9, 0});
  const Matrix x = posterior_oversample({single(-10.0), single(10.0)}, 10000, rng);
  const double frac = (x.array() < 0.0).cast<double>().mean();
  EXPECT_GE(frac, 0.47);
  EXPECT_LE(frac, 0.53);
}

TEST(PosteriorOversample, EmptyCasesBehave) {
  Rng rng({10, 0});
  EXPECT_THROW(posterior_oversample({}, 3, rng), NoPosterior);
  GmmParams p;
  p.pi = Vector::Ones(1);
  p.mu.push_back(Vector::Zero(2));
  p.sigma.push_back(Matrix::Identity(2, 2));
  EXPECT_EQ(posterior_oversample({p}, 0, rng).rows(), 0);
}
