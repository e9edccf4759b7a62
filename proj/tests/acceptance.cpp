// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <fmt/core.h>
#include <spdlog/spdlog.h>

#include "ordbal/balance.hpp"
#include "ordbal/config.hpp"
#include "ordbal/core.hpp"
#include "ordbal/experiment.hpp"
#include "ordbal/tasks.hpp"
#include "ordbal/transport.hpp"

namespace {

using namespace ordbal;

struct Verdict {
  bool pass = false;
  std::string detail;
};

ExperimentConfig least_squares_config(PolicyKind policy, double noise, double alpha) {
  ExperimentConfig c;
  c.task.kind = TaskKind::kLeastSquares;
  c.task.examples = 4096;
  c.task.dim = 20;
  c.task.noise = noise;
  c.policy.kind = policy;
  c.policy.engine = EngineSpec::parse("greedy");
  c.workers = 4;
  c.block = 1;
  c.epochs = 50;
  c.alpha = alpha;
  c.seeds = {0, 1, 2, 3, 4};
  return c;
}

ExperimentResult must_run(const ExperimentConfig& config) {
  auto result = run_experiment(config);
  if (!result.ok()) std::rethrow_exception(result.failure);
  return result;
}

Verdict reorder_inequality() {
  const auto s = check_reorder_inequality(1000, 1);
  return {s.passed == s.trials,
          fmt::format("{}/{} instances hold exactly, worst ratio {:.4f}", s.passed, s.trials,
                      s.worst_ratio)};
}

Verdict balance_bound() {
  const auto s = check_balance_bound(1000, 1000, 16, 0.01, 2);
  return {s.pass_rate() >= 0.99,
          fmt::format("{}/{} trials within A = {:.2f}, worst ratio {:.4f}", s.passed, s.trials,
                      theoretical_bound_A(16, 1000, 0.01), s.worst_ratio)};
}

Verdict herding_trend() {
  const auto config = load_vector_config(ORDBAL_CONFIG_DIR "/herding_bound.ini");
  const auto rows = herding_bound_experiment(config);
  std::map<std::pair<PolicyKind, std::size_t>, double> mean;
  for (const auto& r : rows) {
    if (r.epoch == config.epochs) {
      mean[{r.policy, r.m}] += r.herding_bound / static_cast<double>(config.seeds.size());
    }
  }
  bool ok = true;
  std::ostringstream detail;
  for (std::size_t m : config.workers) {
    const double cd = mean[{PolicyKind::kCdGrab, m}];
    const double pair = mean[{PolicyKind::kIdGrabPairBal, m}];
    const double drr = mean[{PolicyKind::kDrr, m}];
    ok = ok && cd < pair && cd < drr;
    if (m == 100) ok = ok && cd <= 0.5 * pair;
    detail << fmt::format("m={}: {:.1f}/{:.1f}/{:.1f} ", m, cd, pair, drr);
  }
  if (std::find(config.workers.begin(), config.workers.end(), 100) == config.workers.end()) {
    ok = false;
  }
  return {ok, detail.str() + "(cdgrab/idgrab_pairbal/drr)"};
}

Verdict pair_balance_step() {
  const auto s = check_pair_balance_step(1000, 0.01, 4);
  return {s.pass_rate() >= 0.99, fmt::format("{}/{} trials within the one-step bound, worst ratio {:.4f}",
                                             s.passed, s.trials, s.worst_ratio)};
}

std::vector<double> final_losses(const ExperimentConfig& config) {
  const auto result = must_run(config);
  std::vector<double> out;
  for (const auto& run : result.runs) {
    const auto data = prepare_seed(config, run.seed);
    out.push_back(full_train_loss(data, run.final_weights));
  }
  return out;
}

Verdict convergence_ordering() {
  const auto cd = final_losses(least_squares_config(PolicyKind::kCdGrab, 0.5, 0.01));
  const auto drr = final_losses(least_squares_config(PolicyKind::kDrr, 0.5, 0.01));
  std::size_t wins = 0;
  for (std::size_t i = 0; i < cd.size(); ++i) wins += cd[i] <= drr[i] ? 1 : 0;
  const double cd_mean = std::accumulate(cd.begin(), cd.end(), 0.0) / cd.size();
  const double drr_mean = std::accumulate(drr.begin(), drr.end(), 0.0) / drr.size();
  return {wins >= 4 && cd_mean <= drr_mean,
          fmt::format("cdgrab <= drr on {}/{} seeds, mean {:.6g} vs {:.6g}", wins, cd.size(),
                      cd_mean, drr_mean)};
}

std::vector<std::string> split_fields(const std::string& line) {
  std::vector<std::string> fields;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    fields.push_back(line.substr(start, comma - start));
    if (comma == std::string::npos) return fields;
    start = comma + 1;
  }
}

// Drops the column whose header is "policy".
std::string without_policy_column(const std::string& csv) {
  std::istringstream in(csv);
  std::string line;
  std::string out;
  std::size_t column = std::string::npos;
  while (std::getline(in, line)) {
    auto fields = split_fields(line);
    if (column == std::string::npos) {
      column = static_cast<std::size_t>(
          std::find(fields.begin(), fields.end(), "policy") - fields.begin());
    }
    if (column < fields.size()) fields.erase(fields.begin() + static_cast<std::ptrdiff_t>(column));
    for (std::size_t k = 0; k < fields.size(); ++k) out += (k ? "," : "") + fields[k];
    out += '\n';
  }
  return out;
}

Verdict centralized_equivalence() {
  ExperimentConfig c;
  c.task.kind = TaskKind::kLogistic;
  c.task.examples = 512;
  c.task.dim = 8;
  c.task.noise = 0.1;
  c.task.lambda = 1e-4;
  c.policy.engine = EngineSpec::parse("greedy");
  c.workers = 1;
  c.epochs = 5;
  c.alpha = 0.05;
  c.seeds = {0, 1};
  c.per_step_loss = true;
  c.policy.kind = PolicyKind::kCdGrab;
  const auto cd = must_run(c);
  auto central_config = c;
  central_config.policy.kind = PolicyKind::kCentralizedPairBalance;
  const auto central = must_run(central_config);

  bool ok = cd.runs.size() == central.runs.size();
  for (std::size_t s = 0; ok && s < cd.runs.size(); ++s) {
    const auto& a = cd.runs[s];
    const auto& b = central.runs[s];
    ok = a.permutations == b.permutations && a.final_weights == b.final_weights &&
         a.epochs.size() == b.epochs.size() && a.step_losses.size() == b.step_losses.size();
    for (std::size_t t = 0; ok && t < a.epochs.size(); ++t) {
      ok = a.epochs[t].loss == b.epochs[t].loss &&
           a.epochs[t].grad_norm_sq == b.epochs[t].grad_norm_sq &&
           a.epochs[t].herding_bound == b.epochs[t].herding_bound &&
           a.epochs[t].delta_t == b.epochs[t].delta_t;
    }
    for (std::size_t k = 0; ok && k < a.step_losses.size(); ++k) {
      ok = a.step_losses[k].loss == b.step_losses[k].loss;
    }
    ok = ok && without_policy_column(metrics_csv(c, a)) ==
                   without_policy_column(metrics_csv(central_config, b));
  }
  ok = ok && without_policy_column(aggregate_csv(c, cd.runs)) ==
                 without_policy_column(aggregate_csv(central_config, central.runs));
  return {ok, "permutations, weights, losses and CSVs (policy column aside) "
              + std::string(ok ? "identical" : "differ")};
}

Message random_message(RngStream& rng) {
  auto vec = [&] {
    std::vector<double> v(1 + rng.next_below(12));
    for (auto& e : v) {
      const std::uint64_t bits = rng.next_u64();
      double x;
      std::memcpy(&x, &bits, 8);
      e = std::isfinite(x) ? x : rng.next_normal();
    }
    return DenseVector(std::move(v));
  };
  auto u32 = [&] { return static_cast<std::uint32_t>(rng.next_u64()); };
  auto u16 = [&] { return static_cast<std::uint16_t>(rng.next_u64()); };
  switch (rng.next_below(5)) {
    case 0: {
      std::optional<std::uint64_t> hash;
      if (rng.next_below(2)) hash = rng.next_u64();
      return HelloMsg{u16(), u32(), u32(), hash};
    }
    case 1:
      return GradMsg{u32(), u32(), u16(), vec()};
    case 2:
      return AvgGradMsg{u32(), u32(), vec()};
    case 3:
      return PermMsg{u32(), u16(), random_permutation(1 + rng.next_below(40), rng)};
    default:
      return DoneMsg{};
  }
}

Verdict transport_fidelity() {
  ExperimentConfig c;
  c.task.kind = TaskKind::kLeastSquares;
  c.task.examples = 512;
  c.task.dim = 8;
  c.task.noise = 0.2;
  c.policy.kind = PolicyKind::kCdGrab;
  c.policy.engine = EngineSpec::parse("greedy");
  c.workers = 2;
  c.epochs = 5;
  c.alpha = 0.02;
  c.seeds = {7};
  const auto direct = must_run(c);
  auto tcp_config = c;
  tcp_config.transport = {TransportMode::kTcp, TcpAddress{"127.0.0.1", 0}};
  const auto tcp = must_run(tcp_config);
  const bool same_csv = metrics_csv(c, direct.runs.at(0)) == metrics_csv(c, tcp.runs.at(0)) &&
                        aggregate_csv(c, direct.runs) == aggregate_csv(c, tcp.runs);

  RngStream rng(7, 0, 0, "acceptance-codec");
  std::size_t lossless = 0;
  constexpr std::size_t kMessages = 100000;
  for (std::size_t k = 0; k < kMessages; ++k) {
    const auto msg = random_message(rng);
    lossless += decode(encode(msg)) == msg ? 1 : 0;
  }
  return {same_csv && lossless == kMessages,
          fmt::format("loopback CSVs {}, {}/{} codec round trips lossless",
                      same_csv ? "byte-identical" : "differ", lossless, kMessages)};
}

Verdict gradient_correctness() {
  constexpr double kEps = 1e-5;
  RngStream rng(8, 0, 0, "acceptance-fd");
  double worst = 0.0;
  for (int point = 0; point < 10000; ++point) {
    const std::size_t d = 1 + rng.next_below(10);
    std::vector<double> w(d);
    std::vector<double> x(d);
    for (auto& e : w) e = rng.next_normal();
    for (auto& e : x) e = rng.next_normal();
    const double y_cls = rng.next_below(2) ? 1.0 : -1.0;
    const double y_reg = 2.0 * rng.next_normal();
    const double lambda = rng.next_unit();
    const auto g_log = logreg_grad(w, x, y_cls, lambda);
    const auto g_ls = least_squares_grad(w, x, y_reg);
    for (std::size_t k = 0; k < d; ++k) {
      auto up = w;
      auto down = w;
      up[k] += kEps;
      down[k] -= kEps;
      const double fd_log =
          (logreg_loss(up, x, y_cls, lambda) - logreg_loss(down, x, y_cls, lambda)) / (2 * kEps);
      const double fd_ls =
          (least_squares_loss(up, x, y_reg) - least_squares_loss(down, x, y_reg)) / (2 * kEps);
      worst = std::max({worst, std::abs(fd_log - g_log[k]), std::abs(fd_ls - g_ls[k])});
    }
  }
  return {worst <= 1e-6, fmt::format("10000 points, worst coordinate error {:.3g}", worst)};
}

double mean_slope(const ExperimentConfig& config) {
  const auto result = must_run(config);
  double sum = 0.0;
  for (const auto& run : result.runs) {
    std::vector<double> t;
    std::vector<double> gap;
    for (const auto& e : run.epochs) {
      if (e.epoch >= 10) {
        t.push_back(e.epoch);
        gap.push_back(e.loss);
      }
    }
    sum += rate_fit(t, gap);
  }
  return sum / static_cast<double>(result.runs.size());
}

Verdict rate_diagnostic() {
  const double cd = mean_slope(least_squares_config(PolicyKind::kCdGrab, 0.0, 0.0005));
  const double drr = mean_slope(least_squares_config(PolicyKind::kDrr, 0.0, 0.0005));
  return {cd <= -1.5 && cd < drr,
          fmt::format("seed-mean slope over epochs 10..50: cdgrab {:.3f}, drr {:.3f}", cd, drr)};
}

struct Criterion {
  int id;
  const char* name;
  double budget_s;
  std::function<Verdict()> check;
};

}  // namespace

int main() {
  spdlog::set_level(spdlog::level::warn);
  const std::vector<Criterion> criteria{
      {1, "reorder inequality", 10, reorder_inequality},
      {2, "balancing prefix bound", 30, balance_bound},
      {3, "parallel herding trend", 180, herding_trend},
      {4, "one-step pair-balance contraction", 60, pair_balance_step},
      {5, "convergence ordering", 60, convergence_ordering},
      {6, "centralized equivalence", 10, centralized_equivalence},
      {7, "transport fidelity", 60, transport_fidelity},
      {8, "gradient correctness", 10, gradient_correctness},
      {9, "rate diagnostic", 120, rate_diagnostic},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = c.check();
    } catch (const std::exception& e) {
      v = {false, fmt::format("error: {}", e.what())};
    }
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = v.pass && in_time;
    failures += pass ? 0 : 1;
    fmt::print("{} criterion {} ({}): {}; {:.1f}s of {:.0f}s{}\n", pass ? "PASS" : "FAIL", c.id,
               c.name, v.detail, secs, c.budget_s, in_time ? "" : " (over budget)");
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
