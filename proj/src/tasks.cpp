// SPDX-License-Identifier: Apache-2.0

#include "ordbal/tasks.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

namespace ordbal {

std::string_view task_name(TaskKind kind) noexcept {
  return kind == TaskKind::kLogistic ? "logistic" : "least_squares";
}

TaskKind parse_task(std::string_view text) {
  if (text == "least_squares") return TaskKind::kLeastSquares;
  if (text == "logistic") return TaskKind::kLogistic;
  throw ConfigError(fmt::format("unknown task '{}' (expected least_squares or logistic)", text));
}

// ---------------------------------------------------------------------------
// Objectives

namespace {

// log(1 + exp(-t)) without overflow.
double softplus_neg(double t) {
  return t > 0.0 ? std::log1p(std::exp(-t)) : -t + std::log1p(std::exp(t));
}

// 1 / (1 + exp(t)), i.e. sigma(-t).
double sigmoid_neg(double t) {
  if (t >= 0.0) {
    const double e = std::exp(-t);
    return e / (1.0 + e);
  }
  return 1.0 / (1.0 + std::exp(t));
}

void require_label(double y) {
  if (y != 1.0 && y != -1.0) {
    throw DomainError(fmt::format("logistic label must be -1 or +1, got {}", y));
  }
}

}  // namespace

double logreg_loss(std::span<const double> w, std::span<const double> x, double y,
                   double lambda) {
  require_label(y);
  const double margin = y * dot(w, x);
  double reg = 0.0;
  if (lambda != 0.0) reg = 0.5 * lambda * dot(w, w);
  return softplus_neg(margin) + reg;
}

DenseVector logreg_grad(std::span<const double> w, std::span<const double> x, double y,
                        double lambda) {
  require_label(y);
  const double coeff = -y * sigmoid_neg(y * dot(w, x));
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) g[k] = coeff * x[k] + lambda * w[k];
  return DenseVector(std::move(g));
}

double least_squares_loss(std::span<const double> w, std::span<const double> x, double y) {
  const double r = dot(w, x) - y;
  return 0.5 * r * r;
}

DenseVector least_squares_grad(std::span<const double> w, std::span<const double> x, double y) {
  const double r = dot(w, x) - y;
  std::vector<double> g(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) g[k] = r * x[k];
  return DenseVector(std::move(g));
}

Objective::Objective(TaskKind kind, double lambda, const Dataset& data)
    : kind_(kind), lambda_(lambda), data_(&data) {
  if (!(lambda >= 0.0)) throw DomainError("regularization lambda must be nonnegative");
  if (data.dim == 0) throw DomainError("objective over a zero-dimensional dataset");
}

double Objective::loss(std::span<const double> w, std::size_t example) const {
  const auto x = data_->row(example);
  const double y = data_->labels[example];
  return kind_ == TaskKind::kLogistic ? logreg_loss(w, x, y, lambda_)
                                      : least_squares_loss(w, x, y);
}

DenseVector Objective::gradient(std::span<const double> w, std::size_t example) const {
  const auto x = data_->row(example);
  const double y = data_->labels[example];
  return kind_ == TaskKind::kLogistic ? logreg_grad(w, x, y, lambda_)
                                      : least_squares_grad(w, x, y);
}

double Objective::mean_loss(std::span<const double> w,
                            std::span<const std::size_t> examples) const {
  if (examples.empty()) throw DomainError("mean loss over no examples");
  double sum = 0.0;
  for (auto e : examples) sum += loss(w, e);
  return sum / static_cast<double>(examples.size());
}

DenseVector Objective::mean_gradient(std::span<const double> w,
                                     std::span<const std::size_t> examples) const {
  if (examples.empty()) throw DomainError("mean gradient over no examples");
  DenseVector sum(dim());
  for (auto e : examples) sum += gradient(w, e);
  sum *= 1.0 / static_cast<double>(examples.size());
  return sum;
}

// ---------------------------------------------------------------------------
// Generators

Dataset generate_synthetic(TaskKind kind, std::size_t n, std::size_t d, std::uint64_t seed,
                           double noise) {
  if (n == 0 || d == 0) throw DomainError("generate_synthetic needs N, d >= 1");
  if (!(noise >= 0.0)) throw DomainError("noise must be nonnegative");
  RngStream stream(seed, 0, 0, "synthetic");

  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  std::vector<double> w_star(d);
  for (double& v : w_star) v = stream.next_normal() * scale;

  Dataset data;
  data.examples = n;
  data.dim = d;
  data.features.resize(n * d);
  data.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < d; ++k) data.features[i * d + k] = stream.next_normal();
    const double xi = stream.next_normal();
    const double signal = dot(w_star, data.row(i)) + noise * xi;
    data.labels[i] = kind == TaskKind::kLogistic ? (signal >= 0.0 ? 1.0 : -1.0) : signal;
  }
  data.provenance = {{"source", "synthetic"}, {"task", task_name(kind)},
                     {"examples", n},         {"dim", d},
                     {"seed", seed},          {"noise", noise},
                     {"w_star", w_star}};
  return data;
}

VectorSet draw_uniform_vectors(std::size_t count, std::size_t d, std::uint64_t seed) {
  if (count == 0 || d == 0) throw DomainError("draw_uniform_vectors needs count, d >= 1");
  RngStream stream(seed, 0, 0, "vectors");
  std::vector<double> data(count * d);
  for (double& v : data) v = stream.next_unit();
  return VectorSet(1, count, d, std::move(data));
}

void center_vectors(VectorSet& set) {
  const DenseVector mean = set.mean();
  for (std::size_t i = 0; i < set.workers(); ++i) {
    for (std::size_t j = 0; j < set.per_worker(); ++j) {
      auto z = set.mutable_at(i, j);
      for (std::size_t k = 0; k < z.size(); ++k) z[k] -= mean[k];
    }
  }
}

VectorSet generate_vectors(std::size_t count, std::size_t d, std::uint64_t seed) {
  if (count < 2) throw DomainError("generate_vectors needs count >= 2");
  VectorSet set = draw_uniform_vectors(count, d, seed);
  center_vectors(set);
  RngStream redraw(seed, 0, 0, "vectors-redraw");
  for (bool again = true; again;) {
    again = false;
    for (std::size_t j = 0; j < count; ++j) {
      if (l2_norm(set.at(0, j)) == 0.0) {
        for (double& v : set.mutable_at(0, j)) v = redraw.next_unit();
        again = true;
      }
    }
    if (again) center_vectors(set);
  }
  for (std::size_t j = 0; j < count; ++j) {
    auto z = set.mutable_at(0, j);
    const double norm = l2_norm(z);
    for (double& v : z) v /= norm;
  }
  return set;
}

// ---------------------------------------------------------------------------
// CSV

LoadError::LoadError(const std::string& what, std::size_t row, std::size_t column)
    : std::runtime_error(fmt::format("{} (row {}, column {})", what, row, column)),
      row_(row),
      column_(column) {}

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
    s.remove_suffix(1);
  }
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    cells.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::optional<double> parse_double(std::string_view text) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(value)) {
    return std::nullopt;
  }
  return value;
}

}  // namespace

std::map<std::string, double> parse_label_map(std::string_view text) {
  std::map<std::string, double> out;
  if (trim(text).empty()) return out;
  for (auto entry : split_commas(text)) {
    const auto colon = entry.rfind(':');
    if (colon == std::string_view::npos) {
      throw ConfigError(fmt::format("label map entry '{}' is not key:value", entry));
    }
    const auto value = parse_double(trim(entry.substr(colon + 1)));
    if (!value) throw ConfigError(fmt::format("label map value in '{}' is not a number", entry));
    out[std::string(trim(entry.substr(0, colon)))] = *value;
  }
  return out;
}

Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string(), 0, 0);

  std::string line;
  if (!std::getline(in, line)) throw LoadError("missing header row", 1, 0);
  const std::size_t columns = split_commas(line).size();
  if (columns < 2) throw LoadError("need at least one feature and one label column", 1, 0);
  const std::size_t label_col = options.label_column.value_or(columns - 1);
  if (label_col >= columns) throw LoadError("label column out of range", 1, label_col + 1);

  Dataset data;
  data.dim = columns - 1;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (trim(line).empty()) continue;
    const auto cells = split_commas(line);
    if (cells.size() != columns) {
      throw LoadError(fmt::format("expected {} cells, found {}", columns, cells.size()), row, 0);
    }
    for (std::size_t c = 0; c < columns; ++c) {
      if (c == label_col) {
        if (options.label_map.empty()) {
          const auto y = parse_double(cells[c]);
          if (!y) throw LoadError(fmt::format("unparseable label '{}'", cells[c]), row, c + 1);
          data.labels.push_back(*y);
        } else {
          const auto it = options.label_map.find(std::string(cells[c]));
          if (it == options.label_map.end()) {
            throw LoadError(fmt::format("unmapped label '{}'", cells[c]), row, c + 1);
          }
          data.labels.push_back(it->second);
        }
      } else {
        const auto x = parse_double(cells[c]);
        if (!x) throw LoadError(fmt::format("unparseable value '{}'", cells[c]), row, c + 1);
        data.features.push_back(*x);
      }
    }
  }
  data.examples = data.labels.size();
  if (data.examples == 0) throw LoadError("no data rows", row, 0);

  nlohmann::json prov = {{"source", "csv"},
                         {"path", path.string()},
                         {"label_column", label_col},
                         {"standardize", options.standardize}};
  if (options.standardize) {
    std::vector<double> means(data.dim, 0.0);
    std::vector<double> stds(data.dim, 0.0);
    const double count = static_cast<double>(data.examples);
    for (std::size_t k = 0; k < data.dim; ++k) {
      double sum = 0.0;
      for (std::size_t i = 0; i < data.examples; ++i) sum += data.features[i * data.dim + k];
      means[k] = sum / count;
      double sq = 0.0;
      for (std::size_t i = 0; i < data.examples; ++i) {
        const double dev = data.features[i * data.dim + k] - means[k];
        sq += dev * dev;
      }
      stds[k] = std::sqrt(sq / count);
      for (std::size_t i = 0; i < data.examples; ++i) {
        double& x = data.features[i * data.dim + k];
        x = stds[k] > 0.0 ? (x - means[k]) / stds[k] : 0.0;
      }
    }
    prov["means"] = means;
    prov["stds"] = stds;
  }
  data.provenance = std::move(prov);
  return data;
}

void write_csv(const Dataset& data, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t k = 0; k < data.dim; ++k) out << 'x' << k << ',';
  out << "y\n";
  for (std::size_t i = 0; i < data.examples; ++i) {
    for (double x : data.row(i)) out << fmt::format("{:.17g},", x);
    out << fmt::format("{:.17g}\n", data.labels[i]);
  }
  std::ofstream sidecar(path.string() + ".json");
  sidecar << data.provenance.dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Sharding

ShardPlan shard_examples(std::size_t n, std::size_t workers, std::size_t block,
                         RngStream& stream) {
  if (workers == 0 || block == 0) throw ConfigError("sharding needs m >= 1 and b >= 1");
  if (n < workers * block) {
    throw ConfigError(fmt::format("N = {} examples cannot fill m*b = {}*{}", n, workers, block));
  }
  const Permutation order = random_permutation(n, stream);
  const std::size_t remainder = n % (workers * block);
  std::size_t per_worker = (n - remainder) / workers;
  std::size_t units = per_worker / block;
  if (units % 2 != 0) {
    --units;
    spdlog::info("dropping one block of {} example(s) per worker so each holds an even {} units",
                 block, units);
  }
  if (units == 0) {
    throw ConfigError(fmt::format("N = {} leaves no pair of blocks for m = {}, b = {}", n,
                                  workers, block));
  }

  ShardPlan plan;
  plan.block = block;
  const auto idx = order.indices();
  plan.discarded.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(remainder));
  const std::size_t kept = units * block;
  for (std::size_t i = 0; i < workers; ++i) {
    Shard shard{i, {}};
    const std::size_t begin = remainder + i * per_worker;
    shard.examples.assign(idx.begin() + static_cast<std::ptrdiff_t>(begin),
                          idx.begin() + static_cast<std::ptrdiff_t>(begin + kept));
    plan.discarded.insert(plan.discarded.end(),
                          idx.begin() + static_cast<std::ptrdiff_t>(begin + kept),
                          idx.begin() + static_cast<std::ptrdiff_t>(begin + per_worker));
    plan.shards.push_back(std::move(shard));
  }
  return plan;
}

}  // namespace ordbal
