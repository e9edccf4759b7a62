// SPDX-License-Identifier: Apache-2.0
//
// Training objectives with exact per-example gradients, dataset generation
// and CSV ingestion, and the example-sharding rule.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "ordbal/core.hpp"
#include "ordbal/herding.hpp"

namespace ordbal {

/// N examples of dimension d, row-major features plus one label per row.
struct Dataset {
  std::size_t examples = 0;
  std::size_t dim = 0;
  std::vector<double> features;
  std::vector<double> labels;
  nlohmann::json provenance;

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(features).subspan(i * dim, dim);
  }

  /// Field-wise equality (provenance excluded).
  bool same_data(const Dataset& other) const {
    return examples == other.examples && dim == other.dim && features == other.features &&
           labels == other.labels;
  }
};

enum class TaskKind { kLeastSquares, kLogistic };

std::string_view task_name(TaskKind kind) noexcept;
TaskKind parse_task(std::string_view text);

// Per-example losses and gradients.
//   logistic:      log(1 + exp(-y<w,x>)) + (lambda/2)||w||^2, y in {-1, +1}
//   least squares: (1/2)(<w,x> - y)^2
double logreg_loss(std::span<const double> w, std::span<const double> x, double y, double lambda);
DenseVector logreg_grad(std::span<const double> w, std::span<const double> x, double y,
                        double lambda);
double least_squares_loss(std::span<const double> w, std::span<const double> x, double y);
DenseVector least_squares_grad(std::span<const double> w, std::span<const double> x, double y);

/// An objective bound to a dataset. Examples are addressed by dataset row.
class Objective {
 public:
  Objective(TaskKind kind, double lambda, const Dataset& data);

  TaskKind kind() const noexcept { return kind_; }
  double lambda() const noexcept { return lambda_; }
  std::size_t dim() const noexcept { return data_->dim; }
  const Dataset& data() const noexcept { return *data_; }

  double loss(std::span<const double> w, std::size_t example) const;
  DenseVector gradient(std::span<const double> w, std::size_t example) const;

  /// Mean loss / gradient over `examples`, summed in the given order.
  double mean_loss(std::span<const double> w, std::span<const std::size_t> examples) const;
  DenseVector mean_gradient(std::span<const double> w,
                            std::span<const std::size_t> examples) const;

 private:
  TaskKind kind_;
  double lambda_;
  const Dataset* data_;
};

/// Standard-normal features. w* ~ N(0, I/d) is drawn first from the stream
/// (seed, 0, 0, "synthetic") and recorded in the provenance. Regression
/// labels are <w*,x> + noise*xi; classification labels are the sign of the
/// noisy logit (0 maps to +1).
Dataset generate_synthetic(TaskKind kind, std::size_t n, std::size_t d, std::uint64_t seed,
                           double noise);

/// Draws count vectors from Unif(0,1)^d using stream (seed, 0, 0, "vectors").
VectorSet draw_uniform_vectors(std::size_t count, std::size_t d, std::uint64_t seed);
/// Subtracts the set mean from every vector.
void center_vectors(VectorSet& set);
/// Uniform draws, globally centered, each scaled to unit L2 norm. A vector
/// that centers to exactly zero is redrawn and the set re-centered.
VectorSet generate_vectors(std::size_t count, std::size_t d, std::uint64_t seed);

/// Raised for malformed CSV input; row and column are 1-based (row 1 is the
/// header), column 0 when the whole row is at fault.
class LoadError : public std::runtime_error {
 public:
  LoadError(const std::string& what, std::size_t row, std::size_t column);
  std::size_t row() const noexcept { return row_; }
  std::size_t column() const noexcept { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

struct CsvOptions {
  /// 0-based label column; nullopt means the last column.
  std::optional<std::size_t> label_column;
  bool standardize = false;
  /// Raw label text -> numeric label. Empty means parse labels as numbers.
  std::map<std::string, double> label_map;
};

/// Parses "k:v,k:v" into a label map, e.g. "0:-1,1:1".
std::map<std::string, double> parse_label_map(std::string_view text);

/// Header row required. Features parse as round-trip-exact doubles.
/// Standardization maps each column to mean 0, variance 1 (population);
/// zero-variance columns become all zeros.
Dataset load_csv(const std::filesystem::path& path, const CsvOptions& options = {});

/// Writes features then label (header x0..x{d-1},y) with 17 significant
/// digits, plus a provenance sidecar at `<path>.json`.
void write_csv(const Dataset& data, const std::filesystem::path& path);

/// Local examples of one worker, in local index order.
struct Shard {
  std::size_t worker_id = 0;
  std::vector<std::size_t> examples;
};

struct ShardPlan {
  std::vector<Shard> shards;
  std::vector<std::size_t> discarded;
  /// Examples per permutation unit (local minibatch size b).
  std::size_t block = 1;
  /// Permutation units per worker; always even.
  std::size_t units() const {
    return shards.empty() ? 0 : shards.front().examples.size() / block;
  }
};

/// Discards N mod (m*b) examples at random, shuffles the rest, and splits
/// them into m contiguous shards. If a shard then holds an odd number of
/// b-blocks, one more block per worker is discarded so pairs always fit.
/// Throws ConfigError when N < m*b or no full pair of blocks remains.
ShardPlan shard_examples(std::size_t n, std::size_t workers, std::size_t block,
                         RngStream& stream);

}  // namespace ordbal
