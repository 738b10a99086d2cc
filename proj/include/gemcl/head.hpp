#pragma once

// Per-class Normal-Gamma posteriors over embedding dimensions with a
// Student's t posterior predictive.
//
// Prior: kappa0 = 0, mu0 = 0, alpha0 = exp(rho_alpha), beta0 = exp(rho_beta)
// (beta0 is one scalar shared by every dimension). A class stores only its
// sufficient statistics n, sum z and sum z^2; after n observations
//
//   kappa = n
//   mu    = sum_z / n
//   alpha = alpha0 + n / 2
//   beta  = beta0 + (n / 2) * max(sum_z2 / n - mu^2, 0)
//
// and dimension i of a new point z has predictive density
// StudentT(nu = 2 alpha, loc = mu_i, scale^2 = beta_i (kappa + 1) / (alpha kappa)).

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "gemcl/autodiff.hpp"
#include "gemcl/tensor.hpp"

namespace gemcl {

using ClassId = std::string;

inline constexpr const char* kRhoAlpha = "prior.rho_alpha";
inline constexpr const char* kRhoBeta = "prior.rho_beta";

struct PriorParams {
  double rho_alpha = 0.0;  // alpha0 = 1
  double rho_beta = 0.0;   // beta0 = 1

  double alpha0() const;
  double beta0() const;
  static PriorParams from_values(double alpha0, double beta0);

  // As scalar tensors under kRhoAlpha / kRhoBeta.
  NamedTensors to_tensors() const;
  static PriorParams from_tensors(const NamedTensors& tensors);

  friend bool operator==(const PriorParams&, const PriorParams&) = default;
};

class ClassPosterior {
 public:
  ClassPosterior(ClassId id, std::size_t dim);

  const ClassId& class_id() const { return id_; }
  std::size_t dim() const { return sum_z_.size(); }
  std::size_t n() const { return n_; }
  std::span<const double> sum_z() const { return sum_z_; }
  std::span<const double> sum_z2() const { return sum_z2_; }

  // Throws ShapeError on a dimension mismatch, Error on non-finite input.
  void update(std::span<const double> z);

  // Derived views; all require n >= 1.
  double kappa() const;
  std::vector<double> mean() const;
  double alpha(const PriorParams& prior) const;
  std::vector<double> beta(const PriorParams& prior) const;

  friend bool operator==(const ClassPosterior&, const ClassPosterior&) = default;

 private:
  friend ClassPosterior restore_posterior(ClassId, std::size_t, std::vector<double>, std::vector<double>);
  ClassId id_;
  std::size_t n_ = 0;
  std::vector<double> sum_z_;
  std::vector<double> sum_z2_;
};

ClassPosterior posterior_update(ClassPosterior post, std::span<const double> z);
// Rows of `batch` (k x d) are the class's observations. Empty batch is an error.
ClassPosterior posterior_from_batch(const Tensor& batch, ClassId id);
// Rebuilds a posterior from stored sufficient statistics.
ClassPosterior restore_posterior(ClassId id, std::size_t n, std::vector<double> sum_z,
                                 std::vector<double> sum_z2);

double log_predictive(const ClassPosterior& post, const PriorParams& prior, std::span<const double> z);

// Classes in insertion order.
class HeadState {
 public:
  HeadState() = default;
  explicit HeadState(PriorParams prior) : prior_(prior) {}

  const PriorParams& prior() const { return prior_; }
  std::size_t size() const { return classes_.size(); }
  bool empty() const { return classes_.empty(); }
  bool contains(const ClassId& id) const { return index_.contains(id); }
  const std::vector<ClassPosterior>& classes() const { return classes_; }
  const ClassPosterior& at(const ClassId& id) const;

  // Duplicate ids are rejected.
  void add_class(ClassPosterior post);
  // Appends z to an existing class, or creates the class on first sight.
  void observe(const ClassId& id, std::span<const double> z);

  friend bool operator==(const HeadState& a, const HeadState& b) {
    return a.prior_ == b.prior_ && a.classes_ == b.classes_;
  }

 private:
  PriorParams prior_;
  std::vector<ClassPosterior> classes_;
  std::unordered_map<ClassId, std::size_t> index_;
};

// log_predictive of z under every class, in insertion order.
std::vector<double> class_scores(const HeadState& head, std::span<const double> z);
// Highest-scoring class; ties go to the earliest-inserted class.
const ClassId& predict(const HeadState& head, std::span<const double> z);

void save_head(const std::filesystem::path& path, const HeadState& head);
HeadState load_head(const std::filesystem::path& path);

// Differentiable head. `support` is (N*K, d) and `support_labels` holds a
// class index in [0, N) per row; `query` is (M, d). Returns the (M, N) matrix
// of per-class log predictive densities.
ad::Var predictive_logits(ad::Graph& graph, ad::Var support, const std::vector<std::size_t>& support_labels,
                          std::size_t num_classes, ad::Var query, ad::Var rho_alpha, ad::Var rho_beta);

// Mean query cross-entropy of the softmax over predictive_logits.
ad::Var episode_loss(ad::Graph& graph, ad::Var support, const std::vector<std::size_t>& support_labels,
                     std::size_t num_classes, ad::Var query, const std::vector<std::size_t>& query_labels,
                     ad::Var rho_alpha, ad::Var rho_beta);

}  // namespace gemcl
