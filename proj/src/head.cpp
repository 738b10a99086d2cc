#include "gemcl/head.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "gemcl/container.hpp"
#include "gemcl/error.hpp"

namespace gemcl {
namespace {

void require_observations(const ClassPosterior& p) {
  if (p.n() == 0) throw Error("class '" + p.class_id() + "' has no observations");
}

std::string class_key(std::size_t index, const char* field) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "class.%06zu.", index);
  return buf + std::string(field);
}

}  // namespace

double PriorParams::alpha0() const { return std::exp(rho_alpha); }
double PriorParams::beta0() const { return std::exp(rho_beta); }

PriorParams PriorParams::from_values(double alpha0, double beta0) {
  if (!(alpha0 > 0.0) || !(beta0 > 0.0)) throw ConfigError("prior alpha0 and beta0 must be positive");
  return {std::log(alpha0), std::log(beta0)};
}

NamedTensors PriorParams::to_tensors() const {
  return {{kRhoAlpha, Tensor::scalar(rho_alpha)}, {kRhoBeta, Tensor::scalar(rho_beta)}};
}

PriorParams PriorParams::from_tensors(const NamedTensors& tensors) {
  auto get = [&](const char* name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ShapeError(std::string("prior parameter '") + name + "' is missing");
    if (it->second.size() != 1) throw ShapeError(std::string("prior parameter '") + name + "' must be a scalar");
    return it->second[0];
  };
  return {get(kRhoAlpha), get(kRhoBeta)};
}

ClassPosterior::ClassPosterior(ClassId id, std::size_t dim)
    : id_(std::move(id)), sum_z_(dim, 0.0), sum_z2_(dim, 0.0) {
  if (dim == 0) throw ShapeError("class posterior needs at least one dimension");
}

void ClassPosterior::update(std::span<const double> z) {
  if (z.size() != dim()) {
    throw ShapeError("observation has dimension " + std::to_string(z.size()) + ", class '" + id_ +
                     "' has " + std::to_string(dim()));
  }
  for (double v : z) {
    if (!std::isfinite(v)) throw Error("non-finite observation for class '" + id_ + "'");
  }
  for (std::size_t i = 0; i < z.size(); ++i) {
    sum_z_[i] += z[i];
    sum_z2_[i] += z[i] * z[i];
  }
  ++n_;
}

double ClassPosterior::kappa() const {
  require_observations(*this);
  return static_cast<double>(n_);
}

std::vector<double> ClassPosterior::mean() const {
  require_observations(*this);
  std::vector<double> m(dim());
  for (std::size_t i = 0; i < dim(); ++i) m[i] = sum_z_[i] / static_cast<double>(n_);
  return m;
}

double ClassPosterior::alpha(const PriorParams& prior) const {
  require_observations(*this);
  return prior.alpha0() + static_cast<double>(n_) / 2.0;
}

std::vector<double> ClassPosterior::beta(const PriorParams& prior) const {
  require_observations(*this);
  const double n = static_cast<double>(n_);
  const double beta0 = prior.beta0();
  std::vector<double> b(dim());
  for (std::size_t i = 0; i < dim(); ++i) {
    const double mean = sum_z_[i] / n;
    const double spread = std::max(sum_z2_[i] / n - mean * mean, 0.0);
    b[i] = beta0 + n / 2.0 * spread;
  }
  return b;
}

ClassPosterior posterior_update(ClassPosterior post, std::span<const double> z) {
  post.update(z);
  return post;
}

ClassPosterior posterior_from_batch(const Tensor& batch, ClassId id) {
  if (batch.rank() != 2) throw ShapeError("posterior batch must be a (k, d) matrix");
  ClassPosterior post(std::move(id), batch.cols());
  for (std::size_t r = 0; r < batch.rows(); ++r) post.update(batch.row(r));
  return post;
}

ClassPosterior restore_posterior(ClassId id, std::size_t n, std::vector<double> sum_z,
                                 std::vector<double> sum_z2) {
  if (sum_z.size() != sum_z2.size()) throw ShapeError("sufficient statistics differ in dimension");
  ClassPosterior post(std::move(id), sum_z.size());
  post.n_ = n;
  post.sum_z_ = std::move(sum_z);
  post.sum_z2_ = std::move(sum_z2);
  return post;
}

double log_predictive(const ClassPosterior& post, const PriorParams& prior, std::span<const double> z) {
  require_observations(post);
  if (z.size() != post.dim()) {
    throw ShapeError("query has dimension " + std::to_string(z.size()) + ", class has " +
                     std::to_string(post.dim()));
  }
  const double n = static_cast<double>(post.n());
  const double alpha = prior.alpha0() + n / 2.0;
  const double nu = 2.0 * alpha;
  const double beta0 = prior.beta0();
  const double norm = std::lgamma((nu + 1.0) / 2.0) - std::lgamma(nu / 2.0);
  const auto sz = post.sum_z();
  const auto sz2 = post.sum_z2();
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double mean = sz[i] / n;
    const double beta = beta0 + n / 2.0 * std::max(sz2[i] / n - mean * mean, 0.0);
    const double scale2 = beta * (n + 1.0) / (alpha * n);
    const double d = z[i] - mean;
    total += norm - 0.5 * std::log(nu * std::numbers::pi * scale2) -
             (nu + 1.0) / 2.0 * std::log1p(d * d / (nu * scale2));
  }
  return total;
}

const ClassPosterior& HeadState::at(const ClassId& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw Error("unknown class '" + id + "'");
  return classes_[it->second];
}

void HeadState::add_class(ClassPosterior post) {
  if (index_.contains(post.class_id())) throw Error("class '" + post.class_id() + "' already exists");
  if (!classes_.empty() && post.dim() != classes_.front().dim()) {
    throw ShapeError("class '" + post.class_id() + "' has dimension " + std::to_string(post.dim()) +
                     ", head has " + std::to_string(classes_.front().dim()));
  }
  index_.emplace(post.class_id(), classes_.size());
  classes_.push_back(std::move(post));
}

void HeadState::observe(const ClassId& id, std::span<const double> z) {
  auto it = index_.find(id);
  if (it == index_.end()) {
    ClassPosterior post(id, z.size());
    post.update(z);
    add_class(std::move(post));
    return;
  }
  classes_[it->second].update(z);
}

std::vector<double> class_scores(const HeadState& head, std::span<const double> z) {
  std::vector<double> scores;
  scores.reserve(head.size());
  for (const ClassPosterior& c : head.classes()) scores.push_back(log_predictive(c, head.prior(), z));
  return scores;
}

const ClassId& predict(const HeadState& head, std::span<const double> z) {
  if (head.empty()) throw Error("cannot predict with an empty head");
  const auto scores = class_scores(head, z);
  std::size_t best = 0;
  for (std::size_t c = 1; c < scores.size(); ++c) {
    if (scores[c] > scores[best]) best = c;
  }
  return head.classes()[best].class_id();
}

void save_head(const std::filesystem::path& path, const HeadState& head) {
  container::Document doc;
  doc.kind = "head";
  doc.tensors = head.prior().to_tensors();
  nlohmann::json classes = nlohmann::json::array();
  for (std::size_t i = 0; i < head.size(); ++i) {
    const ClassPosterior& c = head.classes()[i];
    classes.push_back({{"id", c.class_id()}, {"n", c.n()}});
    doc.tensors.emplace(class_key(i, "sum_z"), Tensor::vector({c.sum_z().begin(), c.sum_z().end()}));
    doc.tensors.emplace(class_key(i, "sum_z2"), Tensor::vector({c.sum_z2().begin(), c.sum_z2().end()}));
  }
  doc.meta["classes"] = std::move(classes);
  container::write(path, doc);
}

HeadState load_head(const std::filesystem::path& path) {
  const container::Document doc = container::read(path, "head");
  HeadState head(PriorParams::from_tensors(doc.tensors));
  try {
    const auto& classes = doc.meta.at("classes");
    for (std::size_t i = 0; i < classes.size(); ++i) {
      auto field = [&](const char* name) -> const Tensor& {
        auto it = doc.tensors.find(class_key(i, name));
        if (it == doc.tensors.end()) throw ParseError(path.string() + ": missing " + class_key(i, name));
        return it->second;
      };
      const Tensor& sz = field("sum_z");
      const Tensor& sz2 = field("sum_z2");
      head.add_class(restore_posterior(classes[i].at("id").get<std::string>(), classes[i].at("n").get<std::size_t>(),
                                       {sz.data().begin(), sz.data().end()},
                                       {sz2.data().begin(), sz2.data().end()}));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(path.string() + ": malformed head snapshot: " + e.what());
  }
  return head;
}

ad::Var predictive_logits(ad::Graph& g, ad::Var support, const std::vector<std::size_t>& support_labels,
                          std::size_t num_classes, ad::Var query, ad::Var rho_alpha, ad::Var rho_beta) {
  if (num_classes == 0) throw Error("episode needs at least one class");
  const std::size_t rows = support_labels.size();
  Tensor assign(Shape{num_classes, rows});
  Tensor counts(Shape{num_classes, 1});
  for (std::size_t r = 0; r < rows; ++r) {
    if (support_labels[r] >= num_classes) {
      throw Error("support label " + std::to_string(support_labels[r]) + " is outside [0, " +
                  std::to_string(num_classes) + ")");
    }
    assign.at(support_labels[r], r) = 1.0;
    counts[support_labels[r]] += 1.0;
  }
  Tensor half(counts.shape());
  Tensor inflation(counts.shape());  // (kappa + 1) / kappa
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] == 0.0) throw Error("class " + std::to_string(c) + " has no observations");
    half[c] = counts[c] / 2.0;
    inflation[c] = (counts[c] + 1.0) / counts[c];
  }

  const ad::Var a = g.constant(std::move(assign));
  const ad::Var n = g.constant(counts);
  const ad::Var sum_z = g.matmul(a, support);
  const ad::Var sum_z2 = g.matmul(a, support * support);
  const ad::Var mean = sum_z / n;
  const ad::Var spread = g.relu(sum_z2 / n - mean * mean);

  const ad::Var alpha = g.exp(rho_alpha) + g.constant(half);  // (N, 1)
  const ad::Var beta = g.exp(rho_beta) + g.constant(half) * spread;  // (N, d)
  const ad::Var nu = 2.0 * alpha;
  const ad::Var nu_scale2 = nu * (beta * g.constant(std::move(inflation)) / alpha);

  // Per-class constant: sum over dimensions of the normaliser and scale terms.
  const ad::Var norm = g.lgamma((nu + 1.0) * 0.5) - g.lgamma(nu * 0.5);  // (N, 1)
  const ad::Var base = g.sum(norm - 0.5 * g.log(nu_scale2 * std::numbers::pi), 1, true);

  // (M, 1, d) - (1, N, d) -> (M, N, d), reduced over d -> (M, N).
  const ad::Var diff = g.expand_dims(query, 1) - g.expand_dims(mean, 0);
  const ad::Var tail = g.sum(g.log(g.square(diff) / g.expand_dims(nu_scale2, 0) + 1.0), 2);
  return g.transpose(base) - g.transpose((nu + 1.0) * 0.5) * tail;
}

ad::Var episode_loss(ad::Graph& g, ad::Var support, const std::vector<std::size_t>& support_labels,
                     std::size_t num_classes, ad::Var query, const std::vector<std::size_t>& query_labels,
                     ad::Var rho_alpha, ad::Var rho_beta) {
  std::vector<bool> present(num_classes, false);
  for (std::size_t label : support_labels) {
    if (label < num_classes) present[label] = true;
  }
  for (std::size_t label : query_labels) {
    if (label >= num_classes || !present[label]) {
      throw Error("query label " + std::to_string(label) + " does not appear in the support set");
    }
  }
  const ad::Var logits = predictive_logits(g, support, support_labels, num_classes, query, rho_alpha, rho_beta);
  return g.softmax_cross_entropy(logits, query_labels);
}

}  // namespace gemcl
