#include "nfb/axes.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "nfb/error.hpp"

namespace nfb {

namespace {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using ojson = nlohmann::ordered_json;

MatrixXd stack(std::span<const SentenceEmbedding> embeddings) {
  if (embeddings.empty()) throw Error(ErrorCode::EmptyInput, "no embeddings");
  const std::size_t dim = embeddings.front().vector.size();
  if (dim == 0) throw Error(ErrorCode::DimensionMismatch, "zero-width embeddings");
  MatrixXd x(static_cast<Eigen::Index>(embeddings.size()), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    const auto& v = embeddings[i].vector;
    if (v.size() != dim) {
      throw Error(ErrorCode::DimensionMismatch, "embedding " + std::to_string(i) + " has width " +
                                                    std::to_string(v.size()) + ", expected " +
                                                    std::to_string(dim));
    }
    for (std::size_t j = 0; j < dim; ++j) x(Eigen::Index(i), Eigen::Index(j)) = v[j];
  }
  return x;
}

int common_layer(std::span<const SentenceEmbedding> embeddings) {
  const int layer = embeddings.front().source_layer;
  for (const auto& e : embeddings) {
    if (e.source_layer != layer) {
      throw Error(ErrorCode::BadLayer, "embeddings from mixed layers cannot share an axis");
    }
  }
  return layer;
}

// Largest-magnitude component positive; first occurrence wins on ties.
void canonicalize_sign(std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (std::abs(v[i]) > std::abs(v[best])) best = i;
  }
  if (v[best] < 0.0) {
    for (double& x : v) x = -x;
  }
}

std::vector<double> to_std(const VectorXd& v) { return {v.data(), v.data() + v.size()}; }

void check_labels(std::span<const SentenceEmbedding> embeddings, std::span<const int> labels) {
  if (labels.size() != embeddings.size()) {
    throw Error(ErrorCode::DimensionMismatch, std::to_string(labels.size()) + " labels for " +
                                                  std::to_string(embeddings.size()) +
                                                  " embeddings");
  }
  bool has0 = false;
  bool has1 = false;
  for (int y : labels) {
    if (y != 0 && y != 1) throw Error(ErrorCode::BadParams, "labels must be 0 or 1");
    (y == 1 ? has1 : has0) = true;
  }
  if (!has0 || !has1) throw Error(ErrorCode::SingleClass, "both label classes must be present");
}

double softplus(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double loss_at(const MatrixXd& x, const VectorXd& y, const VectorXd& w, double b, double l2) {
  const VectorXd z = (x * w).array() + b;
  double s = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) s += softplus(z(i)) - y(i) * z(i);
  return s / static_cast<double>(x.rows()) + 0.5 * l2 * w.squaredNorm();
}

}  // namespace

std::vector<double> Axis::oriented() const {
  std::vector<double> v = direction;
  if (orientation_sign < 0) {
    for (double& x : v) x = -x;
  }
  return v;
}

std::string pc_axis_id(int g) { return "PC" + std::to_string(g); }

int parse_axis_id(std::string_view id) {
  if (id == kLrAxisId) return 0;
  int g = 0;
  if (id.size() > 2 && id.substr(0, 2) == "PC") {
    const auto* first = id.data() + 2;
    const auto* last = id.data() + id.size();
    const auto [ptr, ec] = std::from_chars(first, last, g);
    if (ec == std::errc() && ptr == last && g >= 1) return g;
  }
  throw Error(ErrorCode::BadConfig, "axis id must be LR or PC<g>, got '" + std::string(id) + "'");
}

PcaResult fit_pca(std::span<const SentenceEmbedding> embeddings, int k) {
  if (embeddings.size() < 2) {
    throw Error(ErrorCode::BadRank, "PCA needs at least two embeddings");
  }
  const int layer = common_layer(embeddings);
  MatrixXd x = stack(embeddings);
  const auto n = x.rows();
  const auto dim = x.cols();
  if (k < 1 || k > std::min<Eigen::Index>(n - 1, dim)) {
    throw Error(ErrorCode::BadRank, "k = " + std::to_string(k) + " outside [1, min(n-1, D)] = [1, " +
                                        std::to_string(std::min<Eigen::Index>(n - 1, dim)) + "]");
  }
  const VectorXd mean = x.colwise().mean();
  x.rowwise() -= mean.transpose();

  VectorXd eigenvalues;
  MatrixXd eigenvectors;
  double total = 0.0;
  if (static_cast<std::size_t>(dim) <= kCovarianceWidthLimit) {
    const MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
    total = cov.trace();
    Eigen::SelfAdjointEigenSolver<MatrixXd> solver(cov);
    if (solver.info() != Eigen::Success) {
      throw Error(ErrorCode::DegenerateData, "covariance eigendecomposition failed");
    }
    eigenvalues = solver.eigenvalues();
    eigenvectors = solver.eigenvectors();
  } else {
    Eigen::BDCSVD<MatrixXd> svd(x, Eigen::ComputeThinV);
    eigenvalues = svd.singularValues().array().square() / static_cast<double>(n - 1);
    eigenvectors = svd.matrixV();
    total = x.squaredNorm() / static_cast<double>(n - 1);
  }
  if (!(total > 0.0) || !std::isfinite(total)) {
    throw Error(ErrorCode::DegenerateData, "embeddings have zero variance");
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(eigenvalues.size()));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) {
    return eigenvalues(a) > eigenvalues(b);
  });

  PcaResult out;
  out.data_mean = to_std(mean);
  out.total_variance = total;
  for (int g = 1; g <= k; ++g) {
    const Eigen::Index col = order[static_cast<std::size_t>(g - 1)];
    Axis axis;
    axis.id = pc_axis_id(g);
    axis.layer = layer;
    axis.kind = AxisKind::PC;
    axis.pc_index = g;
    axis.direction = to_std(eigenvectors.col(col).normalized());
    canonicalize_sign(axis.direction);
    axis.eigenvalue = std::max(0.0, eigenvalues(col));
    axis.explained_variance_ratio = axis.eigenvalue / total;
    out.pcs.push_back(std::move(axis));
  }
  return out;
}

int LogisticFit::predict(std::span<const double> x) const {
  return dot(x, weights) + axis.bias >= 0.0 ? 1 : 0;
}

double logistic_loss(std::span<const SentenceEmbedding> embeddings, std::span<const int> labels,
                     std::span<const double> weights, double bias, double l2) {
  const MatrixXd x = stack(embeddings);
  if (weights.size() != static_cast<std::size_t>(x.cols())) {
    throw Error(ErrorCode::DimensionMismatch, "weight width differs from embedding width");
  }
  VectorXd y(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) y(i) = labels[static_cast<std::size_t>(i)];
  const VectorXd w = Eigen::Map<const VectorXd>(weights.data(), x.cols());
  return loss_at(x, y, w, bias, l2);
}

LogisticFit fit_logistic(std::span<const SentenceEmbedding> embeddings, std::span<const int> labels,
                         const LogisticOptions& options) {
  if (!(options.l2 > 0.0)) throw Error(ErrorCode::BadParams, "l2 must be positive");
  if (options.max_iter < 1) throw Error(ErrorCode::BadParams, "max_iter must be positive");
  check_labels(embeddings, labels);
  const int layer = common_layer(embeddings);
  const MatrixXd x = stack(embeddings);
  const auto n = x.rows();
  const auto dim = x.cols();
  VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) y(i) = labels[static_cast<std::size_t>(i)];

  // Newton's method on (w, b) with Armijo backtracking; the intercept is not
  // regularized.
  VectorXd theta = VectorXd::Zero(dim + 1);
  const double inv_n = 1.0 / static_cast<double>(n);
  LogisticFit fit;
  double loss = loss_at(x, y, theta.head(dim), theta(dim), options.l2);
  fit.loss_history.push_back(loss);

  for (int it = 0; it < options.max_iter; ++it) {
    const VectorXd z = (x * theta.head(dim)).array() + theta(dim);
    VectorXd resid(n);
    VectorXd weight(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double p = sigmoid(z(i));
      resid(i) = p - y(i);
      weight(i) = p * (1.0 - p);
    }
    VectorXd grad(dim + 1);
    grad.head(dim) = inv_n * (x.transpose() * resid) + options.l2 * theta.head(dim);
    grad(dim) = inv_n * resid.sum();
    fit.iterations = it;
    if (grad.lpNorm<Eigen::Infinity>() < options.tol) {
      fit.converged = true;
      break;
    }

    MatrixXd hess(dim + 1, dim + 1);
    const MatrixXd wx = weight.asDiagonal() * x;
    hess.topLeftCorner(dim, dim) = inv_n * (x.transpose() * wx);
    hess.topLeftCorner(dim, dim).diagonal().array() += options.l2;
    const VectorXd cross = inv_n * wx.colwise().sum().transpose();
    hess.topRightCorner(dim, 1) = cross;
    hess.bottomLeftCorner(1, dim) = cross.transpose();
    hess(dim, dim) = inv_n * weight.sum() + 1e-12;

    VectorXd step = hess.ldlt().solve(-grad);
    double slope = grad.dot(step);
    if (!step.allFinite() || slope >= 0.0) {
      step = -grad;
      slope = -grad.squaredNorm();
    }
    double t = 1.0;
    double next_loss = loss;
    VectorXd candidate = theta;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      candidate = theta + t * step;
      next_loss = loss_at(x, y, candidate.head(dim), candidate(dim), options.l2);
      if (next_loss <= loss + 1e-4 * t * slope) {
        accepted = true;
        break;
      }
      t *= 0.5;
    }
    if (!accepted) {
      // No further decrease is representable; treat as converged to precision.
      fit.iterations = it + 1;
      fit.converged = grad.lpNorm<Eigen::Infinity>() < std::sqrt(options.tol);
      break;
    }
    theta = candidate;
    loss = next_loss;
    fit.loss_history.push_back(loss);
    fit.iterations = it + 1;
  }

  fit.weights = to_std(theta.head(dim));
  const double wnorm = theta.head(dim).norm();
  if (!(wnorm > 0.0)) throw Error(ErrorCode::DegenerateData, "logistic weights vanished");
  fit.axis.id = std::string(kLrAxisId);
  fit.axis.layer = layer;
  fit.axis.kind = AxisKind::LR;
  fit.axis.direction = to_std(theta.head(dim) / wnorm);
  fit.axis.bias = theta(dim);

  int correct = 0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int pred = x.row(i).dot(theta.head(dim)) + theta(dim) >= 0.0 ? 1 : 0;
    correct += pred == labels[static_cast<std::size_t>(i)] ? 1 : 0;
  }
  fit.training_accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return fit;
}

Axis orient_axis(Axis axis, std::span<const SentenceEmbedding> embeddings,
                 std::span<const int> labels) {
  check_labels(embeddings, labels);
  double sum[2] = {0.0, 0.0};
  int count[2] = {0, 0};
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    sum[labels[i]] += dot(embeddings[i].vector, axis.direction);
    ++count[labels[i]];
  }
  const double mean0 = sum[0] / count[0];
  const double mean1 = sum[1] / count[1];
  axis.orientation_sign = mean1 < mean0 ? -1 : 1;
  return axis;
}

double axis_overlap(const Axis& a, const Axis& b) {
  const double na = norm2(a.direction);
  const double nb = norm2(b.direction);
  const double c = a.orientation_sign * b.orientation_sign * dot(a.direction, b.direction) / (na * nb);
  return std::clamp(c, -1.0, 1.0);
}

const Axis* AxisBasis::find(std::string_view id) const {
  if (id == kLrAxisId) return lr ? &*lr : nullptr;
  for (const auto& a : pcs) {
    if (a.id == id) return &a;
  }
  return nullptr;
}

Axis* AxisBasis::find(std::string_view id) {
  return const_cast<Axis*>(static_cast<const AxisBasis&>(*this).find(id));
}

const AxisBasis& AxisStore::basis(int layer) const {
  for (const auto& b : layers) {
    if (b.layer == layer) return b;
  }
  throw Error(ErrorCode::BadLayer, "no axes fitted for layer " + std::to_string(layer));
}

const Axis& AxisStore::axis(int layer, std::string_view id) const {
  const Axis* a = basis(layer).find(id);
  if (!a) {
    throw Error(ErrorCode::BadConfig,
                "axis " + std::string(id) + " not fitted for layer " + std::to_string(layer));
  }
  return *a;
}

bool AxisStore::has(int layer, std::string_view id) const {
  for (const auto& b : layers) {
    if (b.layer == layer) return b.find(id) != nullptr;
  }
  return false;
}

namespace {

ojson thresholds_json(const AxisThresholds& t) {
  ojson j;
  j["theta"] = t.theta;
  if (t.ordinal) {
    ojson o;
    o["n"] = t.ordinal->n;
    o["gammas_neg"] = t.ordinal->gammas_neg;
    o["gammas_pos"] = t.ordinal->gammas_pos;
    j["ordinal"] = std::move(o);
  } else {
    j["ordinal"] = nullptr;
  }
  return j;
}

ojson axis_json(const Axis& a) {
  ojson j;
  j["id"] = a.id;
  j["kind"] = a.kind == AxisKind::PC ? "PC" : "LR";
  if (a.kind == AxisKind::PC) {
    j["pc_index"] = a.pc_index;
    j["eigenvalue"] = a.eigenvalue;
    j["explained_variance_ratio"] = a.explained_variance_ratio;
  } else {
    j["bias"] = a.bias;
  }
  j["orientation_sign"] = a.orientation_sign;
  j["direction"] = a.direction;
  if (a.thresholds) {
    j["thresholds"] = thresholds_json(*a.thresholds);
  } else {
    j["thresholds"] = nullptr;
  }
  return j;
}

Axis axis_from_json(const nlohmann::json& j, int layer) {
  Axis a;
  a.id = j.at("id").get<std::string>();
  a.layer = layer;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "PC") {
    a.kind = AxisKind::PC;
    a.pc_index = j.at("pc_index").get<int>();
    a.eigenvalue = j.at("eigenvalue").get<double>();
    a.explained_variance_ratio = j.at("explained_variance_ratio").get<double>();
  } else if (kind == "LR") {
    a.kind = AxisKind::LR;
    a.bias = j.at("bias").get<double>();
  } else {
    throw Error(ErrorCode::BadFormat, "unknown axis kind '" + kind + "'");
  }
  a.orientation_sign = j.at("orientation_sign").get<int>();
  a.direction = j.at("direction").get<std::vector<double>>();
  const auto& t = j.at("thresholds");
  if (!t.is_null()) {
    AxisThresholds th;
    th.theta = t.at("theta").get<double>();
    const auto& o = t.at("ordinal");
    if (!o.is_null()) {
      OrdinalThresholds spec;
      spec.n = o.at("n").get<int>();
      spec.gammas_neg = o.at("gammas_neg").get<std::vector<double>>();
      spec.gammas_pos = o.at("gammas_pos").get<std::vector<double>>();
      validate(spec);
      th.ordinal = std::move(spec);
    }
    a.thresholds = std::move(th);
  }
  return a;
}

}  // namespace

std::string to_json(const AxisStore& store) {
  ojson root;
  root["format"] = "nfb-axes";
  root["version"] = AxisStore::kFormatVersion;
  root["model_id"] = store.model_id;
  root["layer_count"] = store.layer_count;
  root["width"] = store.width;
  root["seed"] = store.seed;
  root["fit_sentence_count"] = store.fit_sentence_count;
  ojson layers = ojson::array();
  for (const auto& b : store.layers) {
    ojson lj;
    lj["layer"] = b.layer;
    lj["total_variance"] = b.total_variance;
    lj["data_mean"] = b.data_mean;
    ojson axes = ojson::array();
    for (const auto& a : b.pcs) axes.push_back(axis_json(a));
    if (b.lr) axes.push_back(axis_json(*b.lr));
    lj["axes"] = std::move(axes);
    layers.push_back(std::move(lj));
  }
  root["layers"] = std::move(layers);
  return root.dump(1) + "\n";
}

AxisStore axis_store_from_json(std::string_view text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("axes file is not JSON: ") + e.what());
  }
  try {
    if (root.at("format") != "nfb-axes") throw Error(ErrorCode::BadFormat, "not an axes file");
    const int version = root.at("version").get<int>();
    if (version != AxisStore::kFormatVersion) {
      throw Error(ErrorCode::BadFormat, "unsupported axes file version " + std::to_string(version));
    }
    AxisStore store;
    store.model_id = root.at("model_id").get<std::string>();
    store.layer_count = root.at("layer_count").get<int>();
    store.width = root.at("width").get<std::size_t>();
    store.seed = root.at("seed").get<std::uint64_t>();
    store.fit_sentence_count = root.at("fit_sentence_count").get<std::size_t>();
    for (const auto& lj : root.at("layers")) {
      AxisBasis b;
      b.layer = lj.at("layer").get<int>();
      b.total_variance = lj.at("total_variance").get<double>();
      b.data_mean = lj.at("data_mean").get<std::vector<double>>();
      for (const auto& aj : lj.at("axes")) {
        Axis a = axis_from_json(aj, b.layer);
        if (a.kind == AxisKind::LR) {
          b.lr = std::move(a);
        } else {
          b.pcs.push_back(std::move(a));
        }
      }
      store.layers.push_back(std::move(b));
    }
    return store;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::BadFormat, std::string("malformed axes file: ") + e.what());
  }
}

}  // namespace nfb
