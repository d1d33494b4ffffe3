#include "coopclass/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "coopclass/error.hpp"

namespace coopclass {

Mlp::Mlp(std::span<const std::size_t> dims, Rng& rng) {
  if (dims.size() < 2) fail(ErrorKind::configuration, "an MLP needs at least input and output dims");
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    const double scale = std::sqrt(2.0 / static_cast<double>(std::max<Eigen::Index>(in, 1)));
    for (Eigen::Index c = 0; c < in; ++c) {
      for (Eigen::Index r = 0; r < out; ++r) layer.weight(r, c) = scale * rng.normal();
    }
    layers_.push_back(std::move(layer));
  }
}

Mlp Mlp::zeros(std::span<const std::size_t> dims) {
  Mlp net;
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(dims[l]);
    const auto out = static_cast<Eigen::Index>(dims[l + 1]);
    net.layers_.push_back({Eigen::MatrixXd::Zero(out, in), Eigen::VectorXd::Zero(out)});
  }
  return net;
}

std::size_t Mlp::input_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.front().weight.cols());
}

std::size_t Mlp::output_dim() const {
  return layers_.empty() ? 0 : static_cast<std::size_t>(layers_.back().weight.rows());
}

std::vector<std::size_t> Mlp::dims() const {
  std::vector<std::size_t> d;
  if (layers_.empty()) return d;
  d.push_back(input_dim());
  for (const auto& layer : layers_) d.push_back(static_cast<std::size_t>(layer.weight.rows()));
  return d;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x) const {
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    Eigen::MatrixXd z = (layers_[l].weight * a).colwise() + layers_[l].bias;
    if (l + 1 < layers_.size()) z = z.cwiseMax(0.0);
    a = std::move(z);
  }
  return a;
}

Eigen::MatrixXd Mlp::forward(const Eigen::MatrixXd& x, Cache& cache) const {
  cache.inputs.clear();
  cache.pre_activation.clear();
  Eigen::MatrixXd a = x;
  for (std::size_t l = 0; l < layers_.size(); ++l) {
    cache.inputs.push_back(a);
    Eigen::MatrixXd z = (layers_[l].weight * a).colwise() + layers_[l].bias;
    cache.pre_activation.push_back(z);
    a = (l + 1 < layers_.size()) ? Eigen::MatrixXd(z.cwiseMax(0.0)) : std::move(z);
  }
  return a;
}

Eigen::MatrixXd Mlp::backward(const Cache& cache, const Eigen::MatrixXd& grad_output,
                              std::vector<DenseLayer>& grads) const {
  Eigen::MatrixXd delta = grad_output;
  for (std::size_t l = layers_.size(); l-- > 0;) {
    if (l + 1 < layers_.size()) {
      // ReLU derivative; the subgradient at exactly 0 is taken as 0.
      delta = delta.cwiseProduct((cache.pre_activation[l].array() > 0.0).cast<double>().matrix());
    }
    grads[l].weight.noalias() += delta * cache.inputs[l].transpose();
    grads[l].bias += delta.rowwise().sum();
    delta = layers_[l].weight.transpose() * delta;
  }
  return delta;
}

std::vector<DenseLayer> Mlp::zero_gradients() const {
  std::vector<DenseLayer> g;
  g.reserve(layers_.size());
  for (const auto& layer : layers_) {
    g.push_back({Eigen::MatrixXd::Zero(layer.weight.rows(), layer.weight.cols()),
                 Eigen::VectorXd::Zero(layer.bias.size())});
  }
  return g;
}

bool Mlp::all_finite() const {
  return std::all_of(layers_.begin(), layers_.end(), [](const DenseLayer& l) {
    return l.weight.allFinite() && l.bias.allFinite();
  });
}

std::size_t Mlp::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers_) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
  return n;
}

nlohmann::json Mlp::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : layers_) {
    // Row-major flattening of the weight matrix.
    std::vector<double> w;
    w.reserve(static_cast<std::size_t>(l.weight.size()));
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.push_back(l.weight(r, c));
    }
    layers.push_back({{"rows", l.weight.rows()},
                      {"cols", l.weight.cols()},
                      {"weight", w},
                      {"bias", std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size())}});
  }
  return {{"dims", dims()}, {"layers", layers}};
}

Mlp Mlp::from_json(const nlohmann::json& j) {
  Mlp net;
  for (const auto& lj : j.at("layers")) {
    const auto rows = lj.at("rows").get<Eigen::Index>();
    const auto cols = lj.at("cols").get<Eigen::Index>();
    const auto w = lj.at("weight").get<std::vector<double>>();
    const auto b = lj.at("bias").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(w.size()) != rows * cols || static_cast<Eigen::Index>(b.size()) != rows) {
      fail(ErrorKind::format, "layer parameter count does not match its shape");
    }
    DenseLayer layer{Eigen::MatrixXd(rows, cols), Eigen::VectorXd(rows)};
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (Eigen::Index c = 0; c < cols; ++c) layer.weight(r, c) = w[static_cast<std::size_t>(r * cols + c)];
      layer.bias(r) = b[static_cast<std::size_t>(r)];
    }
    if (!net.layers_.empty() && net.layers_.back().weight.rows() != cols) {
      fail(ErrorKind::format, "adjacent layer dimensions do not chain");
    }
    net.layers_.push_back(std::move(layer));
  }
  return net;
}

bool operator==(const Mlp& a, const Mlp& b) {
  if (a.layers_.size() != b.layers_.size()) return false;
  for (std::size_t l = 0; l < a.layers_.size(); ++l) {
    const auto& x = a.layers_[l];
    const auto& y = b.layers_[l];
    if (x.weight.rows() != y.weight.rows() || x.weight.cols() != y.weight.cols()) return false;
    if (x.weight != y.weight || x.bias != y.bias) return false;
  }
  return true;
}

std::vector<std::span<double>> parameter_views(std::vector<DenseLayer>& layers) {
  std::vector<std::span<double>> views;
  for (auto& l : layers) {
    views.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    views.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return views;
}

std::vector<std::span<const double>> parameter_views(const std::vector<DenseLayer>& layers) {
  std::vector<std::span<const double>> views;
  for (const auto& l : layers) {
    views.emplace_back(l.weight.data(), static_cast<std::size_t>(l.weight.size()));
    views.emplace_back(l.bias.data(), static_cast<std::size_t>(l.bias.size()));
  }
  return views;
}

Eigen::MatrixXd softmax_columns(const Eigen::MatrixXd& logits) {
  Eigen::MatrixXd out(logits.rows(), logits.cols());
  for (Eigen::Index c = 0; c < logits.cols(); ++c) {
    const double mx = logits.col(c).maxCoeff();
    out.col(c) = (logits.col(c).array() - mx).exp().matrix();
    out.col(c) /= out.col(c).sum();
  }
  return out;
}

Eigen::MatrixXd one_hot_columns(std::span<const int> labels, int class_count) {
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(class_count, static_cast<Eigen::Index>(labels.size()));
  for (std::size_t i = 0; i < labels.size(); ++i) out(labels[i], static_cast<Eigen::Index>(i)) = 1.0;
  return out;
}

int argmax(std::span<const double> values) {
  int best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[static_cast<std::size_t>(best)]) best = static_cast<int>(i);
  }
  return best;
}

int argmax(const Eigen::Ref<const Eigen::VectorXd>& values) {
  return argmax(std::span<const double>(values.data(), static_cast<std::size_t>(values.size())));
}

namespace {

void ensure_state(std::vector<std::vector<double>>& state,
                  std::span<const std::span<double>> params) {
  if (!state.empty()) return;
  for (const auto& p : params) state.emplace_back(p.size(), 0.0);
}

}  // namespace

void AdamOptimizer::step(std::span<const std::span<double>> params,
                         std::span<const std::span<const double>> grads) {
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++step_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
  for (std::size_t t = 0; t < params.size(); ++t) {
    auto p = params[t];
    auto g = grads[t];
    auto& m = m_[t];
    auto& v = v_[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double denom = std::sqrt(v[i] / bc2) + config_.epsilon;
      p[i] -= config_.learning_rate * (m[i] / bc1) / denom;
    }
  }
}

void NadamOptimizer::step(std::span<const std::span<double>> params,
                          std::span<const std::span<const double>> grads) {
  constexpr double kMomentumDecay = 0.004;
  ensure_state(m_, params);
  ensure_state(v_, params);
  ++step_;
  const double t = static_cast<double>(step_);
  const double mu = config_.beta1 * (1.0 - 0.5 * std::pow(0.96, t * kMomentumDecay));
  const double mu_next = config_.beta1 * (1.0 - 0.5 * std::pow(0.96, (t + 1.0) * kMomentumDecay));
  mu_product_ *= mu;
  const double bc2 = 1.0 - std::pow(config_.beta2, t);
  const double grad_coef = config_.learning_rate * (1.0 - mu) / (1.0 - mu_product_);
  const double mom_coef = config_.learning_rate * mu_next / (1.0 - mu_product_ * mu_next);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k];
    auto g = grads[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double denom = std::sqrt(v[i] / bc2) + config_.epsilon;
      p[i] -= grad_coef * g[i] / denom + mom_coef * m[i] / denom;
    }
  }
}

double cross_entropy(const Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const Eigen::MatrixXd p = softmax_columns(net.forward(x));
  double total = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    total -= std::log(std::max(p(labels[i], static_cast<Eigen::Index>(i)), kProbabilityFloor));
  }
  return total / static_cast<double>(labels.size());
}

std::vector<int> predict_classes(const Mlp& net, const Eigen::MatrixXd& x) {
  const Eigen::MatrixXd logits = net.forward(x);
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index i = 0; i < logits.cols(); ++i) out[static_cast<std::size_t>(i)] = argmax(logits.col(i));
  return out;
}

double accuracy(const Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels) {
  if (labels.empty()) return 0.0;
  const auto pred = predict_classes(net, x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

namespace {

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = x.col(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace

TrainHistory train_classifier(Mlp& net, const Eigen::MatrixXd& x, std::span<const int> labels,
                              const ClassifierTrainConfig& config) {
  const std::size_t n = labels.size();
  if (static_cast<std::size_t>(x.cols()) != n) fail(ErrorKind::shape, "feature/label count mismatch");
  if (x.rows() != static_cast<Eigen::Index>(net.input_dim())) {
    fail(ErrorKind::shape, "feature dimension does not match the network input");
  }
  const int class_count = static_cast<int>(net.output_dim());

  Rng rng(derive_seed(config.seed, 0x7261696eULL));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t holdout_n = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(n)));
  if (n < 10) holdout_n = 0;
  std::vector<std::size_t> holdout(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(holdout_n));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(holdout_n), order.end());
  if (holdout.empty()) holdout = train;

  const Eigen::MatrixXd x_hold = gather_columns(x, holdout);
  std::vector<int> y_hold;
  for (auto i : holdout) y_hold.push_back(labels[i]);

  TrainHistory history;
  history.initial_holdout_loss = n == 0 ? 0.0 : cross_entropy(net, x_hold, y_hold);
  history.best_holdout_loss = history.initial_holdout_loss;
  if (n == 0 || config.max_epochs <= 0) return history;

  AdamOptimizer optimizer({.learning_rate = config.learning_rate});
  Mlp best = net;
  int since_best = 0;
  int non_finite_streak = 0;
  const std::size_t batch = std::max<std::size_t>(1, config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(train);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train.size(); start += batch) {
      const std::size_t stop = std::min(train.size(), start + batch);
      std::span<const std::size_t> idx(train.data() + start, stop - start);
      const Eigen::MatrixXd xb = gather_columns(x, idx);
      std::vector<int> yb;
      for (auto i : idx) yb.push_back(labels[i]);

      Mlp::Cache cache;
      const Eigen::MatrixXd p = softmax_columns(net.forward(xb, cache));
      double loss = 0.0;
      for (std::size_t i = 0; i < yb.size(); ++i) {
        loss -= std::log(std::max(p(yb[i], static_cast<Eigen::Index>(i)), kProbabilityFloor));
      }
      loss /= static_cast<double>(yb.size());
      if (!std::isfinite(loss)) {
        if (++non_finite_streak >= 3) fail(ErrorKind::divergence, "classifier loss is not finite");
        continue;
      }
      non_finite_streak = 0;
      epoch_loss += loss * static_cast<double>(yb.size());

      const Eigen::MatrixXd grad = (p - one_hot_columns(yb, class_count)) / static_cast<double>(yb.size());
      auto grads = net.zero_gradients();
      net.backward(cache, grad, grads);
      const auto gviews = parameter_views(std::as_const(grads));
      optimizer.step(parameter_views(net.layers()), gviews);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, train.size())));
    const double hold_loss = cross_entropy(net, x_hold, y_hold);
    history.holdout_loss.push_back(hold_loss);
    history.epochs_run = epoch;
    if (!std::isfinite(hold_loss)) fail(ErrorKind::divergence, "holdout loss is not finite");
    if (hold_loss < history.best_holdout_loss) {
      history.best_holdout_loss = hold_loss;
      history.best_epoch = epoch;
      best = net;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  net = std::move(best);
  return history;
}

}  // namespace coopclass
