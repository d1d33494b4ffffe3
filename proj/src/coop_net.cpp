#include "coopclass/coop_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_map>

#include "coopclass/error.hpp"
#include "text_io.hpp"

namespace coopclass {

AblationMode parse_ablation_mode(std::string_view name) {
  if (name == "full") return AblationMode::full;
  if (name == "no_encoder" || name == "no-encoder") return AblationMode::no_encoder;
  if (name == "no_decision" || name == "no-decision") return AblationMode::no_decision;
  if (name == "neither") return AblationMode::neither;
  fail(ErrorKind::configuration, "unknown ablation mode '" + std::string(name) + "'");
}

std::string_view to_string(AblationMode mode) {
  switch (mode) {
    case AblationMode::full: return "full";
    case AblationMode::no_encoder: return "no_encoder";
    case AblationMode::no_decision: return "no_decision";
    case AblationMode::neither: return "neither";
  }
  return "full";
}

namespace {

bool uses_encoder(AblationMode m) { return m == AblationMode::full || m == AblationMode::no_decision; }
bool uses_decision(AblationMode m) { return m == AblationMode::full || m == AblationMode::no_encoder; }

struct ForwardCache {
  Mlp::Cache base;
  Mlp::Cache encoder;
  Mlp::Cache decision;
};

Eigen::MatrixXd coop_logits(const CoopNet& net, const Eigen::MatrixXd& x, std::span<const int> labels,
                            ForwardCache* cache) {
  const int c = net.class_count();
  if (x.rows() != static_cast<Eigen::Index>(net.feature_dim())) {
    fail(ErrorKind::shape, "expected " + std::to_string(net.feature_dim()) + " features, got " + std::to_string(x.rows()));
  }
  if (static_cast<std::size_t>(x.cols()) != labels.size()) fail(ErrorKind::shape, "one human label per sample expected");
  for (int y : labels) {
    if (y < 0 || y >= c) fail(ErrorKind::validation, "human label " + std::to_string(y) + " out of range");
  }
  const Eigen::MatrixXd onehot = one_hot_columns(labels, c);
  const Eigen::MatrixXd f = cache ? net.base.forward(x, cache->base) : net.base.forward(x);
  const Eigen::MatrixXd h = uses_encoder(net.mode) ? (cache ? net.encoder.forward(onehot, cache->encoder)
                                                            : net.encoder.forward(onehot))
                                                   : onehot;
  if (!uses_decision(net.mode)) return f + h;
  Eigen::MatrixXd joined(2 * c, x.cols());
  joined.topRows(c) = f;
  joined.bottomRows(c) = h;
  return cache ? net.decision.forward(joined, cache->decision) : net.decision.forward(joined);
}

Eigen::MatrixXd gather_columns(const Eigen::MatrixXd& x, std::span<const std::size_t> idx) {
  Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(idx.size()));
  for (std::size_t i = 0; i < idx.size(); ++i) out.col(static_cast<Eigen::Index>(i)) = x.col(static_cast<Eigen::Index>(idx[i]));
  return out;
}

}  // namespace

CoopNet CoopNet::create(const CoopNetDims& dims, Rng& rng) {
  if (dims.features == 0 || dims.classes < 2) fail(ErrorKind::configuration, "cooperative model needs features and >= 2 classes");
  CoopNet net;
  const std::size_t base_dims[] = {dims.features, dims.base_hidden, dims.classes};
  const std::size_t enc_dims[] = {dims.classes, dims.encoder_hidden, dims.classes};
  const std::size_t dec_dims[] = {2 * dims.classes, dims.decision_hidden1, dims.decision_hidden2, dims.classes};
  net.base = Mlp(base_dims, rng);
  net.encoder = Mlp(enc_dims, rng);
  net.decision = Mlp(dec_dims, rng);
  net.transition = Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(dims.classes), static_cast<Eigen::Index>(dims.classes));
  return net;
}

Eigen::MatrixXd CoopNet::forward(const Eigen::MatrixXd& x, std::span<const int> human_labels) const {
  return softmax_columns(coop_logits(*this, x, human_labels, nullptr));
}

std::vector<double> CoopNet::forward(std::span<const double> x, int human_label) const {
  const Eigen::MatrixXd col = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  const int labels[] = {human_label};
  const Eigen::MatrixXd p = forward(col, labels);
  return {p.data(), p.data() + p.size()};
}

int CoopNet::scalar_prediction(std::span<const double> x, int human_label) const {
  return argmax(forward(x, human_label));
}

std::vector<int> CoopNet::scalar_predictions(const Eigen::MatrixXd& x, std::span<const int> human_labels) const {
  const Eigen::MatrixXd p = forward(x, human_labels);
  std::vector<int> out(static_cast<std::size_t>(p.cols()));
  for (Eigen::Index i = 0; i < p.cols(); ++i) out[static_cast<std::size_t>(i)] = argmax(p.col(i));
  return out;
}

std::vector<int> CoopNet::base_predictions(const Eigen::MatrixXd& x) const { return predict_classes(base, x); }

CoopNet ablate_components(const CoopNet& net, AblationMode mode) {
  CoopNet out = net;
  out.mode = mode;
  return out;
}

// ---------------------------------------------------------------------------
// Loss and gradients

namespace {

void check_batch(const CoopNet& net, const CoopBatch& batch, const Eigen::MatrixXd& transition, double lambda) {
  const int c = net.class_count();
  if (transition.rows() != c || transition.cols() != c) fail(ErrorKind::shape, "transition matrix must be C x C");
  if (lambda < 0.0) fail(ErrorKind::configuration, "lambda must be nonnegative");
  if (batch.consensus.size() != static_cast<std::size_t>(batch.x.cols()) ||
      batch.noisy.size() != static_cast<std::size_t>(batch.x.cols())) {
    fail(ErrorKind::shape, "batch label counts do not match its features");
  }
  for (int y : batch.consensus) {
    if (y < 0 || y >= c) fail(ErrorKind::validation, "consensus label out of range");
  }
}

// Loss value plus dL/dP (C x n) for softmax probabilities P.
double loss_terms(const Eigen::MatrixXd& p, const CoopBatch& batch, const Eigen::MatrixXd& transition, double lambda,
                  Eigen::MatrixXd* grad_p) {
  const auto n = p.cols();
  if (n == 0) return 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  if (grad_p) *grad_p = Eigen::MatrixXd::Zero(p.rows(), n);
  double total = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    const int target = batch.consensus[static_cast<std::size_t>(i)];
    const int noisy = batch.noisy[static_cast<std::size_t>(i)];
    const double pt = p(target, i);
    total -= std::log(std::max(pt, kProbabilityFloor));
    if (grad_p && pt > kProbabilityFloor) (*grad_p)(target, i) -= inv_n / pt;
    if (lambda != 0.0) {
      // (T^T p)[noisy] = sum_c T(c, noisy) p(c)
      const double q = transition.col(noisy).dot(p.col(i));
      total -= lambda * std::log(std::max(q, kProbabilityFloor));
      if (grad_p && q > kProbabilityFloor) grad_p->col(i) -= (lambda * inv_n / q) * transition.col(noisy);
    }
  }
  return total * inv_n;
}

}  // namespace

double composite_loss(const CoopNet& net, const CoopBatch& batch, const Eigen::MatrixXd& transition, double lambda) {
  check_batch(net, batch, transition, lambda);
  const Eigen::MatrixXd p = net.forward(batch.x, batch.noisy);
  return loss_terms(p, batch, transition, lambda, nullptr);
}

LossAndGradients backprop_gradients(const CoopNet& net, const CoopBatch& batch, const Eigen::MatrixXd& transition,
                                    double lambda) {
  check_batch(net, batch, transition, lambda);
  const int c = net.class_count();
  ForwardCache cache;
  const Eigen::MatrixXd p = softmax_columns(coop_logits(net, batch.x, batch.noisy, &cache));
  Eigen::MatrixXd grad_p;
  LossAndGradients out;
  out.loss = loss_terms(p, batch, transition, lambda, &grad_p);
  if (!std::isfinite(out.loss)) fail(ErrorKind::divergence, "composite loss is not finite");

  // Softmax Jacobian-vector product per column.
  Eigen::MatrixXd grad_z(p.rows(), p.cols());
  for (Eigen::Index i = 0; i < p.cols(); ++i) {
    const double dot = grad_p.col(i).dot(p.col(i));
    grad_z.col(i) = p.col(i).cwiseProduct(grad_p.col(i) - Eigen::VectorXd::Constant(p.rows(), dot));
  }

  out.gradients.base = net.base.zero_gradients();
  out.gradients.encoder = net.encoder.zero_gradients();
  out.gradients.decision = net.decision.zero_gradients();
  Eigen::MatrixXd grad_f;
  Eigen::MatrixXd grad_h;
  if (uses_decision(net.mode)) {
    const Eigen::MatrixXd grad_in = net.decision.backward(cache.decision, grad_z, out.gradients.decision);
    grad_f = grad_in.topRows(c);
    grad_h = grad_in.bottomRows(c);
  } else {
    grad_f = grad_z;
    grad_h = grad_z;
  }
  net.base.backward(cache.base, grad_f, out.gradients.base);
  if (uses_encoder(net.mode)) net.encoder.backward(cache.encoder, grad_h, out.gradients.encoder);

  auto check = [](const std::vector<DenseLayer>& layers, std::string_view part) {
    for (std::size_t l = 0; l < layers.size(); ++l) {
      if (!layers[l].weight.allFinite() || !layers[l].bias.allFinite()) {
        fail(ErrorKind::divergence, "non-finite gradient at " + std::string(part) + ".layers[" + std::to_string(l) + "]");
      }
    }
  };
  check(out.gradients.base, "base");
  check(out.gradients.encoder, "encoder");
  check(out.gradients.decision, "decision");
  return out;
}

// ---------------------------------------------------------------------------
// Training

TrainHistory pretrain_base(Mlp& base, const Eigen::MatrixXd& x, std::span<const int> consensus,
                           const TrainConfig& config) {
  ClassifierTrainConfig cc;
  cc.max_epochs = config.max_epochs;
  cc.patience = config.patience;
  cc.batch_size = config.batch_size;
  cc.learning_rate = config.base_learning_rate;
  cc.holdout_fraction = config.holdout_fraction;
  cc.seed = derive_seed(config.seed, 0x62617365ULL);
  return train_classifier(base, x, consensus, cc);
}

CoopNet train_profile_model(int profile, const ProfileTrainingData& data, const TransitionMatrix& transition,
                            const Mlp& pretrained_base, const CoopNetDims& dims, const TrainConfig& config,
                            AblationMode mode, TrainHistory* history_out) {
  const auto& aug = data.augmented;
  if (aug.size() == 0) fail(ErrorKind::precondition, "profile " + std::to_string(profile) + " has no augmented data");
  if (static_cast<std::size_t>(data.x.cols()) != aug.size()) fail(ErrorKind::shape, "one feature column per augmented sample expected");
  require_row_stochastic(transition.probabilities);
  if (config.patience > config.max_epochs && config.max_epochs > 0) {
    fail(ErrorKind::configuration, "patience exceeds max epochs");
  }

  Rng rng(derive_seed(config.seed, 0x6a6f696eULL, static_cast<std::uint64_t>(profile + 1)));
  CoopNet net = CoopNet::create(dims, rng);
  net.base = pretrained_base;
  net.profile = profile;
  net.lambda = config.lambda;
  net.transition = transition.probabilities;
  net.mode = mode;
  net.seed = config.seed;

  // Holdout split by sample so that all G draws of a sample stay together.
  std::vector<std::size_t> order(aug.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  std::size_t holdout_n = static_cast<std::size_t>(std::floor(config.holdout_fraction * static_cast<double>(aug.size())));
  if (aug.size() < 10) holdout_n = 0;

  struct Triple {
    std::size_t column;
    int consensus;
    int noisy;
  };
  std::vector<Triple> train;
  std::vector<Triple> holdout;
  for (std::size_t k = 0; k < order.size(); ++k) {
    const auto i = order[k];
    for (int y : aug.noisy[i]) (k < holdout_n ? holdout : train).push_back({i, aug.consensus[i], y});
  }
  if (holdout.empty()) holdout = train;

  auto make_batch = [&](std::span<const Triple> items) {
    CoopBatch b;
    std::vector<std::size_t> cols;
    cols.reserve(items.size());
    for (const auto& t : items) {
      cols.push_back(t.column);
      b.consensus.push_back(t.consensus);
      b.noisy.push_back(t.noisy);
    }
    b.x = gather_columns(data.x, cols);
    return b;
  };
  const CoopBatch holdout_batch = make_batch(holdout);
  const Eigen::MatrixXd& t = transition.probabilities;

  TrainHistory history;
  history.initial_holdout_loss = composite_loss(net, holdout_batch, t, config.lambda);
  history.best_holdout_loss = history.initial_holdout_loss;

  NadamOptimizer optimizer({.learning_rate = config.joint_learning_rate});
  CoopNet best = net;
  int since_best = 0;
  int non_finite_streak = 0;
  const std::size_t batch_size = std::max<std::size_t>(1, config.batch_size);

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    rng.shuffle(train);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < train.size(); start += batch_size) {
      const std::size_t stop = std::min(train.size(), start + batch_size);
      const CoopBatch batch = make_batch(std::span<const Triple>(train.data() + start, stop - start));
      LossAndGradients lg;
      try {
        lg = backprop_gradients(net, batch, t, config.lambda);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::divergence) throw;
        if (++non_finite_streak >= 3) throw;
        continue;
      }
      non_finite_streak = 0;
      epoch_loss += lg.loss * static_cast<double>(stop - start);

      std::vector<std::span<double>> params;
      std::vector<std::span<const double>> grads;
      auto append = [&](std::vector<DenseLayer>& p, const std::vector<DenseLayer>& g) {
        for (auto v : parameter_views(p)) params.push_back(v);
        for (auto v : parameter_views(g)) grads.push_back(v);
      };
      append(net.base.layers(), lg.gradients.base);
      append(net.encoder.layers(), lg.gradients.encoder);
      append(net.decision.layers(), lg.gradients.decision);
      optimizer.step(params, grads);
    }
    history.train_loss.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, train.size())));
    const double hold = composite_loss(net, holdout_batch, t, config.lambda);
    history.holdout_loss.push_back(hold);
    history.epochs_run = epoch;
    if (!std::isfinite(hold)) fail(ErrorKind::divergence, "holdout composite loss is not finite");
    if (hold < history.best_holdout_loss) {
      history.best_holdout_loss = hold;
      history.best_epoch = epoch;
      best = net;
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  best.epochs_run = history.epochs_run;
  best.best_epoch = history.best_epoch;
  if (history_out) *history_out = history;
  return best;
}

// ---------------------------------------------------------------------------
// Artifact

nlohmann::json CoopNet::to_json() const {
  std::vector<std::vector<double>> t(static_cast<std::size_t>(transition.rows()));
  for (Eigen::Index r = 0; r < transition.rows(); ++r) {
    for (Eigen::Index c = 0; c < transition.cols(); ++c) t[static_cast<std::size_t>(r)].push_back(transition(r, c));
  }
  return {{"schema", "coopclass-model-v1"},
          {"profile", profile},
          {"classes", class_count()},
          {"features", feature_dim()},
          {"lambda", lambda},
          {"mode", std::string(to_string(mode))},
          {"transition", t},
          {"base", base.to_json()},
          {"encoder", encoder.to_json()},
          {"decision", decision.to_json()},
          {"training", {{"epochs_run", epochs_run}, {"best_epoch", best_epoch}, {"seed", seed}}}};
}

CoopNet CoopNet::from_json(const nlohmann::json& j) {
  if (j.value("schema", std::string{}) != "coopclass-model-v1") fail(ErrorKind::format, "not a coopclass-model-v1 artifact");
  CoopNet net;
  net.profile = j.at("profile").get<int>();
  net.lambda = j.at("lambda").get<double>();
  net.mode = parse_ablation_mode(j.at("mode").get<std::string>());
  net.base = Mlp::from_json(j.at("base"));
  net.encoder = Mlp::from_json(j.at("encoder"));
  net.decision = Mlp::from_json(j.at("decision"));
  const auto t = j.at("transition").get<std::vector<std::vector<double>>>();
  net.transition.resize(static_cast<Eigen::Index>(t.size()), static_cast<Eigen::Index>(t.size()));
  for (std::size_t r = 0; r < t.size(); ++r) {
    if (t[r].size() != t.size()) fail(ErrorKind::format, "transition matrix is not square");
    for (std::size_t c = 0; c < t.size(); ++c) net.transition(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = t[r][c];
  }
  const auto& tr = j.at("training");
  net.epochs_run = tr.at("epochs_run").get<int>();
  net.best_epoch = tr.at("best_epoch").get<int>();
  net.seed = tr.at("seed").get<std::uint64_t>();
  if (net.class_count() != j.at("classes").get<int>() || net.feature_dim() != j.at("features").get<std::size_t>()) {
    fail(ErrorKind::format, "model dimensions disagree with its header");
  }
  return net;
}

void save_coop_net(const CoopNet& net, const std::filesystem::path& path) {
  auto out = detail::open_out(path);
  out << net.to_json().dump() << '\n';
}

CoopNet load_coop_net(const std::filesystem::path& path) {
  auto in = detail::open_in(path);
  try {
    return CoopNet::from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::format, path.string() + ": " + e.what());
  }
}

}  // namespace coopclass
