#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "edmips/complexity.hpp"
#include "edmips/dataset.hpp"
#include "edmips/network.hpp"
#include "edmips/ops.hpp"
#include "edmips/optim.hpp"
#include "edmips/tensor.hpp"

namespace edmips {

enum class OptimizationMode { single_pass, alternating };

inline const char* to_string(OptimizationMode m) {
  return m == OptimizationMode::single_pass ? "single_pass" : "alternating";
}

struct SearchConfig {
  Real eta = 0;
  std::size_t search_epochs = 25;
  Real lr_weights = 0.1;
  Real lr_arch = 0.01;
  Real lr_decay = 0.1;
  std::size_t lr_decay_every = 10;
  Real arch_init = 0.01;
  OptimizationMode mode = OptimizationMode::single_pass;
  std::uint64_t seed = 0;
  std::size_t batch_size = 32;
  Real momentum = 0.9;
  Real arch_momentum = 0.9;
  Real weight_decay = 1e-4;  // weights only
  WeightSharing sharing = WeightSharing::shared;
  BitPool pool;
  std::size_t retrain_epochs = 50;
  std::size_t retrain_decay_every = 15;

  /// Step-decayed learning rate for a zero-based epoch.
  static Real decayed(Real base, Real factor, std::size_t every, std::size_t epoch) {
    if (every == 0) return base;
    return base * std::pow(factor, static_cast<Real>(epoch / every));
  }

  void validate() const {
    if (!(eta >= 0) || !std::isfinite(eta)) throw Error("eta must be a finite nonnegative number");
    if (search_epochs == 0) throw Error("search_epochs must be at least 1");
    if (batch_size == 0) throw Error("batch_size must be at least 1");
    if (!(lr_weights > 0) || !(lr_arch >= 0)) throw Error("learning rates must be positive");
    if (!(lr_decay > 0)) throw Error("lr_decay must be positive");
    if (momentum < 0 || momentum >= 1 || arch_momentum < 0 || arch_momentum >= 1) {
      throw Error("momentum must lie in [0,1)");
    }
    if (weight_decay < 0) throw Error("weight_decay must be nonnegative");
    pool.validate();
  }
};

// ----------------------------------------------------------- evolution log

/// Probabilities below this are shown floored in the log; the search itself
/// never floors them.
inline constexpr Real kLogProbFloor = 1e-6;

struct PiRecord {
  std::size_t epoch = 0;
  std::size_t layer_id = 0;
  QuantizerKind kind = QuantizerKind::weight;  // weight -> alpha, activation -> beta
  std::vector<Real> pi;
  friend bool operator==(const PiRecord&, const PiRecord&) = default;
};

struct EpochRecord {
  std::size_t epoch = 0;
  Real train_loss = 0;
  Real train_accuracy = 0;
  Real expected_cost = 0;  // normalized
  Real lr_weights = 0;
  Real lr_arch = 0;
  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

namespace detail {

inline std::string fmt_real(Real v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline Real parse_real(const std::string& s, const std::string& where) {
  try {
    std::size_t used = 0;
    Real v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw Error(where + ": '" + s + "' is not a number");
  }
}

inline std::size_t parse_index(const std::string& s, const std::string& where) {
  if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos) {
    throw Error(where + ": '" + s + "' is not a nonnegative integer");
  }
  return std::stoull(s);
}

inline void expect_schema(std::istream& is, const std::string& schema, const std::string& what) {
  std::string line;
  if (!std::getline(is, line) || line != "# schema=" + schema) {
    throw Error(what + ": expected first line '# schema=" + schema + "'");
  }
}

}  // namespace detail

/// Per-epoch architecture probabilities plus per-epoch loss and cost.
/// Written as two CSV files: one row per (epoch, layer, kind) and one row
/// per epoch.
struct EvolutionLog {
  std::vector<PiRecord> pi;
  std::vector<EpochRecord> epochs;

  std::size_t layer_count() const {
    std::size_t n = 0;
    for (const auto& r : pi) n = std::max(n, r.layer_id + 1);
    return n;
  }

  void write_pi_csv(std::ostream& os) const {
    std::size_t width = 0;
    for (const auto& r : pi) width = std::max(width, r.pi.size());
    os << "# schema=edmips.evolution/1\n";
    os << "epoch,layer_id,kind";
    for (std::size_t i = 1; i <= width; ++i) os << ",pi_" << i;
    os << '\n';
    for (const auto& r : pi) {
      os << r.epoch << ',' << r.layer_id << ','
         << (r.kind == QuantizerKind::weight ? "alpha" : "beta");
      for (Real p : r.pi) os << ',' << detail::fmt_real(std::max(p, kLogProbFloor));
      os << '\n';
    }
  }

  void write_epochs_csv(std::ostream& os) const {
    os << "# schema=edmips.epochs/1\n";
    os << "epoch,train_loss,train_accuracy,expected_cost,lr_weights,lr_arch\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << detail::fmt_real(e.train_loss) << ','
         << detail::fmt_real(e.train_accuracy) << ',' << detail::fmt_real(e.expected_cost) << ','
         << detail::fmt_real(e.lr_weights) << ',' << detail::fmt_real(e.lr_arch) << '\n';
    }
  }

  static std::vector<PiRecord> read_pi_csv(std::istream& is) {
    detail::expect_schema(is, "edmips.evolution/1", "evolution log");
    std::string line;
    if (!std::getline(is, line) || line.rfind("epoch,layer_id,kind", 0) != 0) {
      throw Error("evolution log: missing header row");
    }
    std::vector<PiRecord> out;
    std::size_t row = 2;
    while (std::getline(is, line)) {
      ++row;
      if (line.empty()) continue;
      const std::string where = "evolution log line " + std::to_string(row);
      auto cells = detail::split_csv(line);
      if (cells.size() < 4) throw Error(where + ": too few columns");
      PiRecord r;
      r.epoch = detail::parse_index(cells[0], where);
      r.layer_id = detail::parse_index(cells[1], where);
      if (cells[2] == "alpha") r.kind = QuantizerKind::weight;
      else if (cells[2] == "beta") r.kind = QuantizerKind::activation;
      else throw Error(where + ": kind must be alpha or beta");
      for (std::size_t i = 3; i < cells.size(); ++i) r.pi.push_back(detail::parse_real(cells[i], where));
      out.push_back(std::move(r));
    }
    return out;
  }

  static std::vector<EpochRecord> read_epochs_csv(std::istream& is) {
    detail::expect_schema(is, "edmips.epochs/1", "epoch log");
    std::string line;
    if (!std::getline(is, line) || line.rfind("epoch,", 0) != 0) {
      throw Error("epoch log: missing header row");
    }
    std::vector<EpochRecord> out;
    std::size_t row = 2;
    while (std::getline(is, line)) {
      ++row;
      if (line.empty()) continue;
      const std::string where = "epoch log line " + std::to_string(row);
      auto c = detail::split_csv(line);
      if (c.size() != 6) throw Error(where + ": expected 6 columns");
      out.push_back({detail::parse_index(c[0], where), detail::parse_real(c[1], where),
                     detail::parse_real(c[2], where), detail::parse_real(c[3], where),
                     detail::parse_real(c[4], where), detail::parse_real(c[5], where)});
    }
    return out;
  }
};

// ------------------------------------------------------------------ search

/// Names the first tape node whose forward output is not finite.
inline std::string first_nonfinite_node(const Tape& tape) {
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    if (!all_finite(nodes[i].output.data())) {
      return "tape node " + std::to_string(i) + " (" + nodes[i].op + ", shape " +
             shape_str(nodes[i].output.shape()) + ")";
    }
  }
  return "the loss tensor";
}

inline void check_finite_loss(const Tape& tape, const Tensor& loss, std::size_t epoch,
                              std::size_t batch) {
  if (std::isfinite(loss.item())) return;
  throw NumericalError("non-finite loss at epoch " + std::to_string(epoch + 1) + ", batch " +
                       std::to_string(batch) + "; first non-finite tensor: " +
                       first_nonfinite_node(tape));
}

inline Network make_search_model(const NetworkSpec& spec, const SearchConfig& cfg) {
  cfg.validate();
  return build_model(spec, SearchBuild{cfg.pool, cfg.sharing, cfg.arch_init}, cfg.seed);
}

using EpochCallback = std::function<void(const EpochRecord&)>;

inline std::size_t count_correct(const Tensor& logits, std::span<const int> labels) {
  const std::size_t N = logits.dim(0), K = logits.dim(1);
  std::size_t correct = 0;
  for (std::size_t n = 0; n < N; ++n) {
    std::size_t best = 0;
    for (std::size_t k = 1; k < K; ++k) {
      if (logits[n * K + k] > logits[n * K + best]) best = k;
    }
    if (static_cast<int>(best) == labels[n]) ++correct;
  }
  return correct;
}

namespace detail {

inline std::uint64_t loop_seed(std::uint64_t seed) { return seed ^ 0x9e3779b97f4a7c15ULL; }

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch,
                                                           std::mt19937_64& rng) {
  const auto order = permutation(n, rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t s = 0; s < n; s += batch) {
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch)));
  }
  return out;
}

}  // namespace detail

/// Jointly trains the weights and architecture logits of a search model on
/// the Lagrangian CE + eta * normalized expected cost.
///
/// single_pass steps both optimizers from one backward pass per batch;
/// alternating steps the weights on even batches and the logits on odd ones.
inline EvolutionLog search(Network& model, const Dataset& train, const SearchConfig& cfg,
                           const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (!model.search_mode()) throw Error("search needs a model built in search mode");
  if (train.size() == 0) throw Error("search needs a nonempty training set");
  const ComplexityModel cm = model.complexity(cfg.eta);
  Sgd wopt(model.weight_tensors(), {cfg.momentum, cfg.weight_decay});
  Sgd aopt(model.arch_tensors(), {cfg.arch_momentum, 0});
  const auto alphas = model.alphas();
  const auto betas = model.betas();
  std::mt19937_64 rng(detail::loop_seed(cfg.seed));
  EvolutionLog log;

  for (std::size_t epoch = 0; epoch < cfg.search_epochs; ++epoch) {
    const Real lr_w = SearchConfig::decayed(cfg.lr_weights, cfg.lr_decay, cfg.lr_decay_every, epoch);
    const Real lr_a = SearchConfig::decayed(cfg.lr_arch, cfg.lr_decay, cfg.lr_decay_every, epoch);
    Real loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    const auto batches = detail::epoch_batches(train.size(), cfg.batch_size, rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Batch batch = make_batch(train, batches[b]);
      Tape tape;
      Tensor logits = model.forward(tape, batch.x, Mode::train);
      Tensor ce = cross_entropy(tape, logits, batch.y);
      Tensor loss = ce;
      if (cfg.eta > 0) loss = lagrangian(tape, ce, cm.network_cost(tape, alphas, betas), cfg.eta);
      check_finite_loss(tape, loss, epoch, b);
      wopt.zero_grad();
      aopt.zero_grad();
      tape.backward(loss);
      const bool single = cfg.mode == OptimizationMode::single_pass;
      if (single || b % 2 == 0) wopt.step(lr_w);
      if (single || b % 2 == 1) aopt.step(lr_a);
      loss_sum += ce.item() * static_cast<Real>(batch.y.size());
      correct += count_correct(logits, batch.y);
      seen += batch.y.size();
    }
    const auto probs = model.probs();
    for (std::size_t k = 0; k < probs.size(); ++k) {
      log.pi.push_back({epoch + 1, k, QuantizerKind::weight, probs[k].alpha});
      log.pi.push_back({epoch + 1, k, QuantizerKind::activation, probs[k].beta});
    }
    EpochRecord rec{epoch + 1, loss_sum / static_cast<Real>(seen),
                    static_cast<Real>(correct) / static_cast<Real>(seen), cm.network_cost(probs),
                    lr_w, lr_a};
    log.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return log;
}

struct EvalResult {
  Real loss = 0;
  Real accuracy = 0;  // top-1 fraction in [0,1]
};

inline EvalResult evaluate(Network& model, const Dataset& ds, std::size_t batch_size = 256) {
  if (ds.size() == 0) throw Error("evaluate needs a nonempty dataset");
  EvalResult r;
  std::size_t correct = 0;
  std::vector<std::size_t> idx;
  for (std::size_t s = 0; s < ds.size(); s += batch_size) {
    idx.clear();
    for (std::size_t i = s; i < std::min(ds.size(), s + batch_size); ++i) idx.push_back(i);
    Batch b = make_batch(ds, idx);
    Tape tape(false);
    Tensor logits = model.forward(tape, b.x, Mode::eval);
    r.loss += cross_entropy(tape, logits, b.y).item() * static_cast<Real>(idx.size());
    correct += count_correct(logits, b.y);
  }
  r.loss /= static_cast<Real>(ds.size());
  r.accuracy = static_cast<Real>(correct) / static_cast<Real>(ds.size());
  return r;
}

// ---------------------------------------------------------- discretization

/// Index of the largest probability; exact ties go to the lower index.
inline std::size_t wta_index(std::span<const Real> pi) {
  if (pi.empty()) throw Error("wta_index: empty probability vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pi.size(); ++i) {
    if (pi[i] > pi[best]) best = i;
  }
  return best;
}

inline Architecture discretize_wta(std::span<const LayerProbs> probs, std::span<const BitPool> pools) {
  if (probs.size() != pools.size()) throw Error("discretize_wta: probs and pools differ in length");
  Architecture a;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    a.layers.push_back({k, pools[k].weight_bits.at(wta_index(probs[k].alpha)),
                        pools[k].activation_bits.at(wta_index(probs[k].beta))});
  }
  return a;
}

inline std::vector<BitPool> layer_pools(const Network& model) {
  std::vector<BitPool> pools;
  for (const auto& s : model.searchable()) pools.push_back(s.layer->pool());
  return pools;
}

inline Architecture discretize_wta(const Network& model) {
  const auto probs = model.probs();
  const auto pools = layer_pools(model);
  return discretize_wta(probs, pools);
}

/// Categorical draw from pi using the top 53 bits of one generator output.
inline std::size_t categorical_draw(std::span<const Real> pi, std::mt19937_64& rng) {
  const Real u = static_cast<Real>(rng() >> 11) * 0x1.0p-53;
  Real total = 0;
  for (Real p : pi) total += p;
  Real acc = 0;
  for (std::size_t i = 0; i < pi.size(); ++i) {
    acc += pi[i] / total;
    if (u < acc) return i;
  }
  return pi.size() - 1;
}

/// Multinomial selection: n categorical draws, keep the most frequent entry
/// (ties to the lower index). n == 1 is a single categorical draw.
inline std::size_t multinomial_select(std::span<const Real> pi, std::size_t trials,
                                      std::mt19937_64& rng) {
  std::vector<std::size_t> counts(pi.size(), 0);
  for (std::size_t t = 0; t < trials; ++t) ++counts[categorical_draw(pi, rng)];
  std::size_t best = 0;
  for (std::size_t i = 1; i < counts.size(); ++i) {
    if (counts[i] > counts[best]) best = i;
  }
  return best;
}

inline Architecture discretize_sample(std::span<const LayerProbs> probs,
                                      std::span<const BitPool> pools, std::size_t trials,
                                      std::uint64_t seed) {
  if (trials == 0) throw Error("discretize_sample needs at least one trial");
  if (probs.size() != pools.size()) throw Error("discretize_sample: probs and pools differ in length");
  std::mt19937_64 rng(seed);
  Architecture a;
  for (std::size_t k = 0; k < probs.size(); ++k) {
    const std::size_t wi = multinomial_select(probs[k].alpha, trials, rng);
    const std::size_t ai = multinomial_select(probs[k].beta, trials, rng);
    a.layers.push_back({k, pools[k].weight_bits.at(wi), pools[k].activation_bits.at(ai)});
  }
  return a;
}

inline Architecture discretize_sample(const Network& model, std::size_t trials, std::uint64_t seed) {
  const auto probs = model.probs();
  const auto pools = layer_pools(model);
  return discretize_sample(probs, pools, trials, seed);
}

/// Throws unless every entry's bit-widths belong to its layer's pool.
inline void check_in_pools(const Architecture& arch, std::span<const BitPool> pools) {
  if (arch.layers.size() != pools.size()) {
    throw Error("architecture has " + std::to_string(arch.layers.size()) + " entries for " +
                std::to_string(pools.size()) + " searchable layers");
  }
  for (std::size_t k = 0; k < pools.size(); ++k) {
    const auto& l = arch.layers[k];
    if (l.layer_id != k) throw Error("architecture entry " + std::to_string(k) + " has layer_id " +
                                     std::to_string(l.layer_id));
    if (!pools[k].contains(l.weight_bits, l.activation_bits)) {
      throw Error("layer " + std::to_string(k) + ": W" + std::to_string(l.weight_bits) + "A" +
                  std::to_string(l.activation_bits) + " is not in the layer's bit pool");
    }
  }
}

// ---------------------------------------------------------------- retrain

struct RetrainResult {
  Real accuracy = 0;  // validation top-1 fraction
  Real val_loss = 0;
  Real train_loss = 0;
  Real bitops = 0;
  Real normalizer = 0;
  std::vector<EpochRecord> epochs;
};

/// Trains a fixed-precision network from scratch at the given architecture.
/// Uses the weight learning rate, momentum and decay of `cfg`, for
/// cfg.retrain_epochs epochs with a step decay every cfg.retrain_decay_every.
inline RetrainResult retrain(const NetworkSpec& spec, const Architecture& arch,
                             const SearchConfig& cfg, const Dataset& train, const Dataset& val,
                             std::optional<Network>* trained = nullptr, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (cfg.retrain_epochs == 0) throw Error("retrain_epochs must be at least 1");
  Network model = build_model(spec, FixedBuild{arch}, cfg.seed);
  const ComplexityModel cm = model.complexity(0);
  RetrainResult res;
  res.bitops = cm.discrete_bitops(arch.bit_pairs());
  res.normalizer = cm.normalizer();
  Sgd opt(model.weight_tensors(), {cfg.momentum, cfg.weight_decay});
  std::mt19937_64 rng(detail::loop_seed(cfg.seed));
  for (std::size_t epoch = 0; epoch < cfg.retrain_epochs; ++epoch) {
    const Real lr = SearchConfig::decayed(cfg.lr_weights, cfg.lr_decay, cfg.retrain_decay_every, epoch);
    Real loss_sum = 0;
    std::size_t correct = 0;
    const auto batches = detail::epoch_batches(train.size(), cfg.batch_size, rng);
    for (std::size_t b = 0; b < batches.size(); ++b) {
      Batch batch = make_batch(train, batches[b]);
      Tape tape;
      Tensor logits = model.forward(tape, batch.x, Mode::train);
      Tensor loss = cross_entropy(tape, logits, batch.y);
      check_finite_loss(tape, loss, epoch, b);
      opt.zero_grad();
      tape.backward(loss);
      opt.step(lr);
      loss_sum += loss.item() * static_cast<Real>(batch.y.size());
      correct += count_correct(logits, batch.y);
    }
    EpochRecord rec{epoch + 1, loss_sum / static_cast<Real>(train.size()),
                    static_cast<Real>(correct) / static_cast<Real>(train.size()), 0, lr, 0};
    res.epochs.push_back(rec);
    res.train_loss = rec.train_loss;
    if (on_epoch) on_epoch(rec);
  }
  const EvalResult ev = evaluate(model, val);
  res.accuracy = ev.accuracy;
  res.val_loss = ev.loss;
  if (trained) trained->emplace(std::move(model));
  return res;
}

// ------------------------------------------------------------ sensitivity

struct SensitivityResult {
  std::size_t layer_id = 0;
  LayerBits base;
  LayerBits bumped;
  Real base_accuracy = 0;
  Real bumped_accuracy = 0;
  Real delta_accuracy = 0;
  Real base_bitops = 0;
  Real bumped_bitops = 0;
  Real delta_bitops = 0;
};

/// The architecture with one layer's bit-widths replaced.
inline Architecture bump_layer(const Architecture& base, std::size_t layer_id, int weight_bits,
                               int activation_bits) {
  Architecture out = base;
  auto it = std::find_if(out.layers.begin(), out.layers.end(),
                         [&](const LayerBits& l) { return l.layer_id == layer_id; });
  if (it == out.layers.end()) {
    throw Error("sensitivity: layer " + std::to_string(layer_id) + " is not a searchable layer");
  }
  if (weight_bits < kMinBits || weight_bits > kMaxBits || activation_bits < kMinBits ||
      activation_bits > kMaxBits) {
    throw Error("sensitivity: bumped bit-widths must lie in [1,8]");
  }
  it->weight_bits = weight_bits;
  it->activation_bits = activation_bits;
  return out;
}

/// Retrains the base architecture and the single-layer bump with the same
/// seed and budget and reports the differences (bumped minus base).
inline SensitivityResult sensitivity_probe(const NetworkSpec& spec, const Architecture& base,
                                           std::size_t layer_id, int weight_bits,
                                           int activation_bits, const SearchConfig& cfg,
                                           const Dataset& train, const Dataset& val) {
  const Architecture bumped = bump_layer(base, layer_id, weight_bits, activation_bits);
  SensitivityResult r;
  r.layer_id = layer_id;
  for (const auto& l : base.layers) {
    if (l.layer_id == layer_id) r.base = l;
  }
  for (const auto& l : bumped.layers) {
    if (l.layer_id == layer_id) r.bumped = l;
  }
  const RetrainResult a = retrain(spec, base, cfg, train, val);
  const RetrainResult b = retrain(spec, bumped, cfg, train, val);
  r.base_accuracy = a.accuracy;
  r.bumped_accuracy = b.accuracy;
  r.delta_accuracy = b.accuracy - a.accuracy;
  r.base_bitops = a.bitops;
  r.bumped_bitops = b.bitops;
  r.delta_bitops = b.bitops - a.bitops;
  return r;
}

}  // namespace edmips
