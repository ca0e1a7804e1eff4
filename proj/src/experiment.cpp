#include "kflow/experiment.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>

#include "kflow/error.hpp"
#include "kflow/kernels.hpp"
#include "kflow/metrics.hpp"
#include "kflow/nn.hpp"

namespace kflow::exp {

namespace {

// random streams derived from the master seed
enum Stream : std::uint64_t { kInit = 0, kBatch, kDropout, kAugment, kProbe, kGammaBatch, kGammaDropout, kData, kEval };

std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

class Csv {
 public:
  Csv(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
    if (!out_) throw Error(ErrorKind::Io, "cannot write " + path.string());
    row(header);
  }
  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out || !(out << text)) throw Error(ErrorKind::Io, "cannot write " + path.string());
}

linalg::NuggetPolicy nugget_policy(double nugget_min) {
  linalg::NuggetPolicy policy;
  if (nugget_min <= 0.0) return policy;
  std::vector<double> ladder{nugget_min};
  for (double rung : policy.ladder)
    if (rung > nugget_min) ladder.push_back(rung);
  policy.ladder = std::move(ladder);
  return policy;
}

double elapsed(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

// ---- swissroll ------------------------------------------------------------------

struct HeldOut {
  double e2;        // median over splits
  double accuracy;  // sign agreement of the half-batch interpolant on the other half
};

HeldOut evaluate_kernel(kernels::KernelSpec& spec, const data::Dataset& test, std::size_t batch, std::size_t splits,
                        const linalg::NuggetPolicy& policy, std::mt19937_64 rng) {
  kf::KFLossConfig cfg;
  cfg.batch_size = batch;
  const Tensor features = kf::deform(spec, test.x);
  std::vector<double> e2s;
  std::size_t correct = 0, total = 0;
  for (std::size_t s = 0; s < splits; ++s) {
    const kf::BatchSplit split = kf::sample_split(test, cfg, rng);
    const Tensor yb = test.labels(split.batch_indices);
    const Tensor yc = yb.gather(split.half_indices);
    ad::Tape tape;
    ad::Var f = tape.constant(features.gather(split.batch_indices));
    kernels::GramPair g = kernels::gram(f, tape.constant(spec.log_gamma), split.half_indices);
    e2s.push_back(kf::e2_loss(g, yb, yc, policy).item());
    const Tensor pred = kernels::interpolate(g.k_bc, g.k_cc, tape.constant(yc), policy).value();
    std::vector<bool> in_half(batch, false);
    for (std::size_t h : split.half_indices) in_half[h] = true;
    for (std::size_t i = 0; i < batch; ++i) {
      if (in_half[i]) continue;
      ++total;
      if ((pred.data[i] > 0.0) == (yb.data[i] > 0.0)) ++correct;
    }
  }
  std::sort(e2s.begin(), e2s.end());
  const std::size_t mid = e2s.size() / 2;
  const double median = e2s.size() % 2 ? e2s[mid] : 0.5 * (e2s[mid - 1] + e2s[mid]);
  return {median, total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0};
}

RunRecord run_swissroll(const ExperimentConfig& cfg, RunRecord rec) {
  const auto& sw = cfg.swissroll;
  auto data_rng = stream_rng(cfg.seed, kData);
  const data::Dataset train = data::swissroll(sw.n_per_class, sw.turns, sw.noise, data_rng);
  const data::Dataset test = data::swissroll(sw.n_per_class, sw.turns, sw.noise, data_rng);
  auto init_rng = stream_rng(cfg.seed, kInit);
  kernels::KernelSpec spec = kernels::KernelSpec::deformation(nn::build(nn::mlp_spec(2, {sw.hidden}, 2), init_rng), 1.0);

  const linalg::NuggetPolicy policy = nugget_policy(sw.nugget_min);
  if (cfg.kf.gamma_init) {
    spec.set_gamma(*cfg.kf.gamma_init);
  } else {
    kf::KFLossConfig first;
    first.batch_size = sw.batch_size;
    auto gamma_rng = stream_rng(cfg.seed, kGammaBatch);
    const kf::BatchSplit split = kf::sample_split(train, first, gamma_rng);
    spec.set_gamma(kernels::median_gamma(kf::deform(spec, train.x.gather(split.batch_indices))));
  }

  const double gamma0 = spec.gamma();
  const HeldOut before = evaluate_kernel(spec, test, sw.batch_size, sw.eval_splits, policy, stream_rng(cfg.seed, kEval));

  kf::FitOptions options;
  options.steps = sw.steps;
  options.batch_size = sw.batch_size;
  options.checkpoint_every = sw.checkpoint_every;
  options.nugget = policy;
  const std::size_t last = std::max<std::size_t>(sw.steps, 2) - 1;
  options.lr = [&](std::size_t step) { return lr_at(step, last, sw.lr_start, sw.lr_end); };
  auto fit_rng = stream_rng(cfg.seed, kBatch);
  kf::FitResult fit = kf::kernel_flow_fit(train, std::move(spec), sw.objective, options, fit_rng);

  const HeldOut after = evaluate_kernel(fit.spec, test, sw.batch_size, sw.eval_splits, policy, stream_rng(cfg.seed, kEval));

  const std::string name = fit.spec.name;
  {
    Csv traj(rec.out_dir / "trajectory.csv", {"step", "lr", "loss_total", "loss_ce", "loss_kf_" + name, "gamma_" + name});
    for (const auto& s : fit.trajectory) traj.row({std::to_string(s.step), num(s.lr), num(s.loss), "0", num(s.loss), num(s.gamma)});
  }
  for (const auto& cloud : fit.clouds) {
    char file[64];
    std::snprintf(file, sizeof file, "points_step_%05zu.csv", cloud.step);
    Csv pts(rec.out_dir / file, {"x", "y", "label", "step"});
    for (std::size_t i = 0; i < train.size(); ++i)
      pts.row({num(cloud.points.data[2 * i]), num(cloud.points.data[2 * i + 1]), num(train.y(i, 0)),
               std::to_string(cloud.step)});
  }
  {
    Csv summary(rec.out_dir / "summary.csv", {"stage", "heldout_e2", "interpolant_accuracy", "gamma"});
    summary.row({"initial", num(before.e2), num(before.accuracy), num(gamma0)});
    summary.row({"final", num(after.e2), num(after.accuracy), num(fit.spec.gamma())});
  }
  auto& def = std::get<kernels::Deformation>(fit.spec.source);
  std::map<std::string, Tensor> archive;
  for (const auto& [pname, t] : def.net.params) archive["deform." + pname] = t;
  archive[kernels::log_gamma_name(fit.spec)] = fit.spec.log_gamma;
  rec.checkpoint = rec.out_dir / "checkpoint.kfa";
  nn::save_archive(rec.checkpoint, archive);

  rec.summary = {{"initial_e2", before.e2},
                 {"final_e2", after.e2},
                 {"e2_ratio", before.e2 > 0.0 ? after.e2 / before.e2 : 0.0},
                 {"initial_accuracy", before.accuracy},
                 {"final_accuracy", after.accuracy},
                 {"checkpoints", static_cast<double>(fit.clouds.size())}};
  return rec;
}

// ---- train-cnn ------------------------------------------------------------------

std::string resolve(const std::string& explicit_path, const std::string& dir, const char* standard) {
  if (!explicit_path.empty()) return explicit_path;
  return (std::filesystem::path(dir) / standard).string();
}

data::Dataset head(const data::Dataset& d, std::size_t limit) {
  if (limit == 0 || limit >= d.size()) return d;
  std::vector<std::size_t> rows(limit);
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return d.subset(rows);
}

std::vector<std::string> metrics_header(const std::vector<std::string>& taps) {
  std::vector<std::string> h{"epoch", "train_error", "test_error", "test_error_shifted"};
  for (const auto& t : taps) h.push_back("kf_probe_" + t);
  for (const auto& t : taps) h.push_back("ratio_" + t);
  return h;
}

std::vector<std::string> metrics_cells(const MetricsRow& r, const std::vector<std::string>& taps) {
  std::vector<std::string> c{std::to_string(r.epoch), num(r.train_error), num(r.test_error),
                             r.test_error_shifted ? num(*r.test_error_shifted) : ""};
  for (const auto& t : taps) c.push_back(num(r.kf_probe.at(t)));
  for (const auto& t : taps) c.push_back(num(r.ratio.at(t)));
  return c;
}

RunRecord run_train_cnn(const ExperimentConfig& cfg, RunRecord rec) {
  const auto& d = cfg.data;
  const data::Dataset train = head(data::load_idx(resolve(d.train_images, d.dir, "train-images-idx3-ubyte"),
                                                  resolve(d.train_labels, d.dir, "train-labels-idx1-ubyte")),
                                   d.train_limit);
  const data::Dataset test = head(data::load_idx(resolve(d.test_images, d.dir, "t10k-images-idx3-ubyte"),
                                                 resolve(d.test_labels, d.dir, "t10k-labels-idx1-ubyte")),
                                  d.test_limit);
  std::optional<data::Dataset> shifted;
  if (!d.shifted_images.empty() || !d.shifted_labels.empty())
    shifted = head(data::load_idx(d.shifted_images, d.shifted_labels), d.test_limit);

  nn::NetworkSpec spec = nn::table1_spec(cfg.network.width_factor, cfg.network.batchnorm);
  if (cfg.network.dropout_conv > 0.0 || cfg.network.dropout_dense > 0.0)
    spec = nn::dropout_baseline(spec, cfg.network.dropout_conv, cfg.network.dropout_dense);
  auto init_rng = stream_rng(cfg.seed, kInit);
  nn::NetworkState net = nn::build(spec, init_rng);

  kf::KFLossConfig loss;
  loss.ce_weight = cfg.kf.ce_weight;
  loss.sampling = cfg.kf.sampling;
  loss.per_class = cfg.kf.per_class;
  loss.batch_size = cfg.kf.batch_size;
  loss.nugget = nugget_policy(cfg.kf.nugget_min);
  for (std::size_t i = 0; i < cfg.kf.taps.size(); ++i) {
    const std::string& tap = cfg.kf.taps[i];
    if (!spec.taps.contains(tap)) throw Error(ErrorKind::UnknownTap, "network has no tap '" + tap + "'");
    const double weight = cfg.kf.lambdas.empty() ? 1.0 : cfg.kf.lambdas.size() == 1 ? cfg.kf.lambdas[0] : cfg.kf.lambdas[i];
    loss.taps.push_back({kernels::KernelSpec::tap(tap), weight});
  }
  loss.validate();
  std::vector<kf::TapLoss> probe_only;
  for (const auto& tap : cfg.kf.probe_taps) {
    if (!spec.taps.contains(tap)) throw Error(ErrorKind::UnknownTap, "network has no tap '" + tap + "'");
    if (!std::any_of(loss.taps.begin(), loss.taps.end(), [&](const kf::TapLoss& t) { return t.kernel.name == tap; }))
      probe_only.push_back({kernels::KernelSpec::tap(tap), 0.0});
  }
  auto probe_config = [&] {
    kf::KFLossConfig p = loss;
    p.sampling = kf::Sampling::Uniform;
    p.taps.insert(p.taps.end(), probe_only.begin(), probe_only.end());
    return p;
  };

  // bandwidths: fixed value or median heuristic on a first training batch
  {
    kf::KFLossConfig all = probe_config();
    if (cfg.kf.gamma_init) {
      for (auto& t : loss.taps) t.kernel.set_gamma(*cfg.kf.gamma_init);
      for (auto& t : probe_only) t.kernel.set_gamma(*cfg.kf.gamma_init);
    } else if (!all.taps.empty()) {
      auto batch_rng = stream_rng(cfg.seed, kGammaBatch);
      auto drop_rng = stream_rng(cfg.seed, kGammaDropout);
      const kf::BatchSplit split = kf::sample_split(train, loss, batch_rng);
      nn::NetworkState scratch = net;
      ad::Tape tape;
      ad::Var x = tape.constant(train.x.gather(split.batch_indices));
      const nn::ForwardResult fwd = nn::forward_with_taps(scratch, tape, x, &drop_rng);
      auto init = [&](kf::TapLoss& t) {
        t.kernel.set_gamma(kernels::median_gamma(kernels::feature_map(t.kernel, x, fwd.taps).value()));
      };
      for (auto& t : loss.taps) init(t);
      for (auto& t : probe_only) init(t);
    }
  }

  std::vector<std::string> probe_names;
  for (const auto& t : probe_config().taps) probe_names.push_back(t.kernel.name);
  std::sort(probe_names.begin(), probe_names.end());

  std::vector<std::string> traj_header{"step", "lr", "loss_total", "loss_ce"};
  for (const auto& t : loss.taps) traj_header.push_back("loss_kf_" + t.kernel.name);
  for (const auto& t : loss.taps) traj_header.push_back("gamma_" + t.kernel.name);
  Csv traj(rec.out_dir / "trajectory.csv", traj_header);
  Csv metrics_csv(rec.out_dir / "metrics.csv", metrics_header(probe_names));

  const bool plain = loss.taps.empty();
  const std::size_t steps_per_epoch = std::max<std::size_t>(1, train.size() / loss.batch_size);
  const std::size_t total_steps = cfg.optimizer.epochs * steps_per_epoch;
  const std::size_t last = std::max<std::size_t>(total_steps, 2) - 1;
  auto batch_rng = stream_rng(cfg.seed, kBatch);
  auto dropout_rng = stream_rng(cfg.seed, kDropout);
  auto augment_rng = stream_rng(cfg.seed, kAugment);
  std::map<std::string, Tensor> velocity;

  auto sgd = [&](Tensor& p, const Tensor& g, const std::string& key, double lr) {
    if (cfg.optimizer.momentum == 0.0) {
      for (std::size_t k = 0; k < p.size(); ++k) p.data[k] -= lr * g.data[k];
      return;
    }
    auto [it, fresh] = velocity.try_emplace(key, Tensor(p.shape, 0.0));
    Tensor& v = it->second;
    for (std::size_t k = 0; k < p.size(); ++k) {
      v.data[k] = cfg.optimizer.momentum * v.data[k] + g.data[k];
      p.data[k] -= lr * v.data[k];
    }
  };

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.optimizer.epochs; ++epoch) {
    net.mode = nn::Mode::Train;
    for (std::size_t s = 0; s < steps_per_epoch; ++s, ++step) {
      const double lr = lr_at(step, last, cfg.optimizer.lr_start, cfg.optimizer.lr_end);
      const kf::BatchSplit split = kf::sample_split(train, loss, batch_rng);
      Tensor xb = train.x.gather(split.batch_indices);
      if (cfg.augment.enabled) xb = data::augment(xb, cfg.augment.policy, augment_rng);
      const Tensor yb = train.labels(split.batch_indices);

      ad::Tape tape;
      std::vector<std::string> cells;
      ad::Var total;
      if (plain) {
        const nn::ForwardResult fwd = nn::forward_with_taps(net, tape, tape.constant(xb), &dropout_rng);
        total = ad::softmax_cross_entropy(fwd.output, yb);
        cells = {std::to_string(step), num(lr), num(total.item()), num(total.item())};
      } else {
        const kf::LossTerms terms = kf::combined_loss(net, tape, xb, yb, split.half_indices, loss, &dropout_rng);
        total = terms.total;
        cells = {std::to_string(step), num(lr), num(total.item()), num(terms.ce.item())};
        for (const auto& t : loss.taps) cells.push_back(num(terms.kf.at(t.kernel.name).item()));
      }
      if (!std::isfinite(total.item())) {
        traj.row(cells);
        throw Error(ErrorKind::NumericalFailure, "non-finite loss at step " + std::to_string(step));
      }
      const ad::Gradients grads = tape.backward(total);
      for (auto& [name, p] : net.params) sgd(p, grads[name], name, lr);
      for (auto& t : loss.taps) {
        const std::string key = kernels::log_gamma_name(t.kernel);
        sgd(t.kernel.log_gamma, grads[key], key, lr);
        cells.push_back(num(t.kernel.gamma()));
      }
      traj.row(cells);
    }

    net.mode = nn::Mode::Eval;
    MetricsRow row;
    row.epoch = epoch;
    row.train_error = metrics::classification_error(net, train);
    row.test_error = metrics::classification_error(net, test);
    if (shifted) row.test_error_shifted = metrics::classification_error(net, *shifted);
    if (!probe_names.empty()) {
      kf::KFLossConfig probe = probe_config();
      const data::Dataset& probe_set = cfg.kf.probe_heldout ? test : train;
      auto probe_rng = stream_rng(cfg.seed, kProbe, epoch);
      row.kf_probe = metrics::kf_probe(net, probe_set, probe, cfg.kf.probe_splits, probe_rng);
      for (const auto& [tap, report] : metrics::batched_distance_ratio(net, probe_set, probe)) row.ratio[tap] = report.ratio;
    }
    metrics_csv.row(metrics_cells(row, probe_names));
    rec.metrics.push_back(std::move(row));
  }

  std::map<std::string, Tensor> archive = net.params;
  for (const auto& [name, t] : net.buffers) archive[name] = t;
  for (const auto& t : loss.taps) archive[kernels::log_gamma_name(t.kernel)] = t.kernel.log_gamma;
  rec.checkpoint = rec.out_dir / "checkpoint.kfa";
  nn::save_archive(rec.checkpoint, archive);
  const MetricsRow& final_row = rec.metrics.back();
  rec.summary = {{"train_error", final_row.train_error},
                 {"test_error", final_row.test_error},
                 {"generalization_gap", final_row.test_error - final_row.train_error}};
  return rec;
}

// ---- grad-check -----------------------------------------------------------------

// Scales the median-heuristic gamma so K_cc stays well conditioned under finite differences.
constexpr double kGradCheckSharpening = 16.0;

struct CheckCase {
  std::string name;
  ad::GradCheckReport report;
};

Tensor random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % classes);
  std::shuffle(labels.begin(), labels.end(), rng);
  return Tensor::from_matrix(data::one_hot(labels, classes));
}

void randomize_biases(nn::NetworkState& net, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (auto& [name, t] : net.params) {
    const bool shift = name.ends_with(".bias") || name.ends_with(".beta");
    const bool scale = name.ends_with(".gamma");
    if (!shift && !scale) continue;
    for (double& v : t.data) v = scale ? 1.0 + u(rng) : u(rng);
  }
}

std::vector<CheckCase> gradient_suite(const ExperimentConfig& cfg) {
  const auto& gc = cfg.gradcheck;
  ad::GradCheckOptions options;
  options.step = gc.step;
  std::vector<CheckCase> cases;
  auto rng = stream_rng(cfg.seed, kInit);
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t n = gc.batch_size;
  std::vector<std::size_t> half(n / 2);
  for (std::size_t i = 0; i < half.size(); ++i) half[i] = 2 * i + 1;

  // KF-regularized toy CNN: two taps, batch norm and a frozen dropout mask
  {
    nn::NetworkSpec spec;
    spec.input_shape = {6, 6, 1};
    spec.add(nn::Conv{3, 3, ad::Padding::Valid}).add(nn::BatchNorm{}).add(nn::Relu{}).tap("c1");
    spec.add(nn::Conv{3, 3, ad::Padding::Same}).add(nn::Relu{}).add(nn::MaxPool2x2{}).tap("c2");
    spec.add(nn::Dense{8}).add(nn::Relu{}).add(nn::Dropout{0.3}).add(nn::Dense{3}).add(nn::SoftmaxHead{});
    nn::NetworkState net = nn::build(spec, rng);
    randomize_biases(net, rng);
    Tensor x({n, 6, 6, 1});
    for (double& v : x.data) v = normal(rng);
    const Tensor y = random_labels(n, 3, rng);

    kf::KFLossConfig loss;
    loss.batch_size = n;
    loss.taps = {{kernels::KernelSpec::tap("c1"), 1.0}, {kernels::KernelSpec::tap("c2"), 1.0}};
    const std::uint64_t mask_seed = cfg.seed + 17;
    {
      ad::Tape tape;
      std::mt19937_64 frozen(mask_seed);
      ad::Var xv = tape.constant(x);
      const nn::ForwardResult fwd = nn::forward_with_taps(net, tape, xv, &frozen);
      for (auto& t : loss.taps)
        t.kernel.set_gamma(kGradCheckSharpening * kernels::median_gamma(kernels::feature_map(t.kernel, xv, fwd.taps).value()));
    }
    std::vector<ad::ParamRef> params = net.param_refs();
    for (auto& t : loss.taps) params.push_back({kernels::log_gamma_name(t.kernel), &t.kernel.log_gamma});
    ad::Program f = [&](ad::Tape& tape) {
      std::mt19937_64 frozen(mask_seed);
      return kf::combined_loss(net, tape, x, y, half, loss, &frozen).total;
    };
    cases.push_back({"cnn_kf_two_taps", ad::grad_check(f, params, gc.tol, options)});
  }

  // deformation kernel, e2 and rho objectives
  for (kf::Objective objective : {kf::Objective::E2, kf::Objective::Rho}) {
    kernels::KernelSpec spec = kernels::KernelSpec::deformation(nn::build(nn::mlp_spec(2, {6}, 2), rng), 0.5);
    randomize_biases(std::get<kernels::Deformation>(spec.source).net, rng);
    // jittered grid: well separated points keep K_cc well conditioned
    Tensor x({n, 2});
    const std::size_t side = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
    for (std::size_t i = 0; i < n; ++i) {
      x.data[2 * i] = static_cast<double>(i % side) - 0.5 * static_cast<double>(side - 1) + 0.15 * normal(rng);
      x.data[2 * i + 1] = static_cast<double>(i / side) - 0.5 * static_cast<double>(side - 1) + 0.15 * normal(rng);
    }
    Tensor y({n, 1});
    for (std::size_t i = 0; i < n; ++i) y.data[i] = x.data[2 * i] * x.data[2 * i + 1] > 0.0 ? 1.0 : -1.0;
    spec.set_gamma(kGradCheckSharpening * kernels::median_gamma(kf::deform(spec, x)));
    const Tensor yc = y.gather(half);
    // The output bias translates every feature, so its exact gradient is zero and
    // central differences only see roundoff. It is checked against zero instead.
    const std::string output_bias = "deform.dense2.bias";
    std::vector<ad::ParamRef> params;
    for (const auto& p : std::get<kernels::Deformation>(spec.source).net.param_refs("deform."))
      if (p.name != output_bias) params.push_back(p);
    params.push_back({kernels::log_gamma_name(spec), &spec.log_gamma});
    ad::Program f = [&](ad::Tape& tape) {
      ad::Var lg = tape.variable(spec.log_gamma, kernels::log_gamma_name(spec));
      ad::Var features = kernels::feature_map(spec, tape.constant(x));
      kernels::GramPair g = kernels::gram(features, lg, half);
      return objective == kf::Objective::E2 ? kf::e2_loss(g, y, yc) : kf::rho_loss(g, y, yc);
    };
    ad::GradCheckReport report = ad::grad_check(f, params, gc.tol, options);
    {
      ad::Tape tape;
      const ad::Var loss = f(tape);
      const double scale = std::max(1.0, std::abs(loss.value().data[0]));
      const ad::Gradients grads = tape.backward(loss);
      ad::ParamCheck zero{output_bias + " (zero)"};
      for (std::size_t i = 0; i < grads[output_bias].data.size(); ++i) {
        const double g = grads[output_bias].data[i];
        if (std::abs(g) / scale >= zero.max_rel_error) zero = {zero.name, std::abs(g) / scale, i, g, 0.0};
      }
      report.params.push_back(zero);
      report.passed = report.passed && zero.max_rel_error <= gc.tol;
    }
    cases.push_back({objective == kf::Objective::E2 ? "deformation_e2" : "deformation_rho", std::move(report)});
  }
  return cases;
}

RunRecord run_grad_check(const ExperimentConfig& cfg, RunRecord rec) {
  const std::vector<CheckCase> cases = gradient_suite(cfg);
  Csv out(rec.out_dir / "gradcheck.csv", {"case", "param", "max_rel_error", "analytic", "numeric", "passed"});
  rec.passed = true;
  double worst = 0.0;
  for (const auto& c : cases) {
    for (const auto& p : c.report.params)
      out.row({c.name, p.name, num(p.max_rel_error), num(p.analytic), num(p.numeric),
               p.max_rel_error <= c.report.tolerance ? "true" : "false"});
    if (!c.report.deterministic) out.row({c.name, "(determinism)", "", "", "", "false"});
    rec.passed = rec.passed && c.report.passed;
    worst = std::max(worst, c.report.max_rel_error());
  }
  rec.summary = {{"max_rel_error", worst}, {"passed", rec.passed ? 1.0 : 0.0}};
  return rec;
}

}  // namespace

RunRecord run(const ExperimentConfig& config) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.config = config;
  rec.out_dir = config.out_dir;
  std::filesystem::create_directories(rec.out_dir);
  write_text(rec.out_dir / "config.ini", to_ini(config));
  switch (config.experiment) {
    case Kind::Swissroll: rec = run_swissroll(config, std::move(rec)); break;
    case Kind::TrainCnn: rec = run_train_cnn(config, std::move(rec)); break;
    case Kind::GradCheck: rec = run_grad_check(config, std::move(rec)); break;
  }
  rec.wall_seconds = elapsed(start);
  return rec;
}

std::vector<CompareRow> compare(const std::vector<CompareEntry>& entries, const std::vector<std::uint64_t>& seeds,
                                const std::filesystem::path& out_dir) {
  if (entries.empty() || seeds.empty()) throw Error(ErrorKind::InvalidConfig, "compare needs at least one config and one seed");
  std::set<std::string> labels;
  for (const auto& e : entries) {
    if (e.config.experiment != Kind::TrainCnn)
      throw Error(ErrorKind::InvalidConfig, "compare runs train-cnn configs, '" + e.label + "' is " + to_string(e.config.experiment));
    if (!labels.insert(e.label).second) throw Error(ErrorKind::InvalidConfig, "duplicate compare label '" + e.label + "'");
  }
  std::filesystem::create_directories(out_dir);

  std::vector<CompareRow> rows;
  std::set<std::string> ratio_taps;
  for (const auto& e : entries) {
    CompareRow row;
    row.label = e.label;
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = e.config;
      cfg.seed = seed;
      cfg.out_dir = (out_dir / e.label / ("seed" + std::to_string(seed))).string();
      try {
        const RunRecord rec = run(cfg);
        const MetricsRow& last = rec.metrics.back();
        row.seeds.push_back(seed);
        row.test_errors.push_back(last.test_error);
        row.generalization_gaps.push_back(last.test_error - last.train_error);
        row.final_ratios.push_back(last.ratio);
        for (const auto& [tap, v] : last.ratio) ratio_taps.insert(tap);
      } catch (const std::exception& ex) {
        row.failures.push_back("seed " + std::to_string(seed) + ": " + ex.what());
      }
    }
    const auto& errs = row.test_errors;
    if (!errs.empty()) {
      const double n = static_cast<double>(errs.size());
      row.mean = std::accumulate(errs.begin(), errs.end(), 0.0) / n;
      double ss = 0.0;
      for (double v : errs) ss += (v - row.mean) * (v - row.mean);
      row.stddev = errs.size() > 1 ? std::sqrt(ss / (n - 1.0)) : 0.0;
      std::vector<double> sorted = errs;
      std::sort(sorted.begin(), sorted.end());
      const std::size_t mid = sorted.size() / 2;
      row.median = sorted.size() % 2 ? sorted[mid] : 0.5 * (sorted[mid - 1] + sorted[mid]);
    }
    rows.push_back(std::move(row));
  }

  Csv summary(out_dir / "compare.csv", {"label", "runs", "failures", "mean_test_error", "std_test_error", "median_test_error"});
  std::vector<std::string> header{"label", "seed", "test_error", "generalization_gap"};
  for (const auto& tap : ratio_taps) header.push_back("ratio_" + tap);
  Csv runs(out_dir / "runs.csv", header);
  for (const auto& r : rows) {
    summary.row({r.label, std::to_string(r.test_errors.size()), std::to_string(r.failures.size()), num(r.mean),
                 num(r.stddev), num(r.median)});
    for (std::size_t i = 0; i < r.seeds.size(); ++i) {
      std::vector<std::string> cells{r.label, std::to_string(r.seeds[i]), num(r.test_errors[i]),
                                     num(r.generalization_gaps[i])};
      for (const auto& tap : ratio_taps) {
        auto it = r.final_ratios[i].find(tap);
        cells.push_back(it == r.final_ratios[i].end() ? "" : num(it->second));
      }
      runs.row(cells);
    }
  }
  return rows;
}

}  // namespace kflow::exp
