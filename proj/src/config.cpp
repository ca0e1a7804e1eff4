#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <cerrno>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "kflow/error.hpp"
#include "kflow/experiment.hpp"

namespace kflow::exp {

std::string to_string(Kind kind) {
  switch (kind) {
    case Kind::Swissroll: return "swissroll";
    case Kind::TrainCnn: return "train-cnn";
    case Kind::GradCheck: return "grad-check";
  }
  return "?";
}

Kind parse_kind(const std::string& s) {
  if (s == "swissroll") return Kind::Swissroll;
  if (s == "train-cnn") return Kind::TrainCnn;
  if (s == "grad-check") return Kind::GradCheck;
  throw Error(ErrorKind::InvalidConfig, "unknown experiment '" + s + "'");
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (auto t = trim(item); !t.empty()) out.push_back(t);
  return out;
}

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

bool parse(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  errno = 0;
  out = std::strtod(s.c_str(), &end);
  return errno == 0 && end == s.c_str() + s.size() && std::isfinite(out);
}

template <class Int>
bool parse_int(const std::string& s, Int& out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && ptr == s.data() + s.size();
}
bool parse(const std::string& s, std::size_t& out) { return parse_int(s, out); }

bool parse(const std::string& s, bool& out) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return out = true, true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return out = false, true;
  return false;
}

bool parse(const std::string& s, std::string& out) {
  out = s;
  return true;
}

bool parse(const std::string& s, std::vector<std::string>& out) {
  out = split_list(s);
  return true;
}

bool parse(const std::string& s, std::vector<double>& out) {
  out.clear();
  for (const auto& item : split_list(s)) {
    double v;
    if (!parse(item, v)) return false;
    out.push_back(v);
  }
  return true;
}

bool parse(const std::string& s, kf::Sampling& out) {
  if (s == "uniform") return out = kf::Sampling::Uniform, true;
  if (s == "class-balanced") return out = kf::Sampling::ClassBalanced, true;
  if (s == "class-covering") return out = kf::Sampling::ClassCovering, true;
  return false;
}

bool parse(const std::string& s, kf::Objective& out) {
  if (s == "e2") return out = kf::Objective::E2, true;
  if (s == "rho") return out = kf::Objective::Rho, true;
  return false;
}

bool parse(const std::string& s, Kind& out) {
  try {
    out = parse_kind(s);
    return true;
  } catch (const Error&) {
    return false;
  }
}

bool parse(const std::string& s, std::optional<double>& out) {
  if (s == "median") return out.reset(), true;
  double v;
  if (!parse(s, v)) return false;
  out = v;
  return true;
}

std::string show(double v) { return fmt(v); }
std::string show(std::size_t v) { return std::to_string(v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }
std::string show(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}
std::string show(const std::vector<double>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}
std::string show(kf::Sampling s) {
  switch (s) {
    case kf::Sampling::Uniform: return "uniform";
    case kf::Sampling::ClassBalanced: return "class-balanced";
    case kf::Sampling::ClassCovering: return "class-covering";
  }
  return "?";
}
std::string show(kf::Objective o) { return o == kf::Objective::E2 ? "e2" : "rho"; }
std::string show(Kind k) { return to_string(k); }
std::string show(const std::optional<double>& v) { return v ? fmt(*v) : "median"; }

struct Field {
  std::string key;  // "section.key" or "key"
  std::string doc;
  std::function<bool(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Access>
Field field(std::string key, std::string doc, Access access) {
  return {std::move(key), std::move(doc),
          [access](ExperimentConfig& c, const std::string& v) { return parse(v, access(c)); },
          [access](const ExperimentConfig& c) { return show(access(const_cast<ExperimentConfig&>(c))); }};
}

#define KF_FIELD(key, doc, member) field(key, doc, [](ExperimentConfig& c) -> auto& { return c.member; })

const std::vector<Field>& fields() {
  static const std::vector<Field> all = {
      KF_FIELD("experiment", "swissroll | train-cnn | grad-check", experiment),
      KF_FIELD("seed", "master seed; every random stream derives from it", seed),
      KF_FIELD("out_dir", "output directory", out_dir),

      KF_FIELD("data.dir", "directory holding the standard IDX file names", data.dir),
      KF_FIELD("data.train_images", "training images (default <dir>/train-images-idx3-ubyte)", data.train_images),
      KF_FIELD("data.train_labels", "training labels (default <dir>/train-labels-idx1-ubyte)", data.train_labels),
      KF_FIELD("data.test_images", "test images (default <dir>/t10k-images-idx3-ubyte)", data.test_images),
      KF_FIELD("data.test_labels", "test labels (default <dir>/t10k-labels-idx1-ubyte)", data.test_labels),
      KF_FIELD("data.shifted_images", "optional alternate test images, e.g. QMNIST", data.shifted_images),
      KF_FIELD("data.shifted_labels", "optional alternate test labels", data.shifted_labels),
      KF_FIELD("data.train_limit", "first N training samples (0 = all)", data.train_limit),
      KF_FIELD("data.test_limit", "first N test samples (0 = all)", data.test_limit),

      KF_FIELD("network.width_factor", "channel multiplier of the six-conv CNN", network.width_factor),
      KF_FIELD("network.batchnorm", "batch norm after every conv", network.batchnorm),
      KF_FIELD("network.dropout_conv", "dropout after conv activations (0 = off)", network.dropout_conv),
      KF_FIELD("network.dropout_dense", "dropout after dense activations (0 = off)", network.dropout_dense),

      KF_FIELD("kf.taps", "comma list of loss taps (empty = plain cross-entropy)", kf.taps),
      KF_FIELD("kf.lambdas", "per-tap weights, or one weight for every tap", kf.lambdas),
      KF_FIELD("kf.probe_taps", "extra taps for kf_probe / ratio columns", kf.probe_taps),
      KF_FIELD("kf.ce_weight", "cross-entropy weight", kf.ce_weight),
      KF_FIELD("kf.sampling", "uniform | class-balanced | class-covering", kf.sampling),
      KF_FIELD("kf.per_class", "half-batch samples per class under class-balanced", kf.per_class),
      KF_FIELD("kf.batch_size", "mini-batch size N_b", kf.batch_size),
      KF_FIELD("kf.gamma_init", "median (heuristic on the first batch) or a positive value", kf.gamma_init),
      KF_FIELD("kf.nugget_min", "smallest nugget rung used in K_cc solves", kf.nugget_min),
      KF_FIELD("kf.probe_splits", "fresh splits averaged by kf_probe", kf.probe_splits),
      KF_FIELD("kf.probe_heldout", "probe on the test set (false: training set)", kf.probe_heldout),

      KF_FIELD("optimizer.lr_start", "initial learning rate", optimizer.lr_start),
      KF_FIELD("optimizer.lr_end", "final learning rate (exponential decay)", optimizer.lr_end),
      KF_FIELD("optimizer.epochs", "training epochs", optimizer.epochs),
      KF_FIELD("optimizer.momentum", "heavy-ball momentum (0 = plain SGD)", optimizer.momentum),

      KF_FIELD("augment.enabled", "affine augmentation of training batches", augment.enabled),
      KF_FIELD("augment.p_identity", "probability of passing an image through", augment.policy.p_identity),
      KF_FIELD("augment.p_affine", "probability of a random affine map", augment.policy.p_affine),
      KF_FIELD("augment.max_translation", "pixels", augment.policy.max_translation),
      KF_FIELD("augment.max_rotation_deg", "degrees", augment.policy.max_rotation_deg),
      KF_FIELD("augment.max_shear", "shear factor", augment.policy.max_shear),

      KF_FIELD("swissroll.n_per_class", "points per spiral arm", swissroll.n_per_class),
      KF_FIELD("swissroll.turns", "spiral length in turns", swissroll.turns),
      KF_FIELD("swissroll.noise", "Gaussian noise std", swissroll.noise),
      KF_FIELD("swissroll.hidden", "hidden width of the 2-2 deformation MLP", swissroll.hidden),
      KF_FIELD("swissroll.steps", "kernel flow steps", swissroll.steps),
      KF_FIELD("swissroll.batch_size", "mini-batch size", swissroll.batch_size),
      KF_FIELD("swissroll.checkpoint_every", "steps between point-cloud dumps", swissroll.checkpoint_every),
      KF_FIELD("swissroll.objective", "e2 | rho", swissroll.objective),
      KF_FIELD("swissroll.lr_start", "initial learning rate", swissroll.lr_start),
      KF_FIELD("swissroll.lr_end", "final learning rate", swissroll.lr_end),
      KF_FIELD("swissroll.nugget_min", "smallest nugget rung used in K_cc solves", swissroll.nugget_min),
      KF_FIELD("swissroll.eval_splits", "fresh held-out splits per evaluation", swissroll.eval_splits),

      KF_FIELD("gradcheck.tol", "max relative error", gradcheck.tol),
      KF_FIELD("gradcheck.batch_size", "samples per toy batch", gradcheck.batch_size),
      KF_FIELD("gradcheck.step", "central-difference step", gradcheck.step),
  };
  return all;
}

#undef KF_FIELD

const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw Error(ErrorKind::InvalidConfig, "unknown config key '" + key + "'");
}

void assign(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const Field& f = find_field(key);
  if (!f.set(c, trim(value))) throw Error(ErrorKind::InvalidConfig, key + ": bad value '" + value + "'");
}

}  // namespace

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& why) { throw Error(ErrorKind::InvalidConfig, why); };
  if (!(optimizer.lr_end > 0.0) || optimizer.lr_start < optimizer.lr_end)
    fail("optimizer needs lr_start >= lr_end > 0");
  if (optimizer.epochs == 0) fail("optimizer.epochs must be >= 1");
  if (optimizer.momentum < 0.0 || optimizer.momentum >= 1.0) fail("optimizer.momentum must lie in [0, 1)");
  if (!(network.width_factor > 0.0)) fail("network.width_factor must be positive");
  for (double p : {network.dropout_conv, network.dropout_dense})
    if (p < 0.0 || p >= 1.0) throw Error(ErrorKind::InvalidProbability, "dropout probability must lie in [0, 1)");
  if (!kf.taps.empty() && kf.lambdas.size() != 1 && kf.lambdas.size() != kf.taps.size())
    fail("kf.lambdas needs one weight or one per tap");
  for (double l : kf.lambdas)
    if (l < 0.0) fail("kf.lambdas must be >= 0");
  if (kf.ce_weight < 0.0) fail("kf.ce_weight must be >= 0");
  if (kf.taps.empty() && !(kf.ce_weight > 0.0)) fail("no loss: empty kf.taps and zero kf.ce_weight");
  if (kf.batch_size < 2) fail("kf.batch_size must be >= 2");
  if (kf.gamma_init && !(*kf.gamma_init > 0.0)) fail("kf.gamma_init must be positive");
  if (kf.nugget_min < 0.0 || kf.nugget_min > 1e-3) fail("kf.nugget_min must lie in [0, 1e-3]");
  if (kf.probe_splits == 0) fail("kf.probe_splits must be >= 1");
  if (augment.enabled) augment.policy.validate();
  if (swissroll.n_per_class == 0) fail("swissroll.n_per_class must be >= 1");
  if (swissroll.batch_size < 2 || swissroll.batch_size > 2 * swissroll.n_per_class)
    fail("swissroll.batch_size must lie in [2, 2 n_per_class]");
  if (swissroll.checkpoint_every == 0) fail("swissroll.checkpoint_every must be >= 1");
  if (!(swissroll.lr_end > 0.0) || swissroll.lr_start < swissroll.lr_end) fail("swissroll needs lr_start >= lr_end > 0");
  if (swissroll.nugget_min < 0.0 || swissroll.nugget_min > 1e-3) fail("swissroll.nugget_min must lie in [0, 1e-3]");
  if (swissroll.eval_splits == 0) fail("swissroll.eval_splits must be >= 1");
  if (swissroll.noise < 0.0 || !(swissroll.turns > 0.0)) fail("swissroll needs noise >= 0 and turns > 0");
  if (!(gradcheck.tol > 0.0) || !(gradcheck.step > 0.0) || gradcheck.batch_size < 4)
    fail("gradcheck needs tol > 0, step > 0 and batch_size >= 4");
}

ExperimentConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  std::istringstream in(text);
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(ErrorKind::InvalidConfig, e.what());
  }
  std::set<std::string> sections;
  for (const auto& f : fields())
    if (auto dot = f.key.find('.'); dot != std::string::npos) sections.insert(f.key.substr(0, dot));

  ExperimentConfig c;
  for (const auto& [name, node] : tree) {
    if (node.empty()) {
      if (sections.contains(name) && node.data().empty()) continue;  // empty section
      assign(c, name, node.data());
      continue;
    }
    if (!sections.contains(name)) throw Error(ErrorKind::InvalidConfig, "unknown config section [" + name + "]");
    for (const auto& [key, value] : node) assign(c, name + "." + key, value.data());
  }
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw Error(ErrorKind::InvalidConfig, "override '" + assignment + "' lacks '='");
  assign(config, trim(assignment.substr(0, eq)), assignment.substr(eq + 1));
}

std::string to_ini(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    const auto dot = f.key.find('.');
    const std::string sec = dot == std::string::npos ? "" : f.key.substr(0, dot);
    const std::string key = dot == std::string::npos ? f.key : f.key.substr(dot + 1);
    if (sec != section) {
      out += "\n[" + sec + "]\n";
      section = sec;
    }
    const std::string value = f.get(config);
    out += key + (value.empty() ? " =\n" : " = " + value + "\n");
  }
  return out;
}

std::vector<std::pair<std::string, std::string>> documented_keys() {
  const ExperimentConfig defaults;
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& f : fields()) {
    const std::string value = f.get(defaults);
    out.emplace_back(f.key, f.doc + (value.empty() ? " (default: unset)" : " (default: " + value + ")"));
  }
  return out;
}

double lr_at(std::size_t step, std::size_t total_steps, double lr_start, double lr_end) {
  if (total_steps == 0 || step > total_steps)
    throw Error(ErrorKind::InvalidRange, "lr_at step " + std::to_string(step) + " of " + std::to_string(total_steps));
  if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw Error(ErrorKind::InvalidRange, "learning rates must be positive");
  if (step == 0) return lr_start;
  if (step == total_steps) return lr_end;
  return lr_start * std::pow(lr_end / lr_start, static_cast<double>(step) / static_cast<double>(total_steps));
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream, std::uint64_t sub) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sub)};
  return std::mt19937_64(seq);
}

}  // namespace kflow::exp
