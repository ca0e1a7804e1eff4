#include "kflow/nn.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "kflow/error.hpp"

namespace kflow::nn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

std::string kind_prefix(const LayerKind& kind) {
  return std::visit(overloaded{
                        [](const Conv&) { return std::string("conv"); },
                        [](const Relu&) { return std::string("relu"); },
                        [](const MaxPool2x2&) { return std::string("pool"); },
                        [](const AvgPoolGlobal&) { return std::string("avgpool"); },
                        [](const Dense&) { return std::string("dense"); },
                        [](const BatchNorm&) { return std::string("bn"); },
                        [](const Dropout&) { return std::string("dropout"); },
                        [](const SoftmaxHead&) { return std::string("head"); },
                    },
                    kind);
}

[[noreturn]] void invalid(std::size_t index, const LayerSpec& layer, const std::string& why) {
  throw Error(ErrorKind::InvalidSpec, "layer " + std::to_string(index) + " (" + layer.name + "): " + why);
}

std::size_t scaled(double channels, double width) {
  return static_cast<std::size_t>(std::max(1L, std::lround(channels * width)));
}

}  // namespace

NetworkSpec& NetworkSpec::add(LayerKind kind, std::string name) {
  if (name.empty()) {
    const std::string prefix = kind_prefix(kind);
    std::size_t ordinal = 1;
    for (const auto& l : layers)
      if (kind_prefix(l.kind) == prefix) ++ordinal;
    name = prefix + std::to_string(ordinal);
  }
  layers.push_back({std::move(name), std::move(kind)});
  return *this;
}

NetworkSpec& NetworkSpec::tap(const std::string& name) {
  if (layers.empty()) throw Error(ErrorKind::InvalidSpec, "tap '" + name + "' before any layer");
  if (!taps.emplace(name, layers.size() - 1).second)
    throw Error(ErrorKind::InvalidSpec, "duplicate tap name '" + name + "'");
  return *this;
}

std::vector<Shape> NetworkSpec::infer_shapes() const {
  if (input_shape.empty() || shape_size(input_shape) == 0)
    throw Error(ErrorKind::InvalidSpec, "empty input shape");
  std::set<std::string> names;
  std::vector<Shape> shapes;
  Shape cur = input_shape;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& layer = layers[i];
    if (!names.insert(layer.name).second) invalid(i, layer, "duplicate layer name");
    std::visit(overloaded{
                   [&](const Conv& c) {
                     if (cur.size() != 3) invalid(i, layer, "conv needs an HxWxC input, got " + shape_string(cur));
                     if (c.filters == 0 || c.kernel == 0) invalid(i, layer, "zero filters or kernel size");
                     if (c.padding == ad::Padding::Valid) {
                       if (cur[0] < c.kernel || cur[1] < c.kernel)
                         invalid(i, layer, "kernel larger than input " + shape_string(cur));
                       cur = {cur[0] - c.kernel + 1, cur[1] - c.kernel + 1, c.filters};
                     } else {
                       cur = {cur[0], cur[1], c.filters};
                     }
                   },
                   [&](const Relu&) {},
                   [&](const MaxPool2x2&) {
                     if (cur.size() != 3 || cur[0] < 2 || cur[1] < 2)
                       invalid(i, layer, "max pool needs an HxWxC input of at least 2x2, got " + shape_string(cur));
                     cur = {cur[0] / 2, cur[1] / 2, cur[2]};
                   },
                   [&](const AvgPoolGlobal&) {
                     if (cur.size() != 3) invalid(i, layer, "average pool needs an HxWxC input");
                     cur = {cur[2]};
                   },
                   [&](const Dense& d) {
                     if (d.out == 0) invalid(i, layer, "dense with zero outputs");
                     cur = {d.out};
                   },
                   [&](const BatchNorm&) {},
                   [&](const Dropout& d) {
                     if (!(d.p >= 0.0 && d.p < 1.0))
                       throw Error(ErrorKind::InvalidProbability,
                                   "layer " + std::to_string(i) + " (" + layer.name + "): dropout probability " +
                                       std::to_string(d.p) + " outside [0,1)");
                   },
                   [&](const SoftmaxHead&) {
                     if (cur.size() != 1) invalid(i, layer, "softmax head needs a vector input");
                   },
               },
               layer.kind);
    shapes.push_back(cur);
  }
  for (const auto& [name, index] : taps) {
    if (index >= layers.size())
      throw Error(ErrorKind::InvalidSpec, "tap '" + name + "' points past the last layer");
  }
  return shapes;
}

Shape NetworkSpec::output_shape() const {
  auto shapes = infer_shapes();
  return shapes.empty() ? input_shape : shapes.back();
}

Shape NetworkSpec::tap_shape(const std::string& tap) const {
  auto it = taps.find(tap);
  if (it == taps.end()) throw Error(ErrorKind::UnknownTap, "no tap named '" + tap + "'");
  return infer_shapes()[it->second];
}

std::size_t NetworkState::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

std::vector<ad::ParamRef> NetworkState::param_refs(const std::string& prefix) {
  std::vector<ad::ParamRef> refs;
  for (auto& [name, t] : params) refs.push_back({prefix + name, &t});
  return refs;
}

NetworkState build(const NetworkSpec& spec, std::mt19937_64& rng) {
  const auto shapes = spec.infer_shapes();
  NetworkState net;
  net.spec = spec;
  Shape cur = spec.input_shape;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    auto he = [&](Shape shape, std::size_t fan_in) {
      std::normal_distribution<double> nd(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
      Tensor t(std::move(shape));
      for (double& v : t.data) v = nd(rng);
      return t;
    };
    std::visit(overloaded{
                   [&](const Conv& c) {
                     const std::size_t cin = cur[2];
                     net.params[layer.name + ".weight"] = he({c.kernel, c.kernel, cin, c.filters}, c.kernel * c.kernel * cin);
                     net.params[layer.name + ".bias"] = Tensor({c.filters}, 0.0);
                   },
                   [&](const Dense& d) {
                     const std::size_t fan_in = shape_size(cur);
                     net.params[layer.name + ".weight"] = he({fan_in, d.out}, fan_in);
                     net.params[layer.name + ".bias"] = Tensor({d.out}, 0.0);
                   },
                   [&](const BatchNorm&) {
                     const std::size_t ch = cur.back();
                     net.params[layer.name + ".gamma"] = Tensor({ch}, 1.0);
                     net.params[layer.name + ".beta"] = Tensor({ch}, 0.0);
                     net.buffers[layer.name + ".running_mean"] = Tensor({ch}, 0.0);
                     net.buffers[layer.name + ".running_var"] = Tensor({ch}, 1.0);
                   },
                   [](const auto&) {},
               },
               layer.kind);
    cur = shapes[i];
  }
  return net;
}

ForwardResult forward_with_taps(NetworkState& net, ad::Tape& tape, const ad::Var& x,
                                std::mt19937_64* dropout_rng, const std::string& prefix) {
  const NetworkSpec& spec = net.spec;
  Shape expected{x.shape().empty() ? 0 : x.shape()[0]};
  expected.insert(expected.end(), spec.input_shape.begin(), spec.input_shape.end());
  if (x.shape() != expected)
    throw Error(ErrorKind::ShapeMismatch, "network input " + shape_string(x.shape()) + ", expected " +
                                              shape_string(expected));
  const std::size_t batch = expected[0];

  std::map<std::size_t, std::vector<std::string>> taps_at;
  for (const auto& [name, index] : spec.taps) taps_at[index].push_back(name);

  auto param = [&](const std::string& name) {
    auto it = net.params.find(name);
    if (it == net.params.end()) throw Error(ErrorKind::InvalidSpec, "missing parameter " + name);
    return tape.variable(it->second, prefix + name);
  };

  const bool train = net.mode == Mode::Train;
  ForwardResult result;
  ad::Var h = x;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    std::visit(overloaded{
                   [&](const Conv& c) {
                     h = ad::conv2d(h, param(layer.name + ".weight"), param(layer.name + ".bias"), c.padding);
                   },
                   [&](const Relu&) { h = ad::relu(h); },
                   [&](const MaxPool2x2&) { h = ad::maxpool2x2(h); },
                   [&](const AvgPoolGlobal&) { h = ad::avgpool_global(h); },
                   [&](const Dense&) {
                     if (h.shape().size() != 2) h = ad::reshape(h, {batch, h.value().size() / std::max<std::size_t>(batch, 1)});
                     h = ad::add(ad::matmul(h, param(layer.name + ".weight")), param(layer.name + ".bias"));
                   },
                   [&](const BatchNorm&) {
                     auto gamma = param(layer.name + ".gamma");
                     auto beta = param(layer.name + ".beta");
                     Tensor& rmean = net.buffers.at(layer.name + ".running_mean");
                     Tensor& rvar = net.buffers.at(layer.name + ".running_var");
                     if (train) {
                       ad::BatchStats stats;
                       h = ad::batchnorm_train(h, gamma, beta, kBatchNormEps, &stats);
                       // running variance tracks the unbiased estimate
                       const double count = static_cast<double>(h.value().size() / rmean.size());
                       const double unbias = count > 1.0 ? count / (count - 1.0) : 1.0;
                       for (std::size_t k = 0; k < rmean.size(); ++k) {
                         rmean.data[k] = kBatchNormMomentum * rmean.data[k] + (1.0 - kBatchNormMomentum) * stats.mean.data[k];
                         rvar.data[k] = kBatchNormMomentum * rvar.data[k] + (1.0 - kBatchNormMomentum) * stats.var.data[k] * unbias;
                       }
                     } else {
                       h = ad::batchnorm_eval(h, gamma, beta, rmean, rvar, kBatchNormEps);
                     }
                   },
                   [&](const Dropout& d) {
                     if (!train || d.p == 0.0) return;
                     if (!dropout_rng)
                       throw Error(ErrorKind::InvalidSpec, "layer " + layer.name + " needs a dropout rng in train mode");
                     std::bernoulli_distribution keep(1.0 - d.p);
                     const double scale = 1.0 / (1.0 - d.p);
                     Tensor mask(h.shape());
                     for (double& m : mask.data) m = keep(*dropout_rng) ? scale : 0.0;
                     h = ad::dropout_apply(h, mask);
                   },
                   [&](const SoftmaxHead&) {},
               },
               layer.kind);
    if (auto it = taps_at.find(i); it != taps_at.end())
      for (const auto& name : it->second) result.taps[name] = h;
  }
  result.output = h;
  return result;
}

NetworkSpec table1_spec(double width_factor, bool batchnorm) {
  if (!(width_factor > 0.0)) throw Error(ErrorKind::InvalidSpec, "width factor must be positive");
  const std::size_t narrow = scaled(150, width_factor);
  const std::size_t wide = scaled(300, width_factor);
  NetworkSpec spec;
  spec.input_shape = {28, 28, 1};
  auto conv = [&](std::size_t filters, std::size_t k, ad::Padding pad) {
    spec.add(Conv{filters, k, pad});
    if (batchnorm) spec.add(BatchNorm{});
    spec.add(Relu{});
  };
  conv(narrow, 3, ad::Padding::Valid);
  spec.tap("conv1");
  conv(narrow, 3, ad::Padding::Valid);
  spec.tap("conv2");
  conv(narrow, 5, ad::Padding::Same);
  spec.add(MaxPool2x2{}).tap("conv3");
  conv(wide, 3, ad::Padding::Valid);
  spec.tap("conv4");
  conv(wide, 3, ad::Padding::Valid);
  spec.tap("conv5");
  conv(wide, 5, ad::Padding::Same);
  spec.add(MaxPool2x2{}).add(AvgPoolGlobal{}).tap("conv6");
  spec.add(Dense{scaled(1200, width_factor)}).add(Relu{}).tap("dense1");
  spec.add(Dense{scaled(300, width_factor)}).add(Relu{}).tap("dense2");
  spec.add(Dense{10}).add(SoftmaxHead{});
  return spec;
}

NetworkSpec dropout_baseline(const NetworkSpec& spec, double p_conv, double p_dense) {
  for (double p : {p_conv, p_dense})
    if (!(p >= 0.0 && p < 1.0)) throw Error(ErrorKind::InvalidProbability, "dropout probability " + std::to_string(p));

  NetworkSpec out;
  out.input_shape = spec.input_shape;
  std::vector<std::size_t> new_index(spec.layers.size());
  enum class Last { None, Conv, Dense } last = Last::None;
  std::size_t inserted = 0;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& layer = spec.layers[i];
    out.layers.push_back(layer);
    new_index[i] = out.layers.size() - 1;
    if (std::holds_alternative<Conv>(layer.kind)) last = Last::Conv;
    if (std::holds_alternative<Dense>(layer.kind)) last = Last::Dense;
    if (std::holds_alternative<Relu>(layer.kind) && last != Last::None) {
      out.layers.push_back({"dropout" + std::to_string(++inserted), Dropout{last == Last::Conv ? p_conv : p_dense}});
      last = Last::None;
    }
  }
  for (const auto& [name, index] : spec.taps) out.taps[name] = new_index.at(index);
  out.infer_shapes();
  return out;
}

NetworkSpec mlp_spec(std::size_t input_dim, const std::vector<std::size_t>& hidden, std::size_t output_dim) {
  NetworkSpec spec;
  spec.input_shape = {input_dim};
  for (std::size_t h : hidden) spec.add(Dense{h}).add(Relu{});
  spec.add(Dense{output_dim});
  return spec;
}

void save_archive(const std::filesystem::path& path, const std::map<std::string, Tensor>& tensors) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::Io, "cannot write " + path.string());
  out << "kflow-archive 1\n" << tensors.size() << "\n";
  char buf[32];
  for (const auto& [name, t] : tensors) {
    out << name << ' ' << t.rank();
    for (std::size_t d : t.shape) out << ' ' << d;
    out << '\n';
    for (std::size_t i = 0; i < t.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", t.data[i]);
      out << (i ? " " : "") << buf;
    }
    out << '\n';
  }
  if (!out) throw Error(ErrorKind::Io, "write failed for " + path.string());
}

std::map<std::string, Tensor> load_archive(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot read " + path.string());
  std::string magic;
  int version = 0;
  std::size_t count = 0;
  if (!(in >> magic >> version >> count) || magic != "kflow-archive" || version != 1)
    throw Error(ErrorKind::BadMagic, path.string() + " is not a kflow archive");
  std::map<std::string, Tensor> out;
  for (std::size_t k = 0; k < count; ++k) {
    std::string name;
    std::size_t rank = 0;
    if (!(in >> name >> rank)) throw Error(ErrorKind::TruncatedFile, path.string());
    Shape shape(rank);
    for (auto& d : shape)
      if (!(in >> d)) throw Error(ErrorKind::TruncatedFile, path.string());
    Tensor t(shape);
    for (double& v : t.data) {
      std::string token;
      if (!(in >> token)) throw Error(ErrorKind::TruncatedFile, path.string());
      v = std::strtod(token.c_str(), nullptr);
    }
    out.emplace(name, std::move(t));
  }
  return out;
}

}  // namespace kflow::nn
