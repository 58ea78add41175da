#include "qgait/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "qgait/config.hpp"

namespace qgait {

using nlohmann::json;

namespace {

constexpr char kMagic[5] = {'Q', 'G', 'K', 'T', '1'};

void put_u(std::ostream& os, std::uint64_t v, int bytes) {
  char buf[8];
  for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(buf, bytes);
}

std::uint64_t get_u(std::istream& is, int bytes, const std::string& path) {
  unsigned char buf[8];
  is.read(reinterpret_cast<char*>(buf), bytes);
  if (is.gcount() != bytes) throw IoError("truncated container " + path);
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return v;
}

json layer_meta(const Layer& l) {
  return {{"name", l.name},
          {"attached", l.attached},
          {"weight_q", quant_config_to_json(l.weight_q.config(), l.weight_q.initialized())},
          {"act_q", quant_config_to_json(l.act_q.config(), l.act_q.initialized())}};
}

Quantizer restore_quantizer(const json& j) {
  bool init = false;
  QuantConfig cfg = quant_config_from_json(j, &init);
  Quantizer q(cfg);
  if (init && q.active()) q.mark_initialized(cfg.step);
  return q;
}

Tensor param_from(const Container& c, const std::string& name, const Shape& expect) {
  const auto& a = c.get(name);
  if (a.shape != expect) {
    throw ConfigError("checkpoint array " + name + " has shape " + shape_str(a.shape) + ", architecture expects " +
                      shape_str(expect));
  }
  return Tensor(a.shape, a.values, true);
}

}  // namespace

const NamedArray& Container::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw ConfigError("container has no array '" + name + "'");
}

bool Container::has(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return true;
  }
  return false;
}

void write_container(const std::string& path, const Container& c) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path);
  os.write(kMagic, sizeof kMagic);
  const std::string meta = c.meta.dump();
  put_u(os, meta.size(), 8);
  os.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put_u(os, c.arrays.size(), 8);
  for (const auto& a : c.arrays) {
    if (numel(a.shape) != a.values.size()) throw DimensionError("container array " + a.name + " has inconsistent size");
    put_u(os, a.name.size(), 4);
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    put_u(os, a.shape.size(), 4);
    for (auto e : a.shape) put_u(os, e, 8);
    for (double v : a.values) put_u(os, std::bit_cast<std::uint64_t>(v), 8);
  }
  if (!os) throw IoError("write failed for " + path);
}

Container read_container(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot read " + path);
  char magic[5];
  is.read(magic, 5);
  if (is.gcount() != 5 || std::memcmp(magic, kMagic, 5) != 0) throw IoError(path + " is not a QGKT1 container");
  Container c;
  const auto meta_len = get_u(is, 8, path);
  if (meta_len > (1ULL << 30)) throw IoError("implausible metadata length in " + path);
  std::string meta(meta_len, '\0');
  is.read(meta.data(), static_cast<std::streamsize>(meta_len));
  if (static_cast<std::uint64_t>(is.gcount()) != meta_len) throw IoError("truncated container " + path);
  try {
    c.meta = json::parse(meta);
  } catch (const json::exception& e) {
    throw IoError("bad metadata in " + path + ": " + e.what());
  }
  const auto n = get_u(is, 8, path);
  for (std::uint64_t i = 0; i < n; ++i) {
    NamedArray a;
    const auto name_len = get_u(is, 4, path);
    a.name.resize(name_len);
    is.read(a.name.data(), static_cast<std::streamsize>(name_len));
    const auto rank = get_u(is, 4, path);
    if (rank > 8) throw IoError("implausible array rank in " + path);
    for (std::uint64_t r = 0; r < rank; ++r) a.shape.push_back(get_u(is, 8, path));
    const std::size_t count = numel(a.shape);
    if (count > (1ULL << 28)) throw IoError("implausible array size in " + path);
    a.values.resize(count);
    for (auto& v : a.values) v = std::bit_cast<double>(get_u(is, 8, path));
    c.arrays.push_back(std::move(a));
  }
  if (is.peek() != EOF) throw IoError("trailing bytes in " + path);
  return c;
}

void save_checkpoint(const std::string& path, const Model& model, const json& provenance) {
  Container c;
  json layers = json::array();
  for (const Layer* l : model.layers()) {
    layers.push_back(layer_meta(*l));
    c.arrays.push_back({l->name + ".weight", l->weight.shape(), {l->weight.data().begin(), l->weight.data().end()}});
    if (l->bias.defined()) {
      c.arrays.push_back({l->name + ".bias", l->bias.shape(), {l->bias.data().begin(), l->bias.data().end()}});
    }
  }
  c.arrays.push_back({"bnneck.gamma", model.bn_gamma.shape(), {model.bn_gamma.data().begin(), model.bn_gamma.data().end()}});
  c.arrays.push_back({"bnneck.beta", model.bn_beta.shape(), {model.bn_beta.data().begin(), model.bn_beta.data().end()}});
  c.arrays.push_back({"bnneck.running_mean", {model.bn.running_mean.size()}, model.bn.running_mean});
  c.arrays.push_back({"bnneck.running_var", {model.bn.running_var.size()}, model.bn.running_var});
  c.meta = {{"format", "QGKT1"},
            {"kind", "model"},
            {"arch", model_spec_to_json(model.spec())},
            {"quant_policy", quant_policy_to_json(model.policy())},
            {"layers", layers},
            {"provenance", provenance}};
  write_container(path, c);
}

Model load_checkpoint(const std::string& path, json* provenance) {
  const Container c = read_container(path);
  try {
    if (c.meta.at("kind") != "model") throw ConfigError(path + " is not a model checkpoint");
    const ModelSpec spec = model_spec_from_json(c.meta.at("arch"));
    Model m(spec, 0);
    const json& layers = c.meta.at("layers");
    auto all = m.layers();
    if (layers.size() != all.size()) throw ConfigError("checkpoint layer count does not match the architecture");
    if (layers.at(0).at("attached").get<bool>()) m.quantize(quant_policy_from_json(c.meta.at("quant_policy")));
    for (std::size_t i = 0; i < all.size(); ++i) {
      Layer& l = *all[i];
      const json& lj = layers.at(i);
      if (lj.at("name") != l.name) throw ConfigError("checkpoint layer order does not match the architecture");
      l.weight = param_from(c, l.name + ".weight", l.weight.shape());
      if (l.bias.defined()) l.bias = param_from(c, l.name + ".bias", l.bias.shape());
      if (lj.at("attached").get<bool>()) {
        l.weight_q = restore_quantizer(lj.at("weight_q"));
        l.act_q = restore_quantizer(lj.at("act_q"));
      }
    }
    m.bn_gamma = param_from(c, "bnneck.gamma", m.bn_gamma.shape());
    m.bn_beta = param_from(c, "bnneck.beta", m.bn_beta.shape());
    m.bn.running_mean = c.get("bnneck.running_mean").values;
    m.bn.running_var = c.get("bnneck.running_var").values;
    if (m.bn.running_mean.size() != m.bn_gamma.numel() || m.bn.running_var.size() != m.bn_gamma.numel()) {
      throw ConfigError("checkpoint batch-norm statistics do not match the architecture");
    }
    if (provenance) *provenance = c.meta.value("provenance", json::object());
    return m;
  } catch (const json::exception& e) {
    throw ConfigError("malformed checkpoint metadata in " + path + ": " + e.what());
  }
}

void save_lowered(const std::string& path, const LoweredModel& lm, const json& provenance) {
  Container c;
  for (const auto& l : lm.layers) {
    c.arrays.push_back({l.name + ".weight_int", l.weight_shape, {l.weight.begin(), l.weight.end()}});
    if (!l.bias.empty()) {
      std::vector<double> b(l.bias.begin(), l.bias.end());
      c.arrays.push_back({l.name + ".bias_int", {l.bias.size()}, std::move(b)});
    }
  }
  c.meta = {{"format", "QGKT1"},
            {"kind", "lowered"},
            {"arch", model_spec_to_json(lm.spec)},
            {"quant_policy", quant_policy_to_json(lm.policy)},
            {"int_lowered", lowered_to_json(lm)},
            {"provenance", provenance}};
  write_container(path, c);
}

LoweredModel load_lowered(const std::string& path, json* provenance) {
  const Container c = read_container(path);
  try {
    if (c.meta.at("kind") != "lowered" || !c.meta.contains("int_lowered")) {
      throw ConfigError(path + " has no int_lowered section");
    }
    LoweredModel lm;
    lm.spec = model_spec_from_json(c.meta.at("arch"));
    lm.policy = quant_policy_from_json(c.meta.at("quant_policy"));
    for (const auto& j : c.meta.at("int_lowered").at("layers")) {
      IntLayer l;
      l.name = j.at("name");
      l.kind = j.at("kind") == "conv2d" ? Layer::Kind::Conv2d : Layer::Kind::PartLinear;
      l.weight_shape = j.at("weight_shape").get<Shape>();
      l.v_w = j.at("v_w");
      l.v_a = j.at("v_a");
      l.weight_bits = j.at("weight_bits");
      l.act_bits = j.at("act_bits");
      l.w_r1 = j.at("w_r1");
      l.w_r2 = j.at("w_r2");
      l.a_r1 = j.at("a_r1");
      l.a_r2 = j.at("a_r2");
      l.stride = j.at("stride");
      l.padding = j.at("padding");
      l.accumulator_bits = j.at("accumulator_bits");
      const auto& cj = j.at("cost");
      l.cost.name = l.name;
      l.cost.C_in = cj.at("C_in");
      l.cost.C_out = cj.at("C_out");
      l.cost.F = cj.at("F");
      l.cost.N = cj.at("N");
      l.cost.H = cj.at("H");
      l.cost.W = cj.at("W");
      l.cost.b_w = cj.at("b_w");
      l.cost.b_a = cj.at("b_a");
      const auto& w = c.get(l.name + ".weight_int");
      if (w.shape != l.weight_shape) throw ConfigError("lowered weight shape mismatch for " + l.name);
      for (double v : w.values) {
        if (v < static_cast<double>(l.w_r1) || v > static_cast<double>(l.w_r2) || v != std::round(v)) {
          throw ConfigError("lowered weight out of range in " + l.name);
        }
        l.weight.push_back(static_cast<std::int32_t>(v));
      }
      if (j.at("has_bias").get<bool>()) {
        for (double v : c.get(l.name + ".bias_int").values) l.bias.push_back(static_cast<std::int64_t>(v));
      }
      lm.layers.push_back(std::move(l));
    }
    if (lm.layers.size() < 2) throw ConfigError("lowered model needs at least one conv and the head");
    if (provenance) *provenance = c.meta.value("provenance", json::object());
    return lm;
  } catch (const json::exception& e) {
    throw ConfigError("malformed lowered model in " + path + ": " + e.what());
  }
}

}  // namespace qgait
