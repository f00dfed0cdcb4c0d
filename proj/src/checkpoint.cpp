#include "itermix/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "itermix/manifest.hpp"

namespace itermix {

namespace {

constexpr const char* kMagic = "itermix-checkpoint v1";

std::string hex_join(std::span<const double> vals) {
  std::string out;
  char buf[40];
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (i) out += ' ';
    std::snprintf(buf, sizeof buf, "%a", vals[i]);
    out += buf;
  }
  return out;
}

std::vector<double> hex_split(const std::string& line, const std::string& what) {
  std::vector<double> out;
  const char* p = line.c_str();
  char* end = nullptr;
  while (*p) {
    while (*p == ' ') ++p;
    if (!*p) break;
    double v = std::strtod(p, &end);
    if (end == p) throw DataError("checkpoint: bad number in " + what);
    out.push_back(v);
    p = end;
  }
  return out;
}

std::string join_ints(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += std::to_string(v[i]);
  }
  return s;
}

std::string join_strings(const std::vector<std::string>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    s += v[i];
  }
  return s;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write checkpoint file: " + path);
  const ModelConfig& c = ckpt.config;
  out << kMagic << '\n';
  out << "model.lookback=" << c.lookback << '\n';
  out << "model.horizon=" << c.horizon << '\n';
  out << "model.channels=" << c.channels << '\n';
  out << "model.target_channels=" << join_ints(c.target_channels) << '\n';
  out << "model.rounds=" << c.rounds << '\n';
  out << "model.depth=" << c.depth << '\n';
  out << "model.slots=" << c.slots << '\n';
  out << "model.hidden=" << c.hidden << '\n';
  out << "model.norm=" << to_string(c.norm_kind) << '\n';
  out << "model.activation=" << to_string(c.act) << '\n';
  out << "model.dropout=" << format_double(c.dropout_rate) << '\n';
  out << "data.feature_names=" << join_strings(ckpt.feature_names) << '\n';
  out << "data.mean=" << hex_join(ckpt.data_stats.mean) << '\n';
  out << "data.std=" << hex_join(ckpt.data_stats.std) << '\n';

  for (auto& [name, t] : const_cast<ModelParams&>(ckpt.params).named()) {
    out << "tensor " << name << ' ' << t->rank();
    for (int e : t->shape()) out << ' ' << e;
    out << '\n';
    // one line per leading row keeps the file diffable
    const int line_len = t->cols();
    auto vals = t->values();
    for (std::size_t off = 0; off < vals.size(); off += line_len)
      out << hex_join(vals.subspan(off, line_len)) << '\n';
  }
  out << "end\n";
  if (!out) throw DataError("failed while writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open checkpoint file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != kMagic)
    throw DataError(path + ": not an itermix checkpoint (bad magic line)");

  std::map<std::string, std::string> fields;
  std::map<std::string, Tensor> tensors;
  while (std::getline(in, line)) {
    if (line == "end") break;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream hdr(line);
      std::string tag, name;
      int rank = 0;
      hdr >> tag >> name >> rank;
      if (rank < 1 || rank > 3) throw DataError(path + ": bad tensor rank for " + name);
      std::vector<int> shape(rank);
      std::size_t count = 1;
      for (int i = 0; i < rank; ++i) {
        hdr >> shape[i];
        count *= static_cast<std::size_t>(shape[i]);
      }
      if (!hdr) throw DataError(path + ": bad tensor header for " + name);
      std::vector<double> vals;
      vals.reserve(count);
      while (vals.size() < count && std::getline(in, line)) {
        auto row = hex_split(line, name);
        vals.insert(vals.end(), row.begin(), row.end());
      }
      if (vals.size() != count)
        throw DataError(path + ": tensor " + name + " has " + std::to_string(vals.size()) +
                        " values, expected " + std::to_string(count));
      tensors[name] = Tensor::from_values(std::move(shape), std::move(vals));
    } else {
      std::size_t eq = line.find('=');
      if (eq == std::string::npos) throw DataError(path + ": malformed line '" + line + "'");
      fields[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }

  auto field = [&](const std::string& k) -> const std::string& {
    auto it = fields.find(k);
    if (it == fields.end()) throw DataError(path + ": missing field " + k);
    return it->second;
  };

  Checkpoint ckpt;
  ModelConfig& c = ckpt.config;
  c.lookback = std::stoi(field("model.lookback"));
  c.horizon = std::stoi(field("model.horizon"));
  c.channels = std::stoi(field("model.channels"));
  for (const std::string& s : split_list(field("model.target_channels")))
    c.target_channels.push_back(std::stoi(s));
  c.rounds = std::stoi(field("model.rounds"));
  c.depth = std::stoi(field("model.depth"));
  c.slots = std::stoi(field("model.slots"));
  c.hidden = std::stoi(field("model.hidden"));
  c.norm_kind = norm_kind_from_string(field("model.norm"));
  c.act = activation_from_string(field("model.activation"));
  c.dropout_rate = std::stod(field("model.dropout"));
  c.validate();

  ckpt.feature_names = split_list(field("data.feature_names"));
  ckpt.data_stats.mean = hex_split(field("data.mean"), "data.mean");
  ckpt.data_stats.std = hex_split(field("data.std"), "data.std");

  Rng dummy(0);
  ckpt.params = ModelParams::init(c, dummy);
  for (auto& [name, t] : ckpt.params.named()) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw DataError(path + ": missing tensor " + name);
    if (it->second.shape() != t->shape())
      throw DataError(path + ": tensor " + name + " has shape " + it->second.shape_str() +
                      ", expected " + t->shape_str());
    std::copy(it->second.values().begin(), it->second.values().end(), t->values().begin());
  }
  return ckpt;
}

}  // namespace itermix
