#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "causalfs/dataset.hpp"
#include "causalfs/model.hpp"
#include "causalfs/train.hpp"

// Flat key=value run configuration: '#' comments, dotted keys grouped by
// prefix (data., model., train., eval., augment.), later assignments win.
// Command-line overrides use the same key=value syntax. Unknown keys are
// rejected by name; the resolved configuration echoes to a canonical text
// that parses back to the identical RunConfig.

namespace causalfs {

struct DataConfig {
  std::string source = "synthetic";  // "synthetic" or "folder"
  std::string folder;                // class-per-subdirectory tree when source=folder
  SyntheticSpec synth;
  int split_train = 24, split_val = 0, split_test = 8;
  std::uint64_t split_seed = 1;

  void validate() const {
    if (source != "synthetic" && source != "folder")
      throw std::invalid_argument("data.source must be 'synthetic' or 'folder', got '" + source +
                                  "'");
    if (source == "folder" && folder.empty())
      throw std::invalid_argument("data.folder is required when data.source=folder");
    if (split_train < 0 || split_val < 0 || split_test < 0)
      throw std::invalid_argument("data split counts must be >= 0");
    if (source == "synthetic") {
      synth.validate();
      if (split_train + split_val + split_test != synth.n_classes)
        throw std::invalid_argument("data splits cover " +
                                    std::to_string(split_train + split_val + split_test) + " of " +
                                    std::to_string(synth.n_classes) + " classes");
    }
  }
};

struct EvalConfig {
  int episodes = 600;
  std::uint64_t seed = 1;

  void validate() const {
    if (episodes < 1) throw std::invalid_argument("eval.episodes must be >= 1");
  }
};

struct RunConfig {
  DataConfig data;
  ModelConfig model;  // model.image_size 0 means: take the dataset's size
  TrainConfig train;
  EvalConfig eval;

  void validate() const {
    data.validate();
    train.validate();
    eval.validate();
    ModelConfig probe = model;  // image_size 0 is resolved later from the data
    if (probe.image_size == 0) probe.image_size = 16;
    probe.validate();
    if (data.source == "synthetic" && data.split_train < train.n_train)
      throw std::invalid_argument("data.split_train=" + std::to_string(data.split_train) +
                                  " classes cannot host " + std::to_string(train.n_train) +
                                  "-way training episodes");
    if (data.source == "synthetic") {
      if (data.split_val > 0 && data.split_val < train.n_eval)
        throw std::invalid_argument("data.split_val=" + std::to_string(data.split_val) +
                                    " classes cannot host " + std::to_string(train.n_eval) +
                                    "-way validation episodes");
      if (data.split_test > 0 && data.split_test < train.n_eval)
        throw std::invalid_argument("data.split_test=" + std::to_string(data.split_test) +
                                    " classes cannot host " + std::to_string(train.n_eval) +
                                    "-way evaluation episodes");
      if (data.synth.samples_per_class < train.k_train + train.u_train)
        throw std::invalid_argument("data.samples_per_class=" +
                                    std::to_string(data.synth.samples_per_class) +
                                    " cannot supply " + std::to_string(train.k_train) +
                                    " shots + " + std::to_string(train.u_train) + " queries");
      if (data.synth.samples_per_class < train.k_eval + train.u_eval)
        throw std::invalid_argument("data.samples_per_class=" +
                                    std::to_string(data.synth.samples_per_class) +
                                    " cannot supply " + std::to_string(train.k_eval) +
                                    " shots + " + std::to_string(train.u_eval) +
                                    " eval queries");
    }
  }

  // Pins model.image_size to the dataset once it is known.
  void resolve_image_size(int dataset_size) {
    if (model.image_size == 0) model.image_size = dataset_size;
  }
};

// ------------------------------------------------------------- text parsing ---

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

inline int parse_int(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const int x = std::stoi(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': expected integer, got '" + v + "'");
  }
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  try {
    // stoull silently wraps negative inputs, so screen the sign ourselves.
    if (v.empty() || v[0] == '-') throw std::invalid_argument("");
    std::size_t pos = 0;
    const unsigned long long x = std::stoull(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return std::uint64_t(x);
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': expected unsigned integer, got '" + v +
                                "'");
  }
}

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double x = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("");
    return x;
  } catch (...) {
    throw std::invalid_argument("config key '" + key + "': expected number, got '" + v + "'");
  }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw std::invalid_argument("config key '" + key + "': expected true/false, got '" + v + "'");
}

inline std::array<int, 4> parse_channels(const std::string& key, const std::string& v) {
  std::array<int, 4> out{};
  std::stringstream ss(v);
  std::string part;
  int i = 0;
  while (std::getline(ss, part, ',')) {
    if (i >= 4) throw std::invalid_argument("config key '" + key + "': expected 4 values, got '" + v + "'");
    out[std::size_t(i++)] = parse_int(key, trim(part));
  }
  if (i != 4)
    throw std::invalid_argument("config key '" + key + "': expected 4 comma-separated values, got '" +
                                v + "'");
  return out;
}

inline TokenMode parse_token_mode(const std::string& key, const std::string& v) {
  if (v == "channel") return TokenMode::channel;
  if (v == "cls") return TokenMode::cls;
  throw std::invalid_argument("config key '" + key + "': expected channel or cls, got '" + v + "'");
}

}  // namespace detail

// Key=value lines; '#' starts a comment; blank lines skipped; later keys win.
inline std::map<std::string, std::string> parse_kv_text(std::istream& is) {
  std::map<std::string, std::string> kv;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key.empty())
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": empty key");
    kv[key] = value;
  }
  return kv;
}

// Applies "key=value" strings on top of file values (overrides win).
inline void apply_overrides(std::map<std::string, std::string>& kv,
                            const std::vector<std::string>& overrides) {
  for (const std::string& ov : overrides) {
    const std::size_t eq = ov.find('=');
    if (eq == std::string::npos || eq == 0)
      throw std::invalid_argument("override '" + ov + "': expected key=value");
    kv[detail::trim(ov.substr(0, eq))] = detail::trim(ov.substr(eq + 1));
  }
}

// Builds the RunConfig, consuming every recognized key. Unrecognized keys are
// an error naming the key.
inline RunConfig resolve_config(std::map<std::string, std::string> kv) {
  RunConfig rc;
  auto take = [&kv](const char* key) -> const std::string* {
    auto it = kv.find(key);
    if (it == kv.end()) return nullptr;
    return &it->second;
  };
  auto take_int = [&](const char* key, int& dst) {
    if (const std::string* v = take(key)) dst = detail::parse_int(key, *v);
  };
  auto take_u64 = [&](const char* key, std::uint64_t& dst) {
    if (const std::string* v = take(key)) dst = detail::parse_u64(key, *v);
  };
  auto take_double = [&](const char* key, double& dst) {
    if (const std::string* v = take(key)) dst = detail::parse_double(key, *v);
  };
  auto take_bool = [&](const char* key, bool& dst) {
    if (const std::string* v = take(key)) dst = detail::parse_bool(key, *v);
  };
  auto take_string = [&](const char* key, std::string& dst) {
    if (const std::string* v = take(key)) dst = *v;
  };
  std::vector<std::string> consumed;
  auto mark = [&kv, &consumed](const char* key) {
    if (kv.count(key)) consumed.push_back(key);
  };

  // data
  for (const char* k : {"data.source", "data.folder", "data.classes", "data.samples_per_class",
                        "data.image_size", "data.seed", "data.center_jitter", "data.scale_jitter",
                        "data.rot_jitter", "data.brightness_jitter", "data.noise",
                        "data.signal_amp", "data.split_train", "data.split_val", "data.split_test",
                        "data.split_seed"})
    mark(k);
  take_string("data.source", rc.data.source);
  take_string("data.folder", rc.data.folder);
  take_int("data.classes", rc.data.synth.n_classes);
  take_int("data.samples_per_class", rc.data.synth.samples_per_class);
  take_int("data.image_size", rc.data.synth.image_size);
  take_u64("data.seed", rc.data.synth.seed);
  take_double("data.center_jitter", rc.data.synth.center_jitter);
  take_double("data.scale_jitter", rc.data.synth.scale_jitter);
  take_double("data.rot_jitter", rc.data.synth.rot_jitter);
  take_double("data.brightness_jitter", rc.data.synth.brightness_jitter);
  take_double("data.noise", rc.data.synth.noise);
  take_double("data.signal_amp", rc.data.synth.signal_amp);
  take_int("data.split_train", rc.data.split_train);
  take_int("data.split_val", rc.data.split_val);
  take_int("data.split_test", rc.data.split_test);
  take_u64("data.split_seed", rc.data.split_seed);

  // model
  for (const char* k :
       {"model.in_channels", "model.channels", "model.ksize", "model.norm_groups", "model.gamma",
        "model.ffn_mult", "model.token_mode", "model.topk", "model.gate_ksize", "model.use_imse",
        "model.use_imfr", "model.straight_through", "model.image_size", "model.init_seed"})
    mark(k);
  take_int("model.in_channels", rc.model.backbone.in_channels);
  if (const std::string* v = take("model.channels"))
    rc.model.backbone.channels = detail::parse_channels("model.channels", *v);
  take_int("model.ksize", rc.model.backbone.ksize);
  take_int("model.norm_groups", rc.model.backbone.norm_groups);
  take_int("model.gamma", rc.model.gamma);
  take_int("model.ffn_mult", rc.model.ffn_mult);
  if (const std::string* v = take("model.token_mode"))
    rc.model.token_mode = detail::parse_token_mode("model.token_mode", *v);
  take_int("model.topk", rc.model.topk);
  take_int("model.gate_ksize", rc.model.gate_ksize);
  take_bool("model.use_imse", rc.model.use_imse);
  take_bool("model.use_imfr", rc.model.use_imfr);
  take_bool("model.straight_through", rc.model.straight_through);
  rc.model.image_size = 0;  // auto unless given
  take_int("model.image_size", rc.model.image_size);
  take_u64("model.init_seed", rc.model.init_seed);

  // train
  for (const char* k : {"train.epochs", "train.episodes_per_epoch", "train.n_way", "train.k_shot",
                        "train.n_query", "train.lr0", "train.momentum", "train.weight_decay",
                        "train.decay_epoch", "train.decay_factor", "train.val_every",
                        "train.val_episodes", "train.seed"})
    mark(k);
  take_int("train.epochs", rc.train.epochs);
  take_int("train.episodes_per_epoch", rc.train.episodes_per_epoch);
  take_int("train.n_way", rc.train.n_train);
  take_int("train.k_shot", rc.train.k_train);
  take_int("train.n_query", rc.train.u_train);
  take_double("train.lr0", rc.train.lr0);
  take_double("train.momentum", rc.train.momentum);
  take_double("train.weight_decay", rc.train.weight_decay);
  take_int("train.decay_epoch", rc.train.decay_epoch);
  take_double("train.decay_factor", rc.train.decay_factor);
  take_int("train.val_every", rc.train.val_every);
  take_int("train.val_episodes", rc.train.val_episodes);
  take_u64("train.seed", rc.train.seed);

  // eval (also drives validation episode shape)
  for (const char* k : {"eval.episodes", "eval.n_way", "eval.k_shot", "eval.n_query", "eval.seed"})
    mark(k);
  take_int("eval.episodes", rc.eval.episodes);
  take_int("eval.n_way", rc.train.n_eval);
  take_int("eval.k_shot", rc.train.k_eval);
  take_int("eval.n_query", rc.train.u_eval);
  rc.eval.seed = rc.train.seed;
  take_u64("eval.seed", rc.eval.seed);

  // augment
  for (const char* k : {"augment.crop_min", "augment.crop_max", "augment.flip_prob",
                        "augment.jitter_min", "augment.jitter_max", "augment.center_crop"})
    mark(k);
  take_double("augment.crop_min", rc.train.augment.crop_min);
  take_double("augment.crop_max", rc.train.augment.crop_max);
  take_double("augment.flip_prob", rc.train.augment.flip_prob);
  take_double("augment.jitter_min", rc.train.augment.jitter_min);
  take_double("augment.jitter_max", rc.train.augment.jitter_max);
  take_double("augment.center_crop", rc.train.augment.center_crop);

  for (const std::string& k : consumed) kv.erase(k);
  if (!kv.empty())
    throw std::invalid_argument("unknown config key '" + kv.begin()->first + "'");
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) {
    std::ifstream is(path);
    if (!is) throw std::invalid_argument("cannot read config file '" + path + "'");
    kv = parse_kv_text(is);
  }
  apply_overrides(kv, overrides);
  return resolve_config(std::move(kv));
}

// Canonical echo: every key, fixed order, values formatted to round-trip.
inline std::string describe_run_config(const RunConfig& rc) {
  std::ostringstream os;
  os.precision(17);
  os << "# resolved run configuration\n";
  os << "data.source = " << rc.data.source << '\n';
  if (!rc.data.folder.empty()) os << "data.folder = " << rc.data.folder << '\n';
  os << "data.classes = " << rc.data.synth.n_classes << '\n';
  os << "data.samples_per_class = " << rc.data.synth.samples_per_class << '\n';
  os << "data.image_size = " << rc.data.synth.image_size << '\n';
  os << "data.seed = " << rc.data.synth.seed << '\n';
  os << "data.center_jitter = " << rc.data.synth.center_jitter << '\n';
  os << "data.scale_jitter = " << rc.data.synth.scale_jitter << '\n';
  os << "data.rot_jitter = " << rc.data.synth.rot_jitter << '\n';
  os << "data.brightness_jitter = " << rc.data.synth.brightness_jitter << '\n';
  os << "data.noise = " << rc.data.synth.noise << '\n';
  os << "data.signal_amp = " << rc.data.synth.signal_amp << '\n';
  os << "data.split_train = " << rc.data.split_train << '\n';
  os << "data.split_val = " << rc.data.split_val << '\n';
  os << "data.split_test = " << rc.data.split_test << '\n';
  os << "data.split_seed = " << rc.data.split_seed << '\n';
  os << "model.in_channels = " << rc.model.backbone.in_channels << '\n';
  os << "model.channels = " << rc.model.backbone.channels[0] << ',' << rc.model.backbone.channels[1]
     << ',' << rc.model.backbone.channels[2] << ',' << rc.model.backbone.channels[3] << '\n';
  os << "model.ksize = " << rc.model.backbone.ksize << '\n';
  os << "model.norm_groups = " << rc.model.backbone.norm_groups << '\n';
  os << "model.gamma = " << rc.model.gamma << '\n';
  os << "model.ffn_mult = " << rc.model.ffn_mult << '\n';
  os << "model.token_mode = " << (rc.model.token_mode == TokenMode::channel ? "channel" : "cls")
     << '\n';
  os << "model.topk = " << rc.model.topk << '\n';
  os << "model.gate_ksize = " << rc.model.gate_ksize << '\n';
  os << "model.use_imse = " << (rc.model.use_imse ? "true" : "false") << '\n';
  os << "model.use_imfr = " << (rc.model.use_imfr ? "true" : "false") << '\n';
  os << "model.straight_through = " << (rc.model.straight_through ? "true" : "false") << '\n';
  os << "model.image_size = " << rc.model.image_size << '\n';
  os << "model.init_seed = " << rc.model.init_seed << '\n';
  os << "train.epochs = " << rc.train.epochs << '\n';
  os << "train.episodes_per_epoch = " << rc.train.episodes_per_epoch << '\n';
  os << "train.n_way = " << rc.train.n_train << '\n';
  os << "train.k_shot = " << rc.train.k_train << '\n';
  os << "train.n_query = " << rc.train.u_train << '\n';
  os << "train.lr0 = " << rc.train.lr0 << '\n';
  os << "train.momentum = " << rc.train.momentum << '\n';
  os << "train.weight_decay = " << rc.train.weight_decay << '\n';
  os << "train.decay_epoch = " << rc.train.decay_epoch << '\n';
  os << "train.decay_factor = " << rc.train.decay_factor << '\n';
  os << "train.val_every = " << rc.train.val_every << '\n';
  os << "train.val_episodes = " << rc.train.val_episodes << '\n';
  os << "train.seed = " << rc.train.seed << '\n';
  os << "eval.episodes = " << rc.eval.episodes << '\n';
  os << "eval.n_way = " << rc.train.n_eval << '\n';
  os << "eval.k_shot = " << rc.train.k_eval << '\n';
  os << "eval.n_query = " << rc.train.u_eval << '\n';
  os << "eval.seed = " << rc.eval.seed << '\n';
  os << "augment.crop_min = " << rc.train.augment.crop_min << '\n';
  os << "augment.crop_max = " << rc.train.augment.crop_max << '\n';
  os << "augment.flip_prob = " << rc.train.augment.flip_prob << '\n';
  os << "augment.jitter_min = " << rc.train.augment.jitter_min << '\n';
  os << "augment.jitter_max = " << rc.train.augment.jitter_max << '\n';
  os << "augment.center_crop = " << rc.train.augment.center_crop << '\n';
  return os.str();
}

}  // namespace causalfs
