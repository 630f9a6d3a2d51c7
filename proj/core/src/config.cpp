// SPDX-License-Identifier: Apache-2.0
#include "intraq/config.hpp"

#include <charconv>
#include <cstdio>
#include <functional>
#include <sstream>

#include "intraq/access_log.hpp"
#include "intraq/errors.hpp"

namespace intraq::config {

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("'" + key + "' expects a number, got '" + v + "'");
  }
}

std::int64_t to_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("'" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("'" + key + "' expects true/false, got '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string fmt(bool v) { return v ? "true" : "false"; }

std::vector<std::int64_t> to_int_list(const std::string& key, const std::string& v) {
  std::vector<std::int64_t> out;
  std::stringstream in(v);
  for (std::string item; std::getline(in, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(to_int(key, item));
  }
  return out;
}

struct Field {
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define IQ_DOUBLE(path)                                                                      \
  Field {                                                                                    \
    [](ExperimentConfig& c, const std::string& v) { c.path = to_double(#path, v); },         \
        [](const ExperimentConfig& c) { return fmt(static_cast<double>(c.path)); }           \
  }
#define IQ_INT(path)                                                                                     \
  Field {                                                                                                \
    [](ExperimentConfig& c, const std::string& v) { c.path = static_cast<decltype(c.path)>(to_int(#path, v)); }, \
        [](const ExperimentConfig& c) { return std::to_string(c.path); }                                 \
  }
#define IQ_BOOL(path)                                                                \
  Field {                                                                            \
    [](ExperimentConfig& c, const std::string& v) { c.path = to_bool(#path, v); },   \
        [](const ExperimentConfig& c) { return fmt(c.path); }                        \
  }
#define IQ_PATH(path)                                                         \
  Field {                                                                     \
    [](ExperimentConfig& c, const std::string& v) { c.path = v; },            \
        [](const ExperimentConfig& c) { return c.path.string(); }             \
  }

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = {
      {"arch", {[](ExperimentConfig& c, const std::string& v) { c.arch.name = v; },
                [](const ExperimentConfig& c) { return c.arch.name; }}},
      {"arch.base_width", IQ_INT(arch.base_width)},
      {"num_classes", IQ_INT(arch.num_classes)},
      {"input.channels", IQ_INT(arch.input.channels)},
      {"input.height", IQ_INT(arch.input.height)},
      {"input.width", IQ_INT(arch.input.width)},
      {"train_data", IQ_PATH(train_data)},
      {"val_data", IQ_PATH(val_data)},
      {"model_checkpoint", IQ_PATH(model_checkpoint)},
      {"output_dir", IQ_PATH(output_dir)},
      {"seed", IQ_INT(seed)},
      {"total_synthetic_images", IQ_INT(total_synthetic_images)},
      {"weight_bits", IQ_INT(quant.weight_bits)},
      {"act_bits", IQ_INT(quant.act_bits)},
      {"weight_granularity",
       {[](ExperimentConfig& c, const std::string& v) {
          if (v == "per_channel") c.quant.weight_granularity = quant::Granularity::per_channel;
          else if (v == "per_tensor") c.quant.weight_granularity = quant::Granularity::per_tensor;
          else throw ConfigError("weight_granularity must be per_channel or per_tensor");
        },
        [](const ExperimentConfig& c) {
          return std::string(c.quant.weight_granularity == quant::Granularity::per_channel ? "per_channel"
                                                                                            : "per_tensor");
        }}},
      {"act_calibration",
       {[](ExperimentConfig& c, const std::string& v) {
          if (v == "ema_minmax") c.quant.act_calibration = quant::CalibrationMode::ema_minmax;
          else if (v == "minmax") c.quant.act_calibration = quant::CalibrationMode::minmax;
          else throw ConfigError("act_calibration must be ema_minmax or minmax");
        },
        [](const ExperimentConfig& c) {
          return std::string(c.quant.act_calibration == quant::CalibrationMode::ema_minmax ? "ema_minmax" : "minmax");
        }}},
      {"synthesis.eta", IQ_DOUBLE(synthesis.eta)},
      {"synthesis.crop_prob", IQ_DOUBLE(synthesis.crop_prob)},
      {"synthesis.lambda_l", IQ_DOUBLE(synthesis.lambda_l)},
      {"synthesis.lambda_u", IQ_DOUBLE(synthesis.lambda_u)},
      {"synthesis.epsilon", IQ_DOUBLE(synthesis.epsilon)},
      {"synthesis.iterations", IQ_INT(synthesis.iterations)},
      {"synthesis.batch_size", IQ_INT(synthesis.batch_size)},
      {"synthesis.lr", IQ_DOUBLE(synthesis.lr)},
      {"synthesis.lr_decay", IQ_DOUBLE(synthesis.lr_decay)},
      {"synthesis.plateau_patience", IQ_INT(synthesis.plateau_patience)},
      {"synthesis.adam_beta1", IQ_DOUBLE(synthesis.adam_beta1)},
      {"synthesis.adam_beta2", IQ_DOUBLE(synthesis.adam_beta2)},
      {"synthesis.bns", IQ_BOOL(synthesis.toggles.bns)},
      {"synthesis.mdc", IQ_BOOL(synthesis.toggles.mdc)},
      {"synthesis.sil", IQ_BOOL(synthesis.toggles.sil)},
      {"synthesis.hard_il", IQ_BOOL(synthesis.toggles.hard_il)},
      {"finetune.alpha", IQ_DOUBLE(finetune.alpha)},
      {"finetune.epochs", IQ_INT(finetune.epochs)},
      {"finetune.batch_size", IQ_INT(finetune.batch_size)},
      {"finetune.lr", IQ_DOUBLE(finetune.lr)},
      {"finetune.lr_step", IQ_INT(finetune.lr_step)},
      {"finetune.lr_decay", IQ_DOUBLE(finetune.lr_decay)},
      {"finetune.weight_decay", IQ_DOUBLE(finetune.weight_decay)},
      {"finetune.momentum", IQ_DOUBLE(finetune.momentum)},
      {"finetune.nesterov", IQ_BOOL(finetune.nesterov)},
      {"finetune.calibration_epochs", IQ_INT(finetune.calibration_epochs)},
      {"pretrain.epochs", IQ_INT(pretrain.epochs)},
      {"pretrain.batch_size", IQ_INT(pretrain.batch_size)},
      {"pretrain.lr", IQ_DOUBLE(pretrain.lr)},
      {"pretrain.momentum", IQ_DOUBLE(pretrain.momentum)},
      {"pretrain.weight_decay", IQ_DOUBLE(pretrain.weight_decay)},
      {"pretrain.accuracy_floor", IQ_DOUBLE(pretrain.accuracy_floor)},
      {"data.train_size", IQ_INT(data.train_size)},
      {"data.val_size", IQ_INT(data.val_size)},
      {"data.seed", IQ_INT(data.seed)},
      {"diagnose.classes",
       {[](ExperimentConfig& c, const std::string& v) { c.diagnose.classes = to_int_list("diagnose.classes", v); },
        [](const ExperimentConfig& c) {
          std::string out;
          for (auto k : c.diagnose.classes) out += (out.empty() ? "" : ",") + std::to_string(k);
          return out;
        }}},
      {"diagnose.per_class", IQ_INT(diagnose.per_class)},
  };
  return table;
}

#undef IQ_DOUBLE
#undef IQ_INT
#undef IQ_BOOL
#undef IQ_PATH

}  // namespace

void ExperimentConfig::validate() const {
  synthesis.validate();
  finetune.validate();
  if (total_synthetic_images < 0 || total_synthetic_images % synthesis.batch_size != 0) {
    throw ConfigError("total_synthetic_images must be a non-negative multiple of synthesis.batch_size");
  }
  for (int bits : {quant.weight_bits, quant.act_bits}) {
    if (bits != quant::kFullPrecisionBits && (bits < 2 || bits > 16)) {
      throw ConfigError("bit-widths must be 32 or lie in [2, 16]");
    }
  }
  if (pretrain.epochs < 0 || pretrain.batch_size < 1 || !(pretrain.lr > 0.0)) {
    throw ConfigError("pretrain needs epochs >= 0, batch_size >= 1 and lr > 0");
  }
  if (diagnose.per_class < 1) throw ConfigError("diagnose.per_class must be >= 1");
}

void apply_setting(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  it->second.set(cfg, value);
}

ExperimentConfig parse_config(const std::string& text, ExperimentConfig base) {
  std::istringstream in(text);
  int lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) + ": expected 'key = value'");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return base;
}

ExperimentConfig load_config(const std::filesystem::path& path) { return parse_config(io::read_file(path)); }

std::map<std::string, std::string> to_settings(const ExperimentConfig& cfg) {
  std::map<std::string, std::string> out;
  for (const auto& [key, field] : fields()) out[key] = field.get(cfg);
  return out;
}

std::string to_text(const ExperimentConfig& cfg) {
  std::string out;
  for (const auto& [key, value] : to_settings(cfg)) out += key + " = " + value + "\n";
  return out;
}

std::string config_hash(const ExperimentConfig& cfg) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : to_text(cfg)) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace intraq::config
