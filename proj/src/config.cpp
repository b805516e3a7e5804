#include "comvit/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "comvit/errors.hpp"

namespace comvit {

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

template <typename Int>
Int parse_uint(std::string_view key, std::string_view text) {
  Int value{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("'" + std::string(key) + "' expects a non-negative integer, got '" + std::string(text) + "'");
  }
  return value;
}

double parse_real(std::string_view key, std::string_view text) {
  std::string s(text);
  std::size_t used = 0;
  double value = 0;
  try {
    value = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != s.size()) {
    throw ConfigError("'" + std::string(key) + "' expects a number, got '" + s + "'");
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("'" + std::string(key) + "' expects true/false, got '" + std::string(text) + "'");
}

std::string format_real(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, std::string_view)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MODEL_SIZE(name) \
  Field{"model." #name, [](RunConfig& c, std::string_view v) { c.model.name = parse_uint<std::size_t>("model." #name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.model.name); }}
#define MODEL_REAL(name) \
  Field{"model." #name, [](RunConfig& c, std::string_view v) { c.model.name = parse_real("model." #name, v); }, \
        [](const RunConfig& c) { return format_real(c.model.name); }}
#define MODEL_BOOL(name) \
  Field{"model." #name, [](RunConfig& c, std::string_view v) { c.model.name = parse_bool("model." #name, v); }, \
        [](const RunConfig& c) { return std::string(c.model.name ? "true" : "false"); }}
#define TRAIN_SIZE(name) \
  Field{"train." #name, [](RunConfig& c, std::string_view v) { c.train.name = parse_uint<std::size_t>("train." #name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.train.name); }}
#define TRAIN_U64(name) \
  Field{"train." #name, [](RunConfig& c, std::string_view v) { c.train.name = parse_uint<std::uint64_t>("train." #name, v); }, \
        [](const RunConfig& c) { return std::to_string(c.train.name); }}
#define TRAIN_REAL(name) \
  Field{"train." #name, [](RunConfig& c, std::string_view v) { c.train.name = parse_real("train." #name, v); }, \
        [](const RunConfig& c) { return format_real(c.train.name); }}
#define TRAIN_BOOL(name) \
  Field{"train." #name, [](RunConfig& c, std::string_view v) { c.train.name = parse_bool("train." #name, v); }, \
        [](const RunConfig& c) { return std::string(c.train.name ? "true" : "false"); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table{
      MODEL_SIZE(image_size),      MODEL_SIZE(in_channels),    MODEL_SIZE(layers),
      MODEL_SIZE(hidden),          MODEL_SIZE(heads),          MODEL_SIZE(mlp_size),
      MODEL_SIZE(num_classes),     MODEL_SIZE(stem_channels),  MODEL_SIZE(conv_kernel),
      MODEL_SIZE(conv_stride),     MODEL_SIZE(conv_padding),   MODEL_SIZE(pool_kernel),
      MODEL_SIZE(pool_stride),     MODEL_SIZE(pool_padding),   MODEL_REAL(drop_path_rate),
      MODEL_REAL(temperature_init), MODEL_BOOL(diagonal_mask), MODEL_BOOL(pre_norm),
      TRAIN_SIZE(epochs),          TRAIN_REAL(base_lr),        TRAIN_REAL(warmup_epochs),
      TRAIN_REAL(cooldown_epochs), TRAIN_REAL(min_lr),         TRAIN_REAL(warmup_start_factor),
      TRAIN_REAL(weight_decay),    TRAIN_REAL(beta1),          TRAIN_REAL(beta2),
      TRAIN_REAL(eps),             TRAIN_SIZE(batch_size),     TRAIN_REAL(mixup_alpha),
      TRAIN_REAL(cutmix_alpha),    TRAIN_REAL(cutmix_prob),    TRAIN_REAL(mixup_off_epoch),
      TRAIN_REAL(label_smoothing), TRAIN_REAL(clip_max_norm),  TRAIN_U64(seed),
      TRAIN_BOOL(hflip),           TRAIN_BOOL(random_resized_crop), TRAIN_REAL(crop_min_scale),
      TRAIN_SIZE(eval_batch_size),
  };
  return table;
}

}  // namespace

RunConfig paper_preset() { return RunConfig{}; }

RunConfig desk_preset() {
  RunConfig c;
  c.model.image_size = 64;
  c.model.in_channels = 1;
  c.model.num_classes = 2;
  c.model.layers = 2;
  c.model.hidden = 64;
  c.model.heads = 2;
  c.model.mlp_size = 128;
  c.model.stem_channels = 16;

  c.train.epochs = 20;
  c.train.batch_size = 64;
  c.train.base_lr = 1e-3;
  c.train.warmup_epochs = 1;
  c.train.cooldown_epochs = 1;
  c.train.mixup_off_epoch = 12;  // 175/300 of the run
  return c;
}

RunConfig preset(std::string_view name) {
  if (name == "paper") return paper_preset();
  if (name == "desk") return desk_preset();
  throw ConfigError("unknown preset '" + std::string(name) + "' (expected paper or desk)");
}

void apply_setting(RunConfig& config, std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(config, trim(value));
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

void apply_config_text(RunConfig& config, std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(number) + ": expected key = value");
    }
    apply_setting(config, trim(std::string_view(body).substr(0, eq)), std::string_view(body).substr(eq + 1));
  }
}

void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  apply_config_text(config, buf.str());
}

std::string render_config(const RunConfig& config) {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(config) + "\n";
  return out;
}

std::vector<std::string> config_keys() {
  std::vector<std::string> keys;
  for (const Field& f : fields()) keys.push_back(f.key);
  return keys;
}

}  // namespace comvit
