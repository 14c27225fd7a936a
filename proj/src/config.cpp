#include "fireedit/config.hpp"

#include <charconv>
#include <map>
#include <set>
#include <sstream>
#include <variant>

#include "fireedit/io.hpp"

namespace fireedit {

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "config fields assume a 64-bit size_t");
using FieldRef = std::variant<std::size_t*, double*, bool*, std::string*>;

struct Field {
  const char* key;
  FieldRef ref;
};

std::vector<Field> fields(RunConfig& c) {
  ModelConfig& m = c.model;
  return {
      {"seed", &c.seed},
      {"image_size", &m.image_size},
      {"latent_factor", &m.latent_factor},
      {"patch", &m.patch},
      {"vlm_patch", &m.vlm_patch},
      {"feature_width", &m.feature_width},
      {"vlm_width", &m.vlm_width},
      {"vlm_layers", &m.vlm_layers},
      {"vlm_heads", &m.vlm_heads},
      {"vocab_size", &m.vocab_size},
      {"img_tokens", &m.img_tokens},
      {"lora_rank", &m.lora_rank},
      {"lora_alpha", &m.lora_alpha},
      {"region_grid", &m.region_grid},
      {"region_positional", &m.region_positional},
      {"qformer_queries", &m.qformer_queries},
      {"qformer_depth", &m.qformer_depth},
      {"cond_width", &m.cond_width},
      {"cond_heads", &m.cond_heads},
      {"tati_units", &m.tati_units},
      {"tati_queries", &m.tati_queries},
      {"hvca_blocks", &m.hvca_blocks},
      {"hvca_queries", &m.hvca_queries},
      {"hybrid_width", &m.hybrid_width},
      {"unet_channels", &m.unet_channels},
      {"unet_levels", &m.unet_levels},
      {"unet_attention", &m.unet_attention},
      {"steps", &m.steps},
      {"lambda", &m.lambda},
      {"use_region", &m.use_region},
      {"use_tati", &m.use_tati},
      {"use_hvca", &m.use_hvca},
      {"min_shapes", &c.data.min_shapes},
      {"max_shapes", &c.data.max_shapes},
      {"palette_size", &c.data.palette_size},
      {"region_critical_fraction", &c.data.region_critical_fraction},
      {"records", &c.records},
      {"heldout_records", &c.heldout_records},
      {"train_steps", &c.train_steps},
      {"batch_size", &c.batch_size},
      {"learning_rate", &c.learning_rate},
      {"lr_schedule", &c.lr_schedule},
      {"beta1", &c.beta1},
      {"beta2", &c.beta2},
      {"adam_eps", &c.adam_eps},
      {"grad_clip", &c.grad_clip},
      {"p_img", &c.p_img},
      {"p_txt", &c.p_txt},
      {"checkpoint_every", &c.checkpoint_every},
      {"sample_steps", &c.sample_steps},
      {"s_img", &c.s_img},
      {"s_txt", &c.s_txt},
      {"metrics", &c.metrics},
      {"ablate_seeds", &c.ablate_seeds},
      {"ablate_records", &c.ablate_records},
      {"ablate_steps", &c.ablate_steps},
  };
}

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

std::string format(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using V = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<V, double>) return format_double(*p);
        else if constexpr (std::is_same_v<V, bool>) return *p ? "true" : "false";
        else if constexpr (std::is_same_v<V, std::string>) return *p;
        else return std::to_string(*p);
      },
      ref);
}

template <typename V>
bool parse_number(const std::string& s, V& out) {
  const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size();
}

void assign(const char* key, const FieldRef& ref, const std::string& value) {
  const bool ok = std::visit(
      [&](auto* p) -> bool {
        using V = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<V, bool>) {
          if (value == "true" || value == "1") *p = true;
          else if (value == "false" || value == "0") *p = false;
          else return false;
          return true;
        } else if constexpr (std::is_same_v<V, std::string>) {
          *p = value;
          return true;
        } else {
          return parse_number(value, *p);
        }
      },
      ref);
  if (!ok) throw ConfigError(std::string("config: bad value '") + value + "' for key " + key);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

const std::set<std::string> kMetricNames{"l1", "l2", "cosine", "masked_l1"};

}  // namespace

std::vector<std::string> RunConfig::metric_names() const {
  std::vector<std::string> out;
  std::stringstream ss(metrics);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

void RunConfig::validate() const {
  model.validate();
  DatasetParams d = data;
  d.image_size = model.image_size;
  d.validate();
  if (model.vocab_size < vocabulary().size())
    throw ConfigError("vocab_size " + std::to_string(model.vocab_size) + " is smaller than the " +
                      std::to_string(vocabulary().size()) + "-word instruction vocabulary");
  if (records == 0 || batch_size == 0) throw ConfigError("records and batch_size must be positive");
  if (!(p_img >= 0 && p_img <= 1) || !(p_txt >= 0 && p_txt <= 1))
    throw ConfigError("p_img and p_txt must lie in [0, 1]");
  if (!(learning_rate > 0) || !(grad_clip > 0) || !(adam_eps > 0) || !(beta1 >= 0 && beta1 < 1) ||
      !(beta2 >= 0 && beta2 < 1))
    throw ConfigError("optimizer settings out of range");
  if (lr_schedule != "constant" && lr_schedule != "cosine")
    throw ConfigError("lr_schedule must be constant or cosine, got '" + lr_schedule + "'");
  if (sample_steps == 0 || sample_steps > model.steps)
    throw ConfigError("sample_steps must lie in [1, steps]");
  for (const auto& name : metric_names())
    if (kMetricNames.count(name) == 0) throw ConfigError("unknown metric '" + name + "'");
  if (ablate_seeds == 0 || ablate_records == 0) throw ConfigError("ablation needs seeds and records");
}

bool RunConfig::operator==(const RunConfig& other) const { return serialize_config(*this) == serialize_config(other); }

std::string serialize_config(const RunConfig& cfg) {
  RunConfig copy = cfg;
  std::string out;
  for (const Field& f : fields(copy)) out += std::string(f.key) + "=" + format(f.ref) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  auto table = fields(cfg);
  std::map<std::string, FieldRef> by_key;
  for (const Field& f : table) by_key.emplace(f.key, f.ref);
  std::set<std::string> seen;
  std::stringstream ss(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    const std::string key = trim(t.substr(0, eq)), value = trim(t.substr(eq + 1));
    const auto it = by_key.find(key);
    if (it == by_key.end()) throw ConfigError("config line " + std::to_string(lineno) + ": unknown key '" + key + "'");
    if (!seen.insert(key).second)
      throw ConfigError("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
    assign(it->first.c_str(), it->second, value);
  }
  cfg.data.image_size = cfg.model.image_size;
  return cfg;
}

RunConfig load_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

RunConfig micro_config() {
  RunConfig c;
  ModelConfig& m = c.model;
  m.image_size = 8;
  m.patch = 2;
  m.vlm_patch = 4;
  m.feature_width = 6;
  m.vlm_width = 8;
  m.vlm_layers = 1;
  m.vlm_heads = 2;
  m.vocab_size = 20;
  m.img_tokens = 2;
  m.lora_rank = 2;
  m.lora_alpha = 4;
  m.region_grid = 2;
  m.qformer_queries = 3;
  m.qformer_depth = 1;
  m.cond_width = 8;
  m.cond_heads = 2;
  m.tati_units = 1;
  m.tati_queries = 3;
  m.hvca_blocks = 1;
  m.hvca_queries = 4;
  m.hybrid_width = 6;
  m.unet_channels = 4;
  m.unet_levels = 2;
  m.steps = 32;
  c.data.image_size = 8;
  c.data.palette_size = 8;
  c.sample_steps = 4;
  return c;
}

}  // namespace fireedit
