#include "milore/run_config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"

namespace milore {

namespace {

enum class ValueType { Int, Float, Bool, String, Path, Strings };

struct Entry {
  ValueType type;
  std::string raw;
  std::size_t line;
};

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

class Parser {
 public:
  explicit Parser(std::string origin) : origin_(std::move(origin)) {}

  [[noreturn]] void fail(std::size_t line, const std::string& msg) const {
    throw ConfigError(origin_ + ":" + std::to_string(line) + ": " + msg);
  }

  ValueType parse_type(const std::string& t, std::size_t line) const {
    static const std::map<std::string, ValueType> types{{"int", ValueType::Int},         {"float", ValueType::Float},
                                                        {"bool", ValueType::Bool},       {"string", ValueType::String},
                                                        {"path", ValueType::Path},       {"strings", ValueType::Strings}};
    auto it = types.find(t);
    if (it == types.end()) fail(line, "unknown type '" + t + "' (expected int, float, bool, string, path or strings)");
    return it->second;
  }

  std::int64_t as_int(const Entry& e) const {
    std::int64_t v = 0;
    const auto* end = e.raw.data() + e.raw.size();
    auto [ptr, ec] = std::from_chars(e.raw.data(), end, v);
    if (ec != std::errc() || ptr != end) fail(e.line, "'" + e.raw + "' is not an integer");
    return v;
  }

  std::size_t as_count(const Entry& e) const {
    const auto v = as_int(e);
    if (v < 0) fail(e.line, "expected a non-negative integer, got " + e.raw);
    return static_cast<std::size_t>(v);
  }

  double as_float(const Entry& e) const {
    double v = 0.0;
    const auto* end = e.raw.data() + e.raw.size();
    auto [ptr, ec] = std::from_chars(e.raw.data(), end, v);
    if (ec != std::errc() || ptr != end) fail(e.line, "'" + e.raw + "' is not a number");
    return v;
  }

  bool as_bool(const Entry& e) const {
    if (e.raw == "true") return true;
    if (e.raw == "false") return false;
    fail(e.line, "'" + e.raw + "' is not true or false");
  }

  std::vector<std::string> as_strings(const Entry& e) const {
    std::vector<std::string> out;
    std::stringstream ss(e.raw);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) fail(e.line, "empty item in list");
      out.push_back(item);
    }
    return out;
  }

  std::string origin_;
};

// Typed setter for one key.
struct Field {
  ValueType type;
  std::function<void(const Parser&, const Entry&)> set;
};

const char* type_name(ValueType t) {
  switch (t) {
    case ValueType::Int:
      return "int";
    case ValueType::Float:
      return "float";
    case ValueType::Bool:
      return "bool";
    case ValueType::String:
      return "string";
    case ValueType::Path:
      return "path";
    case ValueType::Strings:
      return "strings";
  }
  return "?";
}

TransitionShape transition_from(const Parser& p, const Entry& e) {
  if (e.raw == "forward") return TransitionShape::Forward;
  if (e.raw == "backward") return TransitionShape::Backward;
  if (e.raw == "random") return TransitionShape::Random;
  if (e.raw == "mirrored") return TransitionShape::Mirrored;
  p.fail(e.line, "transition must be forward, backward, random or mirrored");
}

using Schema = std::map<std::string, Field>;

Field count_field(std::size_t& dst) {
  return {ValueType::Int, [&dst](const Parser& p, const Entry& e) { dst = p.as_count(e); }};
}
Field seed_field(std::uint64_t& dst) {
  return {ValueType::Int, [&dst](const Parser& p, const Entry& e) { dst = static_cast<std::uint64_t>(p.as_count(e)); }};
}
Field float_field(double& dst) {
  return {ValueType::Float, [&dst](const Parser& p, const Entry& e) { dst = p.as_float(e); }};
}
Field bool_field(bool& dst) {
  return {ValueType::Bool, [&dst](const Parser& p, const Entry& e) { dst = p.as_bool(e); }};
}
Field string_field(std::string& dst) {
  return {ValueType::String, [&dst](const Parser&, const Entry& e) { dst = e.raw; }};
}

Schema stage_schema(StageConfig& s) {
  return {{"steps", count_field(s.schedule.total_steps)},
          {"warmup", count_field(s.schedule.warmup_steps)},
          {"peak_lr", float_field(s.schedule.peak_lr)},
          {"batch_size", count_field(s.train.batch_size)},
          {"crop_frames", count_field(s.train.crop_frames)}};
}

}  // namespace

const LanguageConfig& CorpusConfig::language(const std::string& name) const {
  for (const auto& l : languages) {
    if (l.spec.name == name) return l;
  }
  throw ConfigError("no [language." + name + "] section");
}

void RunConfig::validate() const {
  if (corpus.languages.empty()) throw ConfigError("at least one [language.<name>] section is required");
  if (corpus.base_language.empty()) throw ConfigError("corpus.base is required");
  corpus.language(corpus.base_language);
  for (const auto& n : corpus.new_languages) {
    corpus.language(n);
    if (n == corpus.base_language) throw ConfigError("language " + n + " is both base and new");
  }
  const std::size_t d_feat = corpus.languages.front().spec.d_feat;
  for (const auto& l : corpus.languages) {
    if (l.spec.d_feat != d_feat) throw ConfigError("all languages must share d_feat");
    if (!(l.spec.hours > 0.0) || !(l.heldout_hours > 0.0)) throw ConfigError("language " + l.spec.name + " needs positive hours");
    if (l.spec.states == 0) throw ConfigError("language " + l.spec.name + " needs at least one state");
    if (l.spec.stickiness < 0.0 || l.spec.stickiness > 1.0) throw ConfigError("stickiness must lie in [0, 1]");
    if (l.spec.mirror_stickiness && !(*l.spec.mirror_stickiness >= 0.0 && *l.spec.mirror_stickiness <= 1.0)) {
      throw ConfigError("mirror_stickiness must lie in [0, 1]");
    }
  }
  if (corpus.min_duration_s > corpus.max_duration_s) throw ConfigError("corpus min_duration exceeds max_duration");
  EncoderConfig enc = encoder;
  enc.d_feat = d_feat;
  enc.codebook_size = kmeans.clusters;
  enc.validate();
  kmeans.validate();
  pretrain.schedule.validate();
  continual.stage.schedule.validate();
  if (continual.reference_layer > encoder.layers) {
    throw ConfigError("continual.reference_layer " + std::to_string(continual.reference_layer) + " out of range [0, " +
                      std::to_string(encoder.layers) + "]");
  }
  if (continual.clusters > 0) {
    KMeansConfig k = kmeans;
    k.clusters = continual.clusters;
    k.validate();
  }
  if (probe.layer && *probe.layer > encoder.layers) {
    throw ConfigError("probe.layer " + std::to_string(*probe.layer) + " out of range [0, " + std::to_string(encoder.layers) + "]");
  }
  if (continual.replay_fraction && !(*continual.replay_fraction > 0.0 && *continual.replay_fraction < 1.0)) {
    throw ConfigError("continual.replay_fraction must lie in (0, 1)");
  }
  if (continual.base_checkpoint && !std::filesystem::is_directory(*continual.base_checkpoint)) {
    throw ConfigError("continual.base_checkpoint " + continual.base_checkpoint->string() + " does not exist");
  }
  for (const auto& [r, n] : sweep.grid) {
    if (r == 0 || n == 0) throw ConfigError("sweep grid entries need positive rank and expert count");
  }
}

RunConfig parse_run_config(const std::string& text, const std::string& origin) {
  Parser parser(origin);
  // section -> key -> entry, with the section's header line
  std::map<std::string, std::map<std::string, Entry>> sections;
  std::map<std::string, std::size_t> section_line;
  std::vector<std::string> language_order;
  std::string current;
  std::istringstream in(text);
  std::string raw_line;
  std::size_t line_no = 0;
  while (std::getline(in, raw_line)) {
    ++line_no;
    const auto hash = raw_line.find('#');
    std::string line = trim(hash == std::string::npos ? raw_line : raw_line.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') parser.fail(line_no, "unterminated section header");
      current = trim(line.substr(1, line.size() - 2));
      if (current.empty()) parser.fail(line_no, "empty section name");
      if (section_line.count(current)) parser.fail(line_no, "section [" + current + "] appears twice");
      section_line[current] = line_no;
      sections[current];
      if (current.rfind("language.", 0) == 0) language_order.push_back(current.substr(9));
      continue;
    }
    if (current.empty()) parser.fail(line_no, "entry outside of any section");
    const auto colon = line.find(':');
    const auto eq = line.find('=');
    if (colon == std::string::npos || eq == std::string::npos || eq < colon) {
      parser.fail(line_no, "expected `key: type = value`");
    }
    const std::string key = trim(line.substr(0, colon));
    const std::string type = trim(line.substr(colon + 1, eq - colon - 1));
    std::string value = trim(line.substr(eq + 1));
    if (key.empty()) parser.fail(line_no, "missing key");
    if (value.size() >= 2 && value.front() == '"' && value.back() == '"') value = value.substr(1, value.size() - 2);
    Entry e{parser.parse_type(type, line_no), value, line_no};
    if (!sections[current].emplace(key, e).second) parser.fail(line_no, "duplicate key '" + key + "'");
  }

  RunConfig cfg;
  std::string new_languages_raw;
  std::optional<double> replay_fraction;
  std::string mode = "milore";
  std::string base_checkpoint;
  std::size_t kmeans_seeds = cfg.kmeans.seeds.size();
  std::size_t mask_span = cfg.encoder.mask.span;
  double mask_prob = cfg.encoder.mask.start_prob;
  std::vector<std::string> grid;

  std::map<std::string, Schema> schemas;
  schemas["run"] = {{"name", string_field(cfg.name)},
                    {"seed", seed_field(cfg.seed)},
                    {"output", {ValueType::Path, [&](const Parser&, const Entry& e) { cfg.output = e.raw; }}}};
  schemas["corpus"] = {{"base", string_field(cfg.corpus.base_language)},
                       {"new", {ValueType::Strings,
                                [&](const Parser& p, const Entry& e) { cfg.corpus.new_languages = p.as_strings(e); }}},
                       {"min_duration", float_field(cfg.corpus.min_duration_s)},
                       {"max_duration", float_field(cfg.corpus.max_duration_s)}};
  schemas["encoder"] = {{"layers", count_field(cfg.encoder.layers)},
                        {"d_model", count_field(cfg.encoder.d_model)},
                        {"heads", count_field(cfg.encoder.heads)},
                        {"d_ffn", count_field(cfg.encoder.d_ffn)},
                        {"max_frames", count_field(cfg.encoder.max_frames)},
                        {"mask_span", count_field(mask_span)},
                        {"mask_prob", float_field(mask_prob)}};
  schemas["kmeans"] = {{"clusters", count_field(cfg.kmeans.clusters)},
                       {"batch_size", count_field(cfg.kmeans.batch_size)},
                       {"seeds", count_field(kmeans_seeds)},
                       {"max_iterations", count_field(cfg.kmeans.max_iterations)},
                       {"validation_fraction", float_field(cfg.kmeans.validation_fraction)},
                       {"budget_hours", float_field(cfg.kmeans.budget_hours)}};
  schemas["pretrain"] = stage_schema(cfg.pretrain);
  schemas["continual"] = stage_schema(cfg.continual.stage);
  schemas["continual"]["mode"] = string_field(mode);
  schemas["continual"]["replay"] = bool_field(cfg.continual.replay);
  schemas["continual"]["replay_fraction"] = {
      ValueType::Float, [&](const Parser& p, const Entry& e) { replay_fraction = p.as_float(e); }};
  schemas["continual"]["reference_layer"] = count_field(cfg.continual.reference_layer);
  schemas["continual"]["clusters"] = count_field(cfg.continual.clusters);
  schemas["continual"]["base_checkpoint"] = {ValueType::Path,
                                             [&](const Parser&, const Entry& e) { base_checkpoint = e.raw; }};
  schemas["milore"] = {{"experts", count_field(cfg.milore.experts)},
                       {"rank", count_field(cfg.milore.rank)},
                       {"scale", float_field(cfg.milore.scale)}};
  schemas["probe"] = {{"layer", {ValueType::Int, [&](const Parser& p, const Entry& e) { cfg.probe.layer = p.as_count(e); }}},
                      {"masked", bool_field(cfg.probe.masked)},
                      {"iterations", count_field(cfg.probe.iterations)},
                      {"learning_rate", float_field(cfg.probe.learning_rate)},
                      {"max_train_frames", count_field(cfg.probe.max_train_frames)}};
  schemas["sweep"] = {
      {"grid", {ValueType::Strings, [&](const Parser& p, const Entry& e) { grid = p.as_strings(e); }}},
      {"head_classes", count_field(cfg.head_classes)}};

  cfg.corpus.languages.resize(language_order.size());
  for (std::size_t i = 0; i < language_order.size(); ++i) {
    auto& lc = cfg.corpus.languages[i];
    lc.spec.name = language_order[i];
    auto& sp = lc.spec;
    schemas["language." + language_order[i]] = {
        {"states", count_field(sp.states)},
        {"d_feat", count_field(sp.d_feat)},
        {"hours", float_field(sp.hours)},
        {"heldout_hours", float_field(lc.heldout_hours)},
        {"min_duration", float_field(sp.min_duration_s)},
        {"max_duration", float_field(sp.max_duration_s)},
        {"fps", float_field(sp.frames_per_second)},
        {"emission_seed", seed_field(sp.emission_seed)},
        {"cloud_offset", float_field(sp.cloud_offset)},
        {"spread", float_field(sp.spread)},
        {"noise", float_field(sp.noise)},
        {"transition", {ValueType::String, [&sp](const Parser& p, const Entry& e) { sp.transition = transition_from(p, e); }}},
        {"stickiness", float_field(sp.stickiness)},
        {"mirror_stickiness",
         {ValueType::Float, [&sp](const Parser& p, const Entry& e) { sp.mirror_stickiness = p.as_float(e); }}},
        {"transition_seed", seed_field(sp.transition_seed)}};
  }

  for (const auto& [section, entries] : sections) {
    auto sit = schemas.find(section);
    if (sit == schemas.end()) parser.fail(section_line[section], "unknown section [" + section + "]");
    for (const auto& [key, entry] : entries) {
      auto fit = sit->second.find(key);
      if (fit == sit->second.end()) parser.fail(entry.line, "unknown key '" + key + "' in [" + section + "]");
      const auto expected = fit->second.type;
      const bool float_from_int = expected == ValueType::Float && entry.type == ValueType::Int;
      if (entry.type != expected && !float_from_int) {
        parser.fail(entry.line, "key '" + key + "' has type " + type_name(expected) + ", not " + type_name(entry.type));
      }
      fit->second.set(parser, entry);
    }
  }

  cfg.continual.mode = train_mode_from_string(mode);
  cfg.continual.replay_fraction = replay_fraction;
  if (!base_checkpoint.empty()) cfg.continual.base_checkpoint = base_checkpoint;
  cfg.kmeans.seeds = KMeansConfig::default_seeds(kmeans_seeds);
  cfg.encoder.mask = {mask_span, mask_prob};
  if (!cfg.corpus.languages.empty()) {
    cfg.encoder.d_feat = cfg.corpus.languages.front().spec.d_feat;
    cfg.kmeans.frames_per_second = cfg.corpus.languages.front().spec.frames_per_second;
  }
  cfg.encoder.codebook_size = cfg.kmeans.clusters;
  for (const auto& item : grid) {
    const auto x = item.find('x');
    std::size_t r = 0, n = 0;
    const bool ok = x != std::string::npos &&
                    std::from_chars(item.data(), item.data() + x, r).ptr == item.data() + x &&
                    std::from_chars(item.data() + x + 1, item.data() + item.size(), n).ptr == item.data() + item.size();
    if (!ok) parser.fail(sections["sweep"]["grid"].line, "grid entry '" + item + "' is not <rank>x<experts>");
    cfg.sweep.grid.emplace_back(r, n);
  }
  // An unset transition seed follows the run seed, per language.
  for (std::size_t i = 0; i < language_order.size(); ++i) {
    auto& sp = cfg.corpus.languages[i].spec;
    if (sp.transition_seed == 0) sp.transition_seed = derive_seed(cfg.seed, "transition/" + sp.name);
  }

  if (const char* root = std::getenv("MILORE_OUTPUT_ROOT"); root && *root) {
    cfg.output = cfg.output.is_absolute() ? std::filesystem::path(root) / cfg.output.filename()
                                          : std::filesystem::path(root) / cfg.output;
  }
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const IoError&) {
    throw ConfigError("cannot read config " + path.string());
  }
  return parse_run_config(text, path.string());
}

}  // namespace milore
