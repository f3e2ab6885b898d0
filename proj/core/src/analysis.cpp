#include "milore/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <fmt/format.h>
#include <json.hpp>

#include "milore/binary_io.hpp"
#include "milore/errors.hpp"
#include "milore/ops.hpp"

namespace milore {

using nlohmann::json;

namespace {

void add_row(ParamReport& r, std::string name, Shape shape, bool trainable) {
  const std::size_t n = shape_numel(shape);
  r.rows.push_back({std::move(name), std::move(shape), n, trainable});
  r.total += n;
  if (trainable) r.trainable += n;
}

void add_linear(ParamReport& r, const std::string& prefix, std::size_t in, std::size_t out, bool trainable) {
  add_row(r, prefix + ".weight", {out, in}, trainable);
  add_row(r, prefix + ".bias", {out}, trainable);
}

void add_adapters(ParamReport& r, const std::string& prefix, std::size_t in, std::size_t out, const MiLoreConfig& m,
                  bool trainable) {
  for (std::size_t i = 0; i < m.experts; ++i) {
    const std::string p = prefix + ".experts." + std::to_string(i);
    add_row(r, p + ".lora_a", {m.rank, in}, trainable);
    add_row(r, p + ".lora_b", {out, m.rank}, trainable);
  }
  add_row(r, prefix + ".router.weight", {m.experts, in}, trainable);
}

ParamReport report_of(const std::vector<NamedTensor>& params) {
  ParamReport r;
  for (const auto& p : params) add_row(r, p.name, p.tensor.shape(), p.tensor.requires_grad());
  return r;
}

std::string csv_double(double v) { return fmt::format("{}", v); }

json param_json(const ParamReport& r) {
  json rows = json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"name", row.name}, {"shape", row.shape}, {"count", row.count}, {"trainable", row.trainable}});
  }
  return {{"rows", rows}, {"total", r.total}, {"trainable", r.trainable}, {"fraction", r.fraction()}};
}

ParamReport param_from_json(const json& j) {
  ParamReport r;
  for (const auto& row : j.at("rows")) {
    r.rows.push_back({row.at("name"), row.at("shape").get<Shape>(), row.at("count"), row.at("trainable")});
  }
  r.total = j.at("total");
  r.trainable = j.at("trainable");
  return r;
}

json activation_json(const ActivationProfile& p) {
  json cells = json::array();
  for (std::size_t l = 0; l < p.layers; ++l) {
    for (std::size_t g = 0; g < p.languages.size(); ++g) {
      const auto& c = p.cells[l][g];
      cells.push_back({{"layer", l}, {"language", p.languages[g]}, {"mean_weight", c.mean_weight}, {"frames", c.frames}});
    }
  }
  return {{"layers", p.layers}, {"experts", p.experts}, {"languages", p.languages}, {"cells", cells}};
}

ActivationProfile activation_from_json(const json& j) {
  ActivationProfile p;
  p.layers = j.at("layers");
  p.experts = j.at("experts");
  p.languages = j.at("languages").get<std::vector<std::string>>();
  p.cells.assign(p.layers, std::vector<ActivationCell>(p.languages.size()));
  for (const auto& c : j.at("cells")) {
    const std::size_t l = c.at("layer");
    const std::string lang = c.at("language");
    const auto it = std::find(p.languages.begin(), p.languages.end(), lang);
    if (l >= p.layers || it == p.languages.end()) throw IntegrityError("activation cell outside the profile");
    auto& cell = p.cells[l][static_cast<std::size_t>(it - p.languages.begin())];
    cell.mean_weight = c.at("mean_weight").get<std::vector<double>>();
    cell.frames = c.at("frames");
  }
  return p;
}

json probe_json(const ProbeResult& r) {
  return {{"task", to_string(r.task)},
          {"layer", r.layer},
          {"accuracy", r.accuracy},
          {"per_language", r.per_language},
          {"frames", r.frames}};
}

ProbeResult probe_from_json(const json& j) {
  ProbeResult r;
  r.task = probe_task_from_string(j.at("task"));
  r.layer = j.at("layer");
  r.accuracy = j.at("accuracy");
  r.per_language = j.at("per_language").get<std::map<std::string, double>>();
  r.frames = j.at("frames").get<std::map<std::string, std::size_t>>();
  return r;
}

std::vector<std::string> metric_columns(const std::vector<AblationRow>& rows) {
  std::vector<std::string> cols;
  for (const auto& r : rows) {
    for (const auto& [k, v] : r.metrics) {
      if (std::find(cols.begin(), cols.end(), k) == cols.end()) cols.push_back(k);
    }
  }
  std::sort(cols.begin(), cols.end());
  return cols;
}

std::ofstream open_report(const std::filesystem::path& path) { return io::open_for_write(path); }

void check_written(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

double ParamReport::fraction() const {
  return total == 0 ? 0.0 : static_cast<double>(trainable) / static_cast<double>(total);
}

void ParamReport::audit() const {
  std::size_t t = 0, tr = 0;
  for (const auto& r : rows) {
    if (r.count != shape_numel(r.shape)) throw IntegrityError("row " + r.name + " count disagrees with its shape");
    t += r.count;
    if (r.trainable) tr += r.count;
  }
  if (t != total || tr != trainable) throw IntegrityError("parameter report totals disagree with its rows");
}

std::string format_shape(const Shape& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? "x" : "") + std::to_string(shape[i]);
  return s;
}

ParamReport parameter_layout(const EncoderConfig& c, std::size_t head_classes, TrainMode mode) {
  c.validate();
  if (mode == TrainMode::MiLore && !c.milore) throw ConfigError("milore mode needs a milore section");
  if (mode != TrainMode::MiLore && c.milore) throw ConfigError("MiLorE modules are only trained in milore mode");
  const bool backbone = mode != TrainMode::MiLore;
  const std::size_t d = c.d_model, f = c.d_ffn;
  ParamReport r;
  add_linear(r, "frontend", c.d_feat, d, backbone);
  add_row(r, "positional", {c.max_frames, d}, backbone);
  add_row(r, "mask_embedding", {d}, backbone);
  for (std::size_t l = 0; l < c.layers; ++l) {
    const std::string p = "blocks." + std::to_string(l);
    add_row(r, p + ".attn_norm.gamma", {d}, backbone);
    add_row(r, p + ".attn_norm.beta", {d}, backbone);
    for (const char* n : {"query", "key", "value", "output"}) add_linear(r, p + ".attn." + n, d, d, backbone);
    add_row(r, p + ".ffn_norm.gamma", {d}, backbone);
    add_row(r, p + ".ffn_norm.beta", {d}, backbone);
    add_linear(r, p + ".ffn.up", d, f, backbone);
    add_linear(r, p + ".ffn.down", f, d, backbone);
  }
  if (c.milore) {
    for (std::size_t l = 0; l < c.layers; ++l) {
      const std::string p = "blocks." + std::to_string(l);
      add_adapters(r, p + ".ffn.up", d, f, *c.milore, true);
      add_adapters(r, p + ".ffn.down", f, d, *c.milore, true);
    }
  }
  add_row(r, "head.projection", {head_classes, d}, true);
  return r;
}

ParamReport count_parameters(const TrainState& state) { return report_of(state.named_parameters()); }

ParamReport count_parameters(const std::filesystem::path& checkpoint_dir) {
  return count_parameters(load_checkpoint(checkpoint_dir));
}

double ActivationProfile::mean(std::size_t layer, const std::string& language, std::size_t expert) const {
  const auto it = std::find(languages.begin(), languages.end(), language);
  if (layer >= layers || it == languages.end() || expert >= experts) {
    throw IndexError("activation profile has no cell (" + std::to_string(layer) + ", " + language + ", " +
                     std::to_string(expert) + ")");
  }
  return cells[layer][static_cast<std::size_t>(it - languages.begin())].mean_weight[expert];
}

ActivationProfile expert_activation_profile(const Encoder& encoder, const std::vector<Utterance>& utterances,
                                            RouterSite site) {
  const auto& cfg = encoder.config();
  if (!cfg.milore) throw ConfigError("activation profile needs an encoder with MiLorE modules");
  if (utterances.empty()) throw ConfigError("activation profile needs held-out utterances");
  ActivationProfile p;
  p.layers = cfg.layers;
  p.experts = cfg.milore->experts;
  for (const auto& u : utterances) p.languages.push_back(u.language);
  std::sort(p.languages.begin(), p.languages.end());
  p.languages.erase(std::unique(p.languages.begin(), p.languages.end()), p.languages.end());

  std::vector<const Utterance*> ordered;
  for (const auto& u : utterances) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(), [](const Utterance* a, const Utterance* b) {
    return a->language != b->language ? a->language < b->language : a->id < b->id;
  });

  const std::size_t n_lang = p.languages.size(), e = p.experts;
  std::vector<std::vector<std::vector<double>>> sums(p.layers, std::vector<std::vector<double>>(n_lang, std::vector<double>(e, 0.0)));
  std::vector<std::size_t> frames(n_lang, 0);

  NoGradGuard no_grad;
  struct Piece {
    std::size_t lang, start, length;
    const Utterance* u;
  };
  std::vector<Piece> pieces;
  for (const auto* u : ordered) {
    const std::size_t g = static_cast<std::size_t>(
        std::lower_bound(p.languages.begin(), p.languages.end(), u->language) - p.languages.begin());
    for (std::size_t s = 0; s < u->length(); s += cfg.max_frames) {
      pieces.push_back({g, s, std::min(cfg.max_frames, u->length() - s), u});
    }
  }
  constexpr std::size_t kChunk = 16;
  for (std::size_t p0 = 0; p0 < pieces.size(); p0 += kChunk) {
    const std::size_t p1 = std::min(pieces.size(), p0 + kChunk);
    std::vector<Tensor> windows;
    for (std::size_t q = p0; q < p1; ++q) {
      const auto& pc = pieces[q];
      const std::size_t df = pc.u->frames.dim(1);
      const auto src = pc.u->frames.data();
      windows.push_back(Tensor::from({pc.length, df}, std::vector<double>(src.begin() + static_cast<long>(pc.start * df),
                                                                        src.begin() + static_cast<long>((pc.start + pc.length) * df))));
    }
    const FrameBatch batch = make_batch(windows);
    RoutingTrace trace;
    encoder.encode(batch, nullptr, &trace);
    const auto& routes = site == RouterSite::Up ? trace.up : trace.down;
    const std::size_t t = batch.frames();
    for (std::size_t l = 0; l < p.layers; ++l) {
      const auto w = routes[l].data();
      for (std::size_t q = p0; q < p1; ++q) {
        const auto& pc = pieces[q];
        const std::size_t b = q - p0;
        for (std::size_t f = 0; f < pc.length; ++f) {
          for (std::size_t k = 0; k < e; ++k) sums[l][pc.lang][k] += w[(b * t + f) * e + k];
        }
      }
    }
    for (std::size_t q = p0; q < p1; ++q) frames[pieces[q].lang] += pieces[q].length;
  }
  p.cells.assign(p.layers, std::vector<ActivationCell>(n_lang));
  for (std::size_t l = 0; l < p.layers; ++l) {
    for (std::size_t g = 0; g < n_lang; ++g) {
      auto& cell = p.cells[l][g];
      cell.frames = frames[g];
      cell.mean_weight.resize(e);
      for (std::size_t k = 0; k < e; ++k) cell.mean_weight[k] = sums[l][g][k] / static_cast<double>(frames[g]);
    }
  }
  return p;
}

std::vector<std::filesystem::path> emit_report(const Report& report, const std::filesystem::path& dir,
                                               ReportFormat format) {
  std::vector<std::filesystem::path> written;
  const bool csv = format != ReportFormat::Json;
  const bool js = format != ReportFormat::Csv;

  if (csv) {
    {
      const auto path = dir / "params.csv";
      auto out = open_report(path);
      out << "name,shape,count,trainable\n";
      if (report.params) {
        for (const auto& r : report.params->rows) {
          out << r.name << ',' << format_shape(r.shape) << ',' << r.count << ',' << (r.trainable ? 1 : 0) << '\n';
        }
      }
      check_written(out, path);
      written.push_back(path);
    }
    {
      const auto path = dir / "activation.csv";
      auto out = open_report(path);
      out << "layer,language,expert,mean_weight,frames\n";
      if (report.activation) {
        const auto& p = *report.activation;
        for (std::size_t l = 0; l < p.layers; ++l) {
          for (std::size_t g = 0; g < p.languages.size(); ++g) {
            const auto& c = p.cells[l][g];
            for (std::size_t k = 0; k < c.mean_weight.size(); ++k) {
              out << l << ',' << p.languages[g] << ',' << k + 1 << ',' << csv_double(c.mean_weight[k]) << ','
                  << c.frames << '\n';
            }
          }
        }
      }
      check_written(out, path);
      written.push_back(path);
    }
    {
      const auto path = dir / "probes.csv";
      auto out = open_report(path);
      out << "task,layer,language,accuracy,frames\n";
      for (const auto& r : report.probes) {
        std::size_t total = 0;
        for (const auto& [lang, n] : r.frames) total += n;
        out << to_string(r.task) << ',' << r.layer << ",all," << csv_double(r.accuracy) << ',' << total << '\n';
        for (const auto& [lang, acc] : r.per_language) {
          out << to_string(r.task) << ',' << r.layer << ',' << lang << ',' << csv_double(acc) << ','
              << r.frames.at(lang) << '\n';
        }
      }
      check_written(out, path);
      written.push_back(path);
    }
    {
      const auto path = dir / "ablation.csv";
      auto out = open_report(path);
      const auto cols = metric_columns(report.ablation);
      out << "lora_rank,experts,trainable_params,total_params,trainable_fraction";
      for (const auto& c : cols) out << ',' << c;
      out << '\n';
      for (const auto& r : report.ablation) {
        const double frac = r.total ? static_cast<double>(r.trainable) / static_cast<double>(r.total) : 0.0;
        out << r.rank << ',' << r.experts << ',' << r.trainable << ',' << r.total << ',' << csv_double(frac);
        for (const auto& c : cols) {
          const auto it = r.metrics.find(c);
          out << ',' << (it == r.metrics.end() ? std::string() : csv_double(it->second));
        }
        out << '\n';
      }
      check_written(out, path);
      written.push_back(path);
    }
  }
  if (js) {
    json j;
    j["params"] = report.params ? param_json(*report.params) : json(nullptr);
    j["activation"] = report.activation ? activation_json(*report.activation) : json(nullptr);
    j["probes"] = json::array();
    for (const auto& r : report.probes) j["probes"].push_back(probe_json(r));
    j["ablation"] = json::array();
    for (const auto& r : report.ablation) {
      j["ablation"].push_back({{"lora_rank", r.rank},
                               {"experts", r.experts},
                               {"trainable_params", r.trainable},
                               {"total_params", r.total},
                               {"metrics", r.metrics}});
    }
    const auto path = dir / "report.json";
    auto out = open_report(path);
    out << j.dump(2) << '\n';
    check_written(out, path);
    written.push_back(path);
  }
  return written;
}

Report read_report_json(const std::filesystem::path& dir) {
  Report r;
  try {
    const auto j = json::parse(io::read_text(dir / "report.json"));
    if (!j.at("params").is_null()) r.params = param_from_json(j.at("params"));
    if (!j.at("activation").is_null()) r.activation = activation_from_json(j.at("activation"));
    for (const auto& p : j.at("probes")) r.probes.push_back(probe_from_json(p));
    for (const auto& a : j.at("ablation")) {
      r.ablation.push_back({a.at("lora_rank"), a.at("experts"), a.at("trainable_params"), a.at("total_params"),
                            a.at("metrics").get<std::map<std::string, double>>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IntegrityError((dir / "report.json").string() + ": malformed report (" + e.what() + ")");
  }
  return r;
}

}  // namespace milore
