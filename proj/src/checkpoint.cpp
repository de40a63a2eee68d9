#include "exitdepth/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "exitdepth/errors.hpp"
#include "json.hpp"

namespace exitdepth {

using nlohmann::json;

namespace {

constexpr int kVersion = 1;

json config_to(const ModelConfig& c) {
  return {{"blocks", c.blocks},         {"encoder_layers", c.encoder_layers},
          {"d_enc", c.d_enc},           {"d_dec", c.d_dec},
          {"d_ffn", c.d_ffn},           {"heads", c.heads},
          {"src_vocab", c.src_vocab},   {"tgt_vocab", c.tgt_vocab},
          {"tie_classifiers", c.tie_classifiers},
          {"tie_embeddings", c.tie_embeddings},
          {"seed", c.seed}};
}

ModelConfig config_from(const json& j) {
  ModelConfig c;
  c.blocks = j.value("blocks", c.blocks);
  c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
  c.d_enc = j.value("d_enc", c.d_enc);
  c.d_dec = j.value("d_dec", c.d_dec);
  c.d_ffn = j.value("d_ffn", c.d_ffn);
  c.heads = j.value("heads", c.heads);
  c.src_vocab = j.value("src_vocab", c.src_vocab);
  c.tgt_vocab = j.value("tgt_vocab", c.tgt_vocab);
  c.tie_classifiers = j.value("tie_classifiers", c.tie_classifiers);
  c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
  if (c.tie_embeddings) c.tie_classifiers = true;
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

}  // namespace

std::string model_config_json(const ModelConfig& cfg) { return config_to(cfg).dump(2); }

ModelConfig model_config_from_json(const std::string& text) { return config_from(json::parse(text)); }

std::string checkpoint_json(const Model& model) {
  json doc;
  doc["format"] = "exitdepth-checkpoint";
  doc["version"] = kVersion;
  doc["config"] = config_to(model.config());
  json params = json::array();
  const ParameterStore& ps = model.params();
  for (std::size_t i = 0; i < ps.size(); ++i) {
    const Tensor& v = ps[i].value;
    params.push_back({{"name", ps[i].name},
                      {"shape", v.shape()},
                      {"values", std::vector<double>(v.values().begin(), v.values().end())}});
  }
  doc["parameters"] = std::move(params);
  return doc.dump();
}

Model model_from_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("checkpoint: ") + e.what());
  }
  if (doc.value("format", "") != "exitdepth-checkpoint") throw UsageError("checkpoint: unknown format");
  if (doc.value("version", 0) != kVersion) throw UsageError("checkpoint: unsupported version");
  ModelConfig cfg = config_from(doc.at("config"));
  ParameterStore ps;
  for (const auto& p : doc.at("parameters")) {
    auto shape = p.at("shape").get<std::vector<std::size_t>>();
    auto values = p.at("values").get<std::vector<double>>();
    ps.add(p.at("name").get<std::string>(), Tensor(std::move(shape), std::move(values)));
  }
  return Model(cfg, std::move(ps));
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw UsageError("cannot write checkpoint " + path.string());
  os << checkpoint_json(model);
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return model_from_json(ss.str());
}

}  // namespace exitdepth
