#include "mnvton/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "mnvton/errors.hpp"

namespace mnvton {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'M', 'N', 'V', 'T', 'C', 'K', 'P', 'T'};
constexpr int kVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

json grid_json(const GridShape& g) {
  return {{"frames", g.frames}, {"height", g.height}, {"width", g.width}, {"channels", g.channels}};
}

GridShape grid_from(const json& j) {
  return {j.at("frames").get<std::size_t>(), j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>(),
          j.at("channels").get<std::size_t>()};
}

}  // namespace

json to_json(const ModelConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"d", c.d},
          {"heads", c.heads},
          {"blocks", c.blocks},
          {"patch", c.patch},
          {"vocab", c.vocab},
          {"garment_grid", grid_json(c.garment_grid)},
          {"target_grid", grid_json(c.target_grid)},
          {"init_std", c.init_std}};
}

ModelConfig model_config_from_json(const json& j) {
  try {
    ModelConfig c;
    c.variant = parse_variant(j.at("variant").get<std::string>());
    c.d = j.at("d").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.blocks = j.at("blocks").get<std::size_t>();
    c.patch = j.at("patch").get<std::size_t>();
    c.vocab = j.at("vocab").get<std::size_t>();
    c.garment_grid = grid_from(j.at("garment_grid"));
    c.target_grid = grid_from(j.at("target_grid"));
    c.init_std = j.at("init_std").get<double>();
    c.validate();
    return c;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model config: ") + e.what());
  }
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const std::string& config_hash) {
  const ParamList params = model.parameters();
  json list = json::array();
  for (const auto& p : params) list.push_back({{"name", p.name}, {"shape", p.tensor.shape()}});
  const json header = {{"format", "mnvton-checkpoint"},
                       {"version", kVersion},
                       {"variant", std::string(to_string(model.config.variant))},
                       {"config_hash", config_hash},
                       {"model", to_json(model.config)},
                       {"params", list}};
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof n);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params) {
    const auto v = p.tensor.data();
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[8];
  std::uint64_t n = 0;
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof kMagic) != 0) {
    throw IoError(path.string() + " is not a checkpoint");
  }
  if (!in.read(reinterpret_cast<char*>(&n), sizeof n) || n > (std::uint64_t{1} << 30)) {
    throw IoError(path.string() + ": bad header length");
  }
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw IoError(path.string() + ": truncated header");

  json header;
  try {
    header = json::parse(text);
  } catch (const json::parse_error& e) {
    throw IoError(path.string() + ": unreadable header: " + e.what());
  }
  LoadedCheckpoint loaded{init_model(model_config_from_json(header.at("model")), 0),
                          header.value("config_hash", std::string())};
  if (header.value("version", 0) != kVersion) throw ConfigError("unsupported checkpoint version");

  const ParamList params = loaded.model.parameters();
  const json& list = header.at("params");
  if (list.size() != params.size()) throw ConfigError("checkpoint parameter count does not match its model config");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& entry = list[i];
    if (entry.at("name").get<std::string>() != params[i].name ||
        entry.at("shape").get<Shape>() != params[i].tensor.shape()) {
      throw ConfigError("checkpoint parameter " + entry.at("name").get<std::string>() + " does not match " +
                        params[i].name + " " + shape_str(params[i].tensor.shape()));
    }
    Tensor t = params[i].tensor;
    auto dst = t.mutable_data();
    if (!in.read(reinterpret_cast<char*>(dst.data()), static_cast<std::streamsize>(dst.size() * sizeof(double)))) {
      throw IoError(path.string() + ": truncated parameter data");
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError(path.string() + ": trailing bytes");
  return loaded;
}

}  // namespace mnvton
