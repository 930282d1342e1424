#include "occstep/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "occstep/common.hpp"

namespace occstep {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

std::string Config::get_string(const std::string& key,
                               const std::string& dflt) const {
  auto it = values.find(key);
  return it == values.end() ? dflt : it->second;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t dflt) const {
  auto it = values.find(key);
  if (it == values.end()) return dflt;
  errno = 0;
  char* end = nullptr;
  const long long v = std::strtoll(it->second.c_str(), &end, 10);
  if (errno != 0 || end == it->second.c_str() || *end != '\0')
    throw ConfigError("config key '" + key + "' is not an integer: " +
                      it->second);
  return v;
}

double Config::get_double(const std::string& key, double dflt) const {
  auto it = values.find(key);
  if (it == values.end()) return dflt;
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (errno != 0 || end == it->second.c_str() || *end != '\0')
    throw ConfigError("config key '" + key + "' is not a number: " +
                      it->second);
  return v;
}

bool Config::get_bool(const std::string& key, bool dflt) const {
  auto it = values.find(key);
  if (it == values.end()) return dflt;
  const std::string& v = it->second;
  if (v == "1" || v == "true") return true;
  if (v == "0" || v == "false") return false;
  throw ConfigError("config key '" + key + "' is not a boolean: " + v);
}

const std::set<std::string>& known_config_keys() {
  static const std::set<std::string> keys = {
      // model + grid
      "num_classes", "embed_channels", "pe_bands", "state_channels", "heads",
      "srd_w1", "srd_w2", "srd_w3", "tile", "dims_d", "dims_h", "dims_w",
      "x_min", "x_max", "y_min", "y_max", "z_min", "z_max", "flip_y",
      // training
      "max_steps", "lr", "weight_decay", "loss_sem", "loss_pos", "loss_rot",
      // scene generation
      "frames", "history", "fps", "min_boxes", "max_boxes", "ground_height",
      "include_wall", "box_min_size", "box_max_size", "box_min_height",
      "box_max_height", "box_center_margin", "box_offset_min",
      "box_speed_max", "ego_path", "speed_min", "speed_max", "yaw_min",
      "yaw_max"};
  return keys;
}

Config parse_config_text(const std::string& text, bool check_keys) {
  Config cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    if (check_keys && known_config_keys().count(key) == 0)
      throw ConfigError("unknown config key: " + key);
    if (cfg.values.count(key))
      throw ConfigError("duplicate config key: " + key);
    cfg.values[key] = value;
  }
  return cfg;
}

Config load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

ModelConfig model_config_from(const Config& cfg) {
  ModelConfig m;
  m.grid = desk_grid();
  m.num_classes = int(cfg.get_int("num_classes", m.num_classes));
  m.embed_channels = int(cfg.get_int("embed_channels", m.embed_channels));
  m.pe_bands = int(cfg.get_int("pe_bands", m.pe_bands));
  m.state_channels = int(cfg.get_int("state_channels", m.state_channels));
  m.heads = int(cfg.get_int("heads", m.heads));
  m.srd_widths[0] = int(cfg.get_int("srd_w1", m.srd_widths[0]));
  m.srd_widths[1] = int(cfg.get_int("srd_w2", m.srd_widths[1]));
  m.srd_widths[2] = int(cfg.get_int("srd_w3", m.srd_widths[2]));
  m.tile = int(cfg.get_int("tile", m.tile));
  m.grid.dims[0] = int(cfg.get_int("dims_d", m.grid.dims[0]));
  m.grid.dims[1] = int(cfg.get_int("dims_h", m.grid.dims[1]));
  m.grid.dims[2] = int(cfg.get_int("dims_w", m.grid.dims[2]));
  m.grid.x_min = cfg.get_double("x_min", m.grid.x_min);
  m.grid.x_max = cfg.get_double("x_max", m.grid.x_max);
  m.grid.y_min = cfg.get_double("y_min", m.grid.y_min);
  m.grid.y_max = cfg.get_double("y_max", m.grid.y_max);
  m.grid.z_min = cfg.get_double("z_min", m.grid.z_min);
  m.grid.z_max = cfg.get_double("z_max", m.grid.z_max);
  m.grid.flip_y = cfg.get_bool("flip_y", m.grid.flip_y);
  return m;
}

SceneConfig scene_config_from(const Config& cfg) {
  SceneConfig s;
  const ModelConfig m = model_config_from(cfg);
  s.grid = m.grid;
  s.num_classes = m.num_classes;
  s.num_frames = int(cfg.get_int("frames", s.num_frames));
  s.history_len = int(cfg.get_int("history", s.history_len));
  s.fps = cfg.get_double("fps", s.fps);
  s.min_boxes = int(cfg.get_int("min_boxes", s.min_boxes));
  s.max_boxes = int(cfg.get_int("max_boxes", s.max_boxes));
  s.ground_height = cfg.get_double("ground_height", s.ground_height);
  s.include_wall = cfg.get_bool("include_wall", s.include_wall);
  s.box_min_size = cfg.get_double("box_min_size", s.box_min_size);
  s.box_max_size = cfg.get_double("box_max_size", s.box_max_size);
  s.box_min_height = cfg.get_double("box_min_height", s.box_min_height);
  s.box_max_height = cfg.get_double("box_max_height", s.box_max_height);
  s.box_center_margin = cfg.get_double("box_center_margin", s.box_center_margin);
  s.box_offset_min = cfg.get_double("box_offset_min", s.box_offset_min);
  s.box_speed_max = cfg.get_double("box_speed_max", s.box_speed_max);
  const std::string path = cfg.get_string("ego_path", "mixed");
  if (path == "straight") s.path = SceneConfig::EgoPath::straight;
  else if (path == "arc") s.path = SceneConfig::EgoPath::arc;
  else if (path == "turn") s.path = SceneConfig::EgoPath::turn;
  else if (path == "mixed") s.path = SceneConfig::EgoPath::mixed;
  else throw ConfigError("unknown ego_path: " + path);
  s.speed_min = cfg.get_double("speed_min", s.speed_min);
  s.speed_max = cfg.get_double("speed_max", s.speed_max);
  s.yaw_min = cfg.get_double("yaw_min", s.yaw_min);
  s.yaw_max = cfg.get_double("yaw_max", s.yaw_max);
  return s;
}

TrainConfig train_config_from(const Config& cfg) {
  TrainConfig t;
  t.max_steps = int(cfg.get_int("max_steps", t.max_steps));
  t.lr = cfg.get_double("lr", t.lr);
  t.weight_decay = cfg.get_double("weight_decay", t.weight_decay);
  t.weights.sem = cfg.get_double("loss_sem", t.weights.sem);
  t.weights.pos = cfg.get_double("loss_pos", t.weights.pos);
  t.weights.rot = cfg.get_double("loss_rot", t.weights.rot);
  return t;
}

std::string model_config_to_text(const ModelConfig& cfg) {
  char buf[256];
  std::string out;
  auto put_int = [&](const char* key, long long v) {
    std::snprintf(buf, sizeof buf, "%s=%lld\n", key, v);
    out += buf;
  };
  auto put_double = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s=%.17g\n", key, v);
    out += buf;
  };
  put_int("num_classes", cfg.num_classes);
  put_int("embed_channels", cfg.embed_channels);
  put_int("pe_bands", cfg.pe_bands);
  put_int("state_channels", cfg.state_channels);
  put_int("heads", cfg.heads);
  put_int("srd_w1", cfg.srd_widths[0]);
  put_int("srd_w2", cfg.srd_widths[1]);
  put_int("srd_w3", cfg.srd_widths[2]);
  put_int("tile", cfg.tile);
  put_int("dims_d", cfg.grid.dims[0]);
  put_int("dims_h", cfg.grid.dims[1]);
  put_int("dims_w", cfg.grid.dims[2]);
  put_double("x_min", cfg.grid.x_min);
  put_double("x_max", cfg.grid.x_max);
  put_double("y_min", cfg.grid.y_min);
  put_double("y_max", cfg.grid.y_max);
  put_double("z_min", cfg.grid.z_min);
  put_double("z_max", cfg.grid.z_max);
  put_int("flip_y", cfg.grid.flip_y ? 1 : 0);
  return out;
}

}  // namespace occstep
