#include "tds/config.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace tds {

std::string sme_mode_name(SmeMode mode) {
  switch (mode) {
    case SmeMode::Temporal: return "temporal";
    case SmeMode::Spatial: return "spatial";
    case SmeMode::SpatialTemporal: return "spatial+temporal";
    case SmeMode::Cross: return "cross";
    case SmeMode::Additional: return "additional";
    case SmeMode::Off: return "off";
  }
  return "temporal";
}

SmeMode sme_mode_from_string(const std::string& name) {
  if (name == "temporal") return SmeMode::Temporal;
  if (name == "spatial") return SmeMode::Spatial;
  if (name == "spatial+temporal") return SmeMode::SpatialTemporal;
  if (name == "cross") return SmeMode::Cross;
  if (name == "additional") return SmeMode::Additional;
  if (name == "off") return SmeMode::Off;
  throw std::invalid_argument("unknown sme_mode '" + name + "'");
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("config: " + msg); };
  if (frames < 1) fail("frames must be >= 1");
  if (height < 1 || width < 1 || patch < 1) fail("geometry must be positive");
  if (height % patch != 0 || width % patch != 0) {
    fail("height/width must be divisible by patch size");
  }
  if (layers < 1) fail("layers must be >= 1");
  if (frozen_dim < 1 || frozen_dim % frozen_heads != 0) {
    fail("frozen_dim must be divisible by frozen_heads");
  }
  if (side_dim < 1 || side_dim % side_heads != 0) {
    fail("side_dim must be divisible by side_heads");
  }
  if (window < 0) fail("window must be >= 0");
  if (reduction < 1 || side_dim % reduction != 0) {
    fail("side_dim must be divisible by reduction");
  }
  if (pool_kernel < 1 || pool_kernel % 2 == 0) fail("pool_kernel must be odd");
  if (!td_layers.empty() && static_cast<int>(td_layers.size()) != layers) {
    fail("td_layers mask length must equal layers");
  }
  if (classes < 1) fail("classes must be >= 1");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) fail("label_smoothing must be in [0,1)");
  if (cls_shift_enabled && (shift_div < 2 || side_dim < shift_div)) {
    fail("side_dim too small for cls shift split");
  }
}

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), true);
  return cfg;
}

ModelConfig paper_config() {
  ModelConfig cfg;
  cfg.frames = 8;
  cfg.height = 224;
  cfg.width = 224;
  cfg.patch = 16;
  cfg.layers = 12;
  cfg.frozen_dim = 768;
  cfg.frozen_heads = 12;
  cfg.side_dim = 320;
  cfg.side_heads = 4;
  cfg.classes = 174;
  cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), true);
  return cfg;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "1" || v == "true" || v == "on") return true;
  if (v == "0" || v == "false" || v == "off") return false;
  throw std::invalid_argument("config: bad boolean '" + v + "' for " + key);
}

std::vector<bool> parse_mask(const std::string& v) {
  std::vector<bool> mask;
  for (char ch : v) {
    if (ch == '1') mask.push_back(true);
    else if (ch == '0') mask.push_back(false);
    else if (ch == ',' || ch == ' ') continue;
    else throw std::invalid_argument("config: bad mask character '" + std::string(1, ch) + "'");
  }
  return mask;
}

std::string mask_string(const std::vector<bool>& mask) {
  std::string s;
  for (bool b : mask) s += b ? '1' : '0';
  return s;
}

}  // namespace

ModelConfig parse_model_config(const std::string& text, const ModelConfig& base) {
  ModelConfig cfg = base;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config: line " + std::to_string(line_no) +
                                  " is not key=value: '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));

    if (key == "frames") cfg.frames = std::stoi(value);
    else if (key == "height") cfg.height = std::stoi(value);
    else if (key == "width") cfg.width = std::stoi(value);
    else if (key == "patch") cfg.patch = std::stoi(value);
    else if (key == "layers") cfg.layers = std::stoi(value);
    else if (key == "frozen_dim") cfg.frozen_dim = std::stoi(value);
    else if (key == "frozen_heads") cfg.frozen_heads = std::stoi(value);
    else if (key == "side_dim") cfg.side_dim = std::stoi(value);
    else if (key == "side_heads") cfg.side_heads = std::stoi(value);
    else if (key == "window") cfg.window = std::stoi(value);
    else if (key == "reduction") cfg.reduction = std::stoi(value);
    else if (key == "pool_kernel") cfg.pool_kernel = std::stoi(value);
    else if (key == "alpha") cfg.alpha = std::stod(value);
    else if (key == "beta") cfg.beta = std::stod(value);
    else if (key == "td_layers") cfg.td_layers = parse_mask(value);
    else if (key == "baseline_op") {
      if (value == "conv") cfg.baseline_op = BaselineOp::Conv;
      else if (value == "none") cfg.baseline_op = BaselineOp::None;
      else throw std::invalid_argument("config: baseline_op must be conv|none, got " + value);
    } else if (key == "td_op") {
      if (value == "pool") cfg.td_use_conv = false;
      else if (value == "conv") cfg.td_use_conv = true;
      else throw std::invalid_argument("config: td_op must be pool|conv, got " + value);
    }
    else if (key == "classes") cfg.classes = std::stoi(value);
    else if (key == "label_smoothing") cfg.label_smoothing = std::stod(value);
    else if (key == "cls_shift") cfg.cls_shift_enabled = parse_bool(value, key);
    else if (key == "shift_div") cfg.shift_div = std::stoi(value);
    else if (key == "fuse_before_shift") cfg.fuse_before_shift = parse_bool(value, key);
    else if (key == "sme_mode") cfg.sme_mode = sme_mode_from_string(value);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
  }
  if (cfg.td_layers.empty()) cfg.td_layers.assign(static_cast<std::size_t>(cfg.layers), true);
  cfg.validate();
  return cfg;
}

ModelConfig load_model_config(const std::string& path, const ModelConfig& base) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_model_config(buf.str(), base);
}

std::string serialize_model_config(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "frames=" << cfg.frames << '\n'
     << "height=" << cfg.height << '\n'
     << "width=" << cfg.width << '\n'
     << "patch=" << cfg.patch << '\n'
     << "layers=" << cfg.layers << '\n'
     << "frozen_dim=" << cfg.frozen_dim << '\n'
     << "frozen_heads=" << cfg.frozen_heads << '\n'
     << "side_dim=" << cfg.side_dim << '\n'
     << "side_heads=" << cfg.side_heads << '\n'
     << "window=" << cfg.window << '\n'
     << "reduction=" << cfg.reduction << '\n'
     << "pool_kernel=" << cfg.pool_kernel << '\n'
     << "alpha=" << cfg.alpha << '\n'
     << "beta=" << cfg.beta << '\n'
     << "td_layers=" << mask_string(cfg.td_layers) << '\n'
     << "baseline_op=" << (cfg.baseline_op == BaselineOp::Conv ? "conv" : "none") << '\n'
     << "td_op=" << (cfg.td_use_conv ? "conv" : "pool") << '\n'
     << "classes=" << cfg.classes << '\n'
     << "label_smoothing=" << cfg.label_smoothing << '\n'
     << "cls_shift=" << (cfg.cls_shift_enabled ? 1 : 0) << '\n'
     << "shift_div=" << cfg.shift_div << '\n'
     << "fuse_before_shift=" << (cfg.fuse_before_shift ? 1 : 0) << '\n'
     << "sme_mode=" << sme_mode_name(cfg.sme_mode) << '\n';
  return os.str();
}

}  // namespace tds
