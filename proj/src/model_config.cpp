#include "deepcap/model_config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "deepcap/errors.hpp"

namespace deepcap {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

int parse_int(std::string_view text, const std::string& key) {
  const std::string t = trim(text);
  int value = 0;
  const auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), value);
  if (ec != std::errc{} || ptr != t.data() + t.size() || t.empty()) {
    throw ConfigError("config: '" + key + "' expects an integer, got '" + t + "'");
  }
  return value;
}

double parse_double(std::string_view text, const std::string& key) {
  const std::string t = trim(text);
  try {
    std::size_t used = 0;
    const double v = std::stod(t, &used);
    if (used != t.size()) throw std::invalid_argument(t);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: '" + key + "' expects a number, got '" + t + "'");
  }
}

CapsuleWidth parse_width(std::string_view token, const std::string& key) {
  const auto x = token.find('x');
  if (x == std::string_view::npos) throw ConfigError("config: '" + key + "' entry '" + std::string(token) + "' is not MxD");
  return {parse_int(token.substr(0, x), key), parse_int(token.substr(x + 1), key)};
}

std::vector<std::string> split_ws(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::vector<std::string> out;
  for (std::string t; in >> t;) out.push_back(t);
  return out;
}

UpStage parse_up(std::string_view token, const std::string& key) {
  UpStage st;
  std::string_view rest = token;
  const auto colon = rest.find(':');
  if (colon != std::string_view::npos) {
    st.convs = parse_int(rest.substr(colon + 1), key);
    rest = rest.substr(0, colon);
  }
  const auto at = rest.find('@');
  if (at != std::string_view::npos) {
    st.skip = parse_int(rest.substr(at + 1), key);
    rest = rest.substr(0, at);
  }
  st.width = parse_width(rest, key);
  return st;
}

std::string width_text(CapsuleWidth w) { return std::to_string(w.maps) + "x" + std::to_string(w.dim); }

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

int ModelConfig::primary_side() const {
  return conv_output_side(input_side, primary_kernel, primary_stride, primary_kernel / 2);
}

void ModelConfig::validate() const {
  require(input_channels >= 1 && input_channels <= 3, "config: input_channels must be 1, 2 or 3");
  require(input_side >= 1, "config: input_side must be positive");
  require(primary_kernel >= 1 && primary_kernel % 2 == 1, "primary: kernel side must be odd");
  require(primary_stride >= 1, "primary: stride must be >= 1");
  require(primary_hidden >= 0, "primary: hidden channels must be >= 0");
  require(primary.maps >= 1 && primary.dim >= 1, "primary: maps and dim must be positive");
  require(kernel >= 1 && kernel % 2 == 1, "config: capsule kernel side must be odd");
  require(routing_iterations >= 1, "config: routing_iterations must be >= 1");
  require(!down.empty(), "config: at least one down stage is required");
  require(!head.empty(), "head: at least one layer is required");
  if (blur_enabled) {
    require(blur_kernel >= 1 && blur_kernel % 2 == 1, "blur: kernel side must be odd");
    require(blur_sigma > 0, "blur: sigma must be positive");
  }

  int side = primary_side();
  require(side * primary_stride == input_side, "primary: input side " + std::to_string(input_side) +
                                                   " is not divisible by stride " + std::to_string(primary_stride));
  std::vector<int> skip_side(down.size());
  for (std::size_t i = 0; i < down.size(); ++i) {
    const std::string stage = "down[" + std::to_string(i) + "]";
    require(down[i].maps >= 1 && down[i].dim >= 1, stage + ": maps and dim must be positive");
    require(side % 2 == 0 && side >= 2, stage + ": grid side " + std::to_string(side) + " cannot be halved");
    skip_side[i] = side;
    side /= 2;
  }
  CapsuleWidth cur = down.back();
  for (std::size_t i = 0; i < up.size(); ++i) {
    const std::string stage = "up[" + std::to_string(i) + "]";
    const UpStage& u = up[i];
    require(u.width.maps >= 1 && u.width.dim >= 1, stage + ": maps and dim must be positive");
    require(u.convs >= 0, stage + ": conv count must be >= 0");
    side *= 2;
    if (u.skip >= 0) {
      require(u.skip < static_cast<int>(down.size()), stage + ": skip source " + std::to_string(u.skip) +
                                                          " does not exist");
      require(skip_side[u.skip] == side, stage + ": skip source down[" + std::to_string(u.skip) + "] is " +
                                             std::to_string(skip_side[u.skip]) + " wide, stage output is " +
                                             std::to_string(side));
      require(down[u.skip].dim == u.width.dim,
              stage + ": skip source capsule dim " + std::to_string(down[u.skip].dim) +
                  " differs from stage dim " + std::to_string(u.width.dim));
    }
    cur = u.width;
  }
  (void)cur;
  require(side == input_side, "head: output side " + std::to_string(side) + " differs from input side " +
                                  std::to_string(input_side));
  for (std::size_t i = 0; i < head.size(); ++i) {
    require(head[i].maps >= 1 && head[i].dim >= 1, "head[" + std::to_string(i) + "]: maps and dim must be positive");
  }
  require(head.back().maps == 2 && head.back().dim == 1, "head: last layer must be 2x1 (two output channels)");
  if (!input_variant.empty()) {
    const int want = input_variant == "IM" ? 1 : (input_variant == "2DG" || input_variant == "ADM") ? 2
                     : input_variant == "ALL" ? 3 : 0;
    require(want != 0, "input_variant: unknown recipe '" + input_variant + "'");
    require(want == input_channels, "input_variant: " + input_variant + " needs " + std::to_string(want) +
                                        " input channels, config has " + std::to_string(input_channels));
  }
}

std::string ModelConfig::to_text() const {
  std::ostringstream out;
  out << "name = " << name << '\n';
  out << "input_channels = " << input_channels << '\n';
  out << "input_side = " << input_side << '\n';
  out << "primary.kernel = " << primary_kernel << '\n';
  out << "primary.stride = " << primary_stride << '\n';
  out << "primary.hidden = " << primary_hidden << '\n';
  out << "primary.maps = " << primary.maps << '\n';
  out << "primary.dim = " << primary.dim << '\n';
  out << "kernel = " << kernel << '\n';
  out << "down =";
  for (const auto& d : down) out << ' ' << width_text(d);
  out << "\nup =";
  for (const auto& u : up) {
    out << ' ' << width_text(u.width);
    if (u.skip >= 0) out << '@' << u.skip;
    out << ':' << u.convs;
  }
  out << "\nhead =";
  for (const auto& h : head) out << ' ' << width_text(h);
  out << "\nupsample = " << to_string(upsample) << '\n';
  out << "routing_iterations = " << routing_iterations << '\n';
  out << "blur.enabled = " << (blur_enabled ? 1 : 0) << '\n';
  out << "blur.kernel = " << blur_kernel << '\n';
  // Shortest text that parses back to the same double.
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, blur_sigma);
  out << "blur.sigma = " << std::string(buf, res.ptr) << '\n';
  if (!input_variant.empty()) out << "input_variant = " << input_variant << '\n';
  return out.str();
}

ModelConfig ModelConfig::from_text(std::string_view text) {
  ModelConfig cfg;
  std::map<std::string, std::string> values;
  std::istringstream in{std::string(text)};
  int line_no = 0;
  for (std::string line; std::getline(in, line);) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(std::string_view(line).substr(0, eq));
    const std::string value = trim(std::string_view(line).substr(eq + 1));
    if (!values.emplace(key, value).second) throw ConfigError("config: duplicate key '" + key + "'");
  }

  // A preset name seeds the defaults; explicit keys override it.
  if (auto it = values.find("name"); it != values.end()) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), it->second) != names.end()) cfg = preset_config(it->second);
    cfg.name = it->second;
  }

  for (const auto& [key, value] : values) {
    if (key == "name") continue;
    else if (key == "input_channels") cfg.input_channels = parse_int(value, key);
    else if (key == "input_side") cfg.input_side = parse_int(value, key);
    else if (key == "primary.kernel") cfg.primary_kernel = parse_int(value, key);
    else if (key == "primary.stride") cfg.primary_stride = parse_int(value, key);
    else if (key == "primary.hidden") cfg.primary_hidden = parse_int(value, key);
    else if (key == "primary.maps") cfg.primary.maps = parse_int(value, key);
    else if (key == "primary.dim") cfg.primary.dim = parse_int(value, key);
    else if (key == "kernel") cfg.kernel = parse_int(value, key);
    else if (key == "down") {
      cfg.down.clear();
      for (const auto& t : split_ws(value)) cfg.down.push_back(parse_width(t, key));
    } else if (key == "up") {
      cfg.up.clear();
      for (const auto& t : split_ws(value)) cfg.up.push_back(parse_up(t, key));
    } else if (key == "head") {
      cfg.head.clear();
      for (const auto& t : split_ws(value)) cfg.head.push_back(parse_width(t, key));
    } else if (key == "upsample") {
      try {
        cfg.upsample = parse_upsample_mode(value);
      } catch (const ParameterError& e) {
        throw ConfigError(std::string("config: ") + e.what());
      }
    } else if (key == "routing_iterations") cfg.routing_iterations = parse_int(value, key);
    else if (key == "blur.enabled") cfg.blur_enabled = parse_int(value, key) != 0;
    else if (key == "blur.kernel") cfg.blur_kernel = parse_int(value, key);
    else if (key == "blur.sigma") cfg.blur_sigma = parse_double(value, key);
    else if (key == "input_variant") cfg.input_variant = value;
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  cfg.validate();
  return cfg;
}

ModelConfig preset_config(std::string_view name) {
  ModelConfig c;
  c.name = std::string(name);
  if (name == "deepcap-default") {
    c.primary_hidden = 32;
    c.primary = {4, 16};
    c.down = {{4, 16}, {8, 16}, {8, 41}};
    c.up = {{{8, 41}, 2, 1}, {{4, 16}, 1, 1}, {{4, 16}, 0, 1}, {{2, 8}, -1, 0}, {{2, 4}, -1, 0}};
    c.head = {{2, 4}, {2, 1}};
  } else if (name == "deepcap-small") {
    c.primary_hidden = 16;
    c.primary = {4, 8};
    c.down = {{4, 8}, {4, 12}, {4, 14}};
    c.up = {{{4, 14}, 2, 1}, {{4, 12}, 1, 1}, {{4, 8}, 0, 1}, {{2, 4}, -1, 0}, {{2, 4}, -1, 0}};
    c.head = {{2, 4}, {2, 1}};
  } else if (name == "deepcap-tiny") {
    c.input_side = 32;
    c.primary_hidden = 4;
    c.primary = {2, 4};
    c.down = {{2, 4}};
    c.up = {{{2, 4}, 0, 1}, {{2, 2}, -1, 0}, {{2, 2}, -1, 0}};
    c.head = {{2, 2}, {2, 1}};
  } else {
    throw ConfigError("unknown model preset '" + std::string(name) + "'");
  }
  c.validate();
  return c;
}

std::vector<std::string> preset_names() { return {"deepcap-default", "deepcap-small", "deepcap-tiny"}; }

ModelConfig load_config_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return ModelConfig::from_text(text.str());
}

}  // namespace deepcap
