#include "cunet/io.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace cunet {

using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw io_error("cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw io_error("short write to " + path);
}

[[noreturn]] void parse_fail(const std::string& path, const std::string& msg, std::size_t off) {
  throw io_error(path + ": " + msg + " at byte " + std::to_string(off));
}

// netpbm token scanner: whitespace separates tokens, '#' starts a comment
// running to end of line.
struct PnmReader {
  const std::string& buf;
  const std::string& path;
  std::size_t pos = 0;

  void skip_space() {
    while (pos < buf.size()) {
      const char c = buf[pos];
      if (c == '#') {
        while (pos < buf.size() && buf[pos] != '\n') ++pos;
      } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
        ++pos;
      } else {
        break;
      }
    }
  }

  int read_int() {
    skip_space();
    if (pos >= buf.size() || buf[pos] < '0' || buf[pos] > '9')
      parse_fail(path, "expected integer", pos);
    long v = 0;
    while (pos < buf.size() && buf[pos] >= '0' && buf[pos] <= '9') {
      v = v * 10 + (buf[pos] - '0');
      if (v > 1 << 30) parse_fail(path, "integer out of range", pos);
      ++pos;
    }
    return static_cast<int>(v);
  }
};

void put_u32le(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint32_t get_u32le(const std::string& buf, std::size_t pos) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
  return v;
}

void put_f32le(std::string& out, float f) { put_u32le(out, std::bit_cast<std::uint32_t>(f)); }

float get_f32le(const std::string& buf, std::size_t pos) {
  return std::bit_cast<float>(get_u32le(buf, pos));
}

}  // namespace

Tensor load_image(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6'))
    parse_fail(path, "unsupported magic (need P5 or P6)", 0);
  const int channels = buf[1] == '5' ? 1 : 3;

  PnmReader rd{buf, path, 2};
  const int width = rd.read_int();
  const int height = rd.read_int();
  const int maxval = rd.read_int();
  if (width < 1 || height < 1) parse_fail(path, "bad dimensions", rd.pos);
  if (maxval < 1 || maxval > 65535) parse_fail(path, "bad maxval", rd.pos);
  if (rd.pos >= buf.size()) parse_fail(path, "missing payload", rd.pos);
  ++rd.pos;  // exactly one whitespace byte after maxval

  const int bytes_per = maxval > 255 ? 2 : 1;
  const std::size_t need =
      static_cast<std::size_t>(width) * height * channels * bytes_per;
  if (buf.size() - rd.pos < need)
    parse_fail(path, "truncated payload (need " + std::to_string(need) + " bytes)", buf.size());

  Tensor t(height, width, channels);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + rd.pos;
  for (double& v : t.data()) {
    unsigned raw = *p++;
    if (bytes_per == 2) raw = (raw << 8) | *p++;  // big-endian per netpbm
    v = static_cast<double>(raw) / maxval;
  }
  enforce_precision(t);
  return t;
}

void save_image(const Tensor& t, const std::string& path, int maxval) {
  if (t.channels() != 1 && t.channels() != 3)
    throw contract_error("save_image: only 1- or 3-channel tensors");
  if (maxval < 1 || maxval > 65535) throw contract_error("save_image: bad maxval");

  std::string out;
  out += t.channels() == 1 ? "P5\n" : "P6\n";
  out += std::to_string(t.width()) + " " + std::to_string(t.height()) + "\n";
  out += std::to_string(maxval) + "\n";
  for (double v : t.data()) {
    const double clamped = std::min(1.0, std::max(0.0, v));
    const unsigned raw = static_cast<unsigned>(std::lround(clamped * maxval));
    if (maxval > 255) out.push_back(static_cast<char>((raw >> 8) & 0xff));
    out.push_back(static_cast<char>(raw & 0xff));
  }
  write_file(path, out);
}

namespace {

void check_known_keys(const json& j, std::initializer_list<const char*> allowed,
                      const std::string& scope) {
  for (const auto& item : j.items()) {
    bool ok = false;
    for (const char* name : allowed)
      if (item.key() == name) ok = true;
    if (!ok) throw io_error("unknown config key: " + scope + item.key());
  }
}

template <typename T>
void fetch(const json& j, const char* key, T& into, const std::string& scope) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw io_error("bad value for config key " + scope + key);
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    throw io_error(std::string("config parse error: ") + e.what());
  }
  if (!j.is_object()) throw io_error("config root must be a JSON object");
  check_known_keys(j, {"data", "model", "out_dir", "train"}, "");

  ExperimentConfig cfg;
  fetch(j, "out_dir", cfg.out_dir, "");

  if (j.contains("model")) {
    const json& m = j["model"];
    check_known_keys(m, {"J", "K", "m", "outer_passes", "residual", "s", "task"}, "model.");
    std::string task = task_name(cfg.model.task);
    fetch(m, "task", task, "model.");
    try {
      cfg.model.task = task_from_name(task);
    } catch (const contract_error& e) {
      throw io_error(e.what());
    }
    fetch(m, "K", cfg.model.K, "model.");
    fetch(m, "s", cfg.model.s, "model.");
    fetch(m, "J", cfg.model.J, "model.");
    fetch(m, "m", cfg.model.m, "model.");
    fetch(m, "outer_passes", cfg.model.outer_passes, "model.");
    fetch(m, "residual", cfg.model.residual, "model.");
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    check_known_keys(t,
                     {"batch", "epochs", "loss", "lr0", "lr_decay", "lr_decay_epochs", "patch",
                      "seed", "val_fraction"},
                     "train.");
    fetch(t, "lr0", cfg.train.lr0, "train.");
    fetch(t, "lr_decay", cfg.train.lr_decay, "train.");
    fetch(t, "lr_decay_epochs", cfg.train.lr_decay_epochs, "train.");
    fetch(t, "batch", cfg.train.batch, "train.");
    fetch(t, "epochs", cfg.train.epochs, "train.");
    fetch(t, "patch", cfg.train.patch, "train.");
    fetch(t, "loss", cfg.train.loss, "train.");
    fetch(t, "seed", cfg.train.seed, "train.");
    fetch(t, "val_fraction", cfg.train.val_fraction, "train.");
    if (cfg.train.loss != "mse") throw io_error("unsupported train.loss: " + cfg.train.loss);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    check_known_keys(
        d, {"blur_radius", "blur_sigma", "count", "kind", "noise_sigma", "seed", "size",
            "sr_factor"},
        "data.");
    std::string kind = task_kind_name(cfg.data.kind);
    fetch(d, "kind", kind, "data.");
    try {
      cfg.data.kind = task_kind_from_name(kind);
    } catch (const contract_error& e) {
      throw io_error(e.what());
    }
    fetch(d, "count", cfg.data.count, "data.");
    fetch(d, "seed", cfg.data.seed, "data.");
    fetch(d, "size", cfg.data.options.size, "data.");
    fetch(d, "sr_factor", cfg.data.options.sr_factor, "data.");
    fetch(d, "noise_sigma", cfg.data.options.noise_sigma, "data.");
    fetch(d, "blur_sigma", cfg.data.options.blur_sigma, "data.");
    fetch(d, "blur_radius", cfg.data.options.blur_radius, "data.");
  }
  return cfg;
}

std::string serialize_config(const ExperimentConfig& cfg) {
  json j;
  j["out_dir"] = cfg.out_dir;
  j["model"] = {{"task", task_name(cfg.model.task)}, {"K", cfg.model.K},
                {"s", cfg.model.s},                  {"J", cfg.model.J},
                {"m", cfg.model.m},                  {"outer_passes", cfg.model.outer_passes},
                {"residual", cfg.model.residual}};
  j["train"] = {{"lr0", cfg.train.lr0},
                {"lr_decay", cfg.train.lr_decay},
                {"lr_decay_epochs", cfg.train.lr_decay_epochs},
                {"batch", cfg.train.batch},
                {"epochs", cfg.train.epochs},
                {"patch", cfg.train.patch},
                {"loss", cfg.train.loss},
                {"seed", cfg.train.seed},
                {"val_fraction", cfg.train.val_fraction}};
  j["data"] = {{"kind", task_kind_name(cfg.data.kind)},
               {"count", cfg.data.count},
               {"seed", cfg.data.seed},
               {"size", cfg.data.options.size},
               {"sr_factor", cfg.data.options.sr_factor},
               {"noise_sigma", cfg.data.options.noise_sigma},
               {"blur_sigma", cfg.data.options.blur_sigma},
               {"blur_radius", cfg.data.options.blur_radius}};
  return j.dump(2) + "\n";
}

ExperimentConfig load_config_file(const std::string& path) {
  return parse_config(read_file(path));
}

void apply_override(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  json j = json::parse(serialize_config(cfg));
  json* node = &j;
  std::size_t start = 0;
  std::string last = key;
  for (std::size_t dotpos = key.find('.'); dotpos != std::string::npos;
       dotpos = key.find('.', start)) {
    const std::string part = key.substr(start, dotpos - start);
    if (!node->contains(part) || !(*node)[part].is_object())
      throw io_error("unknown config key: " + key);
    node = &(*node)[part];
    start = dotpos + 1;
    last = key.substr(start);
  }
  if (!node->contains(last)) throw io_error("unknown config key: " + key);
  json parsed;
  try {
    parsed = json::parse(value);
  } catch (const json::exception&) {
    parsed = value;  // bare strings need no quoting on the command line
  }
  (*node)[last] = parsed;
  cfg = parse_config(j.dump());
}

namespace {

json model_to_json(const ModelConfig& m) {
  return {{"task", task_name(m.task)}, {"K", m.K},
          {"s", m.s},                  {"J", m.J},
          {"m", m.m},                  {"outer_passes", m.outer_passes},
          {"residual", m.residual}};
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  m.task = task_from_name(j.at("task").get<std::string>());
  m.K = j.at("K").get<int>();
  m.s = j.at("s").get<int>();
  m.J = j.at("J").get<int>();
  m.m = j.at("m").get<int>();
  m.outer_passes = j.at("outer_passes").get<int>();
  m.residual = j.at("residual").get<bool>();
  return m;
}

// Zero-valued parameter container with the shapes the config dictates.
CUNetParams shaped_params(const ModelConfig& cfg) {
  CUNetParams p;
  p.cfg = cfg;
  for (int j = 0; j < cfg.J; ++j) {
    p.ufem_u.push_back({FilterBank(cfg.K, cfg.s, cfg.m), FilterBank(cfg.m, cfg.s, cfg.K),
                        std::vector<double>(cfg.K, 0.0)});
    p.ufem_v.push_back({FilterBank(cfg.K, cfg.s, cfg.m), FilterBank(cfg.m, cfg.s, cfg.K),
                        std::vector<double>(cfg.K, 0.0)});
    p.cfpm.push_back({FilterBank(cfg.K, cfg.s, 2 * cfg.m), FilterBank(2 * cfg.m, cfg.s, cfg.K),
                      std::vector<double>(cfg.K, 0.0)});
  }
  p.syn_du = FilterBank(cfg.K, cfg.s, cfg.m);
  p.syn_hv = FilterBank(cfg.K, cfg.s, cfg.m);
  p.syn_dc = FilterBank(cfg.K, cfg.s, cfg.m);
  p.syn_hc = FilterBank(cfg.K, cfg.s, cfg.m);
  p.irm_gc = FilterBank(cfg.m, cfg.s, cfg.K);
  p.irm_gu = FilterBank(cfg.m, cfg.s, cfg.K);
  if (cfg.task == Task::MIF) p.irm_gv = FilterBank(cfg.m, cfg.s, cfg.K);
  return p;
}

TensorEntry entry_from_ref(const std::string& name, const ParamRef& r) {
  TensorEntry e;
  e.name = name;
  e.shape = r.shape;
  e.values.reserve(r.values->size());
  for (double v : *r.values) e.values.push_back(static_cast<float>(v));
  return e;
}

}  // namespace

Checkpoint make_checkpoint(const CUNetParams& params, const AdamState* optimizer,
                           const CheckpointMeta& meta) {
  Checkpoint ck;
  ck.version = kCheckpointVersion;
  ck.model = params.cfg;
  ck.meta = meta;
  visit_params(const_cast<CUNetParams&>(params),
               [&](const ParamRef& r) { ck.tensors.push_back(entry_from_ref(r.name, r)); });
  if (optimizer) {
    ck.has_optimizer = true;
    ck.adam_t = optimizer->t;
    visit_params(const_cast<CUNetParams&>(optimizer->m), [&](const ParamRef& r) {
      ck.tensors.push_back(entry_from_ref("adam.m." + r.name, r));
    });
    visit_params(const_cast<CUNetParams&>(optimizer->v), [&](const ParamRef& r) {
      ck.tensors.push_back(entry_from_ref("adam.v." + r.name, r));
    });
  }
  return ck;
}

namespace {

const TensorEntry& find_entry(const Checkpoint& ck, const std::string& name) {
  for (const TensorEntry& e : ck.tensors)
    if (e.name == name) return e;
  throw io_error("checkpoint missing tensor " + name);
}

void fill_from_entries(CUNetParams& p, const Checkpoint& ck, const std::string& prefix) {
  visit_params(p, [&](const ParamRef& r) {
    const TensorEntry& e = find_entry(ck, prefix + r.name);
    if (e.shape != r.shape) throw io_error("checkpoint tensor " + e.name + " has wrong shape");
    for (std::size_t i = 0; i < r.values->size(); ++i)
      (*r.values)[i] = static_cast<double>(e.values[i]);
  });
}

}  // namespace

CUNetParams params_from_checkpoint(const Checkpoint& ck) {
  CUNetParams p = shaped_params(ck.model);
  fill_from_entries(p, ck, "");
  return p;
}

AdamState adam_from_checkpoint(const Checkpoint& ck, const CUNetParams& params) {
  if (!ck.has_optimizer) throw io_error("checkpoint has no optimizer state");
  AdamState s = make_adam_state(params);
  s.t = ck.adam_t;
  fill_from_entries(s.m, ck, "adam.m.");
  fill_from_entries(s.v, ck, "adam.v.");
  return s;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json header;
  header["hyper"] = model_to_json(ck.model);
  header["meta"] = {{"epoch", ck.meta.epoch},
                    {"seed", ck.meta.seed},
                    {"loss_history", ck.meta.loss_history}};
  header["optimizer"] = {{"present", ck.has_optimizer}, {"t", ck.adam_t}};
  json table = json::array();
  std::uint64_t offset = 0;
  for (const TensorEntry& e : ck.tensors) {
    table.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", offset}});
    offset += 4ull * e.values.size();
  }
  header["tensors"] = std::move(table);
  const std::string header_text = header.dump();

  std::string out = "CUN1";
  put_u32le(out, ck.version);
  put_u32le(out, static_cast<std::uint32_t>(header_text.size()));
  out += header_text;
  for (const TensorEntry& e : ck.tensors)
    for (float v : e.values) put_f32le(out, v);
  write_file(path, out);
}

Checkpoint load_checkpoint(const std::string& path) {
  const std::string buf = read_file(path);
  if (buf.size() < 12 || buf.compare(0, 4, "CUN1") != 0)
    throw io_error(path + ": bad checkpoint magic");
  Checkpoint ck;
  ck.version = get_u32le(buf, 4);
  if (ck.version != kCheckpointVersion)
    throw io_error(path + ": unsupported checkpoint version " + std::to_string(ck.version));
  const std::uint32_t header_len = get_u32le(buf, 8);
  if (buf.size() < 12ull + header_len) throw io_error(path + ": truncated header");

  json header;
  try {
    header = json::parse(buf.substr(12, header_len));
  } catch (const json::exception& e) {
    throw io_error(path + ": bad checkpoint header: " + e.what());
  }

  try {
    ck.model = model_from_json(header.at("hyper"));
    ck.meta.epoch = header.at("meta").at("epoch").get<int>();
    ck.meta.seed = header.at("meta").at("seed").get<std::uint64_t>();
    ck.meta.loss_history = header.at("meta").at("loss_history").get<std::vector<double>>();
    ck.has_optimizer = header.at("optimizer").at("present").get<bool>();
    ck.adam_t = header.at("optimizer").at("t").get<long>();

    const std::size_t payload_start = 12ull + header_len;
    std::uint64_t expect_offset = 0;
    for (const json& tj : header.at("tensors")) {
      TensorEntry e;
      e.name = tj.at("name").get<std::string>();
      e.shape = tj.at("shape").get<std::vector<int>>();
      const std::uint64_t offset = tj.at("offset").get<std::uint64_t>();
      if (offset != expect_offset)
        throw io_error(path + ": inconsistent offset for tensor " + e.name);
      std::uint64_t count = 1;
      for (int d : e.shape) {
        if (d < 1) throw io_error(path + ": bad shape for tensor " + e.name);
        count *= static_cast<std::uint64_t>(d);
      }
      if (payload_start + offset + 4 * count > buf.size())
        throw io_error(path + ": truncated payload, tensor " + e.name + " is missing data");
      e.values.resize(count);
      for (std::uint64_t i = 0; i < count; ++i)
        e.values[i] = get_f32le(buf, payload_start + offset + 4 * i);
      expect_offset = offset + 4 * count;
      ck.tensors.push_back(std::move(e));
    }
  } catch (const json::exception& e) {
    throw io_error(path + ": bad checkpoint header field: " + e.what());
  }
  return ck;
}

void write_dataset(const std::string& dir, const std::vector<SamplePair>& samples,
                   const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);

  json manifest;
  manifest["kind"] = task_kind_name(spec.kind);
  manifest["count"] = static_cast<int>(samples.size());
  manifest["seed"] = spec.seed;
  json entries = json::array();
  char name[64];
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const char* ext = samples[i].x.channels() == 3 ? "ppm" : "pgm";
    json e;
    for (const char* part : {"x", "y", "z"}) {
      std::snprintf(name, sizeof(name), "sample_%05zu_%s.%s", i, part, ext);
      const Tensor& t = *(part[0] == 'x' ? &samples[i].x
                                         : part[0] == 'y' ? &samples[i].y : &samples[i].z);
      save_image(t, dir + "/" + name, 65535);
      e[part] = name;
    }
    e["seed"] = derive_seed(spec.seed, i);
    e["degenerate_mask"] = samples[i].degenerate_mask;
    entries.push_back(std::move(e));
  }
  manifest["entries"] = std::move(entries);
  write_file(dir + "/manifest.json", manifest.dump(2) + "\n");
}

std::vector<SamplePair> read_dataset(const std::string& dir) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir + "/manifest.json"));
  } catch (const json::exception& e) {
    throw io_error(dir + "/manifest.json: " + e.what());
  }
  std::vector<SamplePair> out;
  try {
    const TaskKind kind = task_kind_from_name(manifest.at("kind").get<std::string>());
    for (const json& e : manifest.at("entries")) {
      SamplePair p;
      p.task = kind;
      p.x = load_image(dir + "/" + e.at("x").get<std::string>());
      p.y = load_image(dir + "/" + e.at("y").get<std::string>());
      p.z = load_image(dir + "/" + e.at("z").get<std::string>());
      if (e.contains("degenerate_mask")) p.degenerate_mask = e.at("degenerate_mask").get<bool>();
      out.push_back(std::move(p));
    }
  } catch (const json::exception& e) {
    throw io_error(dir + "/manifest.json: bad field: " + e.what());
  }
  return out;
}

}  // namespace cunet
