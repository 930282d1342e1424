#include "occstep/archive.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include "occstep/common.hpp"
#include "occstep/config.hpp"

static_assert(std::endian::native == std::endian::little,
              "on-disk formats are little-endian");

namespace occstep {

namespace {

void write_exact(std::ofstream& out, const void* data, std::size_t n) {
  out.write(static_cast<const char*>(data), std::streamsize(n));
  if (!out) throw DataError("write failed");
}

void read_exact(std::ifstream& in, void* data, std::size_t n) {
  in.read(static_cast<char*>(data), std::streamsize(n));
  if (std::size_t(in.gcount()) != n) throw DataError("file truncated");
}

std::string next_line(std::ifstream& in, const char* what) {
  std::string line;
  if (!std::getline(in, line))
    throw DataError(std::string("missing ") + what + " line");
  return line;
}

void expect_newline(std::ifstream& in) {
  char c = 0;
  read_exact(in, &c, 1);
  if (c != '\n') throw DataError("payload framing is corrupt");
}

}  // namespace

// ---- sequence archives ------------------------------------------------------

void save_archive(const std::string& path, const OccSequence& seq,
                  const std::string& provenance) {
  seq.validate();
  if (provenance.find('\n') != std::string::npos)
    throw ArgumentError("provenance must be a single line");

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write archive: " + path);

  const GridGeometry& g = seq.frames[0].geom;
  const bool masks = !seq.view_masks.empty();
  char buf[512];
  std::string header = "occstep-archive v1\n";
  std::snprintf(buf, sizeof buf, "dims %d %d %d\n", g.d(), g.h(), g.w());
  header += buf;
  std::snprintf(buf, sizeof buf, "classes %d\n", seq.frames[0].num_classes);
  header += buf;
  std::snprintf(buf, sizeof buf, "range %.17g %.17g %.17g %.17g %.17g %.17g\n",
                g.x_min, g.x_max, g.y_min, g.y_max, g.z_min, g.z_max);
  header += buf;
  std::snprintf(buf, sizeof buf, "flip_y %d\n", g.flip_y ? 1 : 0);
  header += buf;
  std::snprintf(buf, sizeof buf, "frames %d\n", seq.num_frames());
  header += buf;
  std::snprintf(buf, sizeof buf, "history %d\n", seq.history_len);
  header += buf;
  header += "times";
  for (double t : seq.frame_times) {
    std::snprintf(buf, sizeof buf, " %.17g", t);
    header += buf;
  }
  header += "\nprovenance " + provenance + "\n";
  std::snprintf(buf, sizeof buf, "masks %d\n", masks ? 1 : 0);
  header += buf;
  header += "end\n";
  write_exact(out, header.data(), header.size());

  for (const SemanticOccGrid& f : seq.frames)
    write_exact(out, f.labels.data(), f.labels.size());
  for (const PoseSE3& p : seq.poses) {
    double row_major[16];
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) row_major[r * 4 + c] = p(r, c);
    write_exact(out, row_major, sizeof row_major);
  }
  if (masks) {
    for (const auto& m : seq.view_masks) {
      const std::uint8_t present = m.empty() ? 0 : 1;
      write_exact(out, &present, 1);
      if (!present) continue;
      std::vector<std::uint8_t> packed((m.size() + 7) / 8, 0);
      for (std::size_t i = 0; i < m.size(); ++i)
        if (m[i]) packed[i >> 3] |= std::uint8_t(1u << (i & 7));
      write_exact(out, packed.data(), packed.size());
    }
  }
  out.flush();
  if (!out) throw DataError("write failed: " + path);
}

OccSequence load_archive(const std::string& path, std::string* provenance) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open archive: " + path);

  if (next_line(in, "magic") != "occstep-archive v1")
    throw DataError("not an archive or unsupported version: " + path);

  GridGeometry g;
  int num_classes = 0, num_frames = 0, history = 0, masks = 0;
  if (std::sscanf(next_line(in, "dims").c_str(), "dims %d %d %d", &g.dims[0],
                  &g.dims[1], &g.dims[2]) != 3)
    throw DataError("bad dims line");
  if (std::sscanf(next_line(in, "classes").c_str(), "classes %d",
                  &num_classes) != 1)
    throw DataError("bad classes line");
  if (std::sscanf(next_line(in, "range").c_str(),
                  "range %lf %lf %lf %lf %lf %lf", &g.x_min, &g.x_max,
                  &g.y_min, &g.y_max, &g.z_min, &g.z_max) != 6)
    throw DataError("bad range line");
  int flip = 0;
  if (std::sscanf(next_line(in, "flip_y").c_str(), "flip_y %d", &flip) != 1)
    throw DataError("bad flip_y line");
  g.flip_y = flip != 0;
  if (std::sscanf(next_line(in, "frames").c_str(), "frames %d", &num_frames) !=
          1 ||
      num_frames < 1)
    throw DataError("bad frames line");
  if (std::sscanf(next_line(in, "history").c_str(), "history %d", &history) !=
      1)
    throw DataError("bad history line");

  const std::string times_line = next_line(in, "times");
  if (times_line.rfind("times", 0) != 0) throw DataError("bad times line");
  std::istringstream times_in(times_line.substr(5));
  std::vector<double> times;
  double t;
  while (times_in >> t) times.push_back(t);
  if (int(times.size()) != num_frames)
    throw DataError("times count does not match frame count");

  const std::string prov_line = next_line(in, "provenance");
  if (prov_line.rfind("provenance", 0) != 0)
    throw DataError("bad provenance line");
  if (provenance)
    *provenance =
        prov_line.size() > 11 ? prov_line.substr(11) : std::string();
  if (std::sscanf(next_line(in, "masks").c_str(), "masks %d", &masks) != 1)
    throw DataError("bad masks line");
  if (next_line(in, "end") != "end") throw DataError("bad manifest end");

  g.validate();
  if (num_classes < 2) throw DataError("archive class count out of range");

  OccSequence seq;
  seq.history_len = history;
  seq.frame_times = times;
  for (int f = 0; f < num_frames; ++f) {
    SemanticOccGrid grid(g, num_classes);
    read_exact(in, grid.labels.data(), grid.labels.size());
    for (std::int8_t v : grid.labels)
      if (v != -1 && (v < 0 || v >= num_classes))
        throw DataError("archive voxel label out of range");
    seq.frames.push_back(std::move(grid));
  }
  for (int f = 0; f < num_frames; ++f) {
    double row_major[16];
    read_exact(in, row_major, sizeof row_major);
    PoseSE3 p;
    for (int r = 0; r < 4; ++r)
      for (int c = 0; c < 4; ++c) p(r, c) = row_major[r * 4 + c];
    seq.poses.push_back(p);
  }
  if (masks) {
    seq.view_masks.resize(num_frames);
    for (int f = 0; f < num_frames; ++f) {
      std::uint8_t present = 0;
      read_exact(in, &present, 1);
      if (!present) continue;
      std::vector<std::uint8_t> packed((g.size() + 7) / 8);
      read_exact(in, packed.data(), packed.size());
      seq.view_masks[f].assign(g.size(), 0);
      for (std::int64_t i = 0; i < g.size(); ++i)
        seq.view_masks[f][i] = (packed[i >> 3] >> (i & 7)) & 1u;
    }
  }
  if (seq.poses.size() >= 2)
    seq.rebuild_relatives();
  seq.validate();
  return seq;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

void write_blob(std::ofstream& out, const std::string& name,
                const Shape& shape, const Eigen::ArrayXf& data) {
  std::string line = "blob " + name + " " + std::to_string(shape.size());
  for (int d : shape) line += " " + std::to_string(d);
  line += "\n";
  write_exact(out, line.data(), line.size());
  write_exact(out, data.data(), sizeof(float) * std::size_t(data.size()));
  write_exact(out, "\n", 1);
}

struct BlobHeader {
  std::string name;
  Shape shape;
};

BlobHeader read_blob_header(std::ifstream& in) {
  const std::string line = next_line(in, "blob");
  std::istringstream ls(line);
  std::string tag;
  BlobHeader h;
  int ndim = 0;
  if (!(ls >> tag >> h.name >> ndim) || tag != "blob" || ndim < 0 || ndim > 8)
    throw DataError("bad blob header: " + line);
  for (int i = 0; i < ndim; ++i) {
    int d = 0;
    if (!(ls >> d) || d <= 0) throw DataError("bad blob shape: " + line);
    h.shape.push_back(d);
  }
  return h;
}

Eigen::ArrayXf read_blob_data(std::ifstream& in, std::int64_t numel) {
  Eigen::ArrayXf data(numel);
  read_exact(in, data.data(), sizeof(float) * std::size_t(numel));
  expect_newline(in);
  return data;
}

}  // namespace

void save_checkpoint(const std::string& path, const WorldModel& model,
                     std::uint64_t seed, const TrainerState& ts, AdamW* opt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);

  std::string header = "occstep-checkpoint v1\n";
  header += "seed " + std::to_string(seed) + "\n";
  header += "step " + std::to_string(ts.step) + "\n";
  header += "config\n" + model_config_to_text(model.config()) + "end\n";
  header += "params " + std::to_string(model.parameters().size()) + "\n";
  write_exact(out, header.data(), header.size());

  for (const auto& [name, p] : model.parameters())
    write_blob(out, "p." + name, p.shape(), p.values());

  const std::string opt_line =
      std::string("opt ") + (opt ? "1" : "0") + "\n";
  write_exact(out, opt_line.data(), opt_line.size());
  if (opt) {
    const std::string t_line =
        "opt_t " + std::to_string(opt->update_count()) + "\n";
    write_exact(out, t_line.data(), t_line.size());
    const auto& params = model.parameters();
    if (opt->moments_m().size() != params.size())
      throw ArgumentError("optimizer does not cover the model parameters");
    for (std::size_t i = 0; i < params.size(); ++i) {
      write_blob(out, "m." + params[i].first, params[i].second.shape(),
                 opt->moments_m()[i]);
      write_blob(out, "v." + params[i].first, params[i].second.shape(),
                 opt->moments_v()[i]);
    }
  }

  const bool has_state = ts.state.defined();
  const std::string st_line =
      std::string("train_state ") + (has_state ? "1" : "0") + "\n";
  write_exact(out, st_line.data(), st_line.size());
  if (has_state) write_blob(out, "train_state", ts.state.shape(), ts.state.values());
  write_exact(out, "end\n", 4);
  out.flush();
  if (!out) throw DataError("write failed: " + path);
}

namespace {

// Reads magic, seed, step, and the config echo; leaves the stream at the
// params line.
CheckpointMeta read_header(std::ifstream& in, ModelConfig& cfg_out) {
  if (next_line(in, "magic") != "occstep-checkpoint v1")
    throw DataError("not a checkpoint or unsupported version");
  CheckpointMeta meta;
  {
    const std::string line = next_line(in, "seed");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> meta.seed) || tag != "seed")
      throw DataError("bad seed line");
  }
  {
    const std::string line = next_line(in, "step");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> meta.step) || tag != "step")
      throw DataError("bad step line");
  }
  if (next_line(in, "config") != "config")
    throw DataError("bad config block");
  std::string kv, line;
  while ((line = next_line(in, "config")) != "end") kv += line + "\n";
  cfg_out = model_config_from(parse_config_text(kv, /*check_keys=*/false));
  return meta;
}

}  // namespace

ModelConfig read_checkpoint_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);
  ModelConfig cfg;
  read_header(in, cfg);
  return cfg;
}

CheckpointMeta load_checkpoint(const std::string& path, WorldModel& model,
                               AdamW* opt, TrainerState* ts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint: " + path);

  ModelConfig stored_cfg;
  CheckpointMeta meta = read_header(in, stored_cfg);
  if (model_config_to_text(stored_cfg) != model_config_to_text(model.config()))
    throw DataError("checkpoint/config mismatch");

  std::size_t count = 0;
  {
    const std::string line = next_line(in, "params");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> count) || tag != "params")
      throw DataError("bad params line");
  }
  const auto& params = model.parameters();
  if (count != params.size())
    throw DataError("checkpoint parameter count does not match the model");

  std::size_t loaded = 0;
  std::vector<char> seen(params.size(), 0);
  for (std::size_t i = 0; i < count; ++i) {
    const BlobHeader h = read_blob_header(in);
    if (h.name.rfind("p.", 0) != 0)
      throw DataError("unexpected blob in parameter section: " + h.name);
    const std::string name = h.name.substr(2);
    std::size_t j = 0;
    while (j < params.size() && params[j].first != name) ++j;
    if (j == params.size())
      throw DataError("checkpoint has unknown parameter: " + name);
    if (seen[j]) throw DataError("duplicate parameter in checkpoint: " + name);
    if (h.shape != params[j].second.shape())
      throw DataError("checkpoint shape mismatch for parameter: " + name);
    Tensor target = params[j].second;  // shares the underlying buffer
    target.values() = read_blob_data(in, target.size());
    seen[j] = 1;
    ++loaded;
  }
  if (loaded != params.size())
    throw DataError("checkpoint does not cover every model parameter");

  int has_opt = 0;
  {
    const std::string line = next_line(in, "opt");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> has_opt) || tag != "opt")
      throw DataError("bad opt line");
  }
  meta.has_optimizer = has_opt != 0;
  if (opt && !meta.has_optimizer)
    throw DataError("checkpoint has no optimizer state");
  if (meta.has_optimizer) {
    long opt_t = 0;
    {
      const std::string line = next_line(in, "opt_t");
      std::istringstream ls(line);
      std::string tag;
      if (!(ls >> tag >> opt_t) || tag != "opt_t")
        throw DataError("bad opt_t line");
    }
    if (opt) {
      opt->update_count() = opt_t;
      if (opt->moments_m().size() != params.size())
        throw ArgumentError("optimizer does not cover the model parameters");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (const char* prefix : {"m.", "v."}) {
        const BlobHeader h = read_blob_header(in);
        if (h.name != prefix + params[i].first)
          throw DataError("unexpected optimizer blob: " + h.name);
        Eigen::ArrayXf data = read_blob_data(in, params[i].second.size());
        if (opt)
          (prefix[0] == 'm' ? opt->moments_m() : opt->moments_v())[i] =
              std::move(data);
      }
    }
  }

  int has_state = 0;
  {
    const std::string line = next_line(in, "train_state");
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag >> has_state) || tag != "train_state")
      throw DataError("bad train_state line");
  }
  meta.has_train_state = has_state != 0;
  if (ts) {
    ts->step = meta.step;
    ts->state = Tensor();
  }
  if (meta.has_train_state) {
    const BlobHeader h = read_blob_header(in);
    if (h.name != "train_state")
      throw DataError("unexpected blob: " + h.name);
    Eigen::ArrayXf data = read_blob_data(in, shape_numel(h.shape));
    if (ts) {
      ts->state = Tensor::zeros(h.shape);
      ts->state.values() = std::move(data);
    }
  }
  if (next_line(in, "end") != "end") throw DataError("bad checkpoint end");
  return meta;
}

}  // namespace occstep
