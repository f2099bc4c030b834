#pragma once

// Artifact serialization. The convention across all run artifacts is
// JSON / JSONL metadata next to a little-endian 32-bit-float binary blob;
// numeric payloads live in the blob and are referenced from the JSON by
// (offset, count) pairs counted in float32 elements. Matrices flatten
// row-major. CSV output follows RFC 4180 (quoting and CRLF line ends).

#include "nfc/common.hpp"
#include "nfc/sim.hpp"

#include <nlohmann/json.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

namespace nfc {

using Json = nlohmann::json;

inline void ensure_dir(const std::filesystem::path& p) {
  std::error_code ec;
  std::filesystem::create_directories(p, ec);
  if (ec) throw MissingArtifact("cannot create directory " + p.string());
}

inline bool file_exists(const std::filesystem::path& p) {
  return std::filesystem::exists(p);
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::filesystem::path& p,
                            const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw MissingArtifact("cannot write " + p.string());
  out << text;
}

// Reference into a float32 blob, in elements.
struct BlobRef {
  std::uint64_t offset = 0;
  std::uint64_t count = 0;
};

inline Json blobref_to_json(const BlobRef& r) {
  return Json{{"offset", r.offset}, {"count", r.count}};
}

inline BlobRef blobref_from_json(const Json& j) {
  BlobRef r;
  r.offset = j.at("offset").get<std::uint64_t>();
  r.count = j.at("count").get<std::uint64_t>();
  return r;
}

class BlobWriter {
 public:
  explicit BlobWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary) {
    if (!out_) throw MissingArtifact("cannot write blob " + path.string());
  }

  BlobRef append(const double* data, std::uint64_t n) {
    BlobRef ref{written_, n};
    std::vector<float> buf(n);
    for (std::uint64_t i = 0; i < n; ++i)
      buf[i] = static_cast<float>(data[i]);
    out_.write(reinterpret_cast<const char*>(buf.data()),
               static_cast<std::streamsize>(n * sizeof(float)));
    written_ += n;
    return ref;
  }

  BlobRef append(const Vec& v) {
    return append(v.data(), static_cast<std::uint64_t>(v.size()));
  }

  // Row-major matrix layout.
  BlobRef append(const Mat& m) {
    std::vector<double> tmp(static_cast<std::size_t>(m.size()));
    std::size_t k = 0;
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) tmp[k++] = m(r, c);
    return append(tmp.data(), tmp.size());
  }

  std::uint64_t size() const { return written_; }

 private:
  std::ofstream out_;
  std::uint64_t written_ = 0;
};

class BlobReader {
 public:
  explicit BlobReader(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingArtifact("cannot open blob " + path.string());
    in.seekg(0, std::ios::end);
    auto bytes = static_cast<std::size_t>(in.tellg());
    in.seekg(0);
    if (bytes % sizeof(float) != 0)
      throw MissingArtifact("blob " + path.string() +
                            " is not a whole number of float32 values");
    data_.resize(bytes / sizeof(float));
    in.read(reinterpret_cast<char*>(data_.data()),
            static_cast<std::streamsize>(bytes));
  }

  Vec read_vec(const BlobRef& ref) const {
    check(ref);
    Vec v(static_cast<Eigen::Index>(ref.count));
    for (std::uint64_t i = 0; i < ref.count; ++i)
      v[static_cast<Eigen::Index>(i)] =
          static_cast<double>(data_[ref.offset + i]);
    return v;
  }

  Mat read_mat(const BlobRef& ref, Eigen::Index rows, Eigen::Index cols) const {
    check(ref);
    require(static_cast<std::uint64_t>(rows) * static_cast<std::uint64_t>(cols) ==
                ref.count,
            "BlobReader: shape does not match element count");
    Mat m(rows, cols);
    std::uint64_t k = ref.offset;
    for (Eigen::Index r = 0; r < rows; ++r)
      for (Eigen::Index c = 0; c < cols; ++c)
        m(r, c) = static_cast<double>(data_[k++]);
    return m;
  }

 private:
  void check(const BlobRef& ref) const {
    if (ref.offset + ref.count > data_.size())
      throw MissingArtifact("blob reference out of range");
  }
  std::vector<float> data_;
};

class JsonlWriter {
 public:
  explicit JsonlWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary) {
    if (!out_) throw MissingArtifact("cannot write " + path.string());
  }
  void append(const Json& j) { out_ << j.dump() << "\n"; }

 private:
  std::ofstream out_;
};

inline std::vector<Json> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("cannot open " + path.string());
  std::vector<Json> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(Json::parse(line));
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Episode datasets
// ---------------------------------------------------------------------------

// One recorded episode together with the world it was generated in (when
// known): calibration parameters and the residual-fidelity pair.
struct DatasetRecord {
  Trajectory traj;
  Vec psi;        // empty when unknown (real-world episodes before inference)
  Vec delta_s;    // empty = zero
  Mat delta_e;    // empty = zero
  bool anomalous = false;
  int episode = 0;
};

inline Json envgrid_to_json(const EnvGrid& g, BlobWriter& blob) {
  return Json{{"rows", g.rows()},
              {"cols", g.cols()},
              {"resolution", g.resolution},
              {"origin", {g.origin[0], g.origin[1]}},
              {"heights", blobref_to_json(blob.append(g.heights))}};
}

inline EnvGrid envgrid_from_json(const Json& j, const BlobReader& blob) {
  EnvGrid g;
  g.resolution = j.at("resolution").get<double>();
  g.origin = {j.at("origin")[0].get<double>(), j.at("origin")[1].get<double>()};
  g.heights = blob.read_mat(blobref_from_json(j.at("heights")),
                            j.at("rows").get<Eigen::Index>(),
                            j.at("cols").get<Eigen::Index>());
  g.validate();
  return g;
}

class DatasetWriter {
 public:
  DatasetWriter(const std::filesystem::path& dir, const std::string& stem,
                const std::string& config_hash)
      : jsonl_(dir / (stem + ".jsonl")),
        blob_(dir / (stem + ".bin")),
        config_hash_(config_hash) {}

  void append(const DatasetRecord& rec) {
    rec.traj.validate();
    Json j;
    j["episode"] = rec.episode;
    j["seed"] = rec.traj.seed;
    j["window"] = rec.traj.window();
    j["state_dim"] = rec.traj.state_dim();
    j["action_dim"] = rec.traj.action_dim();
    j["clamp_warnings"] = rec.traj.clamp_warnings;
    j["anomalous"] = rec.anomalous;
    j["config_hash"] = config_hash_;
    j["states"] = blobref_to_json(blob_.append(rec.traj.states));
    j["actions"] = blobref_to_json(blob_.append(rec.traj.actions));
    j["env"] = envgrid_to_json(rec.traj.env, blob_);
    if (rec.psi.size() > 0) j["psi"] = blobref_to_json(blob_.append(rec.psi));
    if (rec.delta_s.size() > 0)
      j["delta_s"] = blobref_to_json(blob_.append(rec.delta_s));
    if (rec.delta_e.size() > 0) {
      j["delta_e"] = blobref_to_json(blob_.append(rec.delta_e));
      j["delta_e_rows"] = rec.delta_e.rows();
      j["delta_e_cols"] = rec.delta_e.cols();
    }
    jsonl_.append(j);
    ++count_;
  }

  int count() const { return count_; }

 private:
  JsonlWriter jsonl_;
  BlobWriter blob_;
  std::string config_hash_;
  int count_ = 0;
};

inline std::vector<DatasetRecord> read_dataset(
    const std::filesystem::path& dir, const std::string& stem) {
  auto rows = read_jsonl(dir / (stem + ".jsonl"));
  BlobReader blob(dir / (stem + ".bin"));
  std::vector<DatasetRecord> out;
  out.reserve(rows.size());
  for (const Json& j : rows) {
    DatasetRecord rec;
    rec.episode = j.at("episode").get<int>();
    rec.anomalous = j.at("anomalous").get<bool>();
    auto window = j.at("window").get<Eigen::Index>();
    auto sd = j.at("state_dim").get<Eigen::Index>();
    auto ad = j.at("action_dim").get<Eigen::Index>();
    rec.traj.seed = j.at("seed").get<std::uint64_t>();
    rec.traj.clamp_warnings = j.at("clamp_warnings").get<int>();
    rec.traj.states =
        blob.read_mat(blobref_from_json(j.at("states")), window + 1, sd);
    rec.traj.actions =
        blob.read_mat(blobref_from_json(j.at("actions")), window, ad);
    rec.traj.env = envgrid_from_json(j.at("env"), blob);
    if (j.contains("psi")) rec.psi = blob.read_vec(blobref_from_json(j["psi"]));
    if (j.contains("delta_s"))
      rec.delta_s = blob.read_vec(blobref_from_json(j["delta_s"]));
    if (j.contains("delta_e"))
      rec.delta_e = blob.read_mat(blobref_from_json(j["delta_e"]),
                                  j.at("delta_e_rows").get<Eigen::Index>(),
                                  j.at("delta_e_cols").get<Eigen::Index>());
    rec.traj.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model checkpoints
// ---------------------------------------------------------------------------

// Named-tensor checkpoint: <stem>.json holds metadata plus per-tensor
// shapes and blob references; <stem>.bin holds the values.
class CheckpointWriter {
 public:
  CheckpointWriter(const std::filesystem::path& dir, const std::string& stem)
      : dir_(dir), stem_(stem), blob_(dir / (stem + ".bin")) {
    meta_["tensors"] = Json::object();
  }

  void set(const std::string& key, const Json& value) { meta_[key] = value; }

  void add(const std::string& name, const Mat& m) {
    Json t = blobref_to_json(blob_.append(m));
    t["rows"] = m.rows();
    t["cols"] = m.cols();
    meta_["tensors"][name] = t;
  }

  void add(const std::string& name, const Vec& v) {
    Json t = blobref_to_json(blob_.append(v));
    t["rows"] = v.size();
    t["cols"] = 1;
    meta_["tensors"][name] = t;
  }

  void finish() { write_text_file(dir_ / (stem_ + ".json"), meta_.dump(2)); }

 private:
  std::filesystem::path dir_;
  std::string stem_;
  BlobWriter blob_;
  Json meta_;
};

class CheckpointReader {
 public:
  CheckpointReader(const std::filesystem::path& dir, const std::string& stem)
      : blob_(dir / (stem + ".bin")) {
    meta_ = Json::parse(read_text_file(dir / (stem + ".json")));
  }

  const Json& meta() const { return meta_; }

  bool has(const std::string& name) const {
    return meta_.at("tensors").contains(name);
  }

  Mat mat(const std::string& name) const {
    const Json& t = tensor_meta(name);
    return blob_.read_mat(blobref_from_json(t), t.at("rows").get<Eigen::Index>(),
                          t.at("cols").get<Eigen::Index>());
  }

  Vec vec(const std::string& name) const {
    const Json& t = tensor_meta(name);
    require(t.at("cols").get<Eigen::Index>() == 1,
            "CheckpointReader: tensor " + name + " is not a vector");
    return blob_.read_vec(blobref_from_json(t));
  }

 private:
  const Json& tensor_meta(const std::string& name) const {
    const Json& ts = meta_.at("tensors");
    if (!ts.contains(name))
      throw MissingArtifact("checkpoint tensor missing: " + name);
    return ts.at(name);
  }
  Json meta_;
  BlobReader blob_;
};

// ---------------------------------------------------------------------------
// CSV (RFC 4180)
// ---------------------------------------------------------------------------

inline std::string csv_escape(const std::string& cell) {
  bool needs_quotes = cell.find_first_of(",\"\r\n") != std::string::npos;
  if (!needs_quotes) return cell;
  std::string out = "\"";
  for (char c : cell) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += "\"";
  return out;
}

class CsvWriter {
 public:
  explicit CsvWriter(const std::filesystem::path& path)
      : out_(path, std::ios::binary) {
    if (!out_) throw MissingArtifact("cannot write " + path.string());
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i > 0) out_ << ",";
      out_ << csv_escape(cells[i]);
    }
    out_ << "\r\n";
  }

 private:
  std::ofstream out_;
};

}  // namespace nfc
