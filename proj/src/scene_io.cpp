#include "codedvtr/scene_io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "codedvtr/error.hpp"

namespace cvtr::io {

namespace {

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string format_float(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", static_cast<double>(static_cast<float>(v)));
  return buf;
}

PointCloud read_ply(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line.rfind("ply", 0) != 0) throw IoError(path + ": missing ply magic");

  std::size_t vertices = 0;
  bool in_vertex = false;
  bool ascii = false;
  std::vector<std::string> props;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string word;
    ls >> word;
    if (word == "format") {
      std::string kind;
      ls >> kind;
      ascii = kind == "ascii";
    } else if (word == "element") {
      std::string name;
      std::size_t count = 0;
      ls >> name >> count;
      in_vertex = name == "vertex";
      if (in_vertex) vertices = count;
    } else if (word == "property" && in_vertex) {
      std::string type, name;
      ls >> type >> name;
      if (type == "list") throw IoError(path + ": list properties on vertices are not supported");
      props.push_back(name);
    } else if (word == "end_header") {
      break;
    }
  }
  if (!ascii) throw IoError(path + ": only ASCII PLY is supported");
  int ix = -1, iy = -1, iz = -1, il = -1;
  for (std::size_t p = 0; p < props.size(); ++p) {
    if (props[p] == "x") ix = static_cast<int>(p);
    if (props[p] == "y") iy = static_cast<int>(p);
    if (props[p] == "z") iz = static_cast<int>(p);
    if (props[p] == "label") il = static_cast<int>(p);
  }
  if (ix < 0 || iy < 0 || iz < 0) throw IoError(path + ": vertex element lacks x/y/z");

  PointCloud cloud;
  cloud.positions.reserve(vertices);
  std::vector<double> values(props.size());
  for (std::size_t v = 0; v < vertices; ++v) {
    for (auto& value : values)
      if (!(in >> value)) throw IoError(path + ": truncated vertex data at vertex " + std::to_string(v));
    cloud.positions.push_back({values[ix], values[iy], values[iz]});
    if (il >= 0) cloud.labels.push_back(static_cast<int>(values[il]));
  }
  cloud.features = Matrix(vertices, 0);
  return cloud;
}

PointCloud read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw IoError(path + ": empty file");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  const bool has_label = line == "x,y,z,label";
  if (!has_label && line != "x,y,z") throw IoError(path + ": expected header x,y,z,label");
  PointCloud cloud;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    for (char& ch : line)
      if (ch == ',') ch = ' ';
    std::istringstream ls(line);
    double x, y, z;
    if (!(ls >> x >> y >> z)) throw IoError(path + ": malformed row " + std::to_string(row));
    cloud.positions.push_back({x, y, z});
    if (has_label) {
      int label;
      if (!(ls >> label)) throw IoError(path + ": missing label at row " + std::to_string(row));
      cloud.labels.push_back(label);
    }
  }
  cloud.features = Matrix(cloud.positions.size(), 0);
  return cloud;
}

}  // namespace

PointCloud read_scene(const std::string& path) {
  if (ends_with(path, ".ply")) return read_ply(path);
  if (ends_with(path, ".csv")) return read_csv(path);
  throw IoError(path + ": unknown scene format (expected .ply or .csv)");
}

void write_scene_ply(const std::string& path, const PointCloud& points) {
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << points.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty int label\nend_header\n";
  for (std::size_t p = 0; p < points.size(); ++p) {
    const auto& xyz = points.positions[p];
    out << format_float(xyz[0]) << ' ' << format_float(xyz[1]) << ' ' << format_float(xyz[2]) << ' '
        << (points.labels.empty() ? 0 : points.labels[p]) << '\n';
  }
  write_text(path, out.str());
}

void write_scene_csv(const std::string& path, const PointCloud& points) {
  std::ostringstream out;
  out << "x,y,z,label\n";
  for (std::size_t p = 0; p < points.size(); ++p) {
    const auto& xyz = points.positions[p];
    out << format_float(xyz[0]) << ',' << format_float(xyz[1]) << ',' << format_float(xyz[2]) << ','
        << (points.labels.empty() ? 0 : points.labels[p]) << '\n';
  }
  write_text(path, out.str());
}

void write_scene(const std::string& path, const PointCloud& points) {
  if (ends_with(path, ".csv")) return write_scene_csv(path, points);
  if (ends_with(path, ".ply")) return write_scene_ply(path, points);
  throw IoError(path + ": unknown scene format (expected .ply or .csv)");
}

void write_scalar_ply(const std::string& path, std::span<const std::array<double, 3>> positions,
                      const std::string& property, std::span<const int> values) {
  if (positions.size() != values.size()) throw StructuralError("write_scalar_ply: size mismatch");
  std::ostringstream out;
  out << "ply\nformat ascii 1.0\nelement vertex " << positions.size()
      << "\nproperty float x\nproperty float y\nproperty float z\nproperty int " << property << "\nend_header\n";
  for (std::size_t p = 0; p < positions.size(); ++p)
    out << format_float(positions[p][0]) << ' ' << format_float(positions[p][1]) << ' '
        << format_float(positions[p][2]) << ' ' << values[p] << '\n';
  write_text(path, out.str());
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed for " + path);
}

}  // namespace cvtr::io
