#include "qme/core/io.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <sstream>

#include "json.hpp"

namespace qme::core {
namespace {

using nlohmann::json;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::stringstream ss(line);
  std::string field;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

double parse_double(const std::string& s) {
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  require(end != s.c_str() && *end == '\0', "ParseError", "bad number '" + s + "'");
  return v;
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), "IoError", "cannot open " + path.string());
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  require(out.good(), "IoError", "cannot write " + path.string());
  return out;
}

}  // namespace

std::string format_double(double value) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof(buf), value);
  return std::string(buf, res.ptr);
}

GalleryManifest load_manifest(const std::filesystem::path& path) {
  auto in = open_in(path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    fail("ParseError", path.string() + ": " + e.what());
  }
  GalleryManifest m;
  for (const auto& s : j.at("subjects")) m.subjects.push_back(s.get<std::string>());
  for (const auto& t : j.at("templates"))
    m.templates.push_back({t.at("template_id").get<std::string>(),
                           t.at("subject_id").get<std::string>()});
  for (const auto& q : j.at("queries"))
    m.queries.push_back({q.at("query_id").get<std::string>(),
                         q.at("subject_id").get<std::string>(),
                         q.at("frame_count").get<int>()});
  m.validate();
  return m;
}

void save_manifest(const GalleryManifest& manifest, const std::filesystem::path& path) {
  json j;
  j["subjects"] = manifest.subjects;
  j["templates"] = json::array();
  for (const auto& t : manifest.templates)
    j["templates"].push_back({{"template_id", t.template_id}, {"subject_id", t.subject_id}});
  j["queries"] = json::array();
  for (const auto& q : manifest.queries)
    j["queries"].push_back({{"query_id", q.query_id},
                            {"subject_id", q.subject_id},
                            {"frame_count", q.frame_count}});
  auto out = open_out(path);
  out << j.dump(2) << "\n";
}

ScoreMatrix load_score_csv(const std::filesystem::path& path, const std::string& modality_id) {
  auto in = open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "empty score file");
  auto header = split_csv_line(line);
  require(header.size() >= 2 && header[0] == "query_id", "ParseError",
          "bad score header in " + path.string());

  ScoreMatrix m;
  m.modality_id = modality_id;
  m.template_ids.assign(header.begin() + 1, header.end());
  const auto t_count = static_cast<Eigen::Index>(m.template_ids.size());

  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    require(fields.size() == header.size(), "ParseError",
            "row width mismatch in " + path.string());
    rows.push_back(std::move(fields));
  }

  m.values = Matrix::Constant(static_cast<Eigen::Index>(rows.size()), t_count,
                              std::numeric_limits<double>::quiet_NaN());
  m.mask = BoolArray::Constant(m.values.rows(), t_count, false);
  for (Eigen::Index i = 0; i < m.values.rows(); ++i) {
    const auto& fields = rows[static_cast<std::size_t>(i)];
    m.query_ids.push_back(fields[0]);
    for (Eigen::Index t = 0; t < t_count; ++t) {
      const auto& cell = fields[static_cast<std::size_t>(t) + 1];
      if (cell == "NA") continue;
      m.values(i, t) = parse_double(cell);
      m.mask(i, t) = true;
    }
  }
  m.validate();
  return m;
}

void save_score_csv(const ScoreMatrix& scores, const std::filesystem::path& path) {
  auto out = open_out(path);
  out << "query_id";
  for (const auto& t : scores.template_ids) out << ',' << t;
  out << '\n';
  for (Eigen::Index i = 0; i < scores.values.rows(); ++i) {
    out << scores.query_ids[static_cast<std::size_t>(i)];
    for (Eigen::Index t = 0; t < scores.values.cols(); ++t) {
      out << ',';
      if (scores.mask(i, t))
        out << format_double(scores.values(i, t));
      else
        out << "NA";
    }
    out << '\n';
  }
}

std::map<std::string, Matrix> load_feature_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "empty feature file");
  auto header = split_csv_line(line);
  require(header.size() >= 3 && header[0] == "query_id" && header[1] == "frame_index",
          "ParseError", "bad feature header in " + path.string());
  const auto dim = static_cast<Eigen::Index>(header.size() - 2);

  std::map<std::string, std::vector<Vector>> frames;
  std::map<std::string, Matrix> out;
  std::vector<std::string> order;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    require(fields.size() == header.size(), "ParseError", "row width mismatch");
    const auto& qid = fields[0];
    auto [it, inserted] = frames.try_emplace(qid);
    if (inserted) order.push_back(qid);
    require(parse_double(fields[1]) == static_cast<double>(it->second.size()),
            "ParseError", "non-contiguous frame_index for " + qid);
    Vector f(dim);
    for (Eigen::Index c = 0; c < dim; ++c)
      f(c) = parse_double(fields[static_cast<std::size_t>(c) + 2]);
    it->second.push_back(std::move(f));
  }
  for (const auto& qid : order) {
    const auto& fs = frames[qid];
    Matrix m(static_cast<Eigen::Index>(fs.size()), dim);
    for (std::size_t r = 0; r < fs.size(); ++r) m.row(static_cast<Eigen::Index>(r)) = fs[r];
    out.emplace(qid, std::move(m));
  }
  return out;
}

void save_feature_csv(const std::map<std::string, Matrix>& features,
                      const std::filesystem::path& path) {
  require(!features.empty(), "EmptyQuery", "no features to write");
  const Eigen::Index dim = features.begin()->second.cols();
  auto out = open_out(path);
  out << "query_id,frame_index";
  for (Eigen::Index c = 0; c < dim; ++c) out << ",f" << c;
  out << '\n';
  for (const auto& [qid, frames] : features) {
    require(frames.cols() == dim, "ShapeError", qid);
    for (Eigen::Index r = 0; r < frames.rows(); ++r) {
      out << qid << ',' << r;
      for (Eigen::Index c = 0; c < dim; ++c) out << ',' << format_double(frames(r, c));
      out << '\n';
    }
  }
}

void save_center_csv(const std::vector<std::string>& subjects, const Matrix& centers,
                     const std::filesystem::path& path) {
  require(centers.rows() == static_cast<Eigen::Index>(subjects.size()), "ShapeError");
  auto out = open_out(path);
  out << "subject_id";
  for (Eigen::Index c = 0; c < centers.cols(); ++c) out << ",f" << c;
  out << '\n';
  for (Eigen::Index r = 0; r < centers.rows(); ++r) {
    out << subjects[static_cast<std::size_t>(r)];
    for (Eigen::Index c = 0; c < centers.cols(); ++c)
      out << ',' << format_double(centers(r, c));
    out << '\n';
  }
}

std::pair<std::vector<std::string>, Matrix> load_center_csv(const std::filesystem::path& path) {
  auto in = open_in(path);
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), "ParseError", "empty center file");
  auto header = split_csv_line(line);
  require(header.size() >= 2 && header[0] == "subject_id", "ParseError",
          "bad center header in " + path.string());
  const auto dim = static_cast<Eigen::Index>(header.size() - 1);

  std::vector<std::string> subjects;
  std::vector<Vector> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto fields = split_csv_line(line);
    require(fields.size() == header.size(), "ParseError", "row width mismatch");
    subjects.push_back(fields[0]);
    Vector v(dim);
    for (Eigen::Index c = 0; c < dim; ++c)
      v(c) = parse_double(fields[static_cast<std::size_t>(c) + 1]);
    rows.push_back(std::move(v));
  }
  Matrix centers(static_cast<Eigen::Index>(rows.size()), dim);
  for (std::size_t r = 0; r < rows.size(); ++r)
    centers.row(static_cast<Eigen::Index>(r)) = rows[r];
  return {std::move(subjects), std::move(centers)};
}

}  // namespace qme::core
