#include "mfbsde/csv.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mfbsde {

CsvWriter::CsvWriter(const std::string& path) : path_(path) {
  f_ = std::fopen(path.c_str(), "wb");
  if (!f_) throw std::runtime_error("cannot open " + path + " for writing");
}

CsvWriter::~CsvWriter() {
  if (f_) std::fclose(f_);
}

std::string CsvWriter::format(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void CsvWriter::header(const std::vector<std::string>& cols) {
  for (std::size_t i = 0; i < cols.size(); ++i) {
    if (i) std::fputc(',', f_);
    std::fputs(cols[i].c_str(), f_);
  }
  std::fputc('\n', f_);
}

void CsvWriter::row(const std::vector<double>& values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) std::fputc(',', f_);
    std::fputs(format(values[i]).c_str(), f_);
  }
  std::fputc('\n', f_);
}

void CsvWriter::row(std::initializer_list<double> scalars, const Vec& tail) {
  bool first = true;
  for (double v : scalars) {
    if (!first) std::fputc(',', f_);
    first = false;
    std::fputs(format(v).c_str(), f_);
  }
  for (Eigen::Index i = 0; i < tail.size(); ++i) {
    if (!first) std::fputc(',', f_);
    first = false;
    std::fputs(format(tail[i]).c_str(), f_);
  }
  std::fputc('\n', f_);
}

void CsvWriter::raw_line(const std::string& line) {
  std::fputs(line.c_str(), f_);
  std::fputc('\n', f_);
}

void SummaryReport::add(const std::string& key, const std::string& value) {
  lines_.push_back(key + ": " + value);
}

void SummaryReport::add(const std::string& key, double value) {
  lines_.push_back(key + ": " + CsvWriter::format(value));
}

void SummaryReport::add(const std::string& key, long long value) {
  lines_.push_back(key + ": " + std::to_string(value));
}

void SummaryReport::line(const std::string& text) { lines_.push_back(text); }

void SummaryReport::threshold(const std::string& key, double value,
                              double bound, bool pass) {
  lines_.push_back(key + ": " + CsvWriter::format(value) +
                   " (bound " + CsvWriter::format(bound) + ") " +
                   (pass ? "ok" : "VIOLATED"));
  if (!pass) pass_ = false;
}

std::string SummaryReport::render() const {
  std::string out;
  for (const auto& l : lines_) {
    out += l;
    out += '\n';
  }
  out += "status: ";
  out += pass_ ? "PASS" : "FAIL";
  out += '\n';
  return out;
}

void SummaryReport::write(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << render();
}

}  // namespace mfbsde
