#pragma once

#include <cstdio>
#include <string>
#include <vector>

#include "mfbsde/types.hpp"

namespace mfbsde {

/// Minimal CSV writer with deterministic float formatting (%.17g), so equal
/// runs produce byte-identical artifacts.
class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path);
  ~CsvWriter();
  CsvWriter(const CsvWriter&) = delete;
  CsvWriter& operator=(const CsvWriter&) = delete;

  void header(const std::vector<std::string>& cols);
  void row(const std::vector<double>& values);
  /// Mixed row: leading doubles then a vector tail.
  void row(std::initializer_list<double> scalars, const Vec& tail);
  void raw_line(const std::string& line);

  static std::string format(double v);

 private:
  std::FILE* f_ = nullptr;
  std::string path_;
};

/// `key: value` summary report; final line `status: PASS|FAIL`.
class SummaryReport {
 public:
  void add(const std::string& key, const std::string& value);
  void add(const std::string& key, double value);
  void add(const std::string& key, long long value);
  void line(const std::string& text);  // free-form report line
  /// Marks a threshold result; any failure flips the final status.
  void threshold(const std::string& key, double value, double bound, bool pass);
  bool passing() const { return pass_; }
  void force_fail() { pass_ = false; }
  std::string render() const;
  void write(const std::string& path) const;

 private:
  std::vector<std::string> lines_;
  bool pass_ = true;
};

}  // namespace mfbsde
