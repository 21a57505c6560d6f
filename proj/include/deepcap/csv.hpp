#pragma once

// RFC-4180 CSV output: comma separated, CRLF line ends, fields quoted when
// they contain a comma, quote, CR or LF.

#include <fstream>
#include <string>
#include <vector>

namespace deepcap {

std::string csv_escape(const std::string& field);
std::string csv_line(const std::vector<std::string>& fields);
// Shortest text that reads back to the same double.
std::string format_double(double v);

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header);
  void row(const std::vector<std::string>& fields);
  void close();

 private:
  std::string path_;
  std::ofstream out_;
  std::size_t columns_;
};

// Minimal reader for files produced by CsvWriter (used by tests and tools).
std::vector<std::vector<std::string>> read_csv(const std::string& path);

}  // namespace deepcap
