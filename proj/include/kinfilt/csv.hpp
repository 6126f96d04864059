#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "kinfilt/common.hpp"

namespace kinfilt::csv {

/// Pinned CSV dialect: comma separator, '.' decimal point, LF line endings,
/// mandatory header row. Doubles print with %.17g so re-runs are byte-exact.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw std::runtime_error("csv::Writer: cannot open " + path);
    }

    /// Manifest block: '#'-prefixed key = value lines echoing the resolved
    /// config, closed by a content hash of the manifest body.
    void manifest(const std::vector<std::pair<std::string, std::string>>& entries) {
        std::string body;
        for (const auto& [k, v] : entries) body += "# " + k + " = " + v + "\n";
        out_ << body;
        char hex[24];
        std::snprintf(hex, sizeof(hex), "%016llx",
                      static_cast<unsigned long long>(content_hash(body)));
        out_ << "# content_hash = " << hex << "\n";
    }

    void header(const std::vector<std::string>& cols) { row_strings(cols); }

    void row(const std::vector<double>& vals) {
        for (std::size_t i = 0; i < vals.size(); ++i) {
            if (i) out_ << ',';
            out_ << format_double(vals[i]);
        }
        out_ << '\n';
    }

    void row_strings(const std::vector<std::string>& vals) {
        for (std::size_t i = 0; i < vals.size(); ++i) {
            if (i) out_ << ',';
            out_ << vals[i];
        }
        out_ << '\n';
    }

private:
    std::ofstream out_;
};

}  // namespace kinfilt::csv
