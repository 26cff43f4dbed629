#pragma once

#include <map>
#include <string>

#include "rfga/errors.hpp"

namespace rfga {

// Flat key=value config with [section] headers and '#' comments. Keys are
// stored as "section.key"; keys before any section header keep their bare
// name. No nesting, no quoting.
class KvConfig {
  public:
    static KvConfig parse(const std::string& text, const std::string& source_name);
    static KvConfig parse_file(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) > 0; }
    std::string get(const std::string& key, const std::string& fallback) const;
    int64_t get_int(const std::string& key, int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;

    void set(const std::string& key, const std::string& value) { values_[key] = value; }
    const std::map<std::string, std::string>& values() const { return values_; }

  private:
    std::map<std::string, std::string> values_;
};

}  // namespace rfga
