#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvec::cli {

/// One declared setting, addressed as `section.key`.
struct Setting {
  std::string section;
  std::string key;
  std::string value;
  std::string help;

  std::string qualified() const { return section + "." + key; }
};

/// Flat sectioned key-value settings. Every key must be declared before it
/// can be set; values are kept as text and converted on access.
class RunConfig {
 public:
  void declare(const std::string& section, const std::string& key, std::string value, std::string help);
  bool has(const std::string& qualified) const;

  /// Reads an INI-style file (`[section]`, `key = value`, `;` or `#`
  /// comments, optional quotes around values). Only sections in `allowed`
  /// are accepted; unknown sections or keys throw UsageError.
  void load_file(const std::filesystem::path& path, const std::vector<std::string>& allowed);
  void set(const std::string& qualified, const std::string& value);
  /// Applies `section.key=value`.
  void set_assignment(const std::string& assignment);

  const std::string& text(const std::string& qualified) const;
  std::string get_string(const std::string& qualified) const { return text(qualified); }
  double get_double(const std::string& qualified) const;
  std::int64_t get_int(const std::string& qualified) const;
  std::size_t get_size(const std::string& qualified) const;
  std::uint64_t get_u64(const std::string& qualified) const;
  bool get_bool(const std::string& qualified) const;
  /// Comma-separated list of numbers.
  std::vector<double> get_doubles(const std::string& qualified) const;

  std::vector<const Setting*> section(const std::string& name) const;
  /// Writes the listed sections in declaration order, loadable by `load_file`.
  void write(std::ostream& out, const std::vector<std::string>& sections) const;

 private:
  Setting& find(const std::string& qualified);
  const Setting& find(const std::string& qualified) const;

  std::vector<Setting> settings_;
};

/// Settings of every subcommand with their defaults.
RunConfig default_config();

}  // namespace kvec::cli
