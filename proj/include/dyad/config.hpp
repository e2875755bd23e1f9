#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"

#include "dyad/synth.hpp"
#include "dyad/training.hpp"

namespace dyad {

/// Flat dotted-key configuration ("vae.hidden", "serve.port", ...). Every key
/// has a typed default; files and overrides may only touch known keys, and a
/// value must have the default's type (nullable keys also accept null).
class RunConfig {
 public:
  RunConfig();

  /// JSON object, nested or with dotted keys. ConfigError on unknown keys or
  /// type mismatches, IoError when the file cannot be read.
  void merge_file(const std::filesystem::path& path);
  void merge(const nlohmann::json& object);
  /// "key=value"; the value is parsed as JSON and falls back to a string.
  void set(const std::string& assignment);
  void set(const std::string& key, const nlohmann::json& value);

  const nlohmann::json& at(const std::string& key) const;
  std::string str(const std::string& key) const { return at(key).get<std::string>(); }
  double num(const std::string& key) const { return at(key).get<double>(); }
  std::size_t size(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const { return at(key).get<std::uint64_t>(); }
  bool flag(const std::string& key) const { return at(key).get<bool>(); }
  std::optional<double> opt_num(const std::string& key) const;

  /// Every key with its current value, sorted.
  const nlohmann::json& resolved() const { return values_; }

  synth::ScenarioConfig scenario() const;
  vae::VaeConfig vae() const;
  flow::GenConfig flow() const;
  train::VaeTrainOptions vae_train() const;
  train::FlowTrainOptions flow_train() const;

 private:
  nlohmann::json values_, defaults_;
  void define(const std::string& key, nlohmann::json value, bool nullable = false);
  std::vector<std::string> nullable_;
};

}  // namespace dyad
