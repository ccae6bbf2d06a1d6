#pragma once

// JSON encoders shared by the config loader and the checkpoint manifest.

#include <exception>
#include <set>
#include <string>

#include <json.hpp>

#include "xptlab/encoder.hpp"
#include "xptlab/error.hpp"
#include "xptlab/projection.hpp"
#include "xptlab/prompts.hpp"
#include "xptlab/tuning.hpp"

namespace xptlab::codec {

using json = nlohmann::ordered_json;

// Reads fields from one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw InputError("'" + path_ + "' must be a JSON object");
  }
  Section(const Section&) = delete;
  Section& operator=(const Section&) = delete;
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& item : j_.items()) {
      if (!seen_.contains(item.key())) throw InputError("unknown key '" + path_ + "." + item.key() + "'");
    }
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw InputError("bad value for '" + path_ + "." + key + "': " + e.what());
    }
  }

  template <class T>
  T require(const char* key) {
    if (!j_.contains(key)) throw InputError("missing key '" + path_ + "." + key + "'");
    T out{};
    get(key, out);
    return out;
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null() ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json to_json(const ModelConfig& m);
void read(Section& s, ModelConfig& m);

json to_json(const PromptConfig& p);
void read(Section& s, PromptConfig& p);

/// Every Hyper field, mode and seed included.
json to_json(const Hyper& h);
void read(Section& s, Hyper& h);

json to_json(const TsneConfig& t);
void read(Section& s, TsneConfig& t);

}  // namespace xptlab::codec
