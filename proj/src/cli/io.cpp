#include "xptlab/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <fmt/format.h>

#include "json_codec.hpp"
#include "xptlab/digest.hpp"
#include "xptlab/prompts.hpp"

namespace xptlab {

using codec::json;

namespace {

struct TensorEntry {
  std::string name;
  const Tensor* tensor;
};

std::vector<TensorEntry> payload_tensors(const Checkpoint& ck) {
  std::vector<TensorEntry> out;
  ck.backbone.for_each([&](const std::string& name, const Tensor& t) { out.push_back({"backbone." + name, &t}); });
  if (ck.head) {
    out.push_back({"head.weight", &ck.head->weight});
    out.push_back({"head.bias", &ck.head->bias});
  }
  if (ck.prompt) {
    for (std::size_t l = 0; l < ck.prompt->keys.size(); ++l) {
      out.push_back({"prompt.keys." + std::to_string(l), &ck.prompt->keys[l]});
      out.push_back({"prompt.values." + std::to_string(l), &ck.prompt->values[l]});
    }
  }
  return out;
}

void put_u64_le(std::string& out, std::uint64_t v) {
  for (int b = 0; b < 8; ++b) out.push_back(static_cast<char>((v >> (8 * b)) & 0xff));
}

std::uint64_t get_u64_le(std::string_view bytes, std::size_t offset) {
  std::uint64_t v = 0;
  for (int b = 0; b < 8; ++b) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[offset + b])) << (8 * b);
  return v;
}

template <class T>
T field(const json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw IoError(std::string("checkpoint manifest lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw IoError(std::string("checkpoint manifest field '") + key + "': " + e.what());
  }
}

// Reuses the config readers but reports problems as file damage.
template <class T>
T decode(const json& j, const char* what) {
  T out;
  try {
    codec::Section s(j, what);
    codec::read(s, out);
  } catch (const InputError& e) {
    throw IoError(std::string("checkpoint manifest: ") + e.what());
  }
  return out;
}

}  // namespace

// ---- checkpoints ------------------------------------------------------------------

std::string serialize_checkpoint(const Checkpoint& ck) {
  const std::vector<TensorEntry> tensors = payload_tensors(ck);
  std::string payload;
  json entries = json::array();
  std::size_t offset = 0;
  for (const TensorEntry& e : tensors) {
    entries.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset}});
    offset += e.tensor->size();
    append_f64_le(payload, e.tensor->data());
  }
  const std::size_t backbone_count = ck.backbone.parameter_count();
  const std::size_t head_count = ck.head ? ck.head->parameter_count() : 0;
  const std::size_t prompt_count = ck.prompt ? ck.prompt->parameter_count() : 0;
  const bool prompt_mode = ck.kind == CheckpointKind::kPromptTune;
  json ratios = {{"backbone_params", backbone_count},
                 {"head_params", head_count},
                 {"prompt_params", prompt_count},
                 {"tuned_param_ratio", prompt_mode ? tuned_param_ratio(prompt_count, head_count, backbone_count) : 1.0},
                 {"prompt_param_ratio", prompt_mode ? tuned_param_ratio(prompt_count, 0, backbone_count) : 0.0}};

  json m;
  m["format"] = "xptlab-checkpoint";
  m["version"] = kCheckpointVersion;
  m["kind"] = kind_name(ck.kind);
  m["seed"] = ck.seed;
  m["config_hash"] = ck.config_hash;
  m["model"] = codec::to_json(ck.model);
  m["hyper"] = ck.hyper ? codec::to_json(*ck.hyper) : json(nullptr);
  m["prompt_config"] = ck.prompt_config ? codec::to_json(*ck.prompt_config) : json(nullptr);
  m["prompt_length"] = ck.prompt ? json(ck.prompt->length) : json(nullptr);
  m["init"] = {{"scheme", "normal"}, {"std", 0.02}, {"layer_norm", "ones/zeros"}};
  m["ratios"] = std::move(ratios);
  m["tensors"] = std::move(entries);
  m["param_count"] = offset;
  m["backbone_sha256"] = sha256_hex(std::string_view(payload).substr(0, 8 * backbone_count));
  m["payload_sha256"] = sha256_hex(payload);
  const std::string manifest = m.dump();

  std::string out(kCheckpointMagic);
  put_u64_le(out, manifest.size());
  out += manifest;
  out += payload;
  return out;
}

Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < kCheckpointMagic.size() || bytes.substr(0, 6) != kCheckpointMagic.substr(0, 6)) {
    throw BadMagicError("not an xptlab checkpoint (bad magic)");
  }
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw VersionError("unsupported checkpoint container '" + std::string(bytes.substr(0, 8)) + "'");
  }
  if (bytes.size() < 16) throw IoError("checkpoint truncated before the manifest length");
  const std::uint64_t manifest_len = get_u64_le(bytes, 8);
  if (manifest_len > bytes.size() - 16) throw IoError("checkpoint truncated inside the manifest");
  json m;
  try {
    m = json::parse(bytes.substr(16, manifest_len));
  } catch (const json::parse_error& e) {
    throw IoError(std::string("checkpoint manifest is not valid JSON: ") + e.what());
  }
  if (field<std::string>(m, "format") != "xptlab-checkpoint") throw BadMagicError("manifest format tag mismatch");
  const int version = field<int>(m, "version");
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));

  const std::string_view payload = bytes.substr(16 + manifest_len);
  const auto param_count = field<std::size_t>(m, "param_count");
  if (payload.size() != 8 * param_count) {
    throw ChecksumError("payload holds " + std::to_string(payload.size()) + " bytes, manifest declares " +
                        std::to_string(param_count) + " doubles");
  }
  if (sha256_hex(payload) != field<std::string>(m, "payload_sha256")) {
    throw ChecksumError("checkpoint payload checksum mismatch");
  }

  Checkpoint ck;
  try {
    ck.kind = parse_kind(field<std::string>(m, "kind"));
  } catch (const InputError& e) {
    throw IoError(e.what());
  }
  ck.seed = field<std::uint64_t>(m, "seed");
  ck.config_hash = field<std::string>(m, "config_hash");
  ck.model = decode<ModelConfig>(m.at("model"), "model");
  try {
    ck.model.validate();
  } catch (const InputError& e) {
    throw IoError(std::string("checkpoint model config: ") + e.what());
  }
  if (!m.at("hyper").is_null()) ck.hyper = decode<Hyper>(m.at("hyper"), "hyper");
  if (!m.at("prompt_config").is_null()) ck.prompt_config = decode<PromptConfig>(m.at("prompt_config"), "prompt_config");

  std::map<std::string, Tensor> loaded;
  std::size_t expected_offset = 0;
  for (const json& e : field<json>(m, "tensors")) {
    const auto name = field<std::string>(e, "name");
    const auto shape = field<Shape>(e, "shape");
    const auto offset = field<std::size_t>(e, "offset");
    if (offset != expected_offset) throw IoError("tensor '" + name + "' is not contiguous in the payload");
    Tensor t(shape);
    if (offset + t.size() > param_count) throw IoError("tensor '" + name + "' runs past the payload");
    read_f64_le(payload, 8 * offset, t.data());
    expected_offset += t.size();
    if (!loaded.emplace(name, std::move(t)).second) throw IoError("tensor '" + name + "' listed twice");
  }
  if (expected_offset != param_count) throw IoError("manifest tensors do not cover the payload");

  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw IoError("checkpoint lacks tensor '" + name + "'");
    if (it->second.shape() != shape) throw IoError("tensor '" + name + "' has the wrong shape");
    Tensor t = std::move(it->second);
    loaded.erase(it);
    return t;
  };
  ck.backbone = init_encoder(ck.model, 0);
  ck.backbone.for_each([&](const std::string& name, Tensor& t) { t = take("backbone." + name, t.shape()); });
  if (loaded.contains("head.weight")) {
    ClassifierHead head;
    head.weight = take("head.weight", {ck.model.d_model, ck.model.n_classes});
    head.bias = take("head.bias", {ck.model.n_classes});
    ck.head = std::move(head);
  }
  if (!m.at("prompt_length").is_null()) {
    DeepPrompt prompt;
    prompt.length = field<std::size_t>(m, "prompt_length");
    const Shape shape{prompt.length, ck.model.n_heads, ck.model.d_head()};
    for (std::size_t l = 0; l < ck.model.n_layers; ++l) {
      prompt.keys.push_back(take("prompt.keys." + std::to_string(l), shape));
      prompt.values.push_back(take("prompt.values." + std::to_string(l), shape));
    }
    ck.prompt = std::move(prompt);
  }
  if (!loaded.empty()) throw IoError("checkpoint has unexpected tensor '" + loaded.begin()->first + "'");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, serialize_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

// ---- files ------------------------------------------------------------------------

std::string read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  if (f.bad()) throw IoError("read failed: " + path.string());
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    f.flush();
    if (!f) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string history_to_json(const RunHistory& h) {
  json epochs = json::array();
  for (const EpochRecord& e : h.epochs) {
    json test = json::object();
    for (const auto& [lang, acc] : e.test_accuracy) test[std::to_string(lang)] = acc;
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"train_accuracy", e.train_accuracy},
                      {"val_accuracy", e.val_accuracy},
                      {"test_accuracy", std::move(test)}});
  }
  json j = {{"mode", mode_name(h.mode)},
            {"lr", h.lr},
            {"epochs", std::move(epochs)},
            {"backbone_checksum_before", h.backbone_checksum_before},
            {"backbone_checksum_after", h.backbone_checksum_after}};
  return j.dump(2) + "\n";
}

// ---- datasets ---------------------------------------------------------------------

std::string sample_to_jsonl(const TaskSample& s) {
  const json j = {{"tokens_a", s.tokens_a}, {"tokens_b", s.tokens_b}, {"label", s.label},
                  {"lang", s.lang},         {"pair_id", s.pair_id},   {"split", split_name(s.split)}};
  return j.dump();
}

TaskSample sample_from_jsonl(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw InputError(std::string("dataset line is not valid JSON: ") + e.what());
  }
  TaskSample s;
  codec::Section sec(j, "sample");
  s.tokens_a = sec.require<std::vector<int>>("tokens_a");
  s.tokens_b = sec.require<std::vector<int>>("tokens_b");
  s.label = sec.require<int>("label");
  s.lang = sec.require<int>("lang");
  s.pair_id = sec.require<int>("pair_id");
  s.split = parse_split(sec.require<std::string>("split"));
  return s;
}

namespace {

constexpr Split kSplits[] = {Split::kTrain, Split::kVal, Split::kTest, Split::kAnalysis};

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) out.push_back(std::move(line));
  }
  return out;
}

}  // namespace

void write_dataset(const std::filesystem::path& dir, const DatasetFiles& data, const ExperimentConfig& config) {
  json counts = json::object();
  for (Split split : kSplits) {
    std::string text;
    json per_lang = json::object();
    std::map<int, std::size_t> n;
    for (const TaskSample& s : data.task.samples) {
      if (s.split != split) continue;
      text += sample_to_jsonl(s);
      text += '\n';
      ++n[s.lang];
    }
    std::size_t total = 0;
    for (const auto& [lang, c] : n) {
      per_lang[std::to_string(lang)] = c;
      total += c;
    }
    counts[split_name(split)] = {{"lines", total}, {"per_lang", std::move(per_lang)}};
    write_file(dir / (std::string(split_name(split)) + ".jsonl"), text);
  }

  std::string pre;
  std::size_t pre_lines = 0;
  for (const LangCorpus& c : data.pretrain) {
    for (const TextPair& p : c.pairs) {
      pre += json{{"first", p.first}, {"second", p.second}, {"lang", c.lang}}.dump();
      pre += '\n';
      ++pre_lines;
    }
  }
  write_file(dir / "pretrain.jsonl", pre);
  counts["pretrain"] = {{"lines", pre_lines}};

  json langs = json::array();
  for (const LangSpec& l : data.task.languages) {
    langs.push_back({{"lang_id", l.lang_id}, {"difficulty", l.difficulty}, {"permutation", l.permutation}});
  }
  write_file(dir / "languages.json", langs.dump() + "\n");

  const DataConfig& d = config.data;
  const json manifest = {
      {"config_hash", config_hash(config)},
      {"n_languages", data.task.languages.size()},
      {"negatives", negatives_name(d.negatives)},
      {"seeds",
       {{"grammar", d.grammar_seed}, {"language", d.language_seed}, {"task", d.task_seed}, {"corpus", d.corpus_seed}}},
      {"counts", std::move(counts)}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

DatasetFiles read_dataset(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw InputError("dataset directory " + dir.string() + " does not exist");
  DatasetFiles out;
  json manifest;
  try {
    manifest = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw InputError(std::string("dataset manifest is not valid JSON: ") + e.what());
  }

  json langs;
  try {
    langs = json::parse(read_file(dir / "languages.json"));
  } catch (const json::parse_error& e) {
    throw InputError(std::string("languages.json is not valid JSON: ") + e.what());
  }
  for (const json& l : langs) {
    LangSpec spec;
    codec::Section s(l, "language");
    s.get("lang_id", spec.lang_id);
    s.get("difficulty", spec.difficulty);
    s.get("permutation", spec.permutation);
    out.task.languages.push_back(std::move(spec));
  }

  try {
    for (Split split : kSplits) {
      const std::string name = split_name(split);
      const std::vector<std::string> lines = lines_of(read_file(dir / (name + ".jsonl")));
      const auto declared = manifest.at("counts").at(name).at("lines").get<std::size_t>();
      if (lines.size() != declared) {
        throw InputError(name + ".jsonl has " + std::to_string(lines.size()) + " lines, manifest says " +
                         std::to_string(declared));
      }
      for (const std::string& line : lines) {
        TaskSample s = sample_from_jsonl(line);
        if (s.split != split) throw InputError(name + ".jsonl contains a " + split_name(s.split) + " sample");
        out.task.samples.push_back(std::move(s));
      }
    }

    const std::vector<std::string> pre = lines_of(read_file(dir / "pretrain.jsonl"));
    if (pre.size() != manifest.at("counts").at("pretrain").at("lines").get<std::size_t>()) {
      throw InputError("pretrain.jsonl line count disagrees with the manifest");
    }
    for (const std::string& line : pre) {
      const json j = json::parse(line);
      codec::Section s(j, "pretrain");
      const int lang = s.require<int>("lang");
      if (out.pretrain.empty() || out.pretrain.back().lang != lang) out.pretrain.push_back({lang, {}});
      out.pretrain.back().pairs.push_back({s.require<std::vector<int>>("first"), s.require<std::vector<int>>("second")});
    }
  } catch (const json::exception& e) {
    throw InputError(std::string("dataset files malformed: ") + e.what());
  }
  return out;
}

// ---- reports ----------------------------------------------------------------------

namespace {

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out(1);
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        out.back() += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        out.back() += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.emplace_back();
    } else {
      out.back() += c;
    }
  }
  return out;
}

std::string number(double v) { return fmt::format("{:.17g}", v); }

}  // namespace

std::string metrics_to_csv(const std::vector<MetricRow>& rows) {
  std::string out = "metric,method,lang_or_pair,seed,value\n";
  for (const MetricRow& r : rows) {
    out += fmt::format("{},{},{},{},{}\n", csv_field(r.metric), csv_field(r.method), csv_field(r.lang_or_pair), r.seed,
                       number(r.value));
  }
  return out;
}

std::vector<MetricRow> metrics_from_csv(std::string_view text) {
  std::vector<MetricRow> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || line != "metric,method,lang_or_pair,seed,value") {
    throw InputError("metrics CSV lacks the expected header");
  }
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> f = split_csv_line(line);
    if (f.size() != 5) throw InputError("metrics CSV row has " + std::to_string(f.size()) + " fields: " + line);
    MetricRow r{f[0], f[1], f[2], 0, 0.0};
    const auto seed_res = std::from_chars(f[3].data(), f[3].data() + f[3].size(), r.seed);
    const auto val_res = std::from_chars(f[4].data(), f[4].data() + f[4].size(), r.value);
    if (seed_res.ec != std::errc() || seed_res.ptr != f[3].data() + f[3].size() || val_res.ec != std::errc() ||
        val_res.ptr != f[4].data() + f[4].size()) {
      throw InputError("metrics CSV row has a malformed number: " + line);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::vector<SummaryRow> summarize(const std::vector<MetricRow>& rows) {
  std::vector<SummaryRow> out;
  std::vector<std::vector<double>> values;
  std::map<std::tuple<std::string, std::string, std::string>, std::size_t> index;
  for (const MetricRow& r : rows) {
    auto [it, fresh] = index.try_emplace({r.metric, r.method, r.lang_or_pair}, out.size());
    if (fresh) {
      out.push_back({r.metric, r.method, r.lang_or_pair, 0, 0.0, 0.0});
      values.emplace_back();
    }
    values[it->second].push_back(r.value);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::vector<double>& v = values[i];
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    out[i].n = v.size();
    out[i].mean = mean;
    out[i].std = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  }
  return out;
}

std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
  std::string out = "metric,method,lang_or_pair,n,mean,std\n";
  for (const SummaryRow& r : rows) {
    out += fmt::format("{},{},{},{},{},{}\n", csv_field(r.metric), csv_field(r.method), csv_field(r.lang_or_pair), r.n,
                       number(r.mean), number(r.std));
  }
  return out;
}

}  // namespace xptlab
