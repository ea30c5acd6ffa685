#include "palot/numio.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

namespace palot {

namespace {

constexpr std::array<char, 8> kMagic{'P', 'A', 'L', 'O', 'T', 'T', 'N', 'S'};

// Host byte order is converted to little-endian on write and back on read.
template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    std::array<unsigned char, sizeof(T)> b;
    std::memcpy(b.data(), &v, sizeof(T));
    std::reverse(b.begin(), b.end());
    std::memcpy(&v, b.data(), sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated tensor stream");
  return to_little(v);
}

}  // namespace

const char* dtype_name(DType d) {
  switch (d) {
    case DType::Float64: return "float64";
    case DType::Float32: return "float32";
    case DType::Int64: return "int64";
  }
  return "?";
}

Tensor::Tensor(std::vector<std::uint64_t> shape, Payload payload)
    : shape_(std::move(shape)), payload_(std::move(payload)) {
  std::size_t expect = 1;
  for (auto d : shape_) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive");
    expect *= d;
  }
  const std::size_t have = std::visit([](const auto& v) { return v.size(); }, payload_);
  if (have != expect)
    throw ShapeError("payload length " + std::to_string(have) + " does not match shape product " +
                     std::to_string(expect));
}

std::size_t Tensor::numel() const noexcept {
  return std::visit([](const auto& v) { return v.size(); }, payload_);
}

double Tensor::at(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v.at(i)); }, payload_);
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_ || a.payload_.index() != b.payload_.index()) return false;
  return std::visit(
      [&b](const auto& va) {
        using V = std::decay_t<decltype(va)>;
        const auto& vb = std::get<V>(b.payload_);
        return va.size() == vb.size() &&
               std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
      },
      a.payload_);
}

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (auto d : t.shape()) put<std::uint64_t>(out, d);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype()));
  std::visit(
      [&out](const auto& v) {
        for (auto x : v) put(out, x);
      },
      t.payload());
  if (!out) throw IoError("failed writing tensor stream");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kMagic) throw IoError("not a tensor file (bad magic)");
  const auto rank = get<std::uint32_t>(in);
  if (rank > 16) throw IoError("tensor rank " + std::to_string(rank) + " exceeds limit");
  std::vector<std::uint64_t> shape(rank);
  std::size_t n = 1;
  for (auto& d : shape) {
    d = get<std::uint64_t>(in);
    if (d == 0 || d > (std::uint64_t{1} << 40)) throw IoError("invalid tensor dimension");
    n *= d;
  }
  const auto tag = get<std::uint32_t>(in);
  auto fill = [&in, n](auto proto) {
    using T = decltype(proto);
    std::vector<T> v(n);
    for (auto& x : v) x = get<T>(in);
    return v;
  };
  Tensor t;
  switch (tag) {
    case 0: t = Tensor(std::move(shape), fill(double{})); break;
    case 1: t = Tensor(std::move(shape), fill(float{})); break;
    case 2: t = Tensor(std::move(shape), fill(std::int64_t{})); break;
    default: throw IoError("unknown dtype tag " + std::to_string(tag));
  }
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("trailing bytes after tensor payload");
  return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return read_tensor(in);
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string> kColumns{"caption_id", "image_id", "text_en", "text_bn", "similarity", "valid"};

struct CsvRow {
  std::vector<std::string> fields;
  std::size_t line = 0;
};

// RFC 4180 style reader: quoted fields may contain commas, doubled quotes and newlines.
std::vector<CsvRow> split_csv(std::istream& in) {
  std::vector<CsvRow> rows;
  std::string field;
  CsvRow row;
  std::size_t line = 1;
  bool in_quotes = false;
  bool quoted_field = false;
  bool row_started = false;
  row.line = 1;
  char c;
  auto end_field = [&] {
    row.fields.push_back(std::move(field));
    field.clear();
    quoted_field = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row = CsvRow{};
    row_started = false;
  };
  while (in.get(c)) {
    if (!row_started) {
      row.line = line;
      row_started = true;
    }
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!field.empty() || quoted_field) throw ParseError("stray quote inside unquoted field", line);
        in_quotes = true;
        quoted_field = true;
        break;
      case ',':
        end_field();
        break;
      case '\r':
        if (in.peek() != '\n') throw ParseError("bare carriage return", line);
        break;
      case '\n':
        end_row();
        ++line;
        break;
      default:
        if (quoted_field) throw ParseError("characters after closing quote", line);
        field.push_back(c);
    }
  }
  if (in_quotes) throw ParseError("unterminated quoted field", row.line);
  if (row_started) end_row();
  // Drop fully blank lines.
  std::erase_if(rows, [](const CsvRow& r) { return r.fields.size() == 1 && r.fields[0].empty(); });
  return rows;
}

std::int64_t parse_int(const std::string& s, const char* name, std::size_t line) {
  try {
    std::size_t pos = 0;
    const long long v = std::stoll(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ParseError(std::string("invalid integer for ") + name + ": '" + s + "'", line);
  }
}

double parse_similarity(const std::string& s, std::size_t line) {
  double v = 0;
  try {
    std::size_t pos = 0;
    v = std::stod(s, &pos);
    if (pos != s.size()) throw std::invalid_argument(s);
  } catch (const std::exception&) {
    throw ParseError("invalid similarity '" + s + "'", line);
  }
  if (!std::isfinite(v) || v < -1.0 || v > 1.0) throw ParseError("similarity outside [-1,1]", line);
  return v;
}

bool parse_bool(const std::string& s, std::size_t line) {
  if (s == "true" || s == "1" || s == "True" || s == "TRUE") return true;
  if (s == "false" || s == "0" || s == "False" || s == "FALSE") return false;
  throw ParseError("invalid valid flag '" + s + "'", line);
}

void check_pairing(const CaptionPairRecord& r, std::size_t line) {
  if (r.similarity.has_value() != r.valid.has_value())
    throw ParseError("similarity and valid must be present together", line);
}

std::vector<CaptionPairRecord> parse_csv(std::istream& in) {
  auto rows = split_csv(in);
  if (rows.empty()) throw ParseError("missing CSV header", 1);
  const auto& header = rows.front();
  std::vector<int> slot(header.fields.size(), -1);
  std::vector<bool> seen(kColumns.size(), false);
  for (std::size_t i = 0; i < header.fields.size(); ++i) {
    const auto it = std::find(kColumns.begin(), kColumns.end(), header.fields[i]);
    if (it == kColumns.end()) throw ParseError("unknown column '" + header.fields[i] + "'", header.line);
    const auto k = static_cast<std::size_t>(it - kColumns.begin());
    if (seen[k]) throw ParseError("duplicate column '" + header.fields[i] + "'", header.line);
    seen[k] = true;
    slot[i] = static_cast<int>(k);
  }
  for (std::size_t k = 0; k < 4; ++k)
    if (!seen[k]) throw ParseError("missing required column '" + kColumns[k] + "'", header.line);

  std::vector<CaptionPairRecord> out;
  out.reserve(rows.size() - 1);
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& row = rows[r];
    if (row.fields.size() != header.fields.size())
      throw ParseError("expected " + std::to_string(header.fields.size()) + " fields, found " +
                           std::to_string(row.fields.size()),
                       row.line);
    CaptionPairRecord rec;
    for (std::size_t i = 0; i < row.fields.size(); ++i) {
      const auto& f = row.fields[i];
      switch (slot[i]) {
        case 0: rec.caption_id = parse_int(f, "caption_id", row.line); break;
        case 1: rec.image_id = parse_int(f, "image_id", row.line); break;
        case 2: rec.text_en = f; break;
        case 3: rec.text_bn = f; break;
        case 4:
          if (!f.empty()) rec.similarity = parse_similarity(f, row.line);
          break;
        case 5:
          if (!f.empty()) rec.valid = parse_bool(f, row.line);
          break;
      }
    }
    check_pairing(rec, row.line);
    out.push_back(std::move(rec));
  }
  return out;
}

std::vector<CaptionPairRecord> parse_jsonl(std::istream& in) {
  std::vector<CaptionPairRecord> out;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (!text.empty() && text.back() == '\r') text.pop_back();
    if (text.find_first_not_of(" \t") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
      throw ParseError(std::string("invalid JSON: ") + e.what(), line);
    }
    if (!j.is_object()) throw ParseError("record must be a JSON object", line);
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(kColumns.begin(), kColumns.end(), it.key()) == kColumns.end())
        throw ParseError("unknown field '" + it.key() + "'", line);
    CaptionPairRecord rec;
    auto need = [&](const char* key) -> const nlohmann::json& {
      if (!j.contains(key)) throw ParseError(std::string("missing field '") + key + "'", line);
      return j.at(key);
    };
    const auto& cid = need("caption_id");
    const auto& iid = need("image_id");
    if (!cid.is_number_integer() || !iid.is_number_integer())
      throw ParseError("caption_id and image_id must be integers", line);
    rec.caption_id = cid.get<std::int64_t>();
    rec.image_id = iid.get<std::int64_t>();
    const auto& en = need("text_en");
    const auto& bn = need("text_bn");
    if (!en.is_string() || !bn.is_string()) throw ParseError("text fields must be strings", line);
    rec.text_en = en.get<std::string>();
    rec.text_bn = bn.get<std::string>();
    if (j.contains("similarity") && !j["similarity"].is_null()) {
      if (!j["similarity"].is_number()) throw ParseError("similarity must be a number", line);
      const double s = j["similarity"].get<double>();
      if (!std::isfinite(s) || s < -1.0 || s > 1.0) throw ParseError("similarity outside [-1,1]", line);
      rec.similarity = s;
    }
    if (j.contains("valid") && !j["valid"].is_null()) {
      if (!j["valid"].is_boolean()) throw ParseError("valid must be a boolean", line);
      rec.valid = j["valid"].get<bool>();
    }
    check_pairing(rec, line);
    out.push_back(std::move(rec));
  }
  return out;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q.push_back('"');
    q.push_back(c);
  }
  q.push_back('"');
  return q;
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(std::numeric_limits<double>::max_digits10);
  os << v;
  return os.str();
}

}  // namespace

RecordFormat record_format_from_path(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return RecordFormat::Csv;
  if (ext == ".jsonl" || ext == ".ndjson") return RecordFormat::Jsonl;
  throw DomainError("cannot infer record format from '" + path.string() + "'");
}

std::vector<CaptionPairRecord> parse_records(std::istream& in, RecordFormat format) {
  return format == RecordFormat::Csv ? parse_csv(in) : parse_jsonl(in);
}

std::vector<CaptionPairRecord> read_records(const std::filesystem::path& path, RecordFormat format) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return parse_records(in, format);
  } catch (const ParseError& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
}

void write_records(std::ostream& out, const std::vector<CaptionPairRecord>& records, RecordFormat format) {
  if (format == RecordFormat::Csv) {
    out << "caption_id,image_id,text_en,text_bn,similarity,valid\n";
    for (const auto& r : records) {
      out << r.caption_id << ',' << r.image_id << ',' << csv_escape(r.text_en) << ',' << csv_escape(r.text_bn)
          << ',';
      if (r.similarity) out << format_double(*r.similarity);
      out << ',';
      if (r.valid) out << (*r.valid ? "true" : "false");
      out << '\n';
    }
  } else {
    for (const auto& r : records) {
      nlohmann::json j{{"caption_id", r.caption_id},
                       {"image_id", r.image_id},
                       {"text_en", r.text_en},
                       {"text_bn", r.text_bn}};
      if (r.similarity) j["similarity"] = *r.similarity;
      if (r.valid) j["valid"] = *r.valid;
      out << j.dump() << '\n';
    }
  }
  if (!out) throw IoError("failed writing records");
}

void write_records(const std::filesystem::path& path, const std::vector<CaptionPairRecord>& records,
                   RecordFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  write_records(out, records, format);
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  auto finite = [](double v) { return std::isfinite(v); };
  if (!finite(lambda_pal) || lambda_pal < 0) throw DomainError("lambda_pal must be nonnegative");
  if (!finite(alpha) || alpha < 0) throw DomainError("alpha must be nonnegative");
  if (!finite(beta) || beta < 0) throw DomainError("beta must be nonnegative");
  if (!finite(tau_attn) || tau_attn <= 0) throw DomainError("tau_attn must be positive");
  if (!finite(rho) || rho <= 0 || rho > 1) throw DomainError("rho must lie in (0,1]");
  if (last_k < 1) throw DomainError("last_k must be positive");
  if (!finite(nce_temp) || nce_temp <= 0) throw DomainError("nce_temp must be positive");
  if (!finite(ot_eps) || ot_eps <= 0) throw DomainError("ot_eps must be positive");
  if (ot_iters < 1) throw DomainError("ot_iters must be positive");
}

nlohmann::json to_json(const RunConfig& c) {
  return {{"lambda_pal", c.lambda_pal}, {"alpha", c.alpha},       {"beta", c.beta},
          {"tau_attn", c.tau_attn},     {"rho", c.rho},           {"last_k", c.last_k},
          {"nce_temp", c.nce_temp},     {"ot_eps", c.ot_eps},     {"ot_iters", c.ot_iters},
          {"seed", c.seed},             {"retention", c.retention == RetentionMode::Mass ? "mass" : "count"}};
}

RunConfig merge_config(RunConfig c, const nlohmann::json& j) {
  if (!j.is_object()) throw DomainError("config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    const auto& k = it.key();
    const auto& v = it.value();
    auto num = [&]() {
      if (!v.is_number()) throw DomainError("config field '" + k + "' must be a number");
      return v.get<double>();
    };
    auto integer = [&]() {
      if (!v.is_number_integer()) throw DomainError("config field '" + k + "' must be an integer");
      return v.get<std::int64_t>();
    };
    if (k == "lambda_pal") c.lambda_pal = num();
    else if (k == "alpha") c.alpha = num();
    else if (k == "beta") c.beta = num();
    else if (k == "tau_attn") c.tau_attn = num();
    else if (k == "rho") c.rho = num();
    else if (k == "last_k") c.last_k = static_cast<int>(integer());
    else if (k == "nce_temp") c.nce_temp = num();
    else if (k == "ot_eps") c.ot_eps = num();
    else if (k == "ot_iters") c.ot_iters = static_cast<int>(integer());
    else if (k == "seed") c.seed = integer();
    else if (k == "retention") {
      if (v == "mass") c.retention = RetentionMode::Mass;
      else if (v == "count") c.retention = RetentionMode::Count;
      else throw DomainError("retention must be \"mass\" or \"count\"");
    } else
      throw DomainError("unknown config field '" + k + "'");
  }
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what(), 0);
  }
  return merge_config(RunConfig{}, j);
}

}  // namespace palot
