#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <map>

#include "convprobe/error.hpp"
#include "convprobe/gamm.hpp"
#include "convprobe/io.hpp"

namespace convprobe {

namespace {

std::string resolve_alias(const DataTable& t, const std::string& name) {
  if (std::find(t.names.begin(), t.names.end(), name) != t.names.end()) return name;
  if (name == "sample") return "sample_index";
  if (name == "token") return "token_id";
  return name;
}

double parse_double(const std::string& s, const std::string& column, std::size_t row) {
  double v = 0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(*b))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(e[-1]))) --e;
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e || !std::isfinite(v))
    throw FormatError("column '" + column + "' row " + std::to_string(row + 1) +
                      ": not a finite number: '" + s + "'");
  return v;
}

}  // namespace

bool DataTable::has(const std::string& name) const {
  std::string r = resolve_alias(*this, name);
  return std::find(names.begin(), names.end(), r) != names.end();
}

std::size_t DataTable::index(const std::string& name) const {
  std::string r = resolve_alias(*this, name);
  auto it = std::find(names.begin(), names.end(), r);
  if (it == names.end()) throw SpecError("data has no column '" + name + "'");
  return static_cast<std::size_t>(it - names.begin());
}

const std::vector<std::string>& DataTable::text(const std::string& name) const {
  return columns[index(name)];
}

std::vector<double> DataTable::numeric(const std::string& name) const {
  const auto& col = text(name);
  std::vector<double> out(col.size());
  for (std::size_t i = 0; i < col.size(); ++i) out[i] = parse_double(col[i], name, i);
  return out;
}

DataTable parse_table(const std::string& csv_text) {
  auto lines = split_lines(csv_text);
  DataTable t;
  if (lines.empty()) throw FormatError("table has no header line");
  t.names = split_fields(lines[0]);
  for (auto& n : t.names) {
    if (n.empty()) throw FormatError("empty column name in header");
  }
  t.columns.assign(t.names.size(), {});
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    auto fields = split_fields(lines[i]);
    if (fields.size() != t.names.size())
      throw FormatError("line " + std::to_string(i + 1) + ": expected " +
                        std::to_string(t.names.size()) + " fields, got " +
                        std::to_string(fields.size()));
    for (std::size_t c = 0; c < fields.size(); ++c) t.columns[c].push_back(std::move(fields[c]));
  }
  return t;
}

DataTable read_table(const std::filesystem::path& path) { return parse_table(read_file(path)); }

DataTable filter_rows(const DataTable& t, const std::string& column, const std::string& value) {
  const auto& key = t.text(column);
  DataTable out;
  out.names = t.names;
  out.columns.assign(t.names.size(), {});
  for (std::size_t r = 0; r < key.size(); ++r) {
    if (key[r] != value) continue;
    for (std::size_t c = 0; c < t.columns.size(); ++c) out.columns[c].push_back(t.columns[c][r]);
  }
  return out;
}

// Formula parsing.

namespace {

struct Lexer {
  const std::string& s;
  std::size_t pos = 0;

  void skip() {
    while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
  }
  bool eof() {
    skip();
    return pos >= s.size();
  }
  bool accept(char c) {
    skip();
    if (pos < s.size() && s[pos] == c) {
      ++pos;
      return true;
    }
    return false;
  }
  void expect(char c) {
    if (!accept(c)) fail(std::string("expected '") + c + "'");
  }
  std::string word() {
    skip();
    std::size_t b = pos;
    while (pos < s.size()) {
      char c = s[pos];
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-') {
        ++pos;
      } else {
        break;
      }
    }
    if (b == pos) fail("expected a name");
    return s.substr(b, pos - b);
  }
  [[noreturn]] void fail(const std::string& what) const {
    throw SpecError("formula: " + what + " at position " + std::to_string(pos) + " in '" + s + "'");
  }
};

std::size_t parse_k(Lexer& lx, const std::string& v) {
  std::size_t k = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), k);
  if (ec != std::errc() || ptr != v.data() + v.size()) lx.fail("k must be an integer");
  return k;
}

}  // namespace

GammSpec parse_formula(const std::string& formula) {
  Lexer lx{formula};
  GammSpec spec;
  spec.response = lx.word();
  lx.expect('~');
  bool saw_ar1 = false;
  do {
    std::string head = lx.word();
    if (!lx.accept('(')) {
      if (!spec.factor.empty()) lx.fail("only one parametric factor is supported");
      spec.factor = head;
      continue;
    }
    if (head == "ar1") {
      if (saw_ar1) lx.fail("ar1 given twice");
      saw_ar1 = true;
      std::string v = lx.word();
      if (v == "auto") {
        spec.ar1 = Ar1Mode::automatic;
      } else {
        double r = 0;
        auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), r);
        if (ec != std::errc() || ptr != v.data() + v.size()) lx.fail("ar1 takes 'auto' or a number");
        if (!(std::fabs(r) < 1)) lx.fail("ar1 coefficient must lie in (-1, 1)");
        spec.ar1 = Ar1Mode::fixed;
        spec.rho = r;
      }
      lx.expect(')');
      continue;
    }
    if (head != "s" && head != "fs") lx.fail("unknown term '" + head + "'");
    SmoothTerm term;
    term.type = head == "s" ? SmoothType::reference : SmoothType::factor_random;
    term.k = head == "s" ? kDefaultSmoothK : kDefaultFactorSmoothK;
    std::vector<std::string> positional;
    do {
      std::string a = lx.word();
      if (lx.accept('=')) {
        std::string v = lx.word();
        if (a == "k") {
          term.k = parse_k(lx, v);
        } else if (a == "by" && head == "s") {
          term.by = v;
          term.type = SmoothType::difference;
        } else {
          lx.fail("unknown argument '" + a + "'");
        }
      } else {
        positional.push_back(a);
      }
    } while (lx.accept(','));
    lx.expect(')');
    if (head == "s" && positional.size() != 1) lx.fail("s() takes one covariate");
    if (head == "fs" && positional.size() != 2) lx.fail("fs() takes a covariate and a factor");
    term.covariate = positional[0];
    if (head == "fs") term.by = positional[1];
    spec.smooths.push_back(term);
  } while (lx.accept('+'));
  if (!lx.eof()) lx.fail("unexpected trailing text");
  return spec;
}

std::string format_formula(const GammSpec& spec) {
  std::string out = spec.response + " ~ ";
  std::vector<std::string> terms;
  if (!spec.factor.empty()) terms.push_back(spec.factor);
  for (const auto& t : spec.smooths) {
    std::string k = "k=" + std::to_string(t.k);
    switch (t.type) {
      case SmoothType::reference: terms.push_back("s(" + t.covariate + ", " + k + ")"); break;
      case SmoothType::difference:
        terms.push_back("s(" + t.covariate + ", by=" + t.by + ", " + k + ")");
        break;
      case SmoothType::factor_random:
        terms.push_back("fs(" + t.covariate + ", " + t.by + ", " + k + ")");
        break;
    }
  }
  if (spec.ar1 == Ar1Mode::automatic) terms.push_back("ar1(auto)");
  if (spec.ar1 == Ar1Mode::fixed) terms.push_back("ar1(" + format_g(spec.rho, 17) + ")");
  for (std::size_t i = 0; i < terms.size(); ++i) out += (i ? " + " : "") + terms[i];
  return out;
}

void to_json(nlohmann::json& j, const GammSpec& s) {
  j = nlohmann::json{{"formula", format_formula(s)},
                     {"reference", s.reference},
                     {"criterion", s.criterion == Criterion::reml ? "reml" : "gcv"}};
}

void from_json(const nlohmann::json& j, GammSpec& s) {
  s = parse_formula(j.at("formula").get<std::string>());
  s.reference = j.value("reference", std::string());
  std::string c = j.value("criterion", std::string("reml"));
  if (c == "reml") {
    s.criterion = Criterion::reml;
  } else if (c == "gcv") {
    s.criterion = Criterion::gcv;
  } else {
    throw SpecError("unknown smoothing criterion '" + c + "'");
  }
}

}  // namespace convprobe
