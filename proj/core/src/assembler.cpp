#include <algorithm>
#include <cctype>
#include <charconv>
#include <map>
#include <set>

#include <fmt/format.h>

#include "hvsim/error.hpp"
#include "hvsim/isa.hpp"

namespace hvsim::isa {

namespace {

struct Line {
  int number;
  std::string label;
  std::string head;  // mnemonic or directive, upper-cased for mnemonics
  std::vector<std::string> operands;
};

[[noreturn]] void syntax(int line, const std::string& what) {
  throw Error(Errc::SyntaxError, fmt::format("line {}: {}", line, what));
}

std::string trim(std::string_view s) {
  auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string upper(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return std::toupper(c); });
  return s;
}

bool is_ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }
bool is_ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

// Split on commas that are outside quotes and brackets.
std::vector<std::string> split_operands(std::string_view s, int line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  int depth = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (quoted) {
      cur += c;
      if (c == '\\' && i + 1 < s.size()) cur += s[++i];
      else if (c == '"') quoted = false;
      continue;
    }
    if (c == '"') quoted = true;
    if (c == '[') ++depth;
    if (c == ']') --depth;
    if (c == ',' && depth == 0) {
      out.push_back(trim(cur));
      cur.clear();
      continue;
    }
    cur += c;
  }
  if (quoted || depth != 0) syntax(line, "unbalanced quote or bracket");
  if (!trim(cur).empty() || !out.empty()) out.push_back(trim(cur));
  for (const auto& o : out)
    if (o.empty()) syntax(line, "empty operand");
  return out;
}

std::string strip_comment(std::string_view s) {
  bool quoted = false;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (s[i] == '\\' && quoted) {
      ++i;
      continue;
    }
    if (s[i] == '"') quoted = !quoted;
    if (s[i] == ';' && !quoted) return std::string(s.substr(0, i));
  }
  return std::string(s);
}

std::vector<Line> parse_lines(std::string_view source) {
  std::vector<Line> lines;
  int number = 0;
  std::size_t pos = 0;
  while (pos <= source.size()) {
    auto nl = source.find('\n', pos);
    if (nl == std::string_view::npos) nl = source.size();
    ++number;
    std::string text = trim(strip_comment(source.substr(pos, nl - pos)));
    pos = nl + 1;
    if (text.empty()) continue;

    Line ln{number, {}, {}, {}};
    std::size_t i = 0;
    if (is_ident_start(text[0]) && text[0] != '.') {
      std::size_t j = 0;
      while (j < text.size() && is_ident_char(text[j])) ++j;
      if (j < text.size() && text[j] == ':') {
        ln.label = text.substr(0, j);
        i = j + 1;
      }
    }
    std::string rest = trim(std::string_view(text).substr(i));
    if (!rest.empty()) {
      auto sp = rest.find_first_of(" \t");
      std::string head = rest.substr(0, sp);
      ln.head = head[0] == '.' ? head : upper(head);
      if (sp != std::string::npos) ln.operands = split_operands(trim(std::string_view(rest).substr(sp)), number);
    }
    lines.push_back(std::move(ln));
  }
  return lines;
}

std::optional<std::uint8_t> parse_register(std::string_view tok) {
  if (tok.size() < 2 || (tok[0] != 'r' && tok[0] != 'R')) return std::nullopt;
  for (std::size_t i = 1; i < tok.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(tok[i]))) return std::nullopt;
  int v = 0;
  std::from_chars(tok.data() + 1, tok.data() + tok.size(), v);
  return static_cast<std::uint8_t>(std::min(v, 255));
}

class Resolver {
 public:
  Resolver(const std::map<std::string, std::uint32_t>& labels, bool final_pass)
      : labels_(labels), final_(final_pass) {}

  std::int64_t eval(std::string_view expr, int line) const {
    std::string s = trim(expr);
    if (s.empty()) syntax(line, "empty expression");
    std::int64_t total = 0;
    std::size_t i = 0;
    int sign = 1;
    bool expect_term = true;
    while (i < s.size()) {
      char c = s[i];
      if (c == ' ' || c == '\t') {
        ++i;
        continue;
      }
      if (!expect_term) {
        if (c == '+') sign = 1;
        else if (c == '-') sign = -1;
        else syntax(line, fmt::format("unexpected '{}' in expression", c));
        ++i;
        expect_term = true;
        continue;
      }
      if (c == '-' || c == '+') {
        sign = c == '-' ? -sign : sign;
        ++i;
        continue;
      }
      std::int64_t term = 0;
      if (c == '\'') {
        if (i + 2 >= s.size() || s[i + 2] != '\'') syntax(line, "bad character literal");
        term = static_cast<unsigned char>(s[i + 1]);
        i += 3;
      } else if (std::isdigit(static_cast<unsigned char>(c))) {
        std::size_t j = i;
        while (j < s.size() && std::isalnum(static_cast<unsigned char>(s[j]))) ++j;
        std::string_view num(s.data() + i, j - i);
        int base = 10;
        if (num.size() > 2 && num[0] == '0' && (num[1] == 'x' || num[1] == 'X')) {
          base = 16;
          num.remove_prefix(2);
        }
        std::uint64_t v = 0;
        auto [p, ec] = std::from_chars(num.data(), num.data() + num.size(), v, base);
        if (ec != std::errc{} || p != num.data() + num.size()) syntax(line, fmt::format("bad number '{}'", s.substr(i, j - i)));
        term = static_cast<std::int64_t>(v);
        i = j;
      } else if (is_ident_start(c)) {
        std::size_t j = i;
        while (j < s.size() && is_ident_char(s[j])) ++j;
        std::string name = s.substr(i, j - i);
        if (parse_register(name)) syntax(line, fmt::format("register '{}' where a value was expected", name));
        auto it = labels_.find(name);
        if (it != labels_.end()) term = it->second;
        else if (final_) throw Error(Errc::UndefinedLabel, name);
        i = j;
      } else {
        syntax(line, fmt::format("unexpected '{}' in expression", c));
      }
      total += sign * term;
      sign = 1;
      expect_term = false;
    }
    if (expect_term) syntax(line, "dangling operator");
    return total;
  }

 private:
  const std::map<std::string, std::uint32_t>& labels_;
  bool final_;
};

std::uint8_t reg_operand(const std::string& tok, int line) {
  auto r = parse_register(tok);
  if (!r) syntax(line, fmt::format("expected register, got '{}'", tok));
  if (*r >= kRegisterCount) syntax(line, fmt::format("invalid register '{}'", tok));
  return *r;
}

std::uint8_t cr_operand(const std::string& tok, int line) {
  std::string u = upper(tok);
  for (std::uint8_t i = 0; i < kControlRegisterCount; ++i)
    if (u == cr_name(i) || u == fmt::format("CR{}", i)) return i;
  syntax(line, fmt::format("expected control register, got '{}'", tok));
}

struct MemOperand {
  std::uint8_t base;
  std::string offset;  // expression, may be empty
  bool negative = false;
};

MemOperand mem_operand(const std::string& tok, int line) {
  if (tok.size() < 3 || tok.front() != '[' || tok.back() != ']') syntax(line, fmt::format("expected [rN+off], got '{}'", tok));
  std::string inner = trim(std::string_view(tok).substr(1, tok.size() - 2));
  auto op = inner.find_first_of("+-");
  MemOperand m{reg_operand(trim(inner.substr(0, op)), line), {}};
  if (op != std::string::npos) {
    m.negative = inner[op] == '-';
    m.offset = trim(inner.substr(op + 1));
    if (m.offset.empty()) syntax(line, "missing offset");
  }
  return m;
}

std::vector<std::uint8_t> parse_ascii(const std::string& tok, int line) {
  if (tok.size() < 2 || tok.front() != '"' || tok.back() != '"') syntax(line, ".ascii expects a quoted string");
  std::vector<std::uint8_t> out;
  for (std::size_t i = 1; i + 1 < tok.size(); ++i) {
    char c = tok[i];
    if (c == '\\' && i + 2 < tok.size()) {
      char e = tok[++i];
      switch (e) {
        case 'n': out.push_back('\n'); break;
        case '0': out.push_back(0); break;
        case 't': out.push_back('\t'); break;
        default: out.push_back(static_cast<std::uint8_t>(e)); break;
      }
    } else {
      out.push_back(static_cast<std::uint8_t>(c));
    }
  }
  return out;
}

const OpInfo* mnemonic(const std::string& head) {
  for (int b = 0; b < 256; ++b) {
    const OpInfo* oi = lookup(static_cast<std::uint8_t>(b));
    if (oi && oi->mnemonic == head) return oi;
  }
  return nullptr;
}

Instruction build(const OpInfo& oi, const Line& ln, const Resolver& res) {
  const auto& ops = ln.operands;
  auto want = [&](std::size_t n) {
    if (ops.size() != n) syntax(ln.number, fmt::format("{} takes {} operand(s)", oi.mnemonic, n));
  };
  auto value = [&](const std::string& e) { return static_cast<std::uint32_t>(res.eval(e, ln.number)); };
  auto imm16 = [&](std::int64_t v) {
    if (v < -32768 || v > 32767) syntax(ln.number, fmt::format("value {} does not fit in 16 bits", v));
    return static_cast<std::uint32_t>(static_cast<std::int32_t>(v));
  };

  Instruction in{oi.op};
  switch (oi.form) {
    case Form::None:
      want(0);
      break;
    case Form::RegImm32:
      want(2);
      in.a = reg_operand(ops[0], ln.number);
      in.imm = value(ops[1]);
      break;
    case Form::RegReg:
      want(2);
      in.a = reg_operand(ops[0], ln.number);
      in.b = reg_operand(ops[1], ln.number);
      break;
    case Form::RegRegOff16: {
      want(2);
      const bool load = oi.op == Op::Ld;
      MemOperand m = mem_operand(load ? ops[1] : ops[0], ln.number);
      std::uint8_t r = reg_operand(load ? ops[0] : ops[1], ln.number);
      in.a = load ? r : m.base;
      in.b = load ? m.base : r;
      std::int64_t off = m.offset.empty() ? 0 : res.eval(m.offset, ln.number);
      in.imm = imm16(m.negative ? -off : off);
      break;
    }
    case Form::RegImm16:
      want(2);
      in.a = reg_operand(ops[0], ln.number);
      in.imm = imm16(res.eval(ops[1], ln.number));
      break;
    case Form::Addr32:
      want(1);
      in.imm = value(ops[0]);
      break;
    case Form::Reg:
      want(1);
      in.a = reg_operand(ops[0], ln.number);
      break;
    case Form::RegPort: {
      want(2);
      const bool input = oi.op == Op::In;
      in.a = reg_operand(input ? ops[0] : ops[1], ln.number);
      auto port = res.eval(input ? ops[1] : ops[0], ln.number);
      if (port < 0 || port > 0xFF) syntax(ln.number, fmt::format("port {} out of range", port));
      in.imm = static_cast<std::uint32_t>(port);
      break;
    }
    case Form::CrReg:
      want(2);
      in.a = cr_operand(ops[0], ln.number);
      in.b = reg_operand(ops[1], ln.number);
      break;
    case Form::RegCr:
      want(2);
      in.a = reg_operand(ops[0], ln.number);
      in.b = cr_operand(ops[1], ln.number);
      break;
  }
  return in;
}

}  // namespace

std::optional<std::uint32_t> AssembledImage::symbol(std::string_view name) const {
  for (const auto& s : symbols)
    if (s.name == name) return s.address;
  return std::nullopt;
}

AssembledImage assemble(std::string_view source) {
  const auto lines = parse_lines(source);

  // Pass 1: sizes and label addresses.
  std::map<std::string, std::uint32_t> labels;
  std::vector<std::pair<std::string, int>> globals;
  {
    std::uint32_t va = 0;
    Resolver res(labels, false);
    for (const auto& ln : lines) {
      if (!ln.label.empty()) {
        if (parse_register(ln.label)) syntax(ln.number, fmt::format("'{}' is a register name", ln.label));
        if (!labels.emplace(ln.label, va).second) throw Error(Errc::DuplicateLabel, ln.label);
      }
      if (ln.head.empty()) continue;
      if (ln.head == ".org") {
        if (ln.operands.empty() || ln.operands.size() > 2) syntax(ln.number, ".org takes VA[, PA]");
        va = static_cast<std::uint32_t>(res.eval(ln.operands[0], ln.number));
      } else if (ln.head == ".word") {
        if (ln.operands.empty()) syntax(ln.number, ".word needs a value");
        va += 4 * static_cast<std::uint32_t>(ln.operands.size());
      } else if (ln.head == ".ascii") {
        if (ln.operands.size() != 1) syntax(ln.number, ".ascii takes one string");
        va += static_cast<std::uint32_t>(parse_ascii(ln.operands[0], ln.number).size());
      } else if (ln.head == ".global") {
        if (ln.operands.empty()) syntax(ln.number, ".global needs a name");
        for (const auto& g : ln.operands) globals.emplace_back(g, ln.number);
      } else if (const OpInfo* oi = mnemonic(ln.head)) {
        va += oi->length;
      } else {
        syntax(ln.number, fmt::format("unknown mnemonic or directive '{}'", ln.head));
      }
    }
  }

  // Pass 2: emit.
  AssembledImage image;
  Resolver res(labels, true);
  Section* cur = nullptr;
  auto open = [&](std::uint32_t va, std::uint32_t pa) {
    image.sections.push_back(Section{pa, va, {}});
    cur = &image.sections.back();
  };
  open(0, 0);
  for (const auto& ln : lines) {
    if (ln.head.empty() || ln.head == ".global") continue;
    if (ln.head == ".org") {
      auto va = static_cast<std::uint32_t>(res.eval(ln.operands[0], ln.number));
      auto pa = ln.operands.size() == 2 ? static_cast<std::uint32_t>(res.eval(ln.operands[1], ln.number)) : va;
      open(va, pa);
    } else if (ln.head == ".word") {
      for (const auto& o : ln.operands) {
        auto v = static_cast<std::uint32_t>(res.eval(o, ln.number));
        for (int i = 0; i < 4; ++i) cur->bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
      }
    } else if (ln.head == ".ascii") {
      auto bytes = parse_ascii(ln.operands[0], ln.number);
      cur->bytes.insert(cur->bytes.end(), bytes.begin(), bytes.end());
    } else {
      Instruction in = build(*mnemonic(ln.head), ln, res);
      std::vector<std::uint8_t> enc;
      try {
        enc = encode(in);
      } catch (const Error& e) {
        syntax(ln.number, e.what());
      }
      cur->bytes.insert(cur->bytes.end(), enc.begin(), enc.end());
    }
  }
  std::erase_if(image.sections, [](const Section& s) { return s.bytes.empty(); });

  for (std::size_t i = 0; i < image.sections.size(); ++i) {
    for (std::size_t j = i + 1; j < image.sections.size(); ++j) {
      const auto& a = image.sections[i];
      const auto& b = image.sections[j];
      const std::uint64_t a0 = a.load_address, a1 = a0 + a.bytes.size();
      const std::uint64_t b0 = b.load_address, b1 = b0 + b.bytes.size();
      if (a0 < b1 && b0 < a1)
        throw Error(Errc::SyntaxError, fmt::format("sections at 0x{:X} and 0x{:X} overlap", a0, b0));
    }
  }

  std::set<std::string> seen;
  for (const auto& [name, line] : globals) {
    auto it = labels.find(name);
    if (it == labels.end()) throw Error(Errc::UndefinedLabel, name);
    if (!seen.insert(name).second) continue;
    bool inside = std::any_of(image.sections.begin(), image.sections.end(), [&](const Section& s) {
      return it->second >= s.virtual_address && it->second < s.virtual_address + s.bytes.size();
    });
    image.symbols.push_back(Symbol{name, it->second, !inside});
  }
  std::sort(image.symbols.begin(), image.symbols.end(),
            [](const Symbol& a, const Symbol& b) { return std::tie(a.address, a.name) < std::tie(b.address, b.name); });
  return image;
}

std::string symbols_file(const AssembledImage& image) {
  std::string out;
  for (const auto& s : image.symbols) out += fmt::format("{:08X} {}\n", s.address, s.name);
  return out;
}

std::vector<std::uint8_t> serialize_image(const AssembledImage& image) {
  std::vector<std::uint8_t> out;
  auto put = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  for (const auto& s : image.sections) {
    put(s.load_address);
    put(static_cast<std::uint32_t>(s.bytes.size()));
    out.insert(out.end(), s.bytes.begin(), s.bytes.end());
  }
  return out;
}

AssembledImage parse_image(std::span<const std::uint8_t> data) {
  AssembledImage image;
  std::size_t at = 0;
  auto get = [&]() {
    if (data.size() - at < 4) throw Error(Errc::ImageFormat, "truncated section header");
    std::uint32_t v = data[at] | data[at + 1] << 8 | data[at + 2] << 16 | std::uint32_t(data[at + 3]) << 24;
    at += 4;
    return v;
  };
  while (at < data.size()) {
    std::uint32_t load = get();
    std::uint32_t len = get();
    if (data.size() - at < len) throw Error(Errc::ImageFormat, "truncated section body");
    image.sections.push_back(Section{load, load, {data.begin() + at, data.begin() + at + len}});
    at += len;
  }
  return image;
}

}  // namespace hvsim::isa
