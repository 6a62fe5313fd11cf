#pragma once

// A small arithmetic-expression language for coefficient fields.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' unary)?          right associative
//   primary := number | constant | variable | function '(' expr ')' | '(' expr ')'
//
// Variables are x1..xn (1-based), constants pi and e, functions
// sin cos tan exp log sqrt abs tanh. Unary minus binds looser than '^',
// so "-x1^2" is -(x1^2).

#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "sdegeom/error.hpp"
#include "sdegeom/numeric.hpp"

namespace sdegeom::expr {

class SyntaxError : public Error {
 public:
  SyntaxError(std::size_t offset, std::vector<std::string> expected, const std::string& found)
      : Error(Errc::SyntaxError, describe(offset, expected, found)),
        offset_(offset),
        expected_(std::move(expected)) {}

  std::size_t offset() const noexcept { return offset_; }
  const std::vector<std::string>& expected() const noexcept { return expected_; }

 private:
  static std::string describe(std::size_t offset, const std::vector<std::string>& expected,
                              const std::string& found) {
    std::string msg = "at byte " + std::to_string(offset) + ": expected one of {";
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (i) msg += ", ";
      msg += expected[i];
    }
    msg += "} but found " + found;
    return msg;
  }

  std::size_t offset_;
  std::vector<std::string> expected_;
};

enum class Func { Sin, Cos, Tan, Exp, Log, Sqrt, Abs, Tanh };

inline std::string_view func_name(Func f) {
  switch (f) {
    case Func::Sin: return "sin";
    case Func::Cos: return "cos";
    case Func::Tan: return "tan";
    case Func::Exp: return "exp";
    case Func::Log: return "log";
    case Func::Sqrt: return "sqrt";
    case Func::Abs: return "abs";
    case Func::Tanh: return "tanh";
  }
  return "?";
}

inline std::optional<Func> lookup_func(std::string_view name) {
  static constexpr Func all[] = {Func::Sin, Func::Cos, Func::Tan,  Func::Exp,
                                 Func::Log, Func::Sqrt, Func::Abs, Func::Tanh};
  for (Func f : all) {
    if (func_name(f) == name) return f;
  }
  return std::nullopt;
}

struct Node {
  enum class Kind { Number, Variable, Constant, Neg, Add, Sub, Mul, Div, Pow, Call };

  Kind kind = Kind::Number;
  double value = 0.0;  // Number, Constant
  int var = 0;         // Variable, 0-based
  std::string name;    // Constant
  Func func = Func::Sin;
  std::shared_ptr<const Node> lhs;  // unary operand / function argument
  std::shared_ptr<const Node> rhs;
};

/// Immutable parsed expression; cheap to copy and safe to share across threads.
class Expr {
 public:
  Expr() = default;
  explicit Expr(std::shared_ptr<const Node> root) : root_(std::move(root)) {}

  const Node& root() const { return *root_; }
  bool empty() const { return !root_; }

  /// Highest variable index used (1-based); 0 if none.
  int max_variable() const { return root_ ? max_var(*root_) : 0; }

  friend bool operator==(const Expr& a, const Expr& b) {
    if (!a.root_ || !b.root_) return a.root_ == b.root_;
    return equal(*a.root_, *b.root_);
  }

 private:
  static int max_var(const Node& n) {
    int m = n.kind == Node::Kind::Variable ? n.var + 1 : 0;
    if (n.lhs) m = std::max(m, max_var(*n.lhs));
    if (n.rhs) m = std::max(m, max_var(*n.rhs));
    return m;
  }

  static bool equal(const Node& a, const Node& b) {
    if (a.kind != b.kind) return false;
    switch (a.kind) {
      case Node::Kind::Number: return a.value == b.value;
      case Node::Kind::Variable: return a.var == b.var;
      case Node::Kind::Constant: return a.name == b.name;
      case Node::Kind::Call:
        if (a.func != b.func) return false;
        break;
      default: break;
    }
    if (static_cast<bool>(a.lhs) != static_cast<bool>(b.lhs)) return false;
    if (static_cast<bool>(a.rhs) != static_cast<bool>(b.rhs)) return false;
    if (a.lhs && !equal(*a.lhs, *b.lhs)) return false;
    if (a.rhs && !equal(*a.rhs, *b.rhs)) return false;
    return true;
  }

  std::shared_ptr<const Node> root_;
};

namespace detail {

struct Token {
  enum class Kind { Number, Ident, Op, LParen, RParen, Comma, End };
  Kind kind = Kind::End;
  std::string text;
  double number = 0.0;
  std::size_t offset = 0;
};

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Token next() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    Token tok;
    tok.offset = pos_;
    if (pos_ >= src_.size()) {
      tok.kind = Token::Kind::End;
      tok.text = "end of input";
      return tok;
    }
    const char c = src_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number(tok);
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
        ++pos_;
      }
      tok.kind = Token::Kind::Ident;
      tok.text = std::string(src_.substr(start, pos_ - start));
      return tok;
    }
    ++pos_;
    tok.text = std::string(1, c);
    switch (c) {
      case '+': case '-': case '*': case '/': case '^': tok.kind = Token::Kind::Op; return tok;
      case '(': tok.kind = Token::Kind::LParen; return tok;
      case ')': tok.kind = Token::Kind::RParen; return tok;
      case ',': tok.kind = Token::Kind::Comma; return tok;
      default: break;
    }
    throw SyntaxError(tok.offset, {"number", "identifier", "'('", "'-'"}, "'" + tok.text + "'");
  }

 private:
  Token number(Token& tok) {
    std::size_t start = pos_;
    auto digits = [&] {
      std::size_t before = pos_;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
      return pos_ - before;
    };
    std::size_t count = digits();
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      count += digits();
    }
    if (count == 0) throw SyntaxError(tok.offset, {"digit"}, "'.'");
    // Exponent only when a digit follows, so "2e" stays "2" followed by the constant e.
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      std::size_t save = pos_;
      ++pos_;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      if (digits() == 0) pos_ = save;
    }
    tok.kind = Token::Kind::Number;
    tok.text = std::string(src_.substr(start, pos_ - start));
    tok.number = std::strtod(tok.text.c_str(), nullptr);
    return tok;
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

class Parser {
 public:
  Parser(std::string_view src, int max_vars) : lex_(src), max_vars_(max_vars) { advance(); }

  std::shared_ptr<const Node> parse_all() {
    auto root = expression();
    if (cur_.kind != Token::Kind::End) {
      throw SyntaxError(cur_.offset, {"'+'", "'-'", "'*'", "'/'", "'^'", "end of input"}, found());
    }
    return root;
  }

 private:
  using Ptr = std::shared_ptr<const Node>;

  void advance() { cur_ = lex_.next(); }

  std::string found() const {
    return cur_.kind == Token::Kind::End ? cur_.text : "'" + cur_.text + "'";
  }

  bool at_op(char op) const { return cur_.kind == Token::Kind::Op && cur_.text[0] == op; }

  static Ptr binary(Node::Kind kind, Ptr lhs, Ptr rhs) {
    auto n = std::make_shared<Node>();
    n->kind = kind;
    n->lhs = std::move(lhs);
    n->rhs = std::move(rhs);
    return n;
  }

  Ptr expression() {
    Ptr lhs = term();
    while (at_op('+') || at_op('-')) {
      const auto kind = at_op('+') ? Node::Kind::Add : Node::Kind::Sub;
      advance();
      lhs = binary(kind, lhs, term());
    }
    return lhs;
  }

  Ptr term() {
    Ptr lhs = unary();
    while (at_op('*') || at_op('/')) {
      const auto kind = at_op('*') ? Node::Kind::Mul : Node::Kind::Div;
      advance();
      lhs = binary(kind, lhs, unary());
    }
    return lhs;
  }

  Ptr unary() {
    if (at_op('-')) {
      advance();
      auto n = std::make_shared<Node>();
      n->kind = Node::Kind::Neg;
      n->lhs = unary();
      return n;
    }
    return power();
  }

  Ptr power() {
    Ptr base = primary();
    if (at_op('^')) {
      advance();
      return binary(Node::Kind::Pow, base, unary());
    }
    return base;
  }

  Ptr primary() {
    const Token tok = cur_;
    switch (tok.kind) {
      case Token::Kind::Number: {
        advance();
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Number;
        n->value = tok.number;
        return n;
      }
      case Token::Kind::LParen: {
        advance();
        Ptr inner = expression();
        expect_rparen();
        return inner;
      }
      case Token::Kind::Ident: return identifier(tok);
      default:
        throw SyntaxError(tok.offset, {"number", "identifier", "'('", "'-'"}, found());
    }
  }

  void expect_rparen() {
    if (cur_.kind != Token::Kind::RParen) {
      throw SyntaxError(cur_.offset, {"')'", "'+'", "'-'", "'*'", "'/'", "'^'"}, found());
    }
    advance();
  }

  Ptr identifier(const Token& tok) {
    advance();
    const std::string& name = tok.text;
    if (auto f = lookup_func(name)) {
      if (cur_.kind != Token::Kind::LParen) throw SyntaxError(cur_.offset, {"'('"}, found());
      advance();
      std::vector<Ptr> args;
      if (cur_.kind != Token::Kind::RParen) {
        args.push_back(expression());
        while (cur_.kind == Token::Kind::Comma) {
          advance();
          args.push_back(expression());
        }
      }
      expect_rparen();
      if (args.size() != 1) {
        throw Error(Errc::ArityError, std::string(name) + " takes 1 argument, got " +
                                          std::to_string(args.size()) + " (byte " +
                                          std::to_string(tok.offset) + ")");
      }
      auto n = std::make_shared<Node>();
      n->kind = Node::Kind::Call;
      n->func = *f;
      n->lhs = args.front();
      return n;
    }
    if (name == "pi" || name == "e") {
      auto n = std::make_shared<Node>();
      n->kind = Node::Kind::Constant;
      n->name = name;
      n->value = name == "pi" ? M_PI : M_E;
      return n;
    }
    if (name.size() > 1 && name[0] == 'x' &&
        name.find_first_not_of("0123456789", 1) == std::string::npos && name[1] != '0') {
      int index = 0;
      auto [ptr, ec] = std::from_chars(name.data() + 1, name.data() + name.size(), index);
      if (ec == std::errc() && index >= 1 && (max_vars_ < 0 || index <= max_vars_)) {
        auto n = std::make_shared<Node>();
        n->kind = Node::Kind::Variable;
        n->var = index - 1;
        return n;
      }
      throw Error(Errc::UnknownIdentifier,
                  "variable " + name + " out of range (byte " + std::to_string(tok.offset) + ")");
    }
    throw Error(Errc::UnknownIdentifier,
                "unknown identifier '" + name + "' (byte " + std::to_string(tok.offset) + ")");
  }

  Lexer lex_;
  Token cur_;
  int max_vars_;
};

inline double domain_error(const std::string& what) { throw Error(Errc::DomainError, what); }

inline double eval_node(const Node& n, const double* x, int dim) {
  switch (n.kind) {
    case Node::Kind::Number:
    case Node::Kind::Constant: return n.value;
    case Node::Kind::Variable:
      if (n.var >= dim) throw Error(Errc::EvalFailure, "point has too few coordinates");
      return x[n.var];
    case Node::Kind::Neg: return -eval_node(*n.lhs, x, dim);
    case Node::Kind::Add: return eval_node(*n.lhs, x, dim) + eval_node(*n.rhs, x, dim);
    case Node::Kind::Sub: return eval_node(*n.lhs, x, dim) - eval_node(*n.rhs, x, dim);
    case Node::Kind::Mul: return eval_node(*n.lhs, x, dim) * eval_node(*n.rhs, x, dim);
    case Node::Kind::Div: {
      const double den = eval_node(*n.rhs, x, dim);
      if (den == 0.0) return domain_error("division by zero");
      return eval_node(*n.lhs, x, dim) / den;
    }
    case Node::Kind::Pow: {
      const double base = eval_node(*n.lhs, x, dim);
      const double ex = eval_node(*n.rhs, x, dim);
      if (ex == 2.0) return base * base;
      if (base < 0.0 && ex != std::floor(ex)) return domain_error("negative base to fractional power");
      if (base == 0.0 && ex < 0.0) return domain_error("zero to negative power");
      return std::pow(base, ex);
    }
    case Node::Kind::Call: {
      const double a = eval_node(*n.lhs, x, dim);
      switch (n.func) {
        case Func::Sin: return std::sin(a);
        case Func::Cos: return std::cos(a);
        case Func::Tan: return std::tan(a);
        case Func::Exp: return std::exp(a);
        case Func::Log:
          if (!(a > 0.0)) return domain_error("log of non-positive value");
          return std::log(a);
        case Func::Sqrt:
          if (a < 0.0) return domain_error("sqrt of negative value");
          return std::sqrt(a);
        case Func::Abs: return std::abs(a);
        case Func::Tanh: return std::tanh(a);
      }
    }
  }
  return 0.0;
}

inline std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void print_node(const Node& n, std::string& out) {
  switch (n.kind) {
    case Node::Kind::Number: out += format_number(n.value); return;
    case Node::Kind::Constant: out += n.name; return;
    case Node::Kind::Variable: out += "x" + std::to_string(n.var + 1); return;
    case Node::Kind::Neg:
      out += "(-";
      print_node(*n.lhs, out);
      out += ")";
      return;
    case Node::Kind::Call:
      out += func_name(n.func);
      out += "(";
      print_node(*n.lhs, out);
      out += ")";
      return;
    default: break;
  }
  const char* op = n.kind == Node::Kind::Add   ? " + "
                   : n.kind == Node::Kind::Sub ? " - "
                   : n.kind == Node::Kind::Mul ? " * "
                   : n.kind == Node::Kind::Div ? " / "
                                               : " ^ ";
  out += "(";
  print_node(*n.lhs, out);
  out += op;
  print_node(*n.rhs, out);
  out += ")";
}

}  // namespace detail

/// Parses source text. max_vars < 0 allows any variable index.
inline Expr parse(std::string_view source, int max_vars = -1) {
  detail::Parser parser(source, max_vars);
  return Expr(parser.parse_all());
}

/// Canonical fully parenthesised form; parse(print(e)) == e.
inline std::string print(const Expr& e) {
  std::string out;
  if (!e.empty()) detail::print_node(e.root(), out);
  return out;
}

inline double eval(const Expr& e, const double* x, int dim) { return detail::eval_node(e.root(), x, dim); }

inline double eval(const Expr& e, const Vec& x) {
  return detail::eval_node(e.root(), x.data(), static_cast<int>(x.size()));
}

inline double eval(const Expr& e, const std::vector<double>& x) {
  return detail::eval_node(e.root(), x.data(), static_cast<int>(x.size()));
}

/// A rows x cols array of expressions evaluated together.
class ExprMatrix {
 public:
  ExprMatrix() = default;
  ExprMatrix(int rows, int cols, std::vector<Expr> entries)
      : rows_(rows), cols_(cols), entries_(std::move(entries)) {}

  static ExprMatrix parse_rows(const std::vector<std::vector<std::string>>& rows, int max_vars) {
    const int r = static_cast<int>(rows.size());
    const int c = r ? static_cast<int>(rows.front().size()) : 0;
    std::vector<Expr> entries;
    for (const auto& row : rows) {
      if (static_cast<int>(row.size()) != c) throw Error(Errc::BadParams, "ragged expression matrix");
      for (const auto& s : row) entries.push_back(parse(s, max_vars));
    }
    return ExprMatrix(r, c, std::move(entries));
  }

  int rows() const { return rows_; }
  int cols() const { return cols_; }

  Mat operator()(const Vec& x) const {
    Mat out(rows_, cols_);
    for (int i = 0; i < rows_; ++i)
      for (int j = 0; j < cols_; ++j) out(i, j) = eval(entries_[i * cols_ + j], x);
    return out;
  }

 private:
  int rows_ = 0;
  int cols_ = 0;
  std::vector<Expr> entries_;
};

/// A list of expressions evaluated to a vector.
class ExprVector {
 public:
  ExprVector() = default;
  explicit ExprVector(std::vector<Expr> entries) : entries_(std::move(entries)) {}

  static ExprVector parse_all(const std::vector<std::string>& sources, int max_vars) {
    std::vector<Expr> entries;
    for (const auto& s : sources) entries.push_back(parse(s, max_vars));
    return ExprVector(std::move(entries));
  }

  int size() const { return static_cast<int>(entries_.size()); }

  Vec operator()(const Vec& x) const {
    Vec out(size());
    for (int i = 0; i < size(); ++i) out(i) = eval(entries_[i], x);
    return out;
  }

 private:
  std::vector<Expr> entries_;
};

}  // namespace sdegeom::expr
