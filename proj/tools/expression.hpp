#pragma once

// Arithmetic expressions over named variables, used for custom data on the
// command line, e.g. "t^2*exp(-t)*cos(phi)".
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := ('+' | '-') unary | power
//   power   := primary ('^' unary)?
//   primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace knudsen::cli {

/// Malformed expression text; the message carries the column.
class ExpressionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A compiled expression. Variables are bound by position at compile time.
class Expression {
 public:
  Expression() = default;

  static Expression compile(const std::string& text, std::vector<std::string> variables) {
    Expression e;
    e.root_ = Parser{text, variables, 0}.parse();
    e.text_ = text;
    e.variables_ = std::move(variables);
    return e;
  }

  double operator()(std::span<const double> values) const {
    if (!root_) throw ExpressionError("empty expression");
    if (values.size() != variables_.size()) throw ExpressionError("wrong number of variable values");
    return root_->eval(values);
  }

  const std::string& text() const noexcept { return text_; }
  explicit operator bool() const noexcept { return static_cast<bool>(root_); }

 private:
  struct Node {
    virtual ~Node() = default;
    virtual double eval(std::span<const double> v) const = 0;
  };
  using NodePtr = std::shared_ptr<const Node>;

  struct Number : Node {
    double value;
    explicit Number(double x) : value(x) {}
    double eval(std::span<const double>) const override { return value; }
  };
  struct Variable : Node {
    std::size_t slot;
    explicit Variable(std::size_t s) : slot(s) {}
    double eval(std::span<const double> v) const override { return v[slot]; }
  };
  struct Unary : Node {
    std::function<double(double)> fn;
    NodePtr a;
    Unary(std::function<double(double)> f, NodePtr x) : fn(std::move(f)), a(std::move(x)) {}
    double eval(std::span<const double> v) const override { return fn(a->eval(v)); }
  };
  struct Binary : Node {
    std::function<double(double, double)> fn;
    NodePtr a, b;
    Binary(std::function<double(double, double)> f, NodePtr x, NodePtr y)
        : fn(std::move(f)), a(std::move(x)), b(std::move(y)) {}
    double eval(std::span<const double> v) const override { return fn(a->eval(v), b->eval(v)); }
  };

  struct Parser {
    const std::string& s;
    const std::vector<std::string>& vars;
    std::size_t pos;

    [[noreturn]] void fail(const std::string& what) const {
      throw ExpressionError("expression '" + s + "': " + what + " at column " + std::to_string(pos + 1));
    }
    void skip() {
      while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }
    bool accept(char c) {
      skip();
      if (pos < s.size() && s[pos] == c) {
        ++pos;
        return true;
      }
      return false;
    }

    NodePtr parse() {
      NodePtr e = expr();
      skip();
      if (pos != s.size()) fail("unexpected character");
      return e;
    }
    NodePtr expr() {
      NodePtr a = term();
      for (;;) {
        if (accept('+'))
          a = std::make_shared<Binary>(std::plus<double>{}, a, term());
        else if (accept('-'))
          a = std::make_shared<Binary>(std::minus<double>{}, a, term());
        else
          return a;
      }
    }
    NodePtr term() {
      NodePtr a = unary();
      for (;;) {
        if (accept('*'))
          a = std::make_shared<Binary>(std::multiplies<double>{}, a, unary());
        else if (accept('/'))
          a = std::make_shared<Binary>(std::divides<double>{}, a, unary());
        else
          return a;
      }
    }
    NodePtr unary() {
      if (accept('-')) return std::make_shared<Unary>(std::negate<double>{}, unary());
      if (accept('+')) return unary();
      return power();
    }
    NodePtr power() {
      NodePtr a = primary();
      if (accept('^')) return std::make_shared<Binary>([](double x, double y) { return std::pow(x, y); }, a, unary());
      return a;
    }
    NodePtr primary() {
      skip();
      if (pos >= s.size()) fail("unexpected end");
      if (accept('(')) {
        NodePtr e = expr();
        if (!accept(')')) fail("expected ')'");
        return e;
      }
      const char c = s[pos];
      if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
        const char* begin = s.c_str() + pos;
        char* end = nullptr;
        const double x = std::strtod(begin, &end);
        if (end == begin) fail("malformed number");
        pos += static_cast<std::size_t>(end - begin);
        return std::make_shared<Number>(x);
      }
      if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
        const std::size_t start = pos;
        while (pos < s.size() && (std::isalnum(static_cast<unsigned char>(s[pos])) || s[pos] == '_')) ++pos;
        const std::string name = s.substr(start, pos - start);
        if (accept('(')) return call(name);
        for (std::size_t k = 0; k < vars.size(); ++k)
          if (vars[k] == name) return std::make_shared<Variable>(k);
        if (name == "pi") return std::make_shared<Number>(3.14159265358979323846);
        if (name == "e") return std::make_shared<Number>(2.71828182845904523536);
        pos = start;
        fail("unknown name '" + name + "'");
      }
      fail("unexpected character");
    }
    NodePtr call(const std::string& name) {
      std::vector<NodePtr> args{expr()};
      while (accept(',')) args.push_back(expr());
      if (!accept(')')) fail("expected ')' after arguments of " + name);
      using F1 = double (*)(double);
      static const std::pair<const char*, F1> unary_fns[] = {
          {"sin", [](double x) { return std::sin(x); }},   {"cos", [](double x) { return std::cos(x); }},
          {"tan", [](double x) { return std::tan(x); }},   {"exp", [](double x) { return std::exp(x); }},
          {"log", [](double x) { return std::log(x); }},   {"sqrt", [](double x) { return std::sqrt(x); }},
          {"abs", [](double x) { return std::abs(x); }},   {"sinh", [](double x) { return std::sinh(x); }},
          {"cosh", [](double x) { return std::cosh(x); }}, {"tanh", [](double x) { return std::tanh(x); }},
          {"atan", [](double x) { return std::atan(x); }},
      };
      using F2 = double (*)(double, double);
      static const std::pair<const char*, F2> binary_fns[] = {
          {"pow", [](double x, double y) { return std::pow(x, y); }},
          {"atan2", [](double x, double y) { return std::atan2(x, y); }},
          {"min", [](double x, double y) { return std::fmin(x, y); }},
          {"max", [](double x, double y) { return std::fmax(x, y); }},
      };
      for (const auto& [n, f] : unary_fns)
        if (name == n) {
          if (args.size() != 1) fail(name + " takes one argument");
          return std::make_shared<Unary>(f, args[0]);
        }
      for (const auto& [n, f] : binary_fns)
        if (name == n) {
          if (args.size() != 2) fail(name + " takes two arguments");
          return std::make_shared<Binary>(f, args[0], args[1]);
        }
      fail("unknown function '" + name + "'");
    }
  };

  std::string text_;
  std::vector<std::string> variables_;
  NodePtr root_;
};

}  // namespace knudsen::cli
