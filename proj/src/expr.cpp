#include "mfbsde/expr.hpp"

#include <cctype>
#include <cmath>
#include <cstdlib>
#include <cstring>

namespace mfbsde {

namespace {

enum class VarKind { t, x, xbar, y, ybar };

enum class Fn { sin, cos, exp, sqrt, tanh, abs, min, max };

int fn_arity(Fn f) { return (f == Fn::min || f == Fn::max) ? 2 : 1; }

const char* fn_name(Fn f) {
  switch (f) {
    case Fn::sin: return "sin";
    case Fn::cos: return "cos";
    case Fn::exp: return "exp";
    case Fn::sqrt: return "sqrt";
    case Fn::tanh: return "tanh";
    case Fn::abs: return "abs";
    case Fn::min: return "min";
    case Fn::max: return "max";
  }
  return "?";
}

}  // namespace

struct CoefficientExpr::Node {
  enum class Kind { constant, variable, param, neg, add, sub, mul, div, pow, call } kind;
  double value = 0.0;
  VarKind var = VarKind::t;
  int index = 0;  // 1-based component for y / ybar
  std::string param;
  Fn fn = Fn::sin;
  std::vector<std::shared_ptr<const Node>> args;
  int line = 1, column = 1;
};

namespace {

using Node = CoefficientExpr::Node;
using NodePtr = std::shared_ptr<const Node>;

struct Token {
  enum class Kind { number, ident, op, lparen, rparen, comma, end } kind;
  std::string text;
  double number = 0.0;
  int line = 1, column = 1;
};

class Lexer {
 public:
  explicit Lexer(const std::string& src) : src_(src) { advance(); }

  const Token& peek() const { return tok_; }
  Token take() {
    Token t = tok_;
    advance();
    return t;
  }

 private:
  void advance() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) {
      if (src_[pos_] == '\n') { ++line_; col_ = 0; }
      ++pos_;
      ++col_;
    }
    tok_.line = line_;
    tok_.column = col_ + 1;
    if (pos_ >= src_.size()) {
      tok_.kind = Token::Kind::end;
      tok_.text = "<end>";
      return;
    }
    char c = src_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
      const char* start = src_.c_str() + pos_;
      char* end = nullptr;
      double v = std::strtod(start, &end);
      if (end == start)
        throw ExprError("malformed number", line_, col_ + 1);
      std::size_t len = static_cast<std::size_t>(end - start);
      tok_.kind = Token::Kind::number;
      tok_.number = v;
      tok_.text = src_.substr(pos_, len);
      pos_ += len;
      col_ += static_cast<int>(len);
      return;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t start = pos_;
      while (pos_ < src_.size() &&
             (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_')) {
        ++pos_;
        ++col_;
      }
      tok_.kind = Token::Kind::ident;
      tok_.text = src_.substr(start, pos_ - start);
      return;
    }
    ++pos_;
    ++col_;
    switch (c) {
      case '(': tok_.kind = Token::Kind::lparen; tok_.text = "("; return;
      case ')': tok_.kind = Token::Kind::rparen; tok_.text = ")"; return;
      case ',': tok_.kind = Token::Kind::comma; tok_.text = ","; return;
      case '+': case '-': case '*': case '/': case '^':
        tok_.kind = Token::Kind::op;
        tok_.text = std::string(1, c);
        return;
      default:
        throw ExprError(std::string("unexpected character '") + c + "'", line_, col_);
    }
  }

  const std::string& src_;
  std::size_t pos_ = 0;
  int line_ = 1, col_ = 0;
  Token tok_;
};

class Parser {
 public:
  Parser(const std::string& src, const std::map<std::string, double>& params, int n)
      : lex_(src), params_(params), n_(n) {}

  NodePtr parse() {
    NodePtr e = expr();
    const Token& t = lex_.peek();
    if (t.kind != Token::Kind::end)
      throw ExprError("unexpected token '" + t.text + "'", t.line, t.column);
    return e;
  }

 private:
  NodePtr make(Node::Kind k, const Token& at) const {
    auto node = std::make_shared<Node>();
    node->kind = k;
    node->line = at.line;
    node->column = at.column;
    return node;
  }

  NodePtr expr() {
    NodePtr left = term();
    while (lex_.peek().kind == Token::Kind::op &&
           (lex_.peek().text == "+" || lex_.peek().text == "-")) {
      Token op = lex_.take();
      NodePtr right = term();
      auto node = make(op.text == "+" ? Node::Kind::add : Node::Kind::sub, op);
      const_cast<Node*>(node.get())->args = {left, right};
      left = node;
    }
    return left;
  }

  NodePtr term() {
    NodePtr left = unary();
    while (lex_.peek().kind == Token::Kind::op &&
           (lex_.peek().text == "*" || lex_.peek().text == "/")) {
      Token op = lex_.take();
      NodePtr right = unary();
      auto node = make(op.text == "*" ? Node::Kind::mul : Node::Kind::div, op);
      const_cast<Node*>(node.get())->args = {left, right};
      left = node;
    }
    return left;
  }

  NodePtr unary() {
    if (lex_.peek().kind == Token::Kind::op && lex_.peek().text == "-") {
      Token op = lex_.take();
      NodePtr a = unary();
      auto node = make(Node::Kind::neg, op);
      const_cast<Node*>(node.get())->args = {a};
      return node;
    }
    if (lex_.peek().kind == Token::Kind::op && lex_.peek().text == "+") {
      lex_.take();
      return unary();
    }
    return power();
  }

  // ^ binds tighter than unary minus and is right-associative; the exponent
  // may itself be signed (2^-3).
  NodePtr power() {
    NodePtr base = atom();
    if (lex_.peek().kind == Token::Kind::op && lex_.peek().text == "^") {
      Token op = lex_.take();
      NodePtr exponent = unary();
      auto node = make(Node::Kind::pow, op);
      const_cast<Node*>(node.get())->args = {base, exponent};
      return node;
    }
    return base;
  }

  NodePtr atom() {
    Token t = lex_.take();
    switch (t.kind) {
      case Token::Kind::number: {
        auto node = make(Node::Kind::constant, t);
        const_cast<Node*>(node.get())->value = t.number;
        return node;
      }
      case Token::Kind::lparen: {
        NodePtr inner = expr();
        const Token& close = lex_.peek();
        if (close.kind != Token::Kind::rparen)
          throw ExprError("expected ')'", close.line, close.column);
        lex_.take();
        return inner;
      }
      case Token::Kind::ident:
        return ident(t);
      default:
        throw ExprError("unexpected token '" + t.text + "'", t.line, t.column);
    }
  }

  NodePtr ident(const Token& t) {
    static const std::map<std::string, Fn> fns = {
        {"sin", Fn::sin}, {"cos", Fn::cos}, {"exp", Fn::exp},
        {"sqrt", Fn::sqrt}, {"tanh", Fn::tanh}, {"abs", Fn::abs},
        {"min", Fn::min}, {"max", Fn::max}};
    auto fit = fns.find(t.text);
    if (fit != fns.end()) {
      const Token& open = lex_.peek();
      if (open.kind != Token::Kind::lparen)
        throw ExprError("expected '(' after function " + t.text, open.line, open.column);
      lex_.take();
      std::vector<NodePtr> args;
      args.push_back(expr());
      while (lex_.peek().kind == Token::Kind::comma) {
        lex_.take();
        args.push_back(expr());
      }
      const Token& close = lex_.peek();
      if (close.kind != Token::Kind::rparen)
        throw ExprError("expected ')'", close.line, close.column);
      lex_.take();
      if (static_cast<int>(args.size()) != fn_arity(fit->second))
        throw ExprError("function " + t.text + " expects " +
                            std::to_string(fn_arity(fit->second)) + " argument(s)",
                        t.line, t.column);
      auto node = make(Node::Kind::call, t);
      const_cast<Node*>(node.get())->fn = fit->second;
      const_cast<Node*>(node.get())->args = std::move(args);
      return node;
    }

    auto var = [&](VarKind k, int index = 0) {
      auto node = make(Node::Kind::variable, t);
      const_cast<Node*>(node.get())->var = k;
      const_cast<Node*>(node.get())->index = index;
      return node;
    };
    if (t.text == "t") return var(VarKind::t);
    if (t.text == "x") return var(VarKind::x);
    if (t.text == "xbar") return var(VarKind::xbar);
    auto component = [&](const std::string& stem) -> int {
      if (t.text.size() <= stem.size() || t.text.compare(0, stem.size(), stem) != 0)
        return 0;
      int idx = 0;
      for (std::size_t i = stem.size(); i < t.text.size(); ++i) {
        if (!std::isdigit(static_cast<unsigned char>(t.text[i]))) return 0;
        idx = idx * 10 + (t.text[i] - '0');
      }
      return idx;
    };
    if (int idx = component("ybar"); idx > 0) {
      if (idx > n_)
        throw ExprError("ybar component " + std::to_string(idx) +
                            " out of range (n = " + std::to_string(n_) + ")",
                        t.line, t.column);
      return var(VarKind::ybar, idx);
    }
    if (int idx = component("y"); idx > 0) {
      if (idx > n_)
        throw ExprError("y component " + std::to_string(idx) +
                            " out of range (n = " + std::to_string(n_) + ")",
                        t.line, t.column);
      return var(VarKind::y, idx);
    }
    if (params_.count(t.text)) {
      auto node = make(Node::Kind::param, t);
      const_cast<Node*>(node.get())->param = t.text;
      return node;
    }
    throw ExprError("unknown identifier '" + t.text + "'", t.line, t.column);
  }

  Lexer lex_;
  const std::map<std::string, double>& params_;
  int n_;
};

double eval_node(const Node& node, const ExprEnv& env,
                 const std::map<std::string, double>& params) {
  switch (node.kind) {
    case Node::Kind::constant:
      return node.value;
    case Node::Kind::param:
      return params.at(node.param);
    case Node::Kind::variable:
      switch (node.var) {
        case VarKind::t: return env.t;
        case VarKind::x: return env.x;
        case VarKind::xbar: return env.xbar;
        case VarKind::y:
          if (node.index > env.y.size())
            throw ExprError("y component unavailable", node.line, node.column);
          return env.y[node.index - 1];
        case VarKind::ybar:
          if (node.index > env.ybar.size())
            throw ExprError("ybar component unavailable", node.line, node.column);
          return env.ybar[node.index - 1];
      }
      return 0.0;
    case Node::Kind::neg:
      return -eval_node(*node.args[0], env, params);
    case Node::Kind::add:
      return eval_node(*node.args[0], env, params) + eval_node(*node.args[1], env, params);
    case Node::Kind::sub:
      return eval_node(*node.args[0], env, params) - eval_node(*node.args[1], env, params);
    case Node::Kind::mul:
      return eval_node(*node.args[0], env, params) * eval_node(*node.args[1], env, params);
    case Node::Kind::div: {
      double denom = eval_node(*node.args[1], env, params);
      if (denom == 0.0)
        throw ExprError("division by zero", node.line, node.column);
      return eval_node(*node.args[0], env, params) / denom;
    }
    case Node::Kind::pow:
      return std::pow(eval_node(*node.args[0], env, params),
                      eval_node(*node.args[1], env, params));
    case Node::Kind::call: {
      double a = eval_node(*node.args[0], env, params);
      switch (node.fn) {
        case Fn::sin: return std::sin(a);
        case Fn::cos: return std::cos(a);
        case Fn::exp: return std::exp(a);
        case Fn::sqrt:
          if (a < 0.0)
            throw ExprError("sqrt of negative value", node.line, node.column);
          return std::sqrt(a);
        case Fn::tanh: return std::tanh(a);
        case Fn::abs: return std::abs(a);
        case Fn::min: return std::min(a, eval_node(*node.args[1], env, params));
        case Fn::max: return std::max(a, eval_node(*node.args[1], env, params));
      }
      return 0.0;
    }
  }
  return 0.0;
}

// Precedence levels matching the grammar: add=1, mul=2, unary=3, pow=4, atom=5.
int node_prec(const Node& n) {
  switch (n.kind) {
    case Node::Kind::add:
    case Node::Kind::sub: return 1;
    case Node::Kind::mul:
    case Node::Kind::div: return 2;
    case Node::Kind::neg: return 3;
    case Node::Kind::pow: return 4;
    default: return 5;
  }
}

void print_node(const Node& node, std::string& out);

void print_child(const Node& child, int min_prec, std::string& out) {
  if (node_prec(child) < min_prec) {
    out += '(';
    print_node(child, out);
    out += ')';
  } else {
    print_node(child, out);
  }
}

void print_node(const Node& node, std::string& out) {
  char buf[40];
  switch (node.kind) {
    case Node::Kind::constant:
      std::snprintf(buf, sizeof(buf), "%.17g", node.value);
      out += buf;
      return;
    case Node::Kind::param:
      out += node.param;
      return;
    case Node::Kind::variable:
      switch (node.var) {
        case VarKind::t: out += "t"; return;
        case VarKind::x: out += "x"; return;
        case VarKind::xbar: out += "xbar"; return;
        case VarKind::y: out += "y" + std::to_string(node.index); return;
        case VarKind::ybar: out += "ybar" + std::to_string(node.index); return;
      }
      return;
    case Node::Kind::neg:
      out += '-';
      print_child(*node.args[0], 3, out);
      return;
    case Node::Kind::add:
      print_child(*node.args[0], 1, out);
      out += " + ";
      print_child(*node.args[1], 2, out);
      return;
    case Node::Kind::sub:
      print_child(*node.args[0], 1, out);
      out += " - ";
      print_child(*node.args[1], 2, out);
      return;
    case Node::Kind::mul:
      print_child(*node.args[0], 2, out);
      out += "*";
      print_child(*node.args[1], 3, out);
      return;
    case Node::Kind::div:
      print_child(*node.args[0], 2, out);
      out += "/";
      print_child(*node.args[1], 3, out);
      return;
    case Node::Kind::pow:
      print_child(*node.args[0], 5, out);
      out += "^";
      // exponent is a unary-level production; pow and atoms pass unwrapped
      print_child(*node.args[1], 3, out);
      return;
    case Node::Kind::call:
      out += fn_name(node.fn);
      out += '(';
      for (std::size_t i = 0; i < node.args.size(); ++i) {
        if (i) out += ", ";
        print_node(*node.args[i], out);
      }
      out += ')';
      return;
  }
}

}  // namespace

CoefficientExpr CoefficientExpr::parse(const std::string& src,
                                       const std::map<std::string, double>& params,
                                       int n) {
  Parser parser(src, params, n);
  CoefficientExpr e;
  e.root_ = parser.parse();
  e.params_ = params;
  e.n_ = n;
  return e;
}

double CoefficientExpr::eval(const ExprEnv& env) const {
  if (!root_) throw std::runtime_error("empty expression");
  return eval_node(*root_, env, params_);
}

std::string CoefficientExpr::to_string() const {
  if (!root_) return "";
  std::string out;
  print_node(*root_, out);
  return out;
}

}  // namespace mfbsde
