#pragma once

#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

namespace store3d {

// Deterministic serialization for primary outputs: insertion-ordered keys,
// doubles at 17 significant digits, non-finite values as null.
std::string format_double(double v);
std::string json_escape(const std::string& s);

// Minimal push writer; callers drive the structure explicitly.
class JsonWriter {
 public:
  void begin_object() { open('{'); }
  void end_object() { close('}'); }
  void begin_array() { open('['); }
  void end_array() { close(']'); }

  void key(const std::string& k) {
    comma();
    out_ += '"';
    out_ += json_escape(k);
    out_ += "\":";
    pending_value_ = true;
  }

  void value(double v) { raw(format_double(v)); }
  void value(int v) { raw(std::to_string(v)); }
  void value(long v) { raw(std::to_string(v)); }
  void value(uint64_t v) { raw(std::to_string(v)); }
  void value(bool v) { raw(v ? "true" : "false"); }
  void value(const std::string& s) { raw('"' + json_escape(s) + '"'); }
  void value(const char* s) { value(std::string(s)); }
  void null() { raw("null"); }

  const std::string& str() const { return out_; }

 private:
  void open(char c) {
    comma();
    out_ += c;
    first_.push_back(true);
    pending_value_ = false;
  }
  void close(char c) {
    out_ += c;
    first_.pop_back();
  }
  void comma() {
    if (pending_value_) {
      pending_value_ = false;
      return;
    }
    if (!first_.empty()) {
      if (!first_.back()) out_ += ',';
      first_.back() = false;
    }
  }
  void raw(const std::string& s) {
    comma();
    out_ += s;
  }

  std::string out_;
  std::vector<bool> first_;
  bool pending_value_ = false;
};

}  // namespace store3d
