#pragma once

// Run configuration: a small sectioned key=value text format. Unknown
// sections or keys are hard errors so typos cannot silently fall back to
// defaults. `E` accepts a single count or an inclusive range "a..b".

#include <cctype>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>

#include "sectmoe/cost_model.hpp"
#include "sectmoe/sectional.hpp"

namespace sectmoe {

struct RunConfig {
  // [dims]
  std::size_t tokens_per_expert = 2;
  std::size_t experts = 2;
  std::size_t e_min = 0;  // 0 = unset; falls back to `experts`
  std::size_t e_max = 0;
  std::size_t d0 = 8;
  std::size_t heads_pre = 1;
  std::size_t heads_exp = 1;
  double alpha = 1.0;
  Convention convention = Convention::consistent;
  // [model]
  std::size_t reduction_ratio = 0;  // 0 = default E^2
  std::size_t d_ff_mult_pre = 4;
  std::size_t d_ff_mult_expert = 4;
  std::size_t d_ff_mult_agg = 4;
  std::size_t top_k = 1;
  double capacity_factor = 1.25;
  bool causal = false;
  bool parallel_experts = false;
  // [run]
  std::uint64_t seed = 1;
  std::string out;

  SectionalConfig sectional() const {
    SectionalConfig cfg;
    cfg.tokens_per_expert = tokens_per_expert;
    cfg.experts = experts;
    cfg.d0 = d0;
    cfg.heads_pre = heads_pre;
    cfg.heads_exp = heads_exp;
    cfg.reduction_ratio = reduction_ratio;
    cfg.ffn_mult_pre = d_ff_mult_pre;
    cfg.ffn_mult_expert = d_ff_mult_expert;
    cfg.ffn_mult_agg = d_ff_mult_agg;
    cfg.causal = causal;
    cfg.parallel_experts = parallel_experts;
    cfg.seed = seed;
    return cfg;
  }

  ModelDims dims() const {
    ModelDims d;
    d.tokens_per_expert = static_cast<double>(tokens_per_expert);
    d.experts = static_cast<double>(experts);
    d.d0 = static_cast<double>(d0);
    d.heads_pre = static_cast<double>(heads_pre);
    d.heads_exp = static_cast<double>(heads_exp);
    d.alpha = alpha;
    d.convention = convention;
    return d;
  }

  std::size_t range_min() const { return e_min ? e_min : experts; }
  std::size_t range_max() const { return e_max ? e_max : experts; }

  static RunConfig load(const std::string& path);
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front())))
    s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back())))
    s.remove_suffix(1);
  return s;
}

inline std::uint64_t parse_u64(std::string_view v, const std::string& key) {
  std::uint64_t out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc{} || ptr != v.data() + v.size()) {
    throw ConfigError("config: key '" + key + "' expects an unsigned integer, "
                      "got '" + std::string(v) + "'");
  }
  return out;
}

inline double parse_real(std::string_view v, const std::string& key) {
  try {
    std::size_t used = 0;
    const double out = std::stod(std::string(v), &used);
    if (used != v.size()) throw std::invalid_argument("trailing characters");
    return out;
  } catch (const std::exception&) {
    throw ConfigError("config: key '" + key + "' expects a real number, got '" +
                      std::string(v) + "'");
  }
}

inline bool parse_bool(std::string_view v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("config: key '" + key + "' expects true/false, got '" +
                    std::string(v) + "'");
}

}  // namespace detail

inline RunConfig RunConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open '" + path + "'");

  RunConfig cfg;
  std::string section;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string_view s = detail::trim(line);
    if (s.empty() || s.front() == '#') continue;
    if (s.front() == '[') {
      if (s.back() != ']') {
        throw ConfigError("config: malformed section header at line " +
                          std::to_string(line_no));
      }
      section = std::string(s.substr(1, s.size() - 2));
      if (section != "dims" && section != "model" && section != "run") {
        throw ConfigError("config: unknown section '" + section + "'");
      }
      continue;
    }
    const std::size_t eq = s.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config: expected key = value at line " +
                        std::to_string(line_no));
    }
    const std::string key{detail::trim(s.substr(0, eq))};
    const std::string_view value = detail::trim(s.substr(eq + 1));
    if (section.empty()) {
      throw ConfigError("config: key '" + key + "' appears before any section");
    }

    if (section == "dims") {
      if (key == "L") {
        cfg.tokens_per_expert = detail::parse_u64(value, key);
      } else if (key == "E") {
        const std::size_t dots = value.find("..");
        if (dots == std::string_view::npos) {
          cfg.experts = detail::parse_u64(value, key);
        } else {
          cfg.e_min = detail::parse_u64(value.substr(0, dots), key);
          cfg.e_max = detail::parse_u64(value.substr(dots + 2), key);
          if (cfg.e_min < 1 || cfg.e_min > cfg.e_max) {
            throw ConfigError("config: E range '" + std::string(value) +
                              "' is empty");
          }
          cfg.experts = cfg.e_min;
        }
      } else if (key == "d0") {
        cfg.d0 = detail::parse_u64(value, key);
      } else if (key == "h_pre") {
        cfg.heads_pre = detail::parse_u64(value, key);
      } else if (key == "h_exp") {
        cfg.heads_exp = detail::parse_u64(value, key);
      } else if (key == "alpha") {
        cfg.alpha = detail::parse_real(value, key);
      } else if (key == "convention") {
        if (value == "consistent") {
          cfg.convention = Convention::consistent;
        } else if (value == "paper_literal") {
          cfg.convention = Convention::paper_literal;
        } else {
          throw ConfigError("config: convention must be 'consistent' or "
                            "'paper_literal'");
        }
      } else {
        throw ConfigError("config: unknown key '" + key + "' in [dims]");
      }
    } else if (section == "model") {
      if (key == "r") {
        cfg.reduction_ratio = detail::parse_u64(value, key);
      } else if (key == "d_ff_mult_pre") {
        cfg.d_ff_mult_pre = detail::parse_u64(value, key);
      } else if (key == "d_ff_mult_expert") {
        cfg.d_ff_mult_expert = detail::parse_u64(value, key);
      } else if (key == "d_ff_mult_agg") {
        cfg.d_ff_mult_agg = detail::parse_u64(value, key);
      } else if (key == "k") {
        cfg.top_k = detail::parse_u64(value, key);
      } else if (key == "capacity_factor") {
        cfg.capacity_factor = detail::parse_real(value, key);
      } else if (key == "causal") {
        cfg.causal = detail::parse_bool(value, key);
      } else if (key == "parallel_experts") {
        cfg.parallel_experts = detail::parse_bool(value, key);
      } else {
        throw ConfigError("config: unknown key '" + key + "' in [model]");
      }
    } else {  // run
      if (key == "seed") {
        cfg.seed = detail::parse_u64(value, key);
      } else if (key == "out") {
        cfg.out = std::string(value);
      } else {
        throw ConfigError("config: unknown key '" + key + "' in [run]");
      }
    }
  }

  // Re-validate cross-field invariants eagerly so a bad file fails at load.
  cfg.sectional().validate();
  cfg.dims().validate();
  if (cfg.top_k < 1 || cfg.top_k > cfg.experts) {
    throw ConfigError("config: k must be in [1, E]");
  }
  if (cfg.capacity_factor < 0.0) {
    throw ConfigError("config: capacity_factor must be >= 0");
  }
  return cfg;
}

}  // namespace sectmoe
