#pragma once

#include <stdexcept>
#include <string>

namespace safepred {

// Error classes double as CLI exit codes.
enum class Errc : int {
  invalid_argument = 2,
  integration_blowup = 3,
  trajectory_too_short = 4,
  rebalance_impossible = 5,
  empty_split = 6,
  format = 7,
  io = 8,
  divergence = 9,
  dimension_mismatch = 10,
  single_class = 11,
  quantile_out_of_range = 12,
  insufficient_data = 13,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

const char* errc_name(Errc code) noexcept;

}  // namespace safepred
