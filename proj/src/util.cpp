#include <cstdio>
#include <sstream>

#include "flowdet/error.hpp"
#include "flowdet/mathutil.hpp"
#include "flowdet/rng.hpp"

namespace flowdet {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidBox: return "InvalidBox";
    case ErrorCode::InvalidParameter: return "InvalidParameter";
    case ErrorCode::InvalidStrategy: return "InvalidStrategy";
    case ErrorCode::InvalidCostMatrix: return "InvalidCostMatrix";
    case ErrorCode::SizeMismatch: return "SizeMismatch";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::MissingGradient: return "MissingGradient";
    case ErrorCode::MissingContext: return "MissingContext";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::TooManyObjects: return "TooManyObjects";
    case ErrorCode::PlacementFailure: return "PlacementFailure";
    case ErrorCode::NumericalDivergence: return "NumericalDivergence";
    case ErrorCode::StepSizeUnderflow: return "StepSizeUnderflow";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::VersionError: return "VersionError";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::ConfigError: return "ConfigError";
  }
  return "UnknownError";
}

double normal_icdf(double p) {
  if (!(p >= 0.0 && p <= 1.0)) {
    raise(ErrorCode::InvalidParameter, "normal_icdf argument outside [0,1]");
  }
  if (p == 0.0) return -HUGE_VAL;
  if (p == 1.0) return HUGE_VAL;

  // Acklam's coefficients.
  static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                             -2.759285104469687e+02, 1.383577518672690e+02,
                             -3.066479806614716e+01, 2.506628277459239e+00};
  static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                             -1.556989798598866e+02, 6.680131188771972e+01,
                             -1.328068155288572e+01};
  static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                             -2.400758277161838e+00, -2.549732539343734e+00,
                             4.374664141464968e+00,  2.938163982698783e+00};
  static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                             2.445134137142996e+00, 3.754408661907416e+00};
  const double p_low = 0.02425;
  double x;
  if (p < p_low) {
    double q = std::sqrt(-2.0 * std::log(p));
    x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  } else if (p <= 1.0 - p_low) {
    double q = p - 0.5;
    double r = q * q;
    x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) *
        q /
        (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
  } else {
    double q = std::sqrt(-2.0 * std::log(1.0 - p));
    x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
        ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
  }

  // One Halley step against the exact CDF.
  double e = normal_cdf(x) - p;
  double u = e * std::sqrt(2.0 * M_PI) * std::exp(x * x / 2.0);
  x = x - u / (1.0 + x * u / 2.0);
  return x;
}

std::uint64_t fnv1a64(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string config_hash_hex(const std::map<std::string, std::string>& kv) {
  std::string text;
  for (const auto& [key, value] : kv) {
    text += key;
    text += '=';
    text += value;
    text += '\n';
  }
  char buf[20];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

std::string Rng::serialize() const {
  std::ostringstream out;
  out << engine_;
  return out.str();
}

Rng Rng::deserialize(const std::string& text) {
  Rng rng(0);
  std::istringstream in(text);
  in >> rng.engine_;
  if (in.fail()) {
    raise(ErrorCode::FormatError, "bad rng state string");
  }
  return rng;
}

}  // namespace flowdet
