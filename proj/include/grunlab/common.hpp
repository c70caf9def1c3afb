#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace grunlab {

// Error taxonomy. Config errors map to CLI exit code 2, everything else
// raised during a pipeline stage maps to exit code 3.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

// Malformed on-disk artifact (checkpoint, JSONL). Message names the byte
// offset or line number where parsing failed.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

struct StageError : std::runtime_error {
  StageError(std::string stage_name, const std::string& msg)
      : std::runtime_error("stage '" + stage_name + "' failed: " + msg),
        stage(std::move(stage_name)) {}
  std::string stage;
};

// Deterministic RNG. std::mt19937_64 is bit-exact across platforms; the
// distributions below are hand-rolled because the stdlib ones are
// implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed) {}

  uint64_t next_u64() { return engine_(); }

  // uniform in [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0);
  }

  // Box-Muller, one value per call (spare cached).
  double gaussian() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 1.0 - uniform();  // avoid log(0)
    double u2 = uniform();
    double mag = std::sqrt(-2.0 * std::log(u1));
    double ang = 2.0 * 3.14159265358979323846 * u2;
    spare_ = mag * std::sin(ang);
    has_spare_ = true;
    return mag * std::cos(ang);
  }

  // uniform integer in [0, n)
  size_t below(size_t n) {
    return n == 0 ? 0 : static_cast<size_t>(uniform() * static_cast<double>(n));
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = below(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derive an independent stream for a named sub-task.
  Rng fork(uint64_t salt) { return Rng(engine_() ^ (salt * 0x9E3779B97F4A7C15ull)); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a 64-bit, used for artifact content hashes and determinism audits.
uint64_t fnv1a64(const void* data, size_t len);
uint64_t fnv1a64(const std::string& s);
std::string fnv1a64_hex(const void* data, size_t len);

// Hash of a file's contents.
std::string hash_file(const std::string& path);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

}  // namespace grunlab
