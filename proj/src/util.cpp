#include "suggest/util.hpp"

#include <bit>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace suggest {

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write file: " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path);
}

std::string hash_file(const std::string& path) { return hex64(fnv1a64(read_file(path))); }

WeightTree::WeightTree(std::span<const double> weights)
    : tree_(weights.size() + 1, 0.0), weights_(weights.begin(), weights.end()) {
  for (std::size_t i = 0; i < weights_.size(); ++i) {
    if (!(weights_[i] >= 0.0)) throw Error("WeightTree: weights must be non-negative");
    tree_[i + 1] += weights_[i];
    const std::size_t parent = (i + 1) + ((i + 1) & (~(i + 1) + 1));
    if (parent <= weights_.size()) tree_[parent] += tree_[i + 1];
  }
}

double WeightTree::total() const {
  double s = 0.0;
  for (std::size_t i = weights_.size(); i > 0; i -= i & (~i + 1)) s += tree_[i];
  return s;
}

void WeightTree::set(std::size_t i, double w) {
  if (!(w >= 0.0)) throw Error("WeightTree: weights must be non-negative");
  const double delta = w - weights_[i];
  weights_[i] = w;
  for (std::size_t j = i + 1; j <= weights_.size(); j += j & (~j + 1)) tree_[j] += delta;
}

std::size_t WeightTree::find(double target) const {
  const std::size_t n = weights_.size();
  std::size_t pos = 0;
  for (std::size_t step = std::bit_floor(n); step > 0; step >>= 1) {
    if (pos + step <= n && tree_[pos + step] <= target) {
      target -= tree_[pos + step];
      pos += step;
    }
  }
  if (pos >= n) {
    // Rounding pushed the target past the end; fall back to the last live item.
    pos = n;
    while (pos > 0 && weights_[pos - 1] <= 0.0) --pos;
    return pos == 0 ? 0 : pos - 1;
  }
  return pos;
}

std::size_t WeightTree::draw(Rng& rng) const {
  const double t = total();
  if (!(t > 0.0)) throw Error("WeightTree: no positive weight left to draw from");
  return find(rng.uniform() * t);
}

}  // namespace suggest
