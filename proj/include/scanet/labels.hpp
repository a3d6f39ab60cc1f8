#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace scanet {

/// Integer class map, [n, h, w] row-major.
struct LabelMap {
  int n = 1;
  int h = 0;
  int w = 0;
  std::vector<int> labels;

  LabelMap() = default;
  LabelMap(int n_, int h_, int w_, int fill = 0) : n(n_), h(h_), w(w_), labels(std::size_t(n_) * h_ * w_, fill) {}
  LabelMap(int h_, int w_, std::vector<int> values) : n(1), h(h_), w(w_), labels(std::move(values)) {
    if (labels.size() != std::size_t(h) * w) throw std::invalid_argument("LabelMap: value count mismatch");
  }

  std::size_t size() const { return labels.size(); }
  std::size_t plane() const { return std::size_t(h) * w; }
  int& at(int b, int y, int x) { return labels[(std::size_t(b) * h + y) * w + x]; }
  int at(int b, int y, int x) const { return labels[(std::size_t(b) * h + y) * w + x]; }
  int& at(int y, int x) { return at(0, y, x); }
  int at(int y, int x) const { return at(0, y, x); }

  /// The b-th map of the batch as a single-image LabelMap.
  LabelMap image(int b) const {
    LabelMap out(1, h, w);
    std::copy_n(labels.begin() + std::ptrdiff_t(b) * plane(), plane(), out.labels.begin());
    return out;
  }

  bool same_extent(const LabelMap& o) const { return n == o.n && h == o.h && w == o.w; }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

class LabelError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

inline void check_labels(const LabelMap& m, int num_classes, const char* where) {
  for (int v : m.labels)
    if (v < 0 || v >= num_classes)
      throw LabelError(std::string(where) + ": label " + std::to_string(v) + " outside [0, " +
                       std::to_string(num_classes) + ")");
}

}  // namespace scanet
