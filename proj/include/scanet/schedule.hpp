#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace scanet {

/// Weights (lambda1..lambda4) for CE, Dice, Lovasz and contrastive terms.
struct LossWeights {
  double ce = 0.0;
  double dice = 0.0;
  double lovasz = 0.0;
  double contrastive = 0.0;

  std::array<double, 4> as_array() const { return {ce, dice, lovasz, contrastive}; }
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

struct Phase {
  std::string name;
  int start = 0;  // inclusive
  int end = 0;    // exclusive
  LossWeights weights;
};

/// Epoch-indexed table of loss weights, piecewise constant over half-open
/// phase intervals that partition [0, epochs).
class PhaseSchedule {
 public:
  PhaseSchedule() : PhaseSchedule(standard()) {}
  explicit PhaseSchedule(std::vector<Phase> phases) : phases_(std::move(phases)) {}

  /// warm-up [0,10), refinement [10,30), optimization [30,60), convergence [60,100).
  static PhaseSchedule standard() {
    return PhaseSchedule(std::vector<Phase>{
        {"warm-up", 0, 10, {1.0, 0.1, 0.0, 0.0}},
        {"refinement", 10, 30, {1.0, 0.5, 0.0, 0.3}},
        {"optimization", 30, 60, {0.7, 0.5, 1.0, 0.3}},
        {"convergence", 60, 100, {0.5, 0.5, 0.5, 0.25}},
    });
  }

  const std::vector<Phase>& phases() const { return phases_; }
  std::vector<Phase>& phases() { return phases_; }
  int epochs() const { return phases_.empty() ? 0 : phases_.back().end; }

  const Phase& phase_at(int epoch) const {
    for (const auto& p : phases_)
      if (epoch >= p.start && epoch < p.end) return p;
    throw std::out_of_range("epoch " + std::to_string(epoch) + " outside schedule [0, " +
                            std::to_string(epochs()) + ")");
  }

  LossWeights weights_at(int epoch) const { return phase_at(epoch).weights; }

  /// Same phases with boundaries scaled to a new epoch count (rounded to the
  /// nearest epoch; the final boundary is exactly `epochs`). Phases that
  /// shrink to nothing are dropped.
  PhaseSchedule rescaled(int epochs) const {
    std::vector<Phase> out;
    const double f = double(epochs) / double(this->epochs());
    for (std::size_t i = 0; i < phases_.size(); ++i) {
      Phase p = phases_[i];
      p.start = out.empty() ? 0 : out.back().end;
      p.end = i + 1 == phases_.size() ? epochs : std::min(epochs, int(std::lround(phases_[i].end * f)));
      if (p.end > p.start) out.push_back(std::move(p));
    }
    return PhaseSchedule(std::move(out));
  }

  /// Violated invariants, one message per problem; empty when valid.
  std::vector<std::string> problems(int expected_epochs) const {
    std::vector<std::string> out;
    if (phases_.empty()) {
      out.push_back("schedule has no phases");
      return out;
    }
    if (phases_.front().start != 0) out.push_back("schedule does not start at epoch 0");
    for (std::size_t i = 0; i < phases_.size(); ++i) {
      const Phase& p = phases_[i];
      if (p.end <= p.start) out.push_back("phase '" + p.name + "' has an empty interval");
      if (i > 0 && p.start != phases_[i - 1].end)
        out.push_back("phase '" + p.name + "' leaves a gap or overlap at epoch " + std::to_string(p.start));
      const auto w = p.weights.as_array();
      bool any_positive = false;
      for (double x : w) {
        if (!(x >= 0.0) || !std::isfinite(x)) out.push_back("phase '" + p.name + "' has a negative weight");
        any_positive = any_positive || x > 0.0;
      }
      if (!any_positive) out.push_back("phase '" + p.name + "' has no positive weight");
    }
    if (phases_.back().end != expected_epochs)
      out.push_back("schedule ends at " + std::to_string(phases_.back().end) + " but training runs " +
                    std::to_string(expected_epochs) + " epochs");
    return out;
  }

 private:
  std::vector<Phase> phases_;
};

}  // namespace scanet
