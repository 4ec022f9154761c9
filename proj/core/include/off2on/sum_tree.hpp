#pragma once

#include <cstddef>
#include <vector>

namespace off2on {

/// Segment tree over leaf priorities supporting O(log n) proportional
/// sampling and updates. Flat array layout: root at index 1, leaves at
/// [cap, 2*cap). Priorities are float64.
class SumTree {
public:
    explicit SumTree(std::size_t capacity);

    std::size_t capacity() const { return logical_capacity_; }

    /// Writes a leaf and propagates the sums to the root.
    void update(std::size_t leaf, double priority);

    double get(std::size_t leaf) const;

    /// Root value.
    double total() const { return tree_[1]; }

    /// Proportional pick: returns the leaf index for a target value in
    /// [0, total()).
    std::size_t sample(double target) const;

    /// Recomputes all internal nodes exactly from the leaves.
    void rebuild();

    /// Sum of leaves computed directly (for invariant checks).
    double leaf_sum(std::size_t n_leaves) const;

private:
    std::size_t logical_capacity_;
    std::size_t tree_capacity_;  // power of two >= logical_capacity_
    std::vector<double> tree_;   // size 2 * tree_capacity_
};

}  // namespace off2on
