#include "off2on/sum_tree.hpp"

#include "off2on/errors.hpp"

namespace off2on {

namespace {
std::size_t next_pow2(std::size_t n) {
    std::size_t p = 1;
    while (p < n) p <<= 1;
    return p;
}
}  // namespace

SumTree::SumTree(std::size_t capacity)
    : logical_capacity_(capacity), tree_capacity_(next_pow2(capacity == 0 ? 1 : capacity)) {
    tree_.assign(2 * tree_capacity_, 0.0);
}

void SumTree::update(std::size_t leaf, double priority) {
    if (leaf >= logical_capacity_) throw ContractViolation("SumTree::update: leaf out of range");
    if (!(priority >= 0.0)) throw ContractViolation("SumTree::update: priority must be >= 0");
    std::size_t i = tree_capacity_ + leaf;
    tree_[i] = priority;
    for (i >>= 1; i >= 1; i >>= 1) tree_[i] = tree_[2 * i] + tree_[2 * i + 1];
}

double SumTree::get(std::size_t leaf) const {
    if (leaf >= logical_capacity_) throw ContractViolation("SumTree::get: leaf out of range");
    return tree_[tree_capacity_ + leaf];
}

std::size_t SumTree::sample(double target) const {
    if (!(target >= 0.0) || target >= total())
        throw ContractViolation("SumTree::sample: target outside [0, total)");
    std::size_t i = 1;
    while (i < tree_capacity_) {
        const std::size_t left = 2 * i;
        if (target < tree_[left]) {
            i = left;
        } else {
            target -= tree_[left];
            i = left + 1;
        }
    }
    std::size_t leaf = i - tree_capacity_;
    // Float roundoff can land on a zero leaf at a boundary; step back to the
    // nearest positive one.
    while (leaf > 0 && tree_[tree_capacity_ + leaf] <= 0.0) --leaf;
    return leaf;
}

void SumTree::rebuild() {
    for (std::size_t i = tree_capacity_; i-- > 1;) tree_[i] = tree_[2 * i] + tree_[2 * i + 1];
}

double SumTree::leaf_sum(std::size_t n_leaves) const {
    double s = 0.0;
    for (std::size_t i = 0; i < n_leaves && i < logical_capacity_; ++i) s += tree_[tree_capacity_ + i];
    return s;
}

}  // namespace off2on
