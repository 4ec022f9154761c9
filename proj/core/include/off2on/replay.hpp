#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "off2on/dataset.hpp"
#include "off2on/env.hpp"
#include "off2on/rng.hpp"
#include "off2on/sum_tree.hpp"

namespace off2on {

/// Priority-indexed store over offline and online transitions.
///
/// Protocol: init_priorities() inserts every offline transition with priority
/// 1.0 and then raises the default priority to P0 = (M / 1000) * rho / (1 - rho)
/// so the first online samples carry enough sampling mass. Online inserts use
/// the current default priority; after a transition is sampled its priority is
/// rewritten to the self-normalized density ratio, and the default priority
/// tracks the running maximum.
///
/// Single-writer contract: the training loop owns all mutation.
class PriorityBuffer {
public:
    enum class Origin : std::uint8_t { Offline = 0, Online = 1 };

    explicit PriorityBuffer(std::size_t capacity);

    /// Bulk-inserts the offline dataset at priority 1.0, then sets the default
    /// priority to P0(M, rho). Requires an empty buffer.
    void init_priorities(const Dataset& offline, double rho);

    static double default_priority_formula(std::size_t offline_size, double rho);

    /// Stores one online transition at the current default priority. When the
    /// buffer is full, the lowest-priority offline entry is evicted first
    /// (offline data is re-derivable; online data is not).
    std::size_t insert_online(const Transition& t);

    struct SampleBatch {
        std::vector<std::size_t> indices;
        std::vector<const Transition*> transitions;
        std::size_t online_count = 0;
    };
    /// B independent proportional draws (leaf probability = priority / root).
    SampleBatch sample(std::size_t batch, Rng& rng) const;
    /// Uniform draws over everything stored.
    SampleBatch sample_uniform(std::size_t batch, Rng& rng) const;
    /// Uniform draws restricted to one origin tag.
    SampleBatch sample_uniform_origin(std::size_t batch, Origin origin, Rng& rng) const;

    /// Rewrites the priorities of previously sampled leaves and raises the
    /// default priority to the batch maximum if it exceeds it. Values are
    /// clamped to the priority floor.
    void update_priorities(std::span<const std::size_t> indices, std::span<const double> priorities);

    const Transition& at(std::size_t index) const { return storage_[index]; }
    Origin origin(std::size_t index) const { return origins_[index]; }
    double priority(std::size_t index) const { return tree_.get(index); }

    std::size_t size() const { return storage_.size(); }
    std::size_t offline_count() const { return offline_count_; }
    std::size_t online_count() const { return storage_.size() - offline_count_; }
    std::size_t capacity() const { return capacity_; }
    double default_priority() const { return default_priority_; }
    double total_priority() const { return tree_.total(); }

    /// Exact recomputation of the internal sums (see SumTree::rebuild).
    void rebuild_tree() { tree_.rebuild(); }
    double leaf_sum() const { return tree_.leaf_sum(storage_.size()); }

    static constexpr double kPriorityFloor = 1e-8;

private:
    std::size_t evict_lowest_priority_offline();

    std::size_t capacity_;
    SumTree tree_;
    std::vector<Transition> storage_;
    std::vector<Origin> origins_;
    std::vector<std::size_t> list_pos_;         // position of each slot in its origin list
    std::vector<std::size_t> origin_lists_[2];  // slot indices per origin, unordered
    std::size_t offline_count_ = 0;
    double default_priority_ = 1.0;
    bool initialized_ = false;
};

}  // namespace off2on
