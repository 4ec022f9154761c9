#include "off2on/replay.hpp"

#include <algorithm>
#include <cmath>

#include "off2on/errors.hpp"

namespace off2on {

PriorityBuffer::PriorityBuffer(std::size_t capacity) : capacity_(capacity), tree_(capacity) {
    if (capacity == 0) throw ContractViolation("PriorityBuffer: capacity must be positive");
    storage_.reserve(capacity);
    origins_.reserve(capacity);
    list_pos_.reserve(capacity);
}

double PriorityBuffer::default_priority_formula(std::size_t offline_size, double rho) {
    if (!(rho > 0.0 && rho < 1.0))
        throw ContractViolation("default_priority_formula: rho must be in (0, 1)");
    return (static_cast<double>(offline_size) / 1000.0) * (rho / (1.0 - rho));
}

void PriorityBuffer::init_priorities(const Dataset& offline, double rho) {
    if (initialized_ || !storage_.empty())
        throw ContractViolation("init_priorities: buffer is not empty");
    if (offline.transitions.size() > capacity_)
        throw ContractViolation("init_priorities: offline dataset exceeds buffer capacity");
    default_priority_ = 1.0;
    for (const auto& t : offline.transitions) {
        const std::size_t slot = storage_.size();
        storage_.push_back(t);
        origins_.push_back(Origin::Offline);
        list_pos_.push_back(origin_lists_[0].size());
        origin_lists_[0].push_back(slot);
        tree_.update(slot, default_priority_);
    }
    offline_count_ = storage_.size();
    default_priority_ = std::max(kPriorityFloor, default_priority_formula(offline_count_, rho));
    initialized_ = true;
}

std::size_t PriorityBuffer::evict_lowest_priority_offline() {
    const auto& offline = origin_lists_[0];
    if (offline.empty())
        throw ContractViolation("PriorityBuffer: full and no offline entry left to evict");
    std::size_t victim = offline[0];
    double lowest = tree_.get(victim);
    for (std::size_t slot : offline) {
        const double p = tree_.get(slot);
        if (p < lowest) {
            lowest = p;
            victim = slot;
        }
    }
    return victim;
}

std::size_t PriorityBuffer::insert_online(const Transition& t) {
    std::size_t slot;
    if (storage_.size() < capacity_) {
        slot = storage_.size();
        storage_.push_back(t);
        origins_.push_back(Origin::Online);
        list_pos_.push_back(origin_lists_[1].size());
        origin_lists_[1].push_back(slot);
    } else {
        slot = evict_lowest_priority_offline();
        // Swap-remove from the offline list, then retag the slot as online.
        auto& off_list = origin_lists_[0];
        const std::size_t pos = list_pos_[slot];
        off_list[pos] = off_list.back();
        list_pos_[off_list[pos]] = pos;
        off_list.pop_back();
        --offline_count_;
        storage_[slot] = t;
        origins_[slot] = Origin::Online;
        list_pos_[slot] = origin_lists_[1].size();
        origin_lists_[1].push_back(slot);
    }
    tree_.update(slot, std::max(kPriorityFloor, default_priority_));
    return slot;
}

PriorityBuffer::SampleBatch PriorityBuffer::sample(std::size_t batch, Rng& rng) const {
    if (storage_.empty()) throw ContractViolation("PriorityBuffer::sample: buffer is empty");
    SampleBatch out;
    out.indices.reserve(batch);
    out.transitions.reserve(batch);
    const double total = tree_.total();
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t leaf = tree_.sample(rng.uniform() * total);
        out.indices.push_back(leaf);
        out.transitions.push_back(&storage_[leaf]);
        if (origins_[leaf] == Origin::Online) ++out.online_count;
    }
    return out;
}

PriorityBuffer::SampleBatch PriorityBuffer::sample_uniform(std::size_t batch, Rng& rng) const {
    if (storage_.empty()) throw ContractViolation("PriorityBuffer::sample_uniform: buffer is empty");
    SampleBatch out;
    out.indices.reserve(batch);
    out.transitions.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const auto idx = static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(storage_.size())));
        out.indices.push_back(idx);
        out.transitions.push_back(&storage_[idx]);
        if (origins_[idx] == Origin::Online) ++out.online_count;
    }
    return out;
}

PriorityBuffer::SampleBatch PriorityBuffer::sample_uniform_origin(std::size_t batch, Origin origin,
                                                                  Rng& rng) const {
    const auto& list = origin_lists_[static_cast<std::size_t>(origin)];
    if (list.empty()) throw ContractViolation("PriorityBuffer: no transitions with requested origin");
    SampleBatch out;
    out.indices.reserve(batch);
    out.transitions.reserve(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        const auto idx = list[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(list.size())))];
        out.indices.push_back(idx);
        out.transitions.push_back(&storage_[idx]);
        if (origin == Origin::Online) ++out.online_count;
    }
    return out;
}

void PriorityBuffer::update_priorities(std::span<const std::size_t> indices,
                                       std::span<const double> priorities) {
    if (indices.size() != priorities.size())
        throw ContractViolation("update_priorities: index/priority count mismatch");
    double batch_max = default_priority_;
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= storage_.size())
            throw ContractViolation("update_priorities: index out of range");
        if (!std::isfinite(priorities[i]))
            throw TrainingDivergence("update_priorities: non-finite priority");
        const double p = std::max(kPriorityFloor, priorities[i]);
        tree_.update(indices[i], p);
        batch_max = std::max(batch_max, p);
    }
    default_priority_ = batch_max;
}

}  // namespace off2on
