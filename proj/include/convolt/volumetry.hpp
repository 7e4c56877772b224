#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "convolt/error.hpp"
#include "convolt/grid.hpp"

namespace convolt {

using LabelId = std::uint16_t;

/// Integer label per voxel, 0 = background.
class LabelMap {
public:
    LabelMap() = default;

    explicit LabelMap(VoxelGrid grid) : grid_(grid), data_(grid.size(), 0) {}

    LabelMap(VoxelGrid grid, std::vector<LabelId> data) : grid_(grid), data_(std::move(data)) {
        if (data_.size() != grid_.size()) {
            throw ValidationError("label map has " + std::to_string(data_.size()) + " values, grid needs " +
                                  std::to_string(grid_.size()));
        }
    }

    const VoxelGrid& grid() const noexcept { return grid_; }
    const std::vector<LabelId>& data() const noexcept { return data_; }
    std::vector<LabelId>& data() noexcept { return data_; }
    LabelId operator[](std::size_t n) const noexcept { return data_[n]; }
    LabelId& operator[](std::size_t n) noexcept { return data_[n]; }

    /// Non-background label ids present, ascending.
    std::vector<LabelId> labels() const {
        std::set<LabelId> s;
        for (auto v : data_)
            if (v != 0) s.insert(v);
        return {s.begin(), s.end()};
    }

    bool contains(LabelId id) const { return std::find(data_.begin(), data_.end(), id) != data_.end(); }

    /// Throws unless the non-background ids are exactly 1..max.
    void validate_contiguous() const {
        const auto ids = labels();
        for (std::size_t n = 0; n < ids.size(); ++n) {
            if (ids[n] != n + 1) {
                throw ValidationError("label ids are not contiguous: id " + std::to_string(n + 1) +
                                      " is missing below max id " + std::to_string(ids.back()));
            }
        }
    }

private:
    VoxelGrid grid_;
    std::vector<LabelId> data_;
};

namespace detail {

inline void require_label(const LabelMap& labels, LabelId label) {
    if (label != 0 && labels.contains(label)) return;
    std::string avail;
    for (auto id : labels.labels()) avail += (avail.empty() ? "" : ", ") + std::to_string(id);
    throw ValidationError("label " + std::to_string(label) + " not present; available labels: [" + avail + "]");
}

} // namespace detail

inline constexpr double kMm3PerMl = 1000.0;

/// Binary mask (0/1) of one label.
inline ScalarVolume label_mask(const LabelMap& labels, LabelId label) {
    ScalarVolume m(labels.grid());
    for (std::size_t n = 0; n < labels.data().size(); ++n) m[n] = labels[n] == label ? 1.0 : 0.0;
    return m;
}

/// Binary mask of every non-background voxel.
inline ScalarVolume foreground_mask(const LabelMap& labels) {
    ScalarVolume m(labels.grid());
    for (std::size_t n = 0; n < labels.data().size(); ++n) m[n] = labels[n] != 0 ? 1.0 : 0.0;
    return m;
}

/// Deformation-derived volume of a label: sum of J over the label times dV, in mL.
inline double baseline_volume(const ScalarVolume& jac, const LabelMap& labels, LabelId label) {
    if (!(jac.grid() == labels.grid())) throw ValidationError("baseline_volume: Jacobian and label grids differ");
    detail::require_label(labels, label);
    double sum = 0.0;
    for (std::size_t n = 0; n < labels.data().size(); ++n)
        if (labels[n] == label) sum += jac[n];
    return sum * jac.grid().voxel_volume() / kMm3PerMl;
}

/// Voxel count of a label times dV, in mL.
inline double mask_volume(const LabelMap& labels, LabelId label) {
    detail::require_label(labels, label);
    const auto count = std::count(labels.data().begin(), labels.data().end(), label);
    return static_cast<double>(count) * labels.grid().voxel_volume() / kMm3PerMl;
}

/**
 * Splits one label into `shells` concentric shells by equal-width bins of
 * normalized boundary distance: shell = ceil(shells * d / d_max), clamped to
 * [1, shells]. Shell 1 touches the boundary; output is 0 outside the label.
 */
inline LabelMap shell_partition(const LabelMap& labels, LabelId label, int shells) {
    if (shells < 1) throw ValidationError("shell_partition: shell count must be >= 1");
    if (shells > 65535) throw ValidationError("shell_partition: shell count exceeds label id range");
    detail::require_label(labels, label);
    const ScalarVolume dist = distance_to_boundary(label_mask(labels, label));
    double dmax = 0.0;
    for (std::size_t n = 0; n < dist.data().size(); ++n)
        if (labels[n] == label) dmax = std::max(dmax, dist[n]);
    LabelMap out(labels.grid());
    for (std::size_t n = 0; n < dist.data().size(); ++n) {
        if (labels[n] != label) continue;
        const long bin = static_cast<long>(std::ceil(static_cast<double>(shells) * dist[n] / dmax));
        out[n] = static_cast<LabelId>(std::clamp<long>(bin, 1, shells));
    }
    return out;
}

} // namespace convolt
