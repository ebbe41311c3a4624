#pragma once

// Brute-force partition oracle for voxel grouping: union-find over exact
// per-axis cell equality, independent of the hash-map implementation.

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <vector>

namespace fdtest {

inline std::vector<std::vector<int>> brute_force_groups(
    const std::vector<std::array<float, 3>>& pos, float eps) {
    const int n = static_cast<int>(pos.size());
    std::vector<int> parent(static_cast<std::size_t>(n));
    std::iota(parent.begin(), parent.end(), 0);
    std::function<int(int)> find = [&](int x) {
        while (parent[static_cast<std::size_t>(x)] != x) x = parent[static_cast<std::size_t>(x)];
        return x;
    };
    auto cell = [&](int i, int axis) {
        return static_cast<long long>(
            std::floor(pos[static_cast<std::size_t>(i)][static_cast<std::size_t>(axis)] / eps));
    };
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (cell(i, 0) == cell(j, 0) && cell(i, 1) == cell(j, 1) && cell(i, 2) == cell(j, 2))
                parent[static_cast<std::size_t>(find(j))] = find(i);
    std::map<int, std::vector<int>> by_root;
    for (int i = 0; i < n; ++i) by_root[find(i)].push_back(i);
    std::vector<std::vector<int>> groups;
    for (auto& [root, members] : by_root) groups.push_back(members);
    return groups;
}

inline std::set<std::vector<int>> group_set(const std::vector<std::vector<int>>& gs) {
    std::set<std::vector<int>> out;
    for (auto g : gs) {
        std::sort(g.begin(), g.end());
        out.insert(g);
    }
    return out;
}

}  // namespace fdtest
