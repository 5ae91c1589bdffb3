#pragma once

#include <cmath>
#include <vector>

#include "campfire/error.hpp"
#include "campfire/nn.hpp"

namespace campfire {

struct GridPos {
    int row = 0;
    int col = 0;
    bool operator==(const GridPos&) const = default;
};

inline std::vector<GridPos> grid_positions(int side) {
    std::vector<GridPos> out;
    out.reserve(static_cast<std::size_t>(side) * side);
    for (int r = 0; r < side; ++r)
        for (int c = 0; c < side; ++c) out.push_back({r, c});
    return out;
}

/// 2-D sine/cosine table, one row per grid position (row-major). The first
/// half of the columns encodes the row index and the second half the column
/// index; inside each half sin and cos alternate, so (0, 0) reads 0,1,0,1,...
template <class S>
nn::Mat<S> sinusoidal_positions(int grid_side, int dim) {
    if (dim % 4 != 0) fail(ErrorCode::InvalidConfig, "sinusoidal dimension must be divisible by 4");
    const int quarter = dim / 4;
    nn::Mat<S> table(grid_side * grid_side, dim);
    for (int r = 0; r < grid_side; ++r) {
        for (int c = 0; c < grid_side; ++c) {
            auto row = table.row(r * grid_side + c);
            for (int i = 0; i < quarter; ++i) {
                const double omega = std::pow(10000.0, -static_cast<double>(i) / quarter);
                row(2 * i) = static_cast<S>(std::sin(r * omega));
                row(2 * i + 1) = static_cast<S>(std::cos(r * omega));
                row(dim / 2 + 2 * i) = static_cast<S>(std::sin(c * omega));
                row(dim / 2 + 2 * i + 1) = static_cast<S>(std::cos(c * omega));
            }
        }
    }
    return table;
}

/// Axial 2-D rotary table for one token sequence. Rotation pair j covers
/// head dims (2j, 2j+1); pairs in the first half of the head rotate with the
/// token's row, pairs in the second half with its column.
template <class S>
struct RopeTable {
    nn::Mat<S> cos;  // tokens x head_dim/2
    nn::Mat<S> sin;
    int head_dim = 0;

    RopeTable() = default;

    RopeTable(const std::vector<GridPos>& pos, int head_dim_, double base = 100.0) : head_dim(head_dim_) {
        if (head_dim % 4 != 0) fail(ErrorCode::InvalidConfig, "RoPE head dimension must be divisible by 4");
        const int pairs = head_dim / 2, quarter = head_dim / 4;
        cos.resize(static_cast<Eigen::Index>(pos.size()), pairs);
        sin.resize(static_cast<Eigen::Index>(pos.size()), pairs);
        for (std::size_t t = 0; t < pos.size(); ++t) {
            for (int j = 0; j < pairs; ++j) {
                const int f = j < quarter ? j : j - quarter;
                const double omega = std::pow(base, -static_cast<double>(f) / quarter);
                const double angle = (j < quarter ? pos[t].row : pos[t].col) * omega;
                cos(static_cast<Eigen::Index>(t), j) = static_cast<S>(std::cos(angle));
                sin(static_cast<Eigen::Index>(t), j) = static_cast<S>(std::sin(angle));
            }
        }
    }
};

/// Rotates every head of `x` (tokens x heads*head_dim) in place. The inverse
/// rotation is the transpose, which is what the backward pass needs.
template <class S>
void apply_rope(nn::Mat<S>& x, const RopeTable<S>& rope, bool inverse = false) {
    const int dh = rope.head_dim;
    if (x.rows() != rope.cos.rows() || x.cols() % dh != 0) fail(ErrorCode::ShapeMismatch, "RoPE table does not match input");
    const int heads = static_cast<int>(x.cols()) / dh;
    const S sign = inverse ? S(-1) : S(1);
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        for (int h = 0; h < heads; ++h) {
            S* v = x.data() + t * x.cols() + h * dh;
            for (int j = 0; j < dh / 2; ++j) {
                const S c = rope.cos(t, j), s = sign * rope.sin(t, j);
                const S a = v[2 * j], b = v[2 * j + 1];
                v[2 * j] = a * c - b * s;
                v[2 * j + 1] = a * s + b * c;
            }
        }
    }
}

}  // namespace campfire
