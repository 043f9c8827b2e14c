#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "safe/nn/autograd.hpp"

// Differentiable operations. Token/feature matrices are {rows, cols};
// spatial maps are {channels, height, width}; images are {height, width, channels}.
namespace safe::nn {

Var matmul(Tape& t, Var a, Var b);
/// x{n,in} * w{in,out} + b{out}.
Var linear(Tape& t, Var x, Var w, Var b);
Var add(Tape& t, Var a, Var b);
Var scale(Tape& t, Var x, double factor);
Var gelu(Tape& t, Var x);
Var relu(Tape& t, Var x);
/// Row-wise layer normalisation with affine gamma/beta {d}.
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-6);
/// Multi-head self attention from packed qkv {n, 3d}; returns {n, d}.
Var attention(Tape& t, Var qkv, std::size_t heads);
/// {n,d} -> {1,d}.
Var mean_rows(Tape& t, Var x);
Var gather_rows(Tape& t, Var x, std::vector<std::size_t> rows);
/// Image {h,w,c} -> {(h/s)(w/s), s*s*c}, rows in raster order of token cells.
Var patchify(Tape& t, Var image, std::size_t token);

/// 1x1 convolution: x{C,H,W}, w{Co,C}, b{Co}.
Var conv1x1(Tape& t, Var x, Var w, Var b);
/// 3x3 convolution with zero padding 1: w{Co, C*9}, b{Co}.
Var conv3x3(Tape& t, Var x, Var w, Var b);
/// Stride-2 2x2 transposed convolution: w{C, Co*4}, b{Co}; {C,H,W} -> {Co,2H,2W}.
Var conv_transpose2x2(Tape& t, Var x, Var w, Var b);
/// Per-location softmax over scale scores {1,H,W} weighting maps {C,H,W}.
Var softmax_mix(Tape& t, std::span<const Var> scores, std::span<const Var> maps);
/// Bilinear resize (half-pixel centres) of {C,h,w} to {C,H,W}.
Var bilinear_resize(Tape& t, Var x, std::size_t height, std::size_t width);
/// Mean per-pixel cross-entropy of logits {K,H,W} against labels (H*W).
Var pixel_cross_entropy(Tape& t, Var logits, std::span<const int> labels);

// Plain (non-recorded) helpers shared with inference code.
double gelu_value(double x);
Tensor bilinear_resize_value(const Tensor& x, std::size_t height, std::size_t width);

}  // namespace safe::nn
