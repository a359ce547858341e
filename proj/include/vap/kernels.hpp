#pragma once

#include <span>
#include <vector>

#include "vap/tensor.hpp"

namespace vap::kernels {

/// Row block size of the causal attention kernels. Queries in one block see
/// keys up to the block's last position; the diagonal part is masked.
inline constexpr int kAttentionBlock = 128;

/// One key/value stream; only the first `offset + queries` rows are read.
template <typename T>
struct KeyValue {
  const Matrix<T>* keys;
  const Matrix<T>* values;
};

/// Softmax probabilities saved by the forward pass, one matrix per
/// (head, stream, row block): rows are the block's queries, columns the visible keys.
template <typename T>
struct AttentionTape {
  int heads = 0;
  int streams = 0;
  int blocks = 0;
  std::vector<Matrix<T>> probs;

  Matrix<T>& at(int head, int stream, int block) { return probs[(head * streams + stream) * blocks + block]; }
  const Matrix<T>& at(int head, int stream, int block) const {
    return probs[(head * streams + stream) * blocks + block];
  }
};

/// Multi-head causal attention. Query row i sits at absolute position
/// `offset + i` and attends to keys 0..offset+i of every stream; a single
/// softmax spans all streams. Per-stream partial sums are combined with one
/// addition, so swapping two streams leaves the result bit-identical.
template <typename T>
void causal_attention(const Matrix<T>& queries, std::span<const KeyValue<T>> streams, int heads, int offset,
                      Matrix<T>& out, AttentionTape<T>* tape, Exec exec = Exec::parallel);

/// Gradients of causal_attention (requires offset == 0 and the forward tape).
/// dq is overwritten; dkeys/dvalues are accumulated into.
template <typename T>
void causal_attention_backward(const Matrix<T>& queries, std::span<const KeyValue<T>> streams, int heads,
                               const Matrix<T>& out, const Matrix<T>& dout, const AttentionTape<T>& tape,
                               Matrix<T>& dq, std::span<Matrix<T>* const> dkeys, std::span<Matrix<T>* const> dvalues,
                               Exec exec = Exec::parallel);

}  // namespace vap::kernels

namespace vap::reference {

/// Straightforward serial evaluation of kernels::causal_attention in double
/// precision: explicit loops over heads, queries, streams and keys.
Matrix<double> causal_attention(const Matrix<double>& queries, const std::vector<Matrix<double>>& keys,
                                const std::vector<Matrix<double>>& values, int heads, int offset);

/// Log-mel frame computed with a direct DFT in double precision.
std::vector<double> log_mel_frame(std::span<const float> window_samples, int mel_bins, int sample_rate,
                                  double log_floor);

}  // namespace vap::reference
