// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0
//
// Computation graph of a decoder-only transformer: attention heads and MLPs
// are nodes, and every earlier output that reaches a later read point through
// the residual stream is an edge. Attention heads read through three separate
// channels (query, key, value), so a source feeding a head yields three edges.

#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "kcircuits/model_config.hpp"

namespace kc {

enum class NodeKind : std::uint8_t { Input, Head, Mlp, Logits };
enum class Channel : std::uint8_t { Q, K, V, In };

struct NodeId {
  NodeKind kind = NodeKind::Input;
  std::uint32_t layer = 0;
  std::uint32_t head = 0;

  static NodeId input() { return {NodeKind::Input, 0, 0}; }
  static NodeId attn_head(std::uint32_t layer, std::uint32_t head) { return {NodeKind::Head, layer, head}; }
  static NodeId mlp(std::uint32_t layer) { return {NodeKind::Mlp, layer, 0}; }
  static NodeId logits() { return {NodeKind::Logits, 0, 0}; }

  bool operator==(const NodeId&) const = default;
};

struct EdgeId {
  NodeId source;
  NodeId destination;
  Channel channel = Channel::In;

  bool operator==(const EdgeId&) const = default;
};

/// Sentinels returned by layer_of for the two layerless nodes.
inline constexpr int kInputLayer = -1;
inline constexpr int kLogitsLayer = -2;

int layer_of(const NodeId& node);

std::string node_name(const NodeId& node);   // input, a3.h0, m2, logits
std::string channel_name(Channel channel);   // q, k, v, in
std::optional<NodeId> parse_node(std::string_view text);
std::optional<Channel> parse_channel(std::string_view text);
std::string edge_name(const EdgeId& edge);   // "a0.h1->a2.h0<q>"

/// A destination read point: a node together with the channel it reads from.
struct Slot {
  NodeId node;
  Channel channel = Channel::In;
};

/// Dense enumeration of nodes, read slots and edges for one ModelConfig.
///
/// Node order: Input, then per layer its heads followed by its MLP, then
/// Logits. Slot order: per layer the (head, channel) triples then the MLP
/// input, then the logits input. Edges are ordered by source node then slot,
/// which sorts them by source layer, source kind, destination layer,
/// destination kind and channel.
class CompGraph {
 public:
  explicit CompGraph(const ModelConfig& config);

  std::size_t n_layers() const { return n_layers_; }
  std::size_t n_heads() const { return n_heads_; }

  std::size_t node_count() const { return nodes_.size(); }
  std::size_t slot_count() const { return slots_.size(); }
  std::size_t edge_count() const { return edge_src_.size(); }

  const std::vector<NodeId>& nodes() const { return nodes_; }
  const std::vector<Slot>& slots() const { return slots_; }

  std::size_t node_index(const NodeId& node) const;
  std::size_t input_node() const { return 0; }
  std::size_t head_node(std::size_t layer, std::size_t head) const { return 1 + layer * (n_heads_ + 1) + head; }
  std::size_t mlp_node(std::size_t layer) const { return 1 + layer * (n_heads_ + 1) + n_heads_; }
  std::size_t logits_node() const { return nodes_.size() - 1; }

  std::size_t head_slot(std::size_t layer, std::size_t head, Channel c) const {
    return layer * (3 * n_heads_ + 1) + 3 * head + static_cast<std::size_t>(c);
  }
  std::size_t mlp_slot(std::size_t layer) const { return layer * (3 * n_heads_ + 1) + 3 * n_heads_; }
  std::size_t logits_slot() const { return slots_.size() - 1; }
  std::size_t slot_node(std::size_t slot) const { return slot_node_[slot]; }

  std::size_t edge_source(std::size_t edge) const { return edge_src_[edge]; }
  std::size_t edge_slot(std::size_t edge) const { return edge_dst_[edge]; }
  EdgeId edge(std::size_t edge) const;
  /// Index of the edge, or nullopt when the pair is not connected.
  std::optional<std::size_t> find_edge(std::size_t source_node, std::size_t slot) const;
  /// Index of `edge`; throws std::invalid_argument naming the edge when absent.
  std::size_t edge_index(const EdgeId& edge) const;

  /// Edge indices entering `slot`, in canonical order.
  const std::vector<std::size_t>& incoming(std::size_t slot) const { return incoming_[slot]; }

  bool same_shape(const ModelConfig& config) const {
    return config.n_layers == n_layers_ && config.n_heads == n_heads_;
  }

  /// Node list then edge list in canonical order.
  void write(std::ostream& os) const;

 private:
  std::size_t n_layers_;
  std::size_t n_heads_;
  std::vector<NodeId> nodes_;
  std::vector<Slot> slots_;
  std::vector<std::size_t> slot_node_;
  std::vector<std::uint32_t> edge_src_;
  std::vector<std::uint32_t> edge_dst_;
  std::vector<std::int32_t> lookup_;  // node_count x slot_count, -1 when absent
  std::vector<std::vector<std::size_t>> incoming_;
};

CompGraph build_graph(const ModelConfig& config);

/// Node count L*(H+1) + 2.
std::size_t expected_node_count(std::size_t n_layers, std::size_t n_heads);
/// Closed-form edge count, independent of the enumeration.
std::size_t expected_edge_count(std::size_t n_layers, std::size_t n_heads);

}  // namespace kc
