// Copyright 2026 The kcircuits Authors
// SPDX-License-Identifier: Apache-2.0

#include "kcircuits/graph.hpp"

#include <charconv>
#include <ostream>
#include <stdexcept>

namespace kc {
namespace {

bool feeds(const NodeId& src, const NodeId& dst) {
  switch (src.kind) {
    case NodeKind::Input:
      return dst.kind != NodeKind::Input;
    case NodeKind::Head:
      if (dst.kind == NodeKind::Head) return dst.layer > src.layer;
      if (dst.kind == NodeKind::Mlp) return dst.layer >= src.layer;
      return dst.kind == NodeKind::Logits;
    case NodeKind::Mlp:
      if (dst.kind == NodeKind::Head || dst.kind == NodeKind::Mlp) return dst.layer > src.layer;
      return dst.kind == NodeKind::Logits;
    case NodeKind::Logits:
      return false;
  }
  return false;
}

std::optional<std::uint32_t> parse_u32(std::string_view s) {
  std::uint32_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

}  // namespace

int layer_of(const NodeId& node) {
  switch (node.kind) {
    case NodeKind::Input:
      return kInputLayer;
    case NodeKind::Logits:
      return kLogitsLayer;
    default:
      return static_cast<int>(node.layer);
  }
}

std::string node_name(const NodeId& node) {
  switch (node.kind) {
    case NodeKind::Input:
      return "input";
    case NodeKind::Head:
      return "a" + std::to_string(node.layer) + ".h" + std::to_string(node.head);
    case NodeKind::Mlp:
      return "m" + std::to_string(node.layer);
    case NodeKind::Logits:
      return "logits";
  }
  return "?";
}

std::string channel_name(Channel channel) {
  switch (channel) {
    case Channel::Q:
      return "q";
    case Channel::K:
      return "k";
    case Channel::V:
      return "v";
    case Channel::In:
      return "in";
  }
  return "?";
}

std::optional<NodeId> parse_node(std::string_view text) {
  if (text == "input") return NodeId::input();
  if (text == "logits") return NodeId::logits();
  if (text.size() > 1 && text[0] == 'm') {
    if (auto l = parse_u32(text.substr(1))) return NodeId::mlp(*l);
    return std::nullopt;
  }
  if (text.size() > 1 && text[0] == 'a') {
    const auto dot = text.find(".h");
    if (dot == std::string_view::npos) return std::nullopt;
    auto l = parse_u32(text.substr(1, dot - 1));
    auto h = parse_u32(text.substr(dot + 2));
    if (l && h) return NodeId::attn_head(*l, *h);
  }
  return std::nullopt;
}

std::optional<Channel> parse_channel(std::string_view text) {
  if (text == "q") return Channel::Q;
  if (text == "k") return Channel::K;
  if (text == "v") return Channel::V;
  if (text == "in") return Channel::In;
  return std::nullopt;
}

std::string edge_name(const EdgeId& edge) {
  return node_name(edge.source) + "->" + node_name(edge.destination) + "<" +
         channel_name(edge.channel) + ">";
}

CompGraph::CompGraph(const ModelConfig& config) : n_layers_(config.n_layers), n_heads_(config.n_heads) {
  if (n_layers_ == 0 || n_heads_ == 0) throw ConfigError("graph: n_layers and n_heads must be positive");
  const auto L = static_cast<std::uint32_t>(n_layers_);
  const auto H = static_cast<std::uint32_t>(n_heads_);

  nodes_.push_back(NodeId::input());
  for (std::uint32_t l = 0; l < L; ++l) {
    for (std::uint32_t h = 0; h < H; ++h) nodes_.push_back(NodeId::attn_head(l, h));
    nodes_.push_back(NodeId::mlp(l));
  }
  nodes_.push_back(NodeId::logits());

  for (std::uint32_t l = 0; l < L; ++l) {
    for (std::uint32_t h = 0; h < H; ++h) {
      for (Channel c : {Channel::Q, Channel::K, Channel::V}) {
        slots_.push_back({NodeId::attn_head(l, h), c});
        slot_node_.push_back(head_node(l, h));
      }
    }
    slots_.push_back({NodeId::mlp(l), Channel::In});
    slot_node_.push_back(mlp_node(l));
  }
  slots_.push_back({NodeId::logits(), Channel::In});
  slot_node_.push_back(nodes_.size() - 1);

  lookup_.assign(nodes_.size() * slots_.size(), -1);
  incoming_.resize(slots_.size());
  for (std::size_t u = 0; u < nodes_.size(); ++u) {
    for (std::size_t s = 0; s < slots_.size(); ++s) {
      if (!feeds(nodes_[u], slots_[s].node)) continue;
      lookup_[u * slots_.size() + s] = static_cast<std::int32_t>(edge_src_.size());
      incoming_[s].push_back(edge_src_.size());
      edge_src_.push_back(static_cast<std::uint32_t>(u));
      edge_dst_.push_back(static_cast<std::uint32_t>(s));
    }
  }
}

std::size_t CompGraph::node_index(const NodeId& node) const {
  switch (node.kind) {
    case NodeKind::Input:
      return input_node();
    case NodeKind::Logits:
      return logits_node();
    case NodeKind::Head:
      if (node.layer >= n_layers_ || node.head >= n_heads_) break;
      return head_node(node.layer, node.head);
    case NodeKind::Mlp:
      if (node.layer >= n_layers_) break;
      return mlp_node(node.layer);
  }
  throw std::invalid_argument("graph: no such node " + node_name(node));
}

EdgeId CompGraph::edge(std::size_t e) const {
  const Slot& s = slots_[edge_dst_[e]];
  return {nodes_[edge_src_[e]], s.node, s.channel};
}

std::optional<std::size_t> CompGraph::find_edge(std::size_t source_node, std::size_t slot) const {
  if (source_node >= nodes_.size() || slot >= slots_.size()) return std::nullopt;
  const auto v = lookup_[source_node * slots_.size() + slot];
  if (v < 0) return std::nullopt;
  return static_cast<std::size_t>(v);
}

std::size_t CompGraph::edge_index(const EdgeId& edge) const {
  const auto fail = [&] { throw std::invalid_argument("graph: no such edge " + edge_name(edge)); };
  std::size_t src = 0, dst = 0;
  try {
    src = node_index(edge.source);
    dst = node_index(edge.destination);
  } catch (const std::invalid_argument&) {
    fail();
  }
  std::size_t slot = 0;
  switch (edge.destination.kind) {
    case NodeKind::Head:
      if (edge.channel == Channel::In) fail();
      slot = head_slot(edge.destination.layer, edge.destination.head, edge.channel);
      break;
    case NodeKind::Mlp:
      if (edge.channel != Channel::In) fail();
      slot = mlp_slot(edge.destination.layer);
      break;
    case NodeKind::Logits:
      if (edge.channel != Channel::In) fail();
      slot = logits_slot();
      break;
    case NodeKind::Input:
      fail();
  }
  (void)dst;
  auto e = find_edge(src, slot);
  if (!e) fail();
  return *e;
}

void CompGraph::write(std::ostream& os) const {
  os << "# nodes " << nodes_.size() << '\n';
  for (const NodeId& n : nodes_) os << node_name(n) << '\n';
  os << "# edges " << edge_count() << '\n';
  for (std::size_t e = 0; e < edge_count(); ++e) {
    const EdgeId id = edge(e);
    os << node_name(id.source) << '\t' << node_name(id.destination) << '\t' << channel_name(id.channel) << '\n';
  }
}

CompGraph build_graph(const ModelConfig& config) { return CompGraph(config); }

std::size_t expected_node_count(std::size_t n_layers, std::size_t n_heads) {
  return n_layers * (n_heads + 1) + 2;
}

std::size_t expected_edge_count(std::size_t n_layers, std::size_t n_heads) {
  const std::size_t L = n_layers, H = n_heads;
  const std::size_t pairs = L * (L - 1) / 2;  // (l, l') with l < l'
  const std::size_t from_input = 3 * H * L + L + 1;
  const std::size_t from_heads = H * (3 * H * pairs + L * (L + 1) / 2 + L);
  const std::size_t from_mlps = (3 * H + 1) * pairs + L;
  return from_input + from_heads + from_mlps;
}

}  // namespace kc
